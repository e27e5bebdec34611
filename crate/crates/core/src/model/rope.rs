//! Rotary position encoding.

use std::sync::Arc;

use super::ModelError;
use crate::numerics::{PairRotation, Tensor};
use crate::scalar::Scalar;

/// `θ_i = 10000^(-2(i-1)/d_head)` for `i = 1..=d_head/2`.
pub fn rope_angles(d_head: usize) -> Result<Vec<f64>, ModelError> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(ModelError::Config(format!("rotary encoding needs an even head width, got {d_head}")));
    }
    Ok((0..d_head / 2).map(|m| 10000f64.powf(-2.0 * m as f64 / d_head as f64)).collect())
}

/// Angles plus precomputed cos/sin for positions `0..positions`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub angles: Vec<f64>,
    pub rotation: Arc<PairRotation<T>>,
    /// When false the forward pass skips rotation entirely.
    pub enabled: bool,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(d_head: usize, positions: usize) -> Result<Self, ModelError> {
        Ok(Self::from_angles(rope_angles(d_head)?, positions))
    }

    pub fn from_angles(angles: Vec<f64>, positions: usize) -> Self {
        let half = angles.len();
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for &theta in &angles {
                let (s, c) = (p as f64 * theta).sin_cos();
                cos.push(T::lit(c));
                sin.push(T::lit(s));
            }
        }
        let rotation = Arc::new(PairRotation { positions, half, cos, sin });
        Self { angles, rotation, enabled: true }
    }

    pub fn disabled(d_head: usize) -> Self {
        let mut t = Self::from_angles(vec![0.0; d_head / 2], 0);
        t.enabled = false;
        t
    }
}

/// Rotates coordinate pair `(2m, 2m+1)` of row `r` by `positions[r]·angles[m]`.
pub fn rope_rotate<T: Scalar>(x: &Tensor<T>, positions: &[usize], angles: &[f64]) -> Result<Tensor<T>, ModelError> {
    let s = x.shape();
    if s.len() != 2 || s[0] != positions.len() {
        return Err(ModelError::Shape(format!("rope_rotate expects {} rows, got shape {s:?}", positions.len())));
    }
    if s[1] % 2 != 0 || s[1] != 2 * angles.len() {
        return Err(ModelError::Config(format!("head width {} does not match {} rotation angles", s[1], angles.len())));
    }
    let d = s[1];
    let mut out = x.data().to_vec();
    for (row, &p) in out.chunks_mut(d).zip(positions) {
        for (m, &theta) in angles.iter().enumerate() {
            let (sn, cs) = (p as f64 * theta).sin_cos();
            let (c, sn) = (T::lit(cs), T::lit(sn));
            let (a, b) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = a * c - b * sn;
            row[2 * m + 1] = a * sn + b * c;
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_schedule() {
        let a = rope_angles(4).unwrap();
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 0.01).abs() < 1e-15);
        assert!(rope_angles(3).is_err());
        let a = rope_angles(16).unwrap();
        assert!(a.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn position_zero_is_identity_and_pair_two_turns_by_point_zero_two() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 + 1.0).collect()).unwrap();
        let angles = rope_angles(4).unwrap();
        let y = rope_rotate(&x, &[0, 1, 2], &angles).unwrap();
        assert_eq!(y.row(0), x.row(0));
        let (a, b) = (x.get(&[2, 2]), x.get(&[2, 3]));
        let (s, c) = 0.02f64.sin_cos();
        assert!((y.get(&[2, 2]) - (a * c - b * s)).abs() < 1e-15);
        assert!((y.get(&[2, 3]) - (a * s + b * c)).abs() < 1e-15);
    }

    #[test]
    fn graph_table_matches_eager_rotation() {
        let table = RopeTable::<f64>::new(4, 5).unwrap();
        let x = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.37).sin());
        let eager = rope_rotate(&x, &[0, 1, 2, 3, 4], &table.angles).unwrap();
        let mut g = crate::numerics::Graph::new();
        let n = g.constant(x);
        let r = g.rotate_pairs(n, table.rotation.clone()).unwrap();
        assert!(g.value(r).max_abs_diff(&eager).unwrap() < 1e-14);
    }
}
