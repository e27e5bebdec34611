//! Central finite differences as an independent oracle for [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NumericsError;
use crate::scalar::Scalar;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T, NumericsError>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>, NumericsError> {
    if !(h > T::zero()) {
        return Err(NumericsError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        out.data_mut()[i] = central_difference(&f, &mut probe, i, h)?;
    }
    Ok(out)
}

fn central_difference<T: Scalar>(
    f: &impl Fn(&Tensor<T>) -> Result<T, NumericsError>,
    probe: &mut Tensor<T>,
    i: usize,
    h: T,
) -> Result<T, NumericsError> {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let plus = f(probe)?;
    probe.data_mut()[i] = orig - h;
    let minus = f(probe)?;
    probe.data_mut()[i] = orig;
    if !num_traits::Float::is_finite(plus) || !num_traits::Float::is_finite(minus) {
        return Err(NumericsError::NonFinite { coordinate: i });
    }
    Ok((plus - minus) / (h + h))
}

/// Outcome of comparing analytic against numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CoordinateCheck {
    pub input: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.coordinates.iter().filter(|c| !c.passed)
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.max_absolute_error = self.max_absolute_error.max(other.max_absolute_error);
        self.coordinates.extend(other.coordinates);
    }
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares two gradient tensors coordinate by coordinate.
pub fn compare_gradients<T: Scalar>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError> {
    if analytic.shape() != numeric.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "compare_gradients",
            left: analytic.shape().to_vec(),
            right: numeric.shape().to_vec(),
        });
    }
    let coords: Vec<usize> = (0..analytic.len()).collect();
    Ok(compare_at(0, analytic, numeric.data(), &coords, tolerance))
}

fn compare_at<T: Scalar>(
    input: usize,
    analytic: &Tensor<T>,
    numeric: &[T],
    coords: &[usize],
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, coordinates: Vec::new(), tolerance };
    for (&c, &n) in coords.iter().zip(numeric) {
        let a = analytic.data()[c].as_f64();
        let n = n.as_f64();
        let err = relative_error(a, n);
        report.max_relative_error = report.max_relative_error.max(err);
        report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
        report.coordinates.push(CoordinateCheck {
            input,
            coordinate: c,
            analytic: a,
            numeric: n,
            relative_error: err,
            passed: err < tolerance,
        });
    }
    report
}

/// Options for [`gradient_check_many`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input tensor.
    pub max_coordinates_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_coordinates_per_input: None, seed: 0 }
    }
}

/// Checks `backward()` of a scalar-valued graph builder against central
/// finite differences with respect to each of `inputs`.
///
/// `build` receives a fresh graph and one trainable leaf per input and must
/// return the scalar root.
pub fn gradient_check_many<T, F>(
    build: F,
    inputs: &[Tensor<T>],
    options: GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let eval = |values: &[Tensor<T>]| -> Result<(Graph<T>, Vec<NodeId>, NodeId), NumericsError> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let root = build(&mut g, &leaves)?;
        Ok((g, leaves, root))
    };
    let (graph, leaves, root) = eval(inputs)?;
    let grads = graph.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let h = T::lit(options.step);
    let mut report =
        GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, coordinates: Vec::new(), tolerance: options.tolerance };
    let mut values = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        let n = values[k].len();
        let coords = select_coordinates(n, options.max_coordinates_per_input, &mut rng);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = values[k].data()[c];
            values[k].data_mut()[c] = orig + h;
            let plus = root_value(&eval(&values)?)?;
            values[k].data_mut()[c] = orig - h;
            let minus = root_value(&eval(&values)?)?;
            values[k].data_mut()[c] = orig;
            if !num_traits::Float::is_finite(plus) || !num_traits::Float::is_finite(minus) {
                return Err(NumericsError::NonFinite { coordinate: c });
            }
            numeric.push((plus - minus) / (h + h));
        }
        report.merge(compare_at(k, &analytic, &numeric, &coords, options.tolerance));
    }
    Ok(report)
}

fn select_coordinates(n: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(limit) if limit < n => {
            let mut c = sample(rng, n, limit).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..n).collect(),
    }
}

/// Quadruple-precision scalar used to evaluate the finite-difference oracle.
pub type Extended = f128::f128;

/// A scalar objective that can be recorded at any precision.
pub trait Objective: Sync {
    /// Records the objective on `g` given one leaf per input and returns the scalar root.
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> Result<NodeId, NumericsError>;
}

/// Like [`gradient_check_many`], but the central differences are evaluated in
/// quadruple precision so that the oracle's own rounding error stays far
/// below the tolerance even for very small gradients. Coordinates are
/// evaluated in parallel.
pub fn gradient_check_extended<O: Objective>(
    objective: &O,
    inputs: &[Tensor<f64>],
    options: GradCheckOptions,
) -> Result<GradCheckReport, NumericsError> {
    let mut g = Graph::<f64>::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let root = objective.build(&mut g, &leaves)?;
    let grads = g.backward(root)?;

    let wide: Vec<Tensor<Extended>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |values: &[Tensor<Extended>]| -> Result<Extended, NumericsError> {
        let mut g = Graph::<Extended>::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| g.constant(v.clone())).collect();
        let root = objective.build(&mut g, &leaves)?;
        g.value(root).item()
    };
    let h = Extended::lit(options.step);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report =
        GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, coordinates: Vec::new(), tolerance: options.tolerance };
    for (k, leaf) in leaves.iter().enumerate() {
        let coords = select_coordinates(inputs[k].len(), options.max_coordinates_per_input, &mut rng);
        let numeric = coords
            .par_iter()
            .map(|&c| {
                let mut values = wide.clone();
                let orig = values[k].data()[c];
                values[k].data_mut()[c] = orig + h;
                let plus = eval(&values)?;
                values[k].data_mut()[c] = orig - h;
                let minus = eval(&values)?;
                if !num_traits::Float::is_finite(plus) || !num_traits::Float::is_finite(minus) {
                    return Err(NumericsError::NonFinite { coordinate: c });
                }
                Ok(((plus - minus) / (h + h)).as_f64())
            })
            .collect::<Result<Vec<f64>, _>>()?;
        report.merge(compare_at(k, &grads.get(*leaf), &numeric, &coords, options.tolerance));
    }
    Ok(report)
}

fn root_value<T: Scalar>(r: &(Graph<T>, Vec<NodeId>, NodeId)) -> Result<T, NumericsError> {
    r.0.value(r.2).item()
}

/// Single-input convenience wrapper around [`gradient_check_many`].
pub fn gradient_check<T, F>(f: F, x: &Tensor<T>, relative_tolerance: f64) -> Result<GradCheckReport, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId, NumericsError>,
{
    if !(relative_tolerance > 0.0) {
        return Err(NumericsError::InvalidArgument("tolerance must be positive".into()));
    }
    gradient_check_many(
        |g, leaves| f(g, leaves[0]),
        std::slice::from_ref(x),
        GradCheckOptions { tolerance: relative_tolerance, ..GradCheckOptions::default() },
    )
}
