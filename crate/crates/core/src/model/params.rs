//! Trainable parameter layout.
//!
//! [`ParameterSet`] is generic over its leaf type so that the same structure
//! holds concrete tensors ([`ModelParameters`]), graph handles while a forward
//! pass is recorded ([`BoundParameters`]), Adam moments, or gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttentionKind, FeedForward, PatchEmbedding, PositionEncoding, RetformerConfig};
use super::ModelError;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<P> {
    /// One `[d_model, d_head]` projection per head.
    pub query: Vec<P>,
    /// One `[d_model, d_head]` projection per key/value group.
    pub key: Vec<P>,
    pub value: Vec<P>,
    /// `[d_head · n_heads, d_model]`
    pub output: P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeedForwardParams<P> {
    SwiGlu { gate_weight: P, gate_bias: P, value_weight: P, value_bias: P },
    GeluMlp { weight: P, bias: P },
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<P> {
    pub norm1: Option<NormParams<P>>,
    pub attention: Option<AttentionParams<P>>,
    pub norm2: Option<NormParams<P>>,
    pub feedforward: FeedForwardParams<P>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<P> {
    pub hidden1_weight: P,
    pub hidden1_bias: P,
    pub hidden2_weight: P,
    pub hidden2_bias: P,
    pub output_weight: P,
    pub output_bias: P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<P> {
    /// `[d_model, channels, patch, patch]` for the convolutional embedding,
    /// `[patch·patch·channels, d_model]` for the dense one.
    pub patch_kernel: P,
    pub patch_bias: P,
    pub position: Option<P>,
    pub layers: Vec<LayerParams<P>>,
    pub head: HeadParams<P>,
}

pub type ModelParameters<T> = ParameterSet<Tensor<T>>;
pub type BoundParameters = ParameterSet<NodeId>;

impl<P> ParameterSet<P> {
    /// Structure-preserving map; `f` receives a dotted path for each leaf.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ParameterSet<Q>, E> {
        let norm = |n: &Option<NormParams<P>>, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>| {
            n.as_ref()
                .map(|n| {
                    Ok(NormParams { gain: f(&format!("{prefix}.gain"), &n.gain)?, bias: f(&format!("{prefix}.bias"), &n.bias)? })
                })
                .transpose()
        };
        let patch_kernel = f("patch.kernel", &self.patch_kernel)?;
        let patch_bias = f("patch.bias", &self.patch_bias)?;
        let position = self.position.as_ref().map(|p| f("position", p)).transpose()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let norm1 = norm(&l.norm1, &format!("layers.{i}.norm1"), f)?;
            let attention = match &l.attention {
                Some(a) => {
                    let list = |v: &[P], name: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>| {
                        v.iter()
                            .enumerate()
                            .map(|(j, p)| f(&format!("layers.{i}.attention.{name}.{j}"), p))
                            .collect::<Result<Vec<_>, E>>()
                    };
                    Some(AttentionParams {
                        query: list(&a.query, "query", f)?,
                        key: list(&a.key, "key", f)?,
                        value: list(&a.value, "value", f)?,
                        output: f(&format!("layers.{i}.attention.output"), &a.output)?,
                    })
                }
                None => None,
            };
            let norm2 = norm(&l.norm2, &format!("layers.{i}.norm2"), f)?;
            let feedforward = match &l.feedforward {
                FeedForwardParams::SwiGlu { gate_weight, gate_bias, value_weight, value_bias } => {
                    FeedForwardParams::SwiGlu {
                        gate_weight: f(&format!("layers.{i}.swiglu.gate_weight"), gate_weight)?,
                        gate_bias: f(&format!("layers.{i}.swiglu.gate_bias"), gate_bias)?,
                        value_weight: f(&format!("layers.{i}.swiglu.value_weight"), value_weight)?,
                        value_bias: f(&format!("layers.{i}.swiglu.value_bias"), value_bias)?,
                    }
                }
                FeedForwardParams::GeluMlp { weight, bias } => FeedForwardParams::GeluMlp {
                    weight: f(&format!("layers.{i}.mlp.weight"), weight)?,
                    bias: f(&format!("layers.{i}.mlp.bias"), bias)?,
                },
                FeedForwardParams::Identity => FeedForwardParams::Identity,
            };
            layers.push(LayerParams { norm1, attention, norm2, feedforward });
        }
        let h = &self.head;
        Ok(ParameterSet {
            patch_kernel,
            patch_bias,
            position,
            layers,
            head: HeadParams {
                hidden1_weight: f("head.hidden1_weight", &h.hidden1_weight)?,
                hidden1_bias: f("head.hidden1_bias", &h.hidden1_bias)?,
                hidden2_weight: f("head.hidden2_weight", &h.hidden2_weight)?,
                hidden2_bias: f("head.hidden2_bias", &h.hidden2_bias)?,
                output_weight: f("head.output_weight", &h.output_weight)?,
                output_bias: f("head.output_bias", &h.output_bias)?,
            },
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ParameterSet<Q> {
        self.try_map::<Q, std::convert::Infallible>(&mut |n, p| Ok(f(n, p))).unwrap()
    }

    /// Same structure with leaves taken from `values` in traversal order.
    pub fn with_leaves<Q: Clone>(&self, values: &[Q]) -> ParameterSet<Q> {
        let mut it = values.iter();
        self.map(|name, _| it.next().unwrap_or_else(|| panic!("too few leaves, missing {name}")).clone())
    }

    /// Leaves in traversal order, with their dotted paths.
    pub fn named(&self) -> Vec<(String, &P)> {
        let names = self.map(|n, _| n.to_string()).into_leaves();
        names.into_iter().zip(self.leaves()).collect()
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.push(&self.patch_kernel);
        out.push(&self.patch_bias);
        if let Some(p) = &self.position {
            out.push(p);
        }
        for l in &self.layers {
            if let Some(n) = &l.norm1 {
                out.push(&n.gain);
                out.push(&n.bias);
            }
            if let Some(a) = &l.attention {
                out.extend(a.query.iter());
                out.extend(a.key.iter());
                out.extend(a.value.iter());
                out.push(&a.output);
            }
            if let Some(n) = &l.norm2 {
                out.push(&n.gain);
                out.push(&n.bias);
            }
            match &l.feedforward {
                FeedForwardParams::SwiGlu { gate_weight, gate_bias, value_weight, value_bias } => {
                    out.extend([gate_weight, gate_bias, value_weight, value_bias]);
                }
                FeedForwardParams::GeluMlp { weight, bias } => out.extend([weight, bias]),
                FeedForwardParams::Identity => {}
            }
        }
        let h = &self.head;
        out.extend([
            &h.hidden1_weight,
            &h.hidden1_bias,
            &h.hidden2_weight,
            &h.hidden2_bias,
            &h.output_weight,
            &h.output_bias,
        ]);
    }

    /// Mutable leaves in the same order as [`ParameterSet::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = vec![&mut self.patch_kernel, &mut self.patch_bias];
        if let Some(p) = &mut self.position {
            out.push(p);
        }
        for l in &mut self.layers {
            if let Some(n) = &mut l.norm1 {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            if let Some(a) = &mut l.attention {
                out.extend(a.query.iter_mut());
                out.extend(a.key.iter_mut());
                out.extend(a.value.iter_mut());
                out.push(&mut a.output);
            }
            if let Some(n) = &mut l.norm2 {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            match &mut l.feedforward {
                FeedForwardParams::SwiGlu { gate_weight, gate_bias, value_weight, value_bias } => {
                    out.extend([gate_weight, gate_bias, value_weight, value_bias]);
                }
                FeedForwardParams::GeluMlp { weight, bias } => out.extend([weight, bias]),
                FeedForwardParams::Identity => {}
            }
        }
        let h = &mut self.head;
        out.extend([
            &mut h.hidden1_weight,
            &mut h.hidden1_bias,
            &mut h.hidden2_weight,
            &mut h.hidden2_bias,
            &mut h.output_weight,
            &mut h.output_bias,
        ]);
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    pub fn into_leaves(self) -> Vec<P> {
        let ParameterSet { patch_kernel, patch_bias, position, layers, head } = self;
        let mut out = Vec::new();
        out.push(patch_kernel);
        out.push(patch_bias);
        out.extend(position);
        for l in layers {
            if let Some(n) = l.norm1 {
                out.extend([n.gain, n.bias]);
            }
            if let Some(a) = l.attention {
                out.extend(a.query);
                out.extend(a.key);
                out.extend(a.value);
                out.push(a.output);
            }
            if let Some(n) = l.norm2 {
                out.extend([n.gain, n.bias]);
            }
            match l.feedforward {
                FeedForwardParams::SwiGlu { gate_weight, gate_bias, value_weight, value_bias } => {
                    out.extend([gate_weight, gate_bias, value_weight, value_bias]);
                }
                FeedForwardParams::GeluMlp { weight, bias } => out.extend([weight, bias]),
                FeedForwardParams::Identity => {}
            }
        }
        out.extend([
            head.hidden1_weight,
            head.hidden1_bias,
            head.hidden2_weight,
            head.hidden2_bias,
            head.output_weight,
            head.output_bias,
        ]);
        out
    }
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..=limit)))
}

fn norm_params<T: Scalar>(d: usize) -> NormParams<Tensor<T>> {
    NormParams { gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
}

impl<T: Scalar> ModelParameters<T> {
    /// Glorot-uniform weights, zero biases, unit norm gains.
    pub fn init(config: &RetformerConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let e = config.d_model;
        let (p, c) = (config.patch_size, config.channels);
        let patch_kernel = match config.ablation.patch_embedding {
            PatchEmbedding::Conv => glorot(&[e, c, p, p], c * p * p, e * p * p, rng),
            PatchEmbedding::Mlp => glorot(&[p * p * c, e], p * p * c, e, rng),
        };
        let position = match config.ablation.position_encoding {
            PositionEncoding::Learned => Some(glorot(&[config.n_patches(), e], config.n_patches(), e, rng)),
            PositionEncoding::Rope => None,
        };
        let da = config.d_head;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let norm1 = config.ablation.norm1_enabled.then(|| norm_params(e));
            let attention = match config.ablation.attention {
                AttentionKind::None => None,
                _ => {
                    let query = (0..config.n_heads).map(|_| glorot(&[e, da], e, da, rng)).collect();
                    let key = (0..config.n_kv()).map(|_| glorot(&[e, da], e, da, rng)).collect();
                    let value = (0..config.n_kv()).map(|_| glorot(&[e, da], e, da, rng)).collect();
                    let output = glorot(&[da * config.n_heads, e], da * config.n_heads, e, rng);
                    Some(AttentionParams { query, key, value, output })
                }
            };
            let norm2 = config.ablation.norm2_enabled.then(|| norm_params(e));
            let feedforward = match config.ablation.feedforward {
                FeedForward::SwiGlu => FeedForwardParams::SwiGlu {
                    gate_weight: glorot(&[e, e], e, e, rng),
                    gate_bias: Tensor::zeros(&[e]),
                    value_weight: glorot(&[e, e], e, e, rng),
                    value_bias: Tensor::zeros(&[e]),
                },
                FeedForward::GeluMlp => {
                    FeedForwardParams::GeluMlp { weight: glorot(&[e, e], e, e, rng), bias: Tensor::zeros(&[e]) }
                }
                FeedForward::None => FeedForwardParams::Identity,
            };
            layers.push(LayerParams { norm1, attention, norm2, feedforward });
        }
        let (h1, h2) = (config.mlp_hidden_1, config.mlp_hidden_2);
        let head = HeadParams {
            hidden1_weight: glorot(&[e, h1], e, h1, rng),
            hidden1_bias: Tensor::zeros(&[h1]),
            hidden2_weight: glorot(&[h1, h2], h1, h2, rng),
            hidden2_bias: Tensor::zeros(&[h2]),
            output_weight: glorot(&[h2, 1], h2, 1, rng),
            output_bias: Tensor::zeros(&[1]),
        };
        Ok(Self { patch_kernel, patch_bias: Tensor::zeros(&[e]), position, layers, head })
    }

    /// Total number of trainable scalars held.
    pub fn scalar_count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParameters {
        self.map(|_, t| graph.param(t.clone()))
    }

    /// Registers every tensor as a constant of `graph` (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> BoundParameters {
        self.map(|_, t| graph.constant(t.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        self.map(|_, t| t.cast())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.all_finite())
    }
}

/// Closed-form count of trainable scalars for `config`.
///
/// * patch embedding: `patch²·channels·d_model + d_model`
/// * learned positions (ablation only): `n_patches·d_model`
/// * per layer: `2·d_model` per enabled norm; attention
///   `n_heads·d_model·d_head` (queries) `+ 2·n_kv·d_model·d_head` (keys, values)
///   `+ d_head·n_heads·d_model` (output projection); SwiGLU `2·d_model² + 2·d_model`
///   or GELU MLP `d_model² + d_model`
/// * classifier head: `d_model·h1 + h1 + h1·h2 + h2 + h2 + 1`
pub fn parameter_count(config: &RetformerConfig) -> Result<usize, ModelError> {
    config.validate()?;
    let e = config.d_model;
    let mut total = config.patch_dim() * e + e;
    if config.ablation.position_encoding == PositionEncoding::Learned {
        total += config.n_patches() * e;
    }
    let mut layer = 0;
    if config.ablation.norm1_enabled {
        layer += 2 * e;
    }
    if config.ablation.norm2_enabled {
        layer += 2 * e;
    }
    if config.ablation.attention != AttentionKind::None {
        let da = config.d_head;
        layer += config.n_heads * e * da + 2 * config.n_kv() * e * da + da * config.n_heads * e;
    }
    layer += match config.ablation.feedforward {
        FeedForward::SwiGlu => 2 * e * e + 2 * e,
        FeedForward::GeluMlp => e * e + e,
        FeedForward::None => 0,
    };
    total += config.n_layers * layer;
    let (h1, h2) = (config.mlp_hidden_1, config.mlp_hidden_2);
    total += e * h1 + h1 + h1 * h2 + h2 + h2 + 1;
    Ok(total)
}

/// Rearranges a `[E, C, p, p]` convolution kernel into the `[p·p·C, E]`
/// dense matrix that acts identically on flattened `(row, col, channel)` patches.
pub fn conv_kernel_to_dense<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(ModelError::Config(format!("expected [E, C, p, p] kernel, got {s:?}")));
    }
    let (e, c, p) = (s[0], s[1], s[2]);
    Ok(Tensor::from_fn(&[p * p * c, e], |idx| {
        let (row, oe) = (idx / e, idx % e);
        let (pix, ci) = (row / c, row % c);
        let (ky, kx) = (pix / p, pix % p);
        kernel.get(&[oe, ci, ky, kx])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::config::AblationVariant;

    #[test]
    fn count_matches_initialized_tensors_for_every_variant() {
        for base in [RetformerConfig::oct_default(), RetformerConfig::fundus_default()] {
            for v in AblationVariant::ALL {
                let cfg = base.clone().with_image_size(20).with_ablation(v.apply(Default::default()));
                let params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                assert_eq!(params.scalar_count(), parameter_count(&cfg).unwrap(), "{v:?}");
            }
        }
    }

    #[test]
    fn degenerate_config_hand_count() {
        // d_model 1, one head of width 2, one group, patch = image.
        let mut cfg = RetformerConfig::from_hyperparameters(4, 1, 4, 1, 1, 1, 1, 1, 1);
        cfg.d_head = 2;
        // patch 16+1, norms 2+2, attention q 2 + k 2 + v 2 + out 2, swiglu 2+2, head 1+1+1+1+1+1
        let expected = 17 + 4 + 8 + 4 + 6;
        assert_eq!(parameter_count(&cfg).unwrap(), expected);
    }

    #[test]
    fn doubling_first_hidden_width_is_local() {
        let cfg = RetformerConfig::oct_default();
        let mut wide = cfg.clone();
        wide.mlp_hidden_1 *= 2;
        let h1 = cfg.mlp_hidden_1;
        let delta = parameter_count(&wide).unwrap() - parameter_count(&cfg).unwrap();
        // hidden1 weight + bias and hidden2 weight grow by h1 columns/rows.
        assert_eq!(delta, cfg.d_model * h1 + h1 + h1 * cfg.mlp_hidden_2);
    }

    #[test]
    fn oct_default_count() {
        // Closed form evaluated by hand: 1054 + 248 + 7440 + 7812 + 4481.
        assert_eq!(parameter_count(&RetformerConfig::oct_default()).unwrap(), 21_035);
    }

    #[test]
    fn named_leaves_are_unique_and_ordered() {
        let cfg = RetformerConfig::fundus_default().with_image_size(20);
        let params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let named = params.named();
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names[0], "patch.kernel");
        let len = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), len);
        assert_eq!(len, params.leaves().len());
    }

    #[test]
    fn with_leaves_round_trips() {
        let cfg = RetformerConfig::oct_default().with_image_size(8);
        let params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let leaves: Vec<_> = params.leaves().into_iter().cloned().collect();
        assert_eq!(params.with_leaves(&leaves), params);
    }
}
