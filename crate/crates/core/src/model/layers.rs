//! Forward pass, recorded on a [`Graph`] so every block is differentiable.

use std::sync::Arc;

use super::config::{AttentionKind, PatchEmbedding, RetformerConfig};
use super::params::{AttentionParams, BoundParameters, FeedForwardParams, HeadParams, LayerParams, NormParams};
use super::rope::RopeTable;
use super::ModelError;
use crate::numerics::{Graph, NodeId, PairRotation, Tensor};
use crate::scalar::Scalar;

/// Splits an `H×W×C` image into row-major flattened patches, one row per
/// patch in raster order over the patch grid.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>, ModelError> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(ModelError::Shape(format!("expected H×W×C image, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(ModelError::Config(format!("image {h}×{w} is not divisible into {patch_size}-pixel patches")));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for ky in 0..patch_size {
                let row = (gy * patch_size + ky) * w + gx * patch_size;
                out.extend_from_slice(&image.data()[row * c..(row + patch_size) * c]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, dim], out)?)
}

/// Pads an `H×W×C` image to `size×size` by replicating its last row and column.
pub fn pad_edge<T: Scalar>(image: &Tensor<T>, size: usize) -> Result<Tensor<T>, ModelError> {
    let s = image.shape();
    if s.len() != 3 || s[0] > size || s[1] > size {
        return Err(ModelError::Shape(format!("cannot pad image {s:?} to {size}×{size}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == size && w == size {
        return Ok(image.clone());
    }
    Ok(Tensor::from_fn(&[size, size, c], |i| {
        let (y, rest) = (i / (size * c), i % (size * c));
        let (x, ch) = (rest / c, rest % c);
        image.data()[(y.min(h - 1) * w + x.min(w - 1)) * c + ch]
    }))
}

/// Validates, pads and stacks images into a `[B, S, S, C]` batch.
pub fn stack_images<T: Scalar>(images: &[&Tensor<T>], config: &RetformerConfig) -> Result<Tensor<T>, ModelError> {
    if images.is_empty() {
        return Err(ModelError::Shape("empty image batch".into()));
    }
    let expected = [config.image_size, config.image_size, config.channels];
    let size = config.padded_size();
    let mut data = Vec::with_capacity(images.len() * size * size * config.channels);
    for img in images {
        if img.shape() != expected {
            return Err(ModelError::Shape(format!("image shape {:?} does not match config {expected:?}", img.shape())));
        }
        data.extend_from_slice(pad_edge(img, size)?.data());
    }
    Ok(Tensor::new(vec![images.len(), size, size, config.channels], data)?)
}

/// Patch embedding of a padded `[B, S, S, C]` batch into `[B, N_P, d_model]` tokens.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<T>,
    batch: &Tensor<T>,
    params: &BoundParameters,
    config: &RetformerConfig,
) -> Result<NodeId, ModelError> {
    let p = config.patch_size;
    let tokens = match config.ablation.patch_embedding {
        PatchEmbedding::Conv => {
            let image = g.constant(batch.clone());
            g.patch_conv(image, params.patch_kernel, p)?
        }
        PatchEmbedding::Mlp => {
            let s = batch.shape();
            let (b, size, c) = (s[0], s[1], s[3]);
            let per_image = size * size * c;
            let mut rows = Vec::with_capacity(batch.len());
            for i in 0..b {
                let img = Tensor::new(vec![size, size, c], batch.data()[i * per_image..(i + 1) * per_image].to_vec())?;
                rows.extend(extract_patches(&img, p)?.into_data());
            }
            let n = (size / p) * (size / p);
            let patches = g.constant(Tensor::new(vec![b, n, p * p * c], rows)?);
            g.matmul(patches, params.patch_kernel)?
        }
    };
    let mut out = g.add_bias(tokens, params.patch_bias)?;
    if let Some(pos) = params.position {
        let n = config.n_patches();
        let e = config.d_model;
        let b = batch.shape()[0];
        // broadcast the [N, E] table over the batch by adding it per sample
        let flat = g.reshape(out, &[b, n * e])?;
        let pos_flat = g.reshape(pos, &[n * e])?;
        let summed = g.add_bias(flat, pos_flat)?;
        out = g.reshape(summed, &[b, n, e])?;
    }
    Ok(out)
}

/// `(x - mean) / sqrt(var + eps)` per row, then elementwise gain and bias.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: NodeId, norm: &NormParams<NodeId>, eps: T) -> Result<NodeId, ModelError> {
    let n = g.normalize(x, eps);
    let scaled = g.mul_gain(n, norm.gain)?;
    Ok(g.add_bias(scaled, norm.bias)?)
}

fn maybe_norm<T: Scalar>(g: &mut Graph<T>, x: NodeId, norm: &Option<NormParams<NodeId>>, eps: T) -> Result<NodeId, ModelError> {
    match norm {
        Some(n) => layer_norm(g, x, n, eps),
        None => Ok(x),
    }
}

/// Output of one scaled dot-product attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub output: NodeId,
    /// Row-stochastic attention weights `[.., N, N]`.
    pub weights: NodeId,
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with the softmax taken row-wise.
pub fn attention_head<T: Scalar>(g: &mut Graph<T>, q: NodeId, k: NodeId, v: NodeId) -> Result<HeadOutput, ModelError> {
    let d = g.value(q).last_dim();
    let scores = g.batch_matmul(q, k, true)?;
    let scaled = g.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let weights = g.softmax_last(scaled)?;
    let output = g.batch_matmul(weights, v, false)?;
    Ok(HeadOutput { output, weights })
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: NodeId,
    /// Attention weights of every head, in head order.
    pub weights: Vec<NodeId>,
}

/// Grouped-query attention over `x: [.., N, d_model]`.
///
/// Head `h` uses key/value group `h / (n_heads / n_kv)`; queries and keys
/// are rotated by `rope` when given. The concatenated heads are projected
/// back to `d_model`.
pub fn grouped_query_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    params: &AttentionParams<NodeId>,
    n_heads: usize,
    rope: Option<&Arc<PairRotation<T>>>,
) -> Result<AttentionOutput, ModelError> {
    let n_kv = params.key.len();
    if n_kv == 0 || n_heads % n_kv != 0 || params.query.len() != n_heads || params.value.len() != n_kv {
        return Err(ModelError::Config(format!(
            "{n_heads} heads cannot be split into {n_kv} key/value groups"
        )));
    }
    let per_group = n_heads / n_kv;
    let mut keys = Vec::with_capacity(n_kv);
    let mut values = Vec::with_capacity(n_kv);
    for j in 0..n_kv {
        let mut k = g.matmul(x, params.key[j])?;
        if let Some(table) = rope {
            k = g.rotate_pairs(k, Arc::clone(table))?;
        }
        keys.push(k);
        values.push(g.matmul(x, params.value[j])?);
    }
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut q = g.matmul(x, params.query[h])?;
        if let Some(table) = rope {
            q = g.rotate_pairs(q, Arc::clone(table))?;
        }
        let group = h / per_group;
        let head = attention_head(g, q, keys[group], values[group])?;
        heads.push(head.output);
        weights.push(head.weights);
    }
    let concat = g.concat(&heads)?;
    let output = g.matmul(concat, params.output)?;
    Ok(AttentionOutput { output, weights })
}

/// Gated feedforward `swish(x W_s + B_s) ⊗ (x V_s + C_s)`, or its ablations.
pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, x: NodeId, ff: &FeedForwardParams<NodeId>) -> Result<NodeId, ModelError> {
    Ok(match ff {
        FeedForwardParams::SwiGlu { gate_weight, gate_bias, value_weight, value_bias } => {
            let gate = g.matmul(x, *gate_weight)?;
            let gate = g.add_bias(gate, *gate_bias)?;
            let gate = g.swish(gate);
            let val = g.matmul(x, *value_weight)?;
            let val = g.add_bias(val, *value_bias)?;
            g.mul(gate, val)?
        }
        FeedForwardParams::GeluMlp { weight, bias } => {
            let h = g.matmul(x, *weight)?;
            let h = g.add_bias(h, *bias)?;
            g.gelu(h)
        }
        FeedForwardParams::Identity => x,
    })
}

/// Intermediate nodes of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub input: NodeId,
    pub norm1: Option<NodeId>,
    /// Attention output `M` (equal to `norm1` output when attention is removed).
    pub attention: NodeId,
    pub attention_weights: Vec<NodeId>,
    pub norm2: Option<NodeId>,
    pub output: NodeId,
}

/// `y = f(n2(M)) [+ M] [+ P]` with `M = attention(n1(P))`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    input: NodeId,
    layer: &LayerParams<NodeId>,
    config: &RetformerConfig,
    rope: Option<&Arc<PairRotation<T>>>,
) -> Result<LayerTrace, ModelError> {
    let eps = T::lit(config.norm_eps);
    let n1 = maybe_norm(g, input, &layer.norm1, eps)?;
    let (m, weights) = match (&layer.attention, config.ablation.attention) {
        (Some(a), AttentionKind::Gqa | AttentionKind::Multihead) => {
            let out = grouped_query_attention(g, n1, a, config.n_heads, rope)?;
            (out.output, out.weights)
        }
        _ => (n1, Vec::new()),
    };
    let n2 = maybe_norm(g, m, &layer.norm2, eps)?;
    let mut y = feed_forward(g, n2, &layer.feedforward)?;
    if config.ablation.residual2_enabled {
        y = g.add(y, m)?;
    }
    if config.ablation.residual1_enabled {
        y = g.add(y, input)?;
    }
    Ok(LayerTrace {
        input,
        norm1: layer.norm1.as_ref().map(|_| n1),
        attention: m,
        attention_weights: weights,
        norm2: layer.norm2.as_ref().map(|_| n2),
        output: y,
    })
}

/// Mean-pools tokens and applies two GELU hidden layers and a single-logit output.
pub fn classifier_head<T: Scalar>(g: &mut Graph<T>, tokens: NodeId, head: &HeadParams<NodeId>) -> Result<NodeId, ModelError> {
    let pooled = g.mean_tokens(tokens)?;
    let h = g.matmul(pooled, head.hidden1_weight)?;
    let h = g.add_bias(h, head.hidden1_bias)?;
    let h = g.gelu(h);
    let h = g.matmul(h, head.hidden2_weight)?;
    let h = g.add_bias(h, head.hidden2_bias)?;
    let h = g.gelu(h);
    let z = g.matmul(h, head.output_weight)?;
    Ok(g.add_bias(z, head.output_bias)?)
}

/// All interesting nodes of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embedded: NodeId,
    pub layers: Vec<LayerTrace>,
    /// Pre-sigmoid class-AD scores, `[B, 1]`.
    pub logits: NodeId,
}

impl ForwardTrace {
    /// Output of the last layer normalization in the network, falling back to
    /// the final token sequence when every norm is disabled.
    pub fn last_norm(&self) -> NodeId {
        self.layers
            .iter()
            .rev()
            .find_map(|l| l.norm2.or(l.norm1))
            .unwrap_or_else(|| self.final_tokens())
    }

    pub fn final_tokens(&self) -> NodeId {
        self.layers.last().map(|l| l.output).unwrap_or(self.embedded)
    }
}

/// Records the whole model on `g` for a batch of `image_size²×channels` images.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    images: &[&Tensor<T>],
    params: &BoundParameters,
    config: &RetformerConfig,
    rope: &RopeTable<T>,
) -> Result<ForwardTrace, ModelError> {
    let batch = stack_images(images, config)?;
    let embedded = embed_patches(g, &batch, params, config)?;
    let mut x = embedded;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let rotate = rope.enabled && (i == 0 || config.rope_every_layer);
        let trace = transformer_layer(g, x, layer, config, rotate.then_some(&rope.rotation))?;
        x = trace.output;
        layers.push(trace);
    }
    let logits = classifier_head(g, x, &params.head)?;
    Ok(ForwardTrace { embedded, layers, logits })
}
