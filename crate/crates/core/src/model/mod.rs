//! The Retformer architecture and its ablation variants.

mod config;
mod layers;
mod params;
mod rope;

use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    default_d_head, AblationFlags, AblationVariant, AttentionKind, FeedForward, PatchEmbedding, PositionEncoding,
    RetformerConfig,
};
pub use layers::{
    attention_head, classifier_head, embed_patches, extract_patches, feed_forward, forward, grouped_query_attention,
    layer_norm, pad_edge, stack_images, transformer_layer, AttentionOutput, ForwardTrace, HeadOutput, LayerTrace,
};
pub use params::{
    conv_kernel_to_dense, parameter_count, AttentionParams, BoundParameters, FeedForwardParams, HeadParams,
    LayerParams, ModelParameters, NormParams, ParameterSet,
};
pub use rope::{rope_angles, rope_rotate, RopeTable};

use crate::numerics::{gradient_check_extended, GradCheckOptions, GradCheckReport, Graph, NodeId, NumericsError, Objective, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Rotation table matching `config`, disabled for the learned-position variant.
pub fn rope_table<T: Scalar>(config: &RetformerConfig) -> Result<RopeTable<T>, ModelError> {
    match config.ablation.position_encoding {
        PositionEncoding::Rope => RopeTable::new(config.d_head, config.n_patches()),
        PositionEncoding::Learned => Ok(RopeTable::disabled(config.d_head)),
    }
}

/// Pre-sigmoid scores for a batch of images, one forward pass.
pub fn forward_logits<T: Scalar>(
    images: &[&Tensor<T>],
    params: &ModelParameters<T>,
    config: &RetformerConfig,
) -> Result<Vec<T>, ModelError> {
    let rope = rope_table(config)?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let trace = forward(&mut g, images, &bound, config, &rope)?;
    Ok(g.value(trace.logits).data().to_vec())
}

/// `P(class AD)` for a single image.
pub fn model_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &ModelParameters<T>,
    config: &RetformerConfig,
) -> Result<T, ModelError> {
    Ok(sigmoid(forward_logits(&[image], params, config)?[0]))
}

/// `P(class AD)` for many images, evaluated in parallel chunks of `batch_size`.
pub fn predict_proba<T: Scalar>(
    images: &[&Tensor<T>],
    params: &ModelParameters<T>,
    config: &RetformerConfig,
    batch_size: usize,
) -> Result<Vec<T>, ModelError> {
    let chunks: Vec<Vec<T>> = images
        .par_chunks(batch_size.max(1))
        .map(|c| forward_logits(c, params, config))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().map(sigmoid).collect())
}

/// Mean binary cross-entropy on a fixed batch as a function of every parameter
/// tensor, in [`ParameterSet::leaves`] order.
pub struct LossObjective<'a> {
    pub config: &'a RetformerConfig,
    pub params: &'a ModelParameters<f64>,
    pub images: &'a [Tensor<f64>],
    pub targets: &'a [f64],
}

impl Objective for LossObjective<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        let invalid = |e: ModelError| NumericsError::InvalidArgument(e.to_string());
        let rope = rope_table::<S>(self.config).map_err(invalid)?;
        let bound = self.params.with_leaves(inputs);
        let images: Vec<Tensor<S>> = self.images.iter().map(|t| t.cast()).collect();
        let refs: Vec<&Tensor<S>> = images.iter().collect();
        let trace = forward(g, &refs, &bound, self.config, &rope).map_err(invalid)?;
        let targets: Vec<S> = self.targets.iter().map(|&t| S::lit(t)).collect();
        g.bce_with_logits(trace.logits, &targets)
    }
}

/// Checks backpropagated parameter gradients of the loss against central differences.
pub fn check_model_gradients(
    config: &RetformerConfig,
    params: &ModelParameters<f64>,
    images: &[Tensor<f64>],
    targets: &[f64],
    options: GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let objective = LossObjective { config, params, images, targets };
    let leaves: Vec<Tensor<f64>> = params.leaves().into_iter().cloned().collect();
    Ok(gradient_check_extended(&objective, &leaves, options)?)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}
