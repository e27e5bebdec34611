use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionEncoding {
    /// Rotary encoding applied to queries and keys.
    Rope,
    /// Trainable table added to the patch embeddings.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchEmbedding {
    /// Convolution with kernel = stride = patch size.
    Conv,
    /// Dense layer over flattened patches.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Grouped-query attention: `n_groups` shared key/value pairs.
    Gqa,
    /// One key/value pair per head.
    Multihead,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedForward {
    SwiGlu,
    GeluMlp,
    None,
}

/// Architectural switches. [`AblationFlags::default`] is the unmodified model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub position_encoding: PositionEncoding,
    pub patch_embedding: PatchEmbedding,
    pub attention: AttentionKind,
    pub feedforward: FeedForward,
    pub norm1_enabled: bool,
    pub norm2_enabled: bool,
    pub residual1_enabled: bool,
    pub residual2_enabled: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            position_encoding: PositionEncoding::Rope,
            patch_embedding: PatchEmbedding::Conv,
            attention: AttentionKind::Gqa,
            feedforward: FeedForward::SwiGlu,
            norm1_enabled: true,
            norm2_enabled: true,
            residual1_enabled: true,
            residual2_enabled: true,
        }
    }
}

/// The eleven rows of the ablation table, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    Baseline,
    LearnedPosition,
    MlpPatchEmbedding,
    NoFirstNorm,
    MultiheadAttention,
    NoAttention,
    NoFirstResidual,
    NoSecondNorm,
    GeluMlp,
    NoSwiGlu,
    NoSecondResidual,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 11] = [
        AblationVariant::Baseline,
        AblationVariant::LearnedPosition,
        AblationVariant::MlpPatchEmbedding,
        AblationVariant::NoFirstNorm,
        AblationVariant::MultiheadAttention,
        AblationVariant::NoAttention,
        AblationVariant::NoFirstResidual,
        AblationVariant::NoSecondNorm,
        AblationVariant::GeluMlp,
        AblationVariant::NoSwiGlu,
        AblationVariant::NoSecondResidual,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "None (Baseline)",
            AblationVariant::LearnedPosition => "Using learned position embeddings",
            AblationVariant::MlpPatchEmbedding => "Using MLP for patch embedding",
            AblationVariant::NoFirstNorm => "First layer normalisation removed",
            AblationVariant::MultiheadAttention => "Using multihead attention instead of GQA",
            AblationVariant::NoAttention => "Attention head removed",
            AblationVariant::NoFirstResidual => "First residual connection removed",
            AblationVariant::NoSecondNorm => "Second layer normalisation removed",
            AblationVariant::GeluMlp => "Using MLP with GELU instead of SwiGLU",
            AblationVariant::NoSwiGlu => "SwiGLU removed",
            AblationVariant::NoSecondResidual => "Second residual connection removed",
        }
    }

    /// Applies this variant's single change to `flags`.
    pub fn apply(self, mut flags: AblationFlags) -> AblationFlags {
        match self {
            AblationVariant::Baseline => {}
            AblationVariant::LearnedPosition => flags.position_encoding = PositionEncoding::Learned,
            AblationVariant::MlpPatchEmbedding => flags.patch_embedding = PatchEmbedding::Mlp,
            AblationVariant::NoFirstNorm => flags.norm1_enabled = false,
            AblationVariant::MultiheadAttention => flags.attention = AttentionKind::Multihead,
            AblationVariant::NoAttention => flags.attention = AttentionKind::None,
            AblationVariant::NoFirstResidual => flags.residual1_enabled = false,
            AblationVariant::NoSecondNorm => flags.norm2_enabled = false,
            AblationVariant::GeluMlp => flags.feedforward = FeedForward::GeluMlp,
            AblationVariant::NoSwiGlu => flags.feedforward = FeedForward::None,
            AblationVariant::NoSecondResidual => flags.residual2_enabled = false,
        }
        flags
    }
}

/// Every architectural hyperparameter of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetformerConfig {
    /// Side length of the preprocessed square input image.
    pub image_size: usize,
    /// 1 for OCT slices, 3 for fundus photographs.
    pub channels: usize,
    pub patch_size: usize,
    /// Token embedding width.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_groups: usize,
    /// Per-head query/key/value width; must be even.
    pub d_head: usize,
    pub mlp_hidden_1: usize,
    pub mlp_hidden_2: usize,
    /// Rotate queries and keys in every layer rather than only the first.
    pub rope_every_layer: bool,
    pub norm_eps: f64,
    pub ablation: AblationFlags,
}

/// `max(2, 2·floor(d_model / (2·n_heads)))`.
pub fn default_d_head(d_model: usize, n_heads: usize) -> usize {
    (2 * (d_model / (2 * n_heads.max(1)))).max(2)
}

impl RetformerConfig {
    /// Tuned OCT architecture (50×50 single-channel input).
    pub fn oct_default() -> Self {
        Self::from_hyperparameters(50, 1, 4, 62, 1, 12, 3, 47, 31)
    }

    /// Tuned fundus architecture (50×50 RGB input).
    pub fn fundus_default() -> Self {
        Self::from_hyperparameters(50, 3, 4, 32, 4, 2, 1, 31, 28)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_hyperparameters(
        image_size: usize,
        channels: usize,
        patch_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        n_groups: usize,
        mlp_hidden_1: usize,
        mlp_hidden_2: usize,
    ) -> Self {
        Self {
            image_size,
            channels,
            patch_size,
            d_model,
            n_layers,
            n_heads,
            n_groups,
            d_head: default_d_head(d_model, n_heads),
            mlp_hidden_1,
            mlp_hidden_2,
            rope_every_layer: true,
            norm_eps: 1e-5,
            ablation: AblationFlags::default(),
        }
    }

    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn with_ablation(mut self, ablation: AblationFlags) -> Self {
        self.ablation = ablation;
        self
    }

    /// Image side after edge-replication padding up to a multiple of the patch size.
    pub fn padded_size(&self) -> usize {
        self.grid_side() * self.patch_size
    }

    /// Number of patches along one side.
    pub fn grid_side(&self) -> usize {
        self.image_size.div_ceil(self.patch_size.max(1))
    }

    /// Number of tokens N_P.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Number of distinct key/value projections per layer.
    pub fn n_kv(&self) -> usize {
        match self.ablation.attention {
            AttentionKind::Multihead => self.n_heads,
            _ => self.n_groups,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_groups", self.n_groups),
            ("d_head", self.d_head),
            ("mlp_hidden_1", self.mlp_hidden_1),
            ("mlp_hidden_2", self.mlp_hidden_2),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.patch_size > self.image_size {
            return Err(ModelError::Config(format!(
                "patch_size {} exceeds image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.n_heads % self.n_groups != 0 {
            return Err(ModelError::Config(format!(
                "n_heads ({}) must be divisible by n_groups ({})",
                self.n_heads, self.n_groups
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(ModelError::Config(format!("d_head ({}) must be even", self.d_head)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(ModelError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}
