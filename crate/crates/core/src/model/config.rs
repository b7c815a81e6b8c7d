use crate::error::{Error, Result};

/// Backbone and head hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel width of each of the four residual groups.
    pub channels: [usize; 4],
    pub blocks_per_group: [usize; 4],
    /// SE bottleneck reduction ratio `r`.
    pub reduction: usize,
    /// Frequency bins of the input features.
    pub mel_bins: usize,
    pub embedding_dim: usize,
    /// Classes of the AAM-Softmax head; 0 omits the head.
    pub num_classes: usize,
    pub use_se: bool,
    pub asp_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Half-width ResNet34SE with 80 mel bins and 256-d embeddings.
    pub fn full() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            blocks_per_group: [3, 4, 6, 3],
            reduction: 8,
            mel_bins: 80,
            embedding_dim: 256,
            num_classes: 0,
            use_se: true,
            asp_hidden: 128,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale configuration used for training experiments.
    pub fn tiny() -> Self {
        Self {
            channels: [8, 16, 32, 64],
            blocks_per_group: [2, 2, 2, 2],
            reduction: 4,
            mel_bins: 24,
            embedding_dim: 64,
            num_classes: 0,
            use_se: true,
            asp_hidden: 32,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.contains(&0) || self.blocks_per_group.contains(&0) {
            return bad("channels and blocks must be positive".into());
        }
        if self.reduction == 0 {
            return bad("reduction ratio must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.reduction != 0) {
            return bad(format!("channels {c} not divisible by reduction {}", self.reduction));
        }
        if self.mel_bins == 0 || !self.mel_bins.is_multiple_of(8) {
            return bad(format!("mel_bins {} must be a positive multiple of 8", self.mel_bins));
        }
        if self.embedding_dim == 0 || self.asp_hidden == 0 {
            return bad("embedding_dim and asp_hidden must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Frequency extent after the backbone's three stride-2 groups.
    pub fn out_freq(&self) -> usize {
        self.mel_bins / 8
    }

    /// Per-frame feature size entering attentive statistics pooling.
    pub fn pooled_dim(&self) -> usize {
        self.channels[3] * self.out_freq()
    }

    pub fn group_stride(group: usize) -> usize {
        if group == 0 {
            1
        } else {
            2
        }
    }
}
