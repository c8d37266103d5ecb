use alloc::format;

use crate::error::{Error, Result};

pub const MAX_EMBED_DIM: usize = 512;
pub const MAX_STACKS: usize = 8;

/// Nonlinearity closing every filter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Architecture hyperparameters of a [`FusionModel`](super::FusionModel).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of stacked encoder/decoder pairs.
    pub n_stacks: usize,
    /// Filters per filter block; also the token width seen by attention.
    pub embed_dim: usize,
    /// Side of the square input patch. Odd, so that a center pixel exists.
    pub patch_size: usize,
    pub hsi_channels: usize,
    pub lidar_channels: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub ln_eps: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_stacks: 4,
            embed_dim: 128,
            patch_size: 11,
            hsi_channels: 144,
            lidar_channels: 1,
            n_classes: 15,
            dropout_rate: 0.5,
            activation: Activation::Relu,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stacks == 0 || self.n_stacks > MAX_STACKS {
            return Err(bad("n_stacks", &format!("must lie in 1..={MAX_STACKS}")));
        }
        if self.embed_dim == 0 || self.embed_dim > MAX_EMBED_DIM {
            return Err(bad("embed_dim", &format!("must lie in 1..={MAX_EMBED_DIM}")));
        }
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(bad("patch_size", "must be a positive odd integer"));
        }
        if self.hsi_channels == 0 {
            return Err(bad("hsi_channels", "must be positive"));
        }
        if self.lidar_channels == 0 {
            return Err(bad("lidar_channels", "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(bad("n_classes", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(bad("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.ln_eps > 0.0) || !self.ln_eps.is_finite() {
            return Err(bad("ln_eps", "must be positive"));
        }
        Ok(())
    }

    /// Width of the pooled feature vector fed to the classification head.
    pub fn feature_len(&self) -> usize {
        2 * self.n_stacks * self.embed_dim
    }
}
