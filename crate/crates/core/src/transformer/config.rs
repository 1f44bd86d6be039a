use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reparam::{GammaInit, ReparamMode, SigmaGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `x + f(LN(x))`, with a final LN before the output head.
    PreLn,
    /// `LN(x + f(x))`.
    PostLn,
    /// `x + f(x)`; only allowed together with a spectral reparameterization.
    None,
}

/// What the output head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One prediction per position.
    #[default]
    Tokens,
    /// One prediction per sequence, from the mean of the final hidden states.
    Pooled,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_embed_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_mode: NormMode,
    pub reparam_mode: ReparamMode,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub output: OutputMode,
    /// Initial global attention temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub use_sqrt_d_scaling: bool,
    /// Std of the truncated-normal weight init. Defaults to 0.02 for plain
    /// and weight-normalized layers and 0.1 for spectral ones.
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default = "default_embed_std")]
    pub embed_std: f64,
    #[serde(default)]
    pub gamma_init: GammaInit,
    #[serde(default)]
    pub sigma_gradient: SigmaGradient,
    /// Seed for initialization; the harness derives one from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelConfig {
    /// A small two-layer encoder.
    pub fn toy(norm_mode: NormMode, reparam_mode: ReparamMode) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            mlp_dim: 256,
            vocab_size: 32,
            max_seq_len: 32,
            norm_mode,
            reparam_mode,
            causal: false,
            output: OutputMode::Tokens,
            temperature: 1.0,
            use_sqrt_d_scaling: true,
            init_std: None,
            embed_std: default_embed_std(),
            gamma_init: GammaInit::One,
            sigma_gradient: SigmaGradient::Bilinear,
            seed: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn weight_std(&self) -> f64 {
        self.init_std.unwrap_or(if self.reparam_mode.is_spectral() {
            0.1
        } else {
            0.02
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_dim", self.mlp_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.norm_mode == NormMode::None && self.reparam_mode == ReparamMode::Plain {
            return Err(Error::Config(
                "norm_mode none requires a reparameterized model (plain layers need layer norm)"
                    .into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.weight_std() > 0.0) || !(self.embed_std >= 0.0) {
            return Err(Error::Config("init std must be positive".into()));
        }
        Ok(())
    }
}
