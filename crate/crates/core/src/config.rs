//! Architecture and training hyperparameters, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{C2eError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

/// `c2e` uses compression steps in the encoder and Langevin steps in the
/// decoder; `vit` swaps both for plain MLP sublayers of the same widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    C2e,
    Vit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of `steps` spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_frac: 0.1,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct C2eConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    /// Number of encoder blocks (and decoder blocks).
    pub depth: usize,
    /// Widest channel count, produced by the patch embedding.
    pub width: usize,
    /// Channels removed by each encoder block.
    pub reduction: usize,
    pub heads: usize,
    /// Initial compression step size.
    pub beta_step: f64,
    /// Fraction of `Z₀` channels feeding the temperature head.
    pub conditional_ratio: f64,
    pub temperature_dim: usize,
    /// Langevin step size.
    pub epsilon: f64,
    /// Langevin noise during training.
    pub noise: bool,
    pub loss: LossKind,
    pub arch: Arch,
    pub pooling: Pooling,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Relative Cholesky jitter: `jitter · trace(Σ)/dim` is added to the diagonal.
    pub jitter: f64,
    pub log_every: u64,
    /// Save an intermediate checkpoint every this many steps; `0` saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for C2eConfig {
    fn default() -> Self {
        C2eConfig {
            image_size: 32,
            patch_size: 8,
            mask_ratio: 0.75,
            depth: 4,
            width: 64,
            reduction: 8,
            heads: 4,
            beta_step: 0.1,
            conditional_ratio: 0.25,
            temperature_dim: 16,
            epsilon: 0.01,
            noise: true,
            loss: LossKind::L1,
            arch: Arch::C2e,
            pooling: Pooling::Mean,
            optimizer: OptimizerConfig::default(),
            steps: 200,
            batch_size: 16,
            seed: 0,
            jitter: 1e-6,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

/// Per-layer channel widths `C_n > C_{n−1} > … > C₀`, decreasing by a constant `Δ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    widths: Vec<usize>,
    delta: usize,
}

impl ChannelSchedule {
    pub fn new(width: usize, delta: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(C2eError::Config("depth must be >= 1".into()));
        }
        if delta == 0 {
            return Err(C2eError::Config("reduction must be >= 1".into()));
        }
        let removed = delta * depth;
        if removed >= width {
            return Err(C2eError::Config(format!(
                "schedule underflow: width {width} cannot lose {delta} channels {depth} times"
            )));
        }
        Ok(ChannelSchedule {
            widths: (0..=depth).map(|i| width - i * delta).collect(),
            delta,
        })
    }

    /// Widths from the embedding (`C_n`) down to the encoder output (`C₀`).
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Width entering encoder block `i` (counted from the input).
    pub fn encoder_in(&self, i: usize) -> usize {
        self.widths[i]
    }

    pub fn encoder_out(&self, i: usize) -> usize {
        self.widths[i + 1]
    }

    /// `C₀`.
    pub fn latent(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `C_n`.
    pub fn embed(&self) -> usize {
        self.widths[0]
    }

    /// Width entering decoder block `j`; the reverse of the encoder.
    pub fn decoder_in(&self, j: usize) -> usize {
        self.widths[self.depth() - j]
    }

    pub fn decoder_out(&self, j: usize) -> usize {
        self.widths[self.depth() - j - 1]
    }
}

impl C2eConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| C2eError::io(path, e))?;
        let cfg: C2eConfig = serde_json::from_str(&text)
            .map_err(|e| C2eError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn schedule(&self) -> Result<ChannelSchedule> {
        ChannelSchedule::new(self.width, self.reduction, self.depth)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Channels of `Z₀` that feed the temperature head: `ceil(β·C₀)`.
    pub fn temperature_channels(&self) -> usize {
        let c0 = self.width - self.depth * self.reduction;
        ((self.conditional_ratio * c0 as f64).ceil() as usize).clamp(1, c0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(C2eError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        let schedule = self.schedule()?;
        if self.heads == 0 || schedule.widths().iter().any(|w| w % self.heads != 0) {
            return bad(format!(
                "every width in {:?} must be divisible by {} heads",
                schedule.widths(),
                self.heads
            ));
        }
        if !(self.conditional_ratio > 0.0 && self.conditional_ratio <= 1.0) {
            return bad(format!("conditional_ratio {} outside (0, 1]", self.conditional_ratio));
        }
        if !(self.beta_step > 0.0) {
            return bad(format!("beta_step must be > 0, got {}", self.beta_step));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.temperature_dim == 0 || self.batch_size == 0 {
            return bad("temperature_dim and batch_size must be >= 1".into());
        }
        if !(self.jitter >= 0.0) {
            return bad(format!("jitter must be >= 0, got {}", self.jitter));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0)
            || !(o.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(0.0..=1.0).contains(&o.warmup_frac)
            || !(o.grad_clip >= 0.0)
        {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        let visible = self.num_patches() - (self.mask_ratio * self.num_patches() as f64).floor() as usize;
        if visible == 0 {
            return bad("mask ratio leaves no visible patches".into());
        }
        Ok(())
    }
}
