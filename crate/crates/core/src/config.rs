use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceVariant, Conv1x1};
use crate::features::BackboneConfig;
use crate::losses::FocalConfig;
use crate::{Error, Result};

/// Switches for the three confidence-related components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// Confidence-guided bias (per-query temperature) on attention scores.
    pub bias: bool,
    /// Rescaling of values by key-side confidence.
    pub rescale: bool,
    /// Include the confidence classification term in the total loss.
    pub supervise_confidence: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            bias: true,
            rescale: true,
            supervise_confidence: true,
        }
    }
}

impl Ablation {
    /// Plain interleaved attention: no bias, no rescaling, no confidence loss.
    pub fn baseline() -> Self {
        Self {
            bias: false,
            rescale: false,
            supervise_confidence: false,
        }
    }

    pub fn is_baseline(&self) -> bool {
        !self.bias && !self.rescale
    }

    /// Short tag used in report file names, e.g. `bias-on_rescale-off`.
    pub fn tag(&self) -> String {
        let s = |on: bool| if on { "on" } else { "off" };
        format!("bias-{}_rescale-{}", s(self.bias), s(self.rescale))
    }

    pub fn mode(&self) -> &'static str {
        match (self.bias, self.rescale) {
            (false, false) => "baseline",
            (true, false) => "bias-only",
            (false, true) => "rescale-only",
            (true, true) => "confidence-guided",
        }
    }
}

/// Every tunable of the pipeline, resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub coarse_channels: usize,
    pub fine_channels: usize,
    /// Correlation temperature for confidence estimation.
    pub gamma: f64,
    /// Coarse similarity temperature.
    pub lambda: f64,
    /// Coarse match threshold on the dual-softmax probability.
    pub theta_c: f64,
    /// Log of the bias strength, `alpha = exp(eta)`.
    pub eta: f64,
    /// Weight of the confidence classification loss.
    pub beta: f64,
    /// Mask radius (fine-grid units) for the sub-pixel loss.
    pub epsilon: f64,
    pub pool: usize,
    pub t_blocks: usize,
    pub heads: usize,
    pub conf_variant: ConfidenceVariant,
    pub ablation: Ablation,
    /// Fine patch side length for the first refinement stage.
    pub window: usize,
    /// Similarity temperature of the first refinement stage.
    pub fine_lambda: f64,
    /// Softmax temperature of the 3x3 expectation stage.
    pub refine_temperature: f64,
    pub rope_base: f64,
    pub focal: FocalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gamma = 0.1;
        Self {
            seed: 0,
            coarse_channels: 256,
            fine_channels: 128,
            gamma,
            lambda: 0.02,
            theta_c: 0.2,
            eta: 0.0,
            beta: 1.0,
            epsilon: 1.0,
            pool: 2,
            t_blocks: 2,
            heads: 1,
            conf_variant: ConfidenceVariant::SigmoidGlobalMean,
            ablation: Ablation::default(),
            window: 8,
            fine_lambda: 0.1,
            refine_temperature: 1e-4,
            rope_base: crate::attention::DEFAULT_ROPE_BASE,
            focal: FocalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            seed: self.seed,
            coarse_channels: self.coarse_channels,
            fine_channels: self.fine_channels,
        }
    }

    /// Selects a confidence variant by its roman numeral; variant iv gets a
    /// bias matched to the current `gamma`.
    pub fn set_conf_variant(&mut self, name: &str) -> Result<()> {
        self.conf_variant = ConfidenceVariant::parse_with_gamma(name, self.gamma)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("fine_lambda", self.fine_lambda),
            ("refine_temperature", self.refine_temperature),
            ("rope_base", self.rope_base),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.theta_c) {
            return bad(format!("theta_c must lie in [0, 1), got {}", self.theta_c));
        }
        if !self.eta.is_finite() {
            return bad("eta must be finite".into());
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.pool == 0 || self.t_blocks == 0 || self.heads == 0 || self.window == 0 {
            return bad("pool, t_blocks, heads and window must be at least 1".into());
        }
        if self.fine_channels == 0 {
            return bad("fine_channels must be positive".into());
        }
        if self.coarse_channels == 0 || !self.coarse_channels.is_multiple_of(4) {
            return bad(format!(
                "coarse_channels must be a positive multiple of 4, got {}",
                self.coarse_channels
            ));
        }
        if !self.coarse_channels.is_multiple_of(self.heads) {
            return bad(format!(
                "coarse_channels {} not divisible by heads {}",
                self.coarse_channels, self.heads
            ));
        }
        if let ConfidenceVariant::LearnedConv(Conv1x1 { weight, bias }) = self.conf_variant {
            if !weight.is_finite() || !bias.is_finite() {
                return bad("variant iv parameters must be finite".into());
            }
        }
        self.focal.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
