// `!(x > 0.0)` is deliberate: NaN must fail validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use crate::error::{EmkdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Cloze training over masked views with unrestricted attention.
    #[default]
    BidirectionalMlm,
    /// Next-item prediction at every position under a causal mask.
    AutoregressiveNip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    #[default]
    Post,
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// How a `[T × d]` representation becomes a vector for cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Row-major flattening with pad rows zeroed.
    #[default]
    Flatten,
    /// Mean over non-pad rows.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub attr_size: usize,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4 · hidden_dim`.
    pub ffn_dim: Option<usize>,
    pub n_networks: usize,
    pub n_views: usize,
    pub mask_prop: f64,
    pub dropout_rate: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub mode: Mode,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub pooling: Pooling,
    pub include_positive_in_denominator: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            attr_size: 0,
            max_len: 50,
            hidden_dim: 256,
            blocks: 2,
            heads: 2,
            ffn_dim: None,
            n_networks: 3,
            n_views: 2,
            mask_prop: 0.15,
            dropout_rate: 0.1,
            tau: 1.0,
            lambda: 0.1,
            mu: 0.1,
            mode: Mode::BidirectionalMlm,
            norm: NormPlacement::Post,
            activation: Activation::Gelu,
            pooling: Pooling::Flatten,
            include_positive_in_denominator: false,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

fn check_range(errs: &mut Vec<String>, name: &str, v: f64, lo: f64, hi: f64) {
    if !(lo..=hi).contains(&v) {
        errs.push(format!("{name} = {v} is outside [{lo}, {hi}]"));
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize, attr_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            attr_size,
            max_len,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.hidden_dim)
    }

    /// Token id of `[mask]`.
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }

    /// Token id of `[pad]`.
    pub fn pad_id(&self) -> usize {
        self.vocab_size + 1
    }

    /// Columns of the attribute classifier. A dataset without attributes
    /// still gets one (unused) column so every tensor stays non-empty.
    pub fn attr_columns(&self) -> usize {
        self.attr_size.max(1)
    }

    /// Collects every violated constraint instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < 2 {
            errs.push(format!("vocab_size = {} must be at least 2", self.vocab_size));
        }
        if self.max_len < 2 {
            errs.push(format!("max_len = {} must be at least 2", self.max_len));
        }
        if self.hidden_dim == 0 {
            errs.push("hidden_dim must be positive".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads.max(1)) {
            errs.push(format!(
                "hidden_dim = {} must be divisible by heads = {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.blocks == 0 {
            errs.push("blocks must be at least 1".into());
        }
        if self.ffn_width() == 0 {
            errs.push("ffn_dim must be positive".into());
        }
        if self.n_networks == 0 {
            errs.push("n_networks must be at least 1".into());
        }
        if !(1..=8).contains(&self.n_views) {
            errs.push(format!("n_views = {} is outside [1, 8]", self.n_views));
        }
        if !(self.mask_prop > 0.0 && self.mask_prop < 1.0) {
            errs.push(format!("mask_prop = {} must lie in (0, 1)", self.mask_prop));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            errs.push(format!("dropout_rate = {} must lie in [0, 1)", self.dropout_rate));
        }
        check_range(&mut errs, "tau", self.tau, 0.1, 10.0);
        check_range(&mut errs, "lambda", self.lambda, 0.01, 1.0);
        check_range(&mut errs, "mu", self.mu, 0.01, 1.0);
        if !(self.layer_norm_eps > 0.0) {
            errs.push("layer_norm_eps must be positive".into());
        }
        if !(self.init_std > 0.0) {
            errs.push("init_std must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EmkdError::Config(errs))
        }
    }

    /// Learnable scalars in one network.
    pub fn parameter_count(&self) -> usize {
        let (v, a, t, d, f) = (
            self.vocab_size,
            self.attr_columns(),
            self.max_len,
            self.hidden_dim,
            self.ffn_width(),
        );
        let embeddings = (v + 2) * d + t * d;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        let heads = d * v + v + d * a + a;
        embeddings + self.blocks * (attention + ffn + norms) + heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_icl: bool,
    pub no_ccl: bool,
    pub no_kd: bool,
    pub no_ap: bool,
    pub independent_training: bool,
}

impl Ablation {
    pub fn icl(&self) -> bool {
        !self.no_icl && !self.independent_training
    }

    pub fn ccl(&self) -> bool {
        !self.no_ccl && !self.independent_training
    }

    pub fn kd(&self) -> bool {
        !self.no_kd && !self.independent_training
    }

    pub fn ap(&self) -> bool {
        !self.no_ap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub decay_period: usize,
    pub decay_factor: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Global-norm clip applied per network; off when `None`.
    pub grad_clip: Option<f64>,
    /// Explicit per-network seeds; `seed + n` when absent.
    pub network_seeds: Option<Vec<u64>>,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 250,
            decay_period: 100,
            decay_factor: 0.5,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 42,
            batch_size: 256,
            eval_every: 5,
            grad_clip: None,
            network_seeds: None,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_networks: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr = {} must be positive", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            errs.push(format!("decay_factor = {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_period == 0 {
            errs.push("decay_period must be at least 1".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            errs.push(format!("betas = ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be positive".into());
        }
        if self.batch_size < 2 {
            errs.push(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                errs.push(format!("grad_clip = {c} must be positive"));
            }
        }
        if let Some(seeds) = &self.network_seeds {
            if seeds.len() != n_networks {
                errs.push(format!(
                    "network_seeds lists {} seeds for {n_networks} networks",
                    seeds.len()
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EmkdError::Config(errs))
        }
    }

    pub fn seeds_for(&self, n_networks: usize) -> Vec<u64> {
        match &self.network_seeds {
            Some(s) => s.clone(),
            None => (0..n_networks as u64).map(|n| self.seed.wrapping_add(n)).collect(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }
}

/// Step decay: `lr · factor^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.decay_period.max(1)) as i32;
    config.lr * config.decay_factor.powi(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig {
            vocab_size: 10,
            attr_size: 2,
            hidden_dim: 7,
            mask_prop: 1.5,
            tau: 20.0,
            n_views: 9,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(EmkdError::Config(errs)) => assert_eq!(errs.len(), 4, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig::for_vocab(10, 2, 5).validate().is_ok());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(99, &cfg), 0.001);
        assert!((lr_at(200, &cfg) - 0.00025).abs() < 1e-18);
    }

    #[test]
    fn default_seeds_are_offsets() {
        let cfg = TrainConfig {
            seed: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.seeds_for(3), vec![10, 11, 12]);
    }

    #[test]
    fn configs_round_trip_through_json() {
        let cfg = ModelConfig::for_vocab(5, 1, 4);
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
