//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use emkd_core::data::SynthConfig;
use emkd_core::eval::EvalOptions;
use emkd_core::{EmkdError, Mode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Tsv,
    Ml1m,
    Synth,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Tsv => "tsv",
            Format::Ml1m => "ml1m",
            Format::Synth => "synth",
        }
    }

    /// Sequence length used when none is configured.
    pub fn default_max_len(self) -> usize {
        match self {
            Format::Ml1m => 200,
            _ => 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mlm,
    Nip,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mlm => Mode::BidirectionalMlm,
            ModeArg::Nip => Mode::AutoregressiveNip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: Format,
    /// Cached dataset, or a raw file for `tsv`/`ml1m`.
    pub path: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub exclude_seen: bool,
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            exclude_seen: self.exclude_seen,
            ..EvalOptions::default()
        }
    }
}

/// Fully resolved configuration of one run. Item and attribute counts in
/// `model` are filled in from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

/// A config file keeps `max_len` optional so the format default applies.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<toml::Table>,
    train: Option<TrainConfig>,
    data: Option<DataSection>,
    eval: Option<EvalSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<(Self, bool), CliError> {
        let file: FileConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let model_table = file.model.unwrap_or_default();
        let has_max_len = model_table.contains_key("max_len");
        let model: ModelConfig = toml::Value::Table(model_table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config [model]: {e}")))?;
        Ok((
            Self {
                model,
                train: file.train.unwrap_or_default(),
                data: file.data.unwrap_or_default(),
                eval: file.eval.unwrap_or_default(),
            },
            has_max_len,
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, bool), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| EmkdError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every model and training constraint violation in one error.
    pub fn validate(&self) -> Result<(), EmkdError> {
        let mut errs = Vec::new();
        for r in [self.model.validate(), self.train.validate(self.model.n_networks)] {
            if let Err(EmkdError::Config(e)) = r {
                errs.extend(e);
            } else {
                r?;
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EmkdError::Config(errs))
        }
    }
}

/// Flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Default)]
pub struct Overrides {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cached dataset (from `preprocess`) or raw input for --format tsv/ml1m
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Attribute sidecar for raw inputs
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_networks: Option<usize>,
    #[arg(long)]
    pub n_views: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub mask_prop: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub no_icl: bool,
    #[arg(long)]
    pub no_ccl: bool,
    #[arg(long)]
    pub no_kd: bool,
    #[arg(long)]
    pub no_ap: bool,
    #[arg(long)]
    pub independent_training: bool,
    /// Remove history items from the ranked candidates
    #[arg(long)]
    pub exclude_seen: bool,
    /// Synthetic corpus: number of users
    #[arg(long)]
    pub synth_users: Option<usize>,
    #[arg(long)]
    pub synth_items: Option<usize>,
    #[arg(long)]
    pub synth_attrs: Option<usize>,
    #[arg(long)]
    pub synth_len: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

impl Overrides {
    /// Config file (or defaults) with every given flag applied on top.
    /// Returns whether `max_len` was set explicitly.
    pub fn resolve(&self) -> Result<(RunConfig, bool), CliError> {
        let (mut cfg, mut has_max_len) = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => (RunConfig::default(), false),
        };
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.epochs => t.epochs);
        set!(self.n_networks => m.n_networks);
        set!(self.n_views => m.n_views);
        set!(self.tau => m.tau);
        set!(self.lambda => m.lambda);
        set!(self.mu => m.mu);
        set!(self.mask_prop => m.mask_prop);
        set!(self.hidden_dim => m.hidden_dim);
        set!(self.dropout => m.dropout_rate);
        set!(self.lr => t.lr);
        set!(self.batch_size => t.batch_size);
        set!(self.eval_every => t.eval_every);
        set!(self.seed => t.seed);
        if let Some(v) = self.max_len {
            m.max_len = v;
            has_max_len = true;
        }
        if let Some(mode) = self.mode {
            m.mode = mode.into();
        }
        let a = &mut t.ablation;
        a.no_icl |= self.no_icl;
        a.no_ccl |= self.no_ccl;
        a.no_kd |= self.no_kd;
        a.no_ap |= self.no_ap;
        a.independent_training |= self.independent_training;
        cfg.eval.exclude_seen |= self.exclude_seen;

        let d = &mut cfg.data;
        set!(self.format => d.format);
        if self.dataset.is_some() {
            d.path = self.dataset.clone();
        }
        if self.attributes.is_some() {
            d.attributes = self.attributes.clone();
        }
        set!(self.synth_users => d.synth.n_users);
        set!(self.synth_items => d.synth.n_items);
        set!(self.synth_attrs => d.synth.n_attrs);
        set!(self.synth_len => d.synth.avg_len);
        set!(self.synth_seed => d.synth.seed);
        Ok((cfg, has_max_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_sections_and_overrides() {
        let (cfg, has_len) = RunConfig::from_toml(
            "[model]\nhidden_dim = 64\n[train]\nepochs = 7\n[train.ablation]\nno_kd = true\n[data]\nformat = \"synth\"\n",
        )
        .unwrap();
        assert!(!has_len);
        assert_eq!(cfg.model.hidden_dim, 64);
        assert_eq!(cfg.train.epochs, 7);
        assert!(cfg.train.ablation.no_kd);
        assert_eq!(cfg.data.format, Format::Synth);
        assert_eq!(cfg.model.n_networks, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nhiden_dim = 64\n").is_err());
    }

    #[test]
    fn all_violations_reported_together() {
        let mut cfg = RunConfig {
            model: ModelConfig::for_vocab(10, 2, 5),
            ..RunConfig::default()
        };
        cfg.model.tau = 0.0;
        cfg.model.lambda = 3.0;
        cfg.train.lr = -1.0;
        match cfg.validate() {
            Err(EmkdError::Config(e)) => assert_eq!(e.len(), 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }
}
