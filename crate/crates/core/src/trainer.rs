//! Joint optimization of the ensemble.

use std::io::Write;

use emkd_tape::Graph;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch_iter, SplitDataset};
use crate::encoder::{init_ensemble, Ensemble};
use crate::error::{EmkdError, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, EvalTarget};
use crate::losses::LossReport;
use crate::objective::{forward, BatchInputs, ForwardHooks};
use crate::rng;

/// Validation metrics recorded at an evaluated epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl From<&EvalReport> for ValidationSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            hr5: r.hr(5),
            hr10: r.hr(10),
            ndcg5: r.ndcg(5),
            ndcg10: r.ndcg(10),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based number of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<ValidationSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub ndcg10: f64,
}

/// Earliest epoch with the highest validation NDCG@10.
pub fn select_best(records: &[EpochRecord]) -> Option<BestRecord> {
    let mut best: Option<BestRecord> = None;
    for r in records {
        if let Some(v) = r.validation {
            if best.is_none_or(|b| v.ndcg10 > b.ndcg10) {
                best = Some(BestRecord {
                    epoch: r.epoch,
                    ndcg10: v.ndcg10,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble: Ensemble,
    pub optimizers: Vec<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
    /// Parameters at `best.epoch`.
    pub best_ensemble: Option<Ensemble>,
    pub hooks: ForwardHooks,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate(model.n_networks)?;
        let ensemble = init_ensemble(&model, &train.seeds_for(model.n_networks))?;
        let optimizers = ensemble
            .networks
            .iter()
            .map(|p| AdamState::for_tensors(&p.tensors()))
            .collect();
        Ok(Self {
            model,
            train,
            ensemble,
            optimizers,
            epoch: 0,
            history: Vec::new(),
            best: None,
            best_ensemble: None,
            hooks: ForwardHooks::default(),
        })
    }

    fn check_split(&self, split: &SplitDataset) -> Result<()> {
        if split.n_items != self.model.vocab_size || split.n_attributes != self.model.attr_size {
            return Err(EmkdError::Contract(format!(
                "split has {} items / {} attributes, model expects {} / {}",
                split.n_items, split.n_attributes, self.model.vocab_size, self.model.attr_size
            )));
        }
        Ok(())
    }

    /// One pass over all users; returns the mean per-batch report.
    pub fn train_epoch(&mut self, split: &SplitDataset) -> Result<LossReport> {
        self.check_split(split)?;
        let e = self.epoch as u64;
        let base = self.train.seed;
        let mut shuffle = rng::stream(base, &[rng::TAG_SHUFFLE, e]);
        let batches = batch_iter(split, self.train.batch_size, &mut shuffle)?;
        let hp = AdamHyper {
            lr: self.train.lr_at(self.epoch),
            beta1: self.train.betas.0,
            beta2: self.train.betas.1,
            eps: self.train.adam_eps,
        };
        let names = self.ensemble.networks[0].names();
        let mut reports = Vec::with_capacity(batches.len());
        for (bi, users) in batches.iter().enumerate() {
            let inputs = BatchInputs::build(&self.model, split, users, |u| {
                rng::stream(base, &[rng::TAG_VIEWS, e, u as u64])
            })?;
            let dropout: Vec<u64> = self
                .ensemble
                .seeds
                .iter()
                .map(|&s| rng::derive_seed(s, &[rng::TAG_DROPOUT, e, bi as u64]))
                .collect();
            let mut g = Graph::new();
            let vars: Vec<_> = self
                .ensemble
                .networks
                .iter()
                .map(|p| p.bind(&mut g, true))
                .collect();
            let out = forward(
                &mut g,
                &self.model,
                &self.train.ablation,
                &vars,
                &inputs,
                Some(&dropout),
                &self.hooks,
            )?;
            if !out.report.is_finite() {
                return Err(EmkdError::NonFinite(format!(
                    "epoch {} batch {bi} ({} users): {:?}",
                    self.epoch + 1,
                    users.len(),
                    out.report
                )));
            }
            let grads = g.backward(out.total)?;
            for (n, params) in self.ensemble.networks.iter_mut().enumerate() {
                let mut gs: Vec<Vec<f64>> = vars[n]
                    .all()
                    .iter()
                    .zip(params.tensors())
                    .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
                    .collect();
                if let Some(max_norm) = self.train.grad_clip {
                    clip_global_norm(&mut gs, max_norm);
                }
                let mut tensors = params.tensors_mut();
                adam_step(&mut tensors, &gs, &names, &mut self.optimizers[n], hp)?;
            }
            reports.push(out.report);
        }
        self.epoch += 1;
        Ok(LossReport::mean(&reports))
    }

    pub fn validate(&self, split: &SplitDataset) -> Result<EvalReport> {
        evaluate(
            &self.ensemble,
            &self.model,
            split,
            EvalTarget::Validation,
            EvalOptions::default(),
        )
    }

    /// Trains until `train.epochs`, evaluating every `eval_every` epochs and
    /// after the last one; each finished epoch is appended to `log` as JSON.
    pub fn fit(&mut self, split: &SplitDataset, mut log: Option<&mut dyn Write>) -> Result<()> {
        while self.epoch < self.train.epochs {
            let lr = self.train.lr_at(self.epoch);
            let loss = self.train_epoch(split)?;
            let done = self.epoch;
            let validation = if done.is_multiple_of(self.train.eval_every) || done == self.train.epochs {
                let report = self.validate(split)?;
                let v = ValidationSummary::from(&report);
                if self.best.is_none_or(|b| v.ndcg10 > b.ndcg10) {
                    self.best = Some(BestRecord {
                        epoch: done,
                        ndcg10: v.ndcg10,
                    });
                    self.best_ensemble = Some(self.ensemble.clone());
                }
                Some(v)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: done,
                lr,
                loss,
                validation,
            };
            log::info!(
                "epoch {done}: total {:.4} mip {:.4}{}",
                loss.total,
                loss.mip,
                validation.map_or(String::new(), |v| format!(" val NDCG@10 {:.4}", v.ndcg10))
            );
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|e| EmkdError::io("metrics log", e))?;
            }
            self.history.push(record);
        }
        Ok(())
    }

    /// Best validated parameters, or the current ones if nothing was evaluated.
    pub fn best_or_current(&self) -> &Ensemble {
        self.best_ensemble.as_ref().unwrap_or(&self.ensemble)
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, ndcg10: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.001,
            loss: LossReport::default(),
            validation: ndcg10.map(|n| ValidationSummary {
                hr5: 0.0,
                hr10: 0.0,
                ndcg5: 0.0,
                ndcg10: n,
            }),
        }
    }

    #[test]
    fn best_is_earliest_maximum() {
        let r = [rec(1, None), rec(5, Some(0.2)), rec(10, Some(0.3)), rec(15, Some(0.3))];
        assert_eq!(select_best(&r).unwrap().epoch, 10);
        assert!(select_best(&[rec(1, None)]).is_none());
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut g = vec![vec![3.0], vec![4.0]];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
    }
}
