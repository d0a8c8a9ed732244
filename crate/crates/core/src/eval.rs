//! Ensemble inference and full-ranking HR/NDCG.

use std::fmt;

use emkd_tape::Graph;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelConfig};
use crate::data::SplitDataset;
use crate::encoder::{encode, item_logits, left_pad, Ensemble, SeqBatch};
use crate::error::{EmkdError, Result};

pub const CUTOFFS: [usize; 2] = [5, 10];

/// Keeps the last `seq_len − 1` items, left-pads, and appends `[mask]`.
pub fn prepare_inference_seq(
    history: &[usize],
    seq_len: usize,
    mask_id: usize,
    pad_id: usize,
) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(EmkdError::Contract("cannot predict from an empty history".into()));
    }
    let mut seq = left_pad(history, seq_len - 1, pad_id);
    seq.push(mask_id);
    Ok(seq)
}

/// Mode-aware input: cloze inference appends `[mask]`; next-item inference
/// reads the final position of the most recent `T` items.
pub fn inference_input(history: &[usize], config: &ModelConfig) -> Result<Vec<usize>> {
    match config.mode {
        Mode::BidirectionalMlm => {
            prepare_inference_seq(history, config.max_len, config.mask_id(), config.pad_id())
        }
        Mode::AutoregressiveNip => {
            if history.is_empty() {
                return Err(EmkdError::Contract("cannot predict from an empty history".into()));
            }
            Ok(left_pad(history, config.max_len, config.pad_id()))
        }
    }
}

/// Element-wise mean of per-network logits, reduced in network order.
pub fn average_logits(per_network: &[Vec<f64>]) -> Vec<f64> {
    let n = per_network.len() as f64;
    let mut out = vec![0.0; per_network.first().map_or(0, Vec::len)];
    for logits in per_network {
        out.iter_mut().zip(logits).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Final-position logits of every network for prepared sequences:
/// `[network][sequence][item]`.
pub fn network_scores(
    ensemble: &Ensemble,
    config: &ModelConfig,
    seqs: &[Vec<usize>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let batch = SeqBatch::new(seqs, config.max_len)?;
    let t = config.max_len;
    let last: Vec<usize> = (0..seqs.len()).map(|b| b * t + t - 1).collect();
    ensemble
        .networks
        .iter()
        .map(|params| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, false);
            let h = encode(&mut g, config, &vars, &batch, None)?;
            let rows = g.gather_rows(h, &last)?;
            let z = item_logits(&mut g, &vars, rows)?;
            Ok(g.value(z).chunks(config.vocab_size).map(<[f64]>::to_vec).collect())
        })
        .collect()
}

/// Averaged logits for each prepared sequence.
pub fn ensemble_scores(
    ensemble: &Ensemble,
    config: &ModelConfig,
    seqs: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let per_net = network_scores(ensemble, config, seqs)?;
    Ok((0..seqs.len())
        .map(|s| {
            let rows: Vec<Vec<f64>> = per_net.iter().map(|net| net[s].clone()).collect();
            average_logits(&rows)
        })
        .collect())
}

pub fn ensemble_predict(ensemble: &Ensemble, config: &ModelConfig, seq: &[usize]) -> Result<Vec<f64>> {
    Ok(ensemble_scores(ensemble, config, &[seq.to_vec()])?.remove(0))
}

/// 1-based rank; ties go to the smaller item id.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

/// `(HR@K, NDCG@K)` averaged over `ranks`.
pub fn metrics(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    (hr / n, ndcg / n)
}

/// Expected NDCG@K when the target's rank is uniform over `n_items`.
pub fn chance_ndcg(n_items: usize, k: usize) -> f64 {
    (1..=k.min(n_items))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum::<f64>()
        / n_items as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: EvalTarget,
    pub n_users: usize,
    pub cutoffs: Vec<CutoffMetrics>,
    /// Per-user ranks in user order, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranks: Option<Vec<usize>>,
}

impl EvalReport {
    pub fn from_ranks(target: EvalTarget, ranks: Vec<usize>, keep_ranks: bool) -> Self {
        let cutoffs = CUTOFFS
            .iter()
            .map(|&k| {
                let (hr, ndcg) = metrics(&ranks, k);
                CutoffMetrics { k, hr, ndcg }
            })
            .collect();
        Self {
            target,
            n_users: ranks.len(),
            cutoffs,
            ranks: keep_ranks.then_some(ranks),
        }
    }

    pub fn at(&self, k: usize) -> Option<CutoffMetrics> {
        self.cutoffs.iter().copied().find(|c| c.k == k)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.ndcg)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |c| c.hr)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut head = String::new();
        let mut vals = String::new();
        for c in &self.cutoffs {
            head.push_str(&format!("{:>10}", format!("HR@{}", c.k)));
            vals.push_str(&format!("{:>10.4}", c.hr));
        }
        for c in &self.cutoffs {
            head.push_str(&format!("{:>10}", format!("NDCG@{}", c.k)));
            vals.push_str(&format!("{:>10.4}", c.ndcg));
        }
        writeln!(f, "{head}")?;
        write!(f, "{vals}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Drops the user's history items from the candidates.
    pub exclude_seen: bool,
    pub keep_ranks: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_seen: false,
            keep_ranks: false,
            batch_size: 256,
        }
    }
}

/// Ranks every user's held-out item against the full item set.
pub fn evaluate(
    ensemble: &Ensemble,
    config: &ModelConfig,
    split: &SplitDataset,
    target: EvalTarget,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut ranks = Vec::with_capacity(split.users.len());
    for chunk in split.users.chunks(opts.batch_size.max(1)) {
        let histories: Vec<Vec<usize>> = chunk
            .iter()
            .map(|u| match target {
                EvalTarget::Validation => u.prefix.clone(),
                EvalTarget::Test => u.test_history(),
            })
            .collect();
        let seqs = histories
            .iter()
            .map(|h| inference_input(h, config))
            .collect::<Result<Vec<_>>>()?;
        let scores = ensemble_scores(ensemble, config, &seqs)?;
        for ((u, history), mut s) in chunk.iter().zip(&histories).zip(scores) {
            let goal = match target {
                EvalTarget::Validation => u.validation,
                EvalTarget::Test => u.test,
            };
            if opts.exclude_seen {
                for &i in history {
                    if i != goal {
                        s[i] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of(&s, goal));
        }
    }
    Ok(EvalReport::from_ranks(target, ranks, opts.keep_ranks))
}
