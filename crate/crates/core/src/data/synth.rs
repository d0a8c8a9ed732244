//! Planted first-order Markov corpus for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{preprocess, Dataset, Interaction, ItemAttributes};
use crate::error::{EmkdError, Result};
use crate::rng;

/// Items per cluster along the successor cycle.
const CLUSTER_SIZE: usize = 5;
/// Probability of stepping to the planted successor.
const P_NEXT: f64 = 0.65;
/// Probability of jumping inside the current cluster.
const P_CLUSTER: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub avg_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 50,
            n_attrs: 10,
            avg_len: 20,
            seed: 0,
        }
    }
}

/// Raw generator output together with the planted structure.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub interactions: Vec<Interaction>,
    pub attributes: Vec<ItemAttributes>,
    /// Emitted item sequences before any filtering.
    pub sequences: Vec<Vec<usize>>,
    /// Row-stochastic planted transition matrix.
    pub transition: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
}

fn check(cfg: &SynthConfig) -> Result<()> {
    let mut errs = Vec::new();
    if cfg.n_items < 20 {
        errs.push(format!("n_items = {} must be at least 20", cfg.n_items));
    }
    if cfg.avg_len < 8 {
        errs.push(format!("avg_len = {} must be at least 8", cfg.avg_len));
    }
    if cfg.n_users < 10 {
        errs.push(format!("n_users = {} must be at least 10", cfg.n_users));
    }
    if cfg.n_attrs == 0 {
        errs.push("n_attrs must be at least 1".into());
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(EmkdError::Config(errs))
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (j, &p) in row.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    check(cfg)?;
    let n = cfg.n_items;
    let mut rng = rng::stream(cfg.seed, &[rng::TAG_SYNTH]);

    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(&mut rng);
    let mut clusters = vec![0; n];
    let mut successor = vec![0; n];
    for (k, &item) in cycle.iter().enumerate() {
        clusters[item] = k / CLUSTER_SIZE;
        successor[item] = cycle[(k + 1) % n];
    }

    let p_noise = 1.0 - P_NEXT - P_CLUSTER;
    let transition: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![p_noise / (n - 1) as f64; n];
            row[i] = 0.0;
            let mates: Vec<usize> = (0..n).filter(|&j| j != i && clusters[j] == clusters[i]).collect();
            let mut next = P_NEXT;
            if mates.is_empty() {
                next += P_CLUSTER;
            } else {
                for &j in &mates {
                    row[j] += P_CLUSTER / mates.len() as f64;
                }
            }
            row[successor[i]] += next;
            row
        })
        .collect();

    let attributes: Vec<ItemAttributes> = (0..n)
        .map(|i| {
            let own = clusters[i] % cfg.n_attrs;
            let mut set = vec![own];
            let extra = rng.random_range(0..3usize).min(cfg.n_attrs - 1);
            while set.len() < 1 + extra {
                let a = rng.random_range(0..cfg.n_attrs);
                if !set.contains(&a) {
                    set.push(a);
                }
            }
            set.sort_unstable();
            ItemAttributes {
                item: i.to_string(),
                attributes: set.iter().map(|a| format!("a{a}")).collect(),
            }
        })
        .collect();

    let lo = cfg.avg_len.div_ceil(2);
    let hi = cfg.avg_len + cfg.avg_len / 2;
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut interactions = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(lo..=hi);
        let mut item = rng.random_range(0..n);
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            seq.push(item);
            interactions.push(Interaction {
                user: u.to_string(),
                item: item.to_string(),
                timestamp: t as i64,
            });
            item = sample_row(&transition[item], &mut rng);
        }
        sequences.push(seq);
    }
    Ok(SynthCorpus {
        interactions,
        attributes,
        sequences,
        transition,
        clusters,
    })
}

/// Generates and preprocesses a synthetic corpus.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let corpus = synth_corpus(cfg)?;
    preprocess(&corpus.interactions, &corpus.attributes)
}
