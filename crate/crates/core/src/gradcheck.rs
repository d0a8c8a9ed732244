//! Finite-difference audit of every primitive and every loss term.

use emkd_tape::gradcheck::{primitive_cases, relative_error, FD_STEP};
use emkd_tape::{Graph, Tensor, Var};
use serde::Serialize;

use crate::config::{Ablation, ModelConfig};
use crate::data::{SplitDataset, UserSplit};
use crate::encoder::{init_ensemble, EncoderVars};
use crate::error::Result;
use crate::objective::{forward, BatchInputs, Forward, ForwardHooks};
use crate::rng;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
pub const LOSS_NAMES: [&str; 6] = ["mip", "ap", "icl", "ccl", "kd", "total"];

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Parameter tensor with the largest error, for loss checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_at: Option<String>,
}

impl CheckRow {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            worst_rel_err: worst,
            tolerance,
            passed: worst < tolerance,
            worst_at: None,
        }
    }
}

/// Scales the analytic gradient of the named check, so the suite can prove
/// it notices a wrong gradient.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub corrupt: Option<String>,
    pub seeds_per_primitive: u64,
}

fn corrupt_factor(opts: &SuiteOptions, name: &str) -> f64 {
    if opts.corrupt.as_deref() == Some(name) {
        1.05
    } else {
        1.0
    }
}

pub fn primitive_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let seeds = opts.seeds_per_primitive.max(1);
    primitive_cases()
        .into_iter()
        .map(|case| {
            let f = corrupt_factor(opts, case.name);
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let pair = (case.run)(s)?;
                for (a, n) in pair.analytic.iter().zip(&pair.numeric) {
                    let a: Vec<f64> = a.iter().map(|x| x * f).collect();
                    worst = worst.max(relative_error(&a, n));
                }
            }
            Ok(CheckRow::new(case.name, worst, PRIMITIVE_TOLERANCE))
        })
        .collect()
}

/// The small fixture model: d=8, T=6, |V|=12, |A|=3, N=2, M=2, B=3.
pub fn tiny_setup() -> Result<(ModelConfig, SplitDataset)> {
    let config = ModelConfig {
        hidden_dim: 8,
        heads: 2,
        blocks: 2,
        n_networks: 2,
        n_views: 2,
        mask_prop: 0.3,
        lambda: 0.5,
        mu: 0.5,
        tau: 0.8,
        // a larger spread than the usual init keeps every term well away
        // from flat regions
        init_std: 0.3,
        ..ModelConfig::for_vocab(12, 3, 6)
    };
    let user = |train: Vec<usize>, validation, test| UserSplit {
        prefix: train.clone(),
        train,
        validation,
        test,
    };
    let split = SplitDataset {
        users: vec![
            user(vec![0, 3, 5, 7, 9, 11], 1, 2),
            user(vec![2, 4, 6, 8], 10, 1),
            user(vec![1, 10, 5], 3, 0),
        ],
        n_items: 12,
        n_attributes: 3,
        item_attributes: (0..12).map(|i| vec![i % 3, (i / 3) % 3]).map(dedup).collect(),
        max_len: 6,
    };
    Ok((config, split))
}

fn dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn term_vars(f: &Forward) -> [Option<Var>; 6] {
    [
        Some(f.terms.mip),
        f.terms.ap,
        f.terms.icl,
        f.terms.ccl,
        f.terms.kd,
        Some(f.total),
    ]
}

/// Finite differences of all six terms with respect to every parameter of
/// every network in the tiny fixture.
pub fn loss_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let (config, split) = tiny_setup()?;
    let ensemble = init_ensemble(&config, &[11, 12])?;
    let users = [0, 1, 2];
    let inputs = BatchInputs::build(&config, &split, &users, |u| rng::stream(5, &[u as u64]))?;
    let dropout = [101, 202];
    let ablation = Ablation::default();
    let blocks = config.blocks;

    let mut tensors: Vec<Tensor> = ensemble
        .networks
        .iter()
        .flat_map(|n| n.tensors().into_iter().cloned())
        .collect();
    let per_net = tensors.len() / ensemble.len();
    let param_names: Vec<String> = ensemble
        .networks
        .iter()
        .enumerate()
        .flat_map(|(n, p)| p.names().into_iter().map(move |s| format!("net{n}.{s}")))
        .collect();

    let bind = |g: &mut Graph, ts: &[Tensor]| -> Vec<EncoderVars> {
        ts.chunks(per_net)
            .map(|chunk| EncoderVars::from_flat(chunk.iter().map(|t| g.param(t)).collect(), blocks))
            .collect()
    };

    let mut g = Graph::new();
    let vars = bind(&mut g, &tensors);
    let base = forward(&mut g, &config, &ablation, &vars, &inputs, Some(&dropout), &ForwardHooks::default())?;
    let flat_vars: Vec<Var> = vars.iter().flat_map(|v| v.all().to_vec()).collect();
    let mut analytic: Vec<Vec<Vec<f64>>> = Vec::new();
    for root in term_vars(&base) {
        let root = root.expect("all terms active");
        let grads = g.backward(root)?;
        analytic.push(
            flat_vars
                .iter()
                .zip(&tensors)
                .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
                .collect(),
        );
    }
    // teacher distributions are held at their base values, matching the
    // gradient stop of the analytic side
    let frozen: Vec<Vec<Tensor>> = base
        .logits
        .iter()
        .map(|blocks| blocks.iter().map(|&z| g.to_tensor(z)).collect())
        .collect();
    let hooks = ForwardHooks {
        frozen_teacher: Some(frozen),
        ..ForwardHooks::default()
    };

    let eval = |ts: &[Tensor]| -> Result<[f64; 6]> {
        let mut g = Graph::new();
        let vars = bind(&mut g, ts);
        let f = forward(&mut g, &config, &ablation, &vars, &inputs, Some(&dropout), &hooks)?;
        Ok(term_vars(&f).map(|v| g.item(v.expect("active"))))
    };

    let mut numeric: Vec<Vec<Vec<f64>>> = (0..6)
        .map(|_| tensors.iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    for ti in 0..tensors.len() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..tensors[ti].len() {
            let orig = tensors[ti].data()[j];
            tensors[ti].data_mut()[j] = orig + FD_STEP;
            let up = eval(&tensors)?;
            tensors[ti].data_mut()[j] = orig - FD_STEP;
            let down = eval(&tensors)?;
            tensors[ti].data_mut()[j] = orig;
            for k in 0..6 {
                numeric[k][ti][j] = (up[k] - down[k]) / (2.0 * FD_STEP);
            }
        }
    }

    Ok(LOSS_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let f = corrupt_factor(opts, name);
            let worst = analytic[k]
                .iter()
                .zip(&numeric[k])
                .map(|(a, n)| {
                    let a: Vec<f64> = a.iter().map(|x| x * f).collect();
                    relative_error(&a, n)
                })
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            let mut row = CheckRow::new(format!("loss:{name}"), worst.1, LOSS_TOLERANCE);
            row.worst_at = Some(param_names[worst.0].clone());
            row
        })
        .collect())
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_checks(opts)?;
    rows.extend(loss_checks(opts)?);
    Ok(rows)
}
