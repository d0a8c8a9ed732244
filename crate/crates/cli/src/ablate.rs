//! Ablation grids: one training run per (variant, seed), shared seeds.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emkd_core::encoder::Ensemble;
use emkd_core::eval::{evaluate, EvalTarget};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{self, TrainRequest};
use crate::settings::RunConfig;
use crate::staging::{write_atomic, Staged};
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Full,
    NoIcl,
    NoCcl,
    NoKd,
    NoAp,
    Independent,
    /// One network trained with item prediction only.
    Single,
    Networks(usize),
    Views(usize),
}

impl Variant {
    /// The comparison set of the standard grid. `full` doubles as N=3.
    pub const STANDARD: [Variant; 10] = [
        Variant::Full,
        Variant::NoIcl,
        Variant::NoCcl,
        Variant::NoKd,
        Variant::NoAp,
        Variant::Independent,
        Variant::Single,
        Variant::Networks(1),
        Variant::Networks(2),
        Variant::Networks(4),
    ];

    pub fn apply(self, cfg: &mut RunConfig) {
        let a = &mut cfg.train.ablation;
        match self {
            Variant::Full => {}
            Variant::NoIcl => a.no_icl = true,
            Variant::NoCcl => a.no_ccl = true,
            Variant::NoKd => a.no_kd = true,
            Variant::NoAp => a.no_ap = true,
            Variant::Independent => a.independent_training = true,
            Variant::Single => {
                cfg.model.n_networks = 1;
                a.no_icl = true;
                a.no_ccl = true;
                a.no_kd = true;
                a.no_ap = true;
            }
            Variant::Networks(n) => cfg.model.n_networks = n,
            Variant::Views(m) => cfg.model.n_views = m,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoIcl => f.write_str("no-icl"),
            Variant::NoCcl => f.write_str("no-ccl"),
            Variant::NoKd => f.write_str("no-kd"),
            Variant::NoAp => f.write_str("no-ap"),
            Variant::Independent => f.write_str("independent"),
            Variant::Single => f.write_str("single"),
            Variant::Networks(n) => write!(f, "n{n}"),
            Variant::Views(m) => write!(f, "m{m}"),
        }
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad variant {s:?}")))
        };
        Ok(match s {
            "full" => Variant::Full,
            "no-icl" => Variant::NoIcl,
            "no-ccl" => Variant::NoCcl,
            "no-kd" => Variant::NoKd,
            "no-ap" => Variant::NoAp,
            "independent" => Variant::Independent,
            "single" => Variant::Single,
            _ if s.starts_with('n') => Variant::Networks(count(&s[1..])?),
            _ if s.starts_with('m') => Variant::Views(count(&s[1..])?),
            _ => return Err(CliError::Usage(format!("unknown variant {s:?}"))),
        })
    }
}

/// Test-split metrics of one trained run.
#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// NDCG@10 of the first two networks averaged, when N ≥ 2.
    pub pair_ndcg10: Option<f64>,
    /// NDCG@10 of the first network alone.
    pub first_ndcg10: f64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub runs: Vec<SeedResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

impl VariantResult {
    pub fn mean_ndcg10(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.ndcg10))
    }

    pub fn mean_pair_ndcg10(&self) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.pair_ndcg10).collect();
        (v.len() == self.runs.len() && !v.is_empty()).then(|| mean(v.into_iter()))
    }

    pub fn mean_first_ndcg10(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.first_ndcg10))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

impl Grid {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        let name = v.to_string();
        self.variants.iter().find(|r| r.variant == name)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<13}{:>8}{:>8}{:>9}{:>9}{:>9}{:>11}{:>11}",
            "variant", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "±std", "NDCG@10×2", "NDCG@10×1"
        )?;
        for v in &self.variants {
            let nd: Vec<f64> = v.runs.iter().map(|r| r.ndcg10).collect();
            let pair = v
                .mean_pair_ndcg10()
                .map_or_else(|| "-".to_string(), |p| format!("{p:.4}"));
            writeln!(
                f,
                "{:<13}{:>8.4}{:>8.4}{:>9.4}{:>9.4}{:>9.4}{:>11}{:>11.4}",
                v.variant,
                mean(v.runs.iter().map(|r| r.hr5)),
                mean(v.runs.iter().map(|r| r.hr10)),
                mean(v.runs.iter().map(|r| r.ndcg5)),
                v.mean_ndcg10(),
                std_dev(&nd),
                pair,
                v.mean_first_ndcg10(),
            )?;
        }
        write!(f, "test split, mean over seeds {:?}", self.seeds)
    }
}

fn prefix(e: &Ensemble, n: usize) -> Ensemble {
    Ensemble {
        networks: e.networks[..n].to_vec(),
        seeds: e.seeds[..n].to_vec(),
    }
}

fn run_one(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    root: &Path,
    explicit_max_len: bool,
    command: &[String],
) -> Result<SeedResult> {
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    cfg.train.seed = seed;
    cfg.train.network_seeds = None;
    let req = TrainRequest {
        out: root.join(variant.to_string()).join(format!("seed-{seed}")),
        command: command.to_vec(),
        explicit_max_len,
        resume: None,
    };
    let out = commands::train(&cfg, &req)?;
    let opts = out.config.eval.options();
    let sub = |n| -> Result<f64> {
        let e = prefix(&out.ensemble, n);
        Ok(evaluate(&e, &out.config.model, &out.split, EvalTarget::Test, opts)?.ndcg(10))
    };
    let pair_ndcg10 = if out.ensemble.len() >= 2 { Some(sub(2)?) } else { None };
    let first_ndcg10 = if out.ensemble.len() == 1 {
        out.report.test.ndcg(10)
    } else {
        sub(1)?
    };
    let t = &out.report.test;
    log::info!("{variant} seed {seed}: test NDCG@10 {:.4}", t.ndcg(10));
    Ok(SeedResult {
        seed,
        hr5: t.hr(5),
        hr10: t.hr(10),
        ndcg5: t.ndcg(5),
        ndcg10: t.ndcg(10),
        pair_ndcg10,
        first_ndcg10,
        dir: out.dir.strip_prefix(root).map(Path::to_path_buf).unwrap_or(out.dir.clone()),
    })
}

#[derive(Debug, Clone, Default)]
pub struct GridRequest {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub explicit_max_len: bool,
    /// Train runs concurrently on the rayon pool.
    pub parallel: bool,
    pub command: Vec<String>,
}

/// Seeds spaced so that per-network offsets never collide across runs.
pub fn grid_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base + 1000 * k).collect()
}

/// Trains every (variant, seed) pair into `out/<variant>/seed-<s>` and
/// writes `grid.json` and `grid.txt`.
pub fn run_grid(base: &RunConfig, req: &GridRequest) -> Result<Grid> {
    if req.variants.is_empty() || req.seeds.is_empty() {
        return Err(CliError::Usage("ablation needs at least one variant and one seed".into()));
    }
    let staged = Staged::new(&req.out)?;
    let jobs: Vec<(Variant, u64)> = req
        .variants
        .iter()
        .flat_map(|&v| req.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let root = staged.path();
    let run = |&(v, s): &(Variant, u64)| run_one(base, v, s, root, req.explicit_max_len, &req.command);
    let results: Vec<SeedResult> = if req.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut it = results.into_iter();
    let variants = req
        .variants
        .iter()
        .map(|v| VariantResult {
            variant: v.to_string(),
            runs: it.by_ref().take(req.seeds.len()).collect(),
        })
        .collect();
    let grid = Grid {
        seeds: req.seeds.clone(),
        variants,
    };
    let mut json = serde_json::to_vec_pretty(&grid)?;
    json.push(b'\n');
    write_atomic(&staged.file("grid.json"), &json)?;
    write_atomic(&staged.file("grid.txt"), format!("{grid}\n").as_bytes())?;
    staged.commit()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::STANDARD.into_iter().chain([Variant::Views(4)]) {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn single_switches_everything_off() {
        let mut cfg = RunConfig::default();
        Variant::Single.apply(&mut cfg);
        let a = cfg.train.ablation;
        assert_eq!(cfg.model.n_networks, 1);
        assert!(!a.icl() && !a.ccl() && !a.kd() && !a.ap());
    }
}
