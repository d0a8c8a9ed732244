//! Implementations behind the `emkd` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use emkd_core::checkpoint::Checkpoint;
use emkd_core::data::{split_leave_one_out, Dataset, SplitDataset};
use emkd_core::encoder::Ensemble;
use emkd_core::eval::{evaluate, EvalReport, EvalTarget};
use emkd_core::gradcheck::{run_suite, CheckRow, SuiteOptions};
use emkd_core::trainer::{BestRecord, Trainer};
use emkd_core::EmkdError;
use serde::Serialize;

use crate::dataset;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::settings::{DataSection, Format, RunConfig};
use crate::staging::{write_atomic, Staged};
use crate::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const STATS_FILE: &str = "stats.txt";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessOutcome {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub stats: emkd_core::data::DatasetStats,
}

/// Ingests and filters a raw file (or generates the synthetic corpus) and
/// writes `dataset.json`, `stats.txt` and a manifest into `out`.
pub fn preprocess(
    data: &DataSection,
    out: &Path,
    command: Vec<String>,
) -> Result<PreprocessOutcome> {
    let ds = dataset::load(data)?;
    let fingerprint = ds.fingerprint()?;
    let staged = Staged::new(out)?;
    write_atomic(&staged.file(DATASET_FILE), &ds.to_cache_bytes()?)?;
    write_atomic(&staged.file(STATS_FILE), format!("{}\n", ds.stats).as_bytes())?;
    let config = RunConfig {
        data: data.clone(),
        ..RunConfig::default()
    };
    RunManifest::new(command, config, fingerprint.clone(), ds.stats.clone())
        .save(&staged.file(MANIFEST_FILE))?;
    let dir = staged.commit()?;
    Ok(PreprocessOutcome {
        dir,
        fingerprint,
        stats: ds.stats,
    })
}

/// Fills in the dataset-dependent parts of the model config.
pub fn bind_dataset(cfg: &mut RunConfig, ds: &Dataset, explicit_max_len: bool) {
    cfg.model.vocab_size = ds.n_items();
    cfg.model.attr_size = ds.n_attributes();
    if !explicit_max_len {
        cfg.model.max_len = dataset::default_max_len(ds, &cfg.data);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub best: Option<BestRecord>,
    pub validation: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
    pub ensemble: Ensemble,
    pub config: RunConfig,
    pub split: SplitDataset,
}

/// Everything `train` needs besides the configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub out: PathBuf,
    pub command: Vec<String>,
    pub explicit_max_len: bool,
    /// Continue from a full checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

/// Trains an ensemble and writes the metric log, checkpoints, evaluation
/// report and manifest. Nothing appears at `req.out` unless all succeed.
pub fn train(cfg: &RunConfig, req: &TrainRequest) -> Result<TrainOutcome> {
    let ds = dataset::load(&cfg.data)?;
    let fingerprint = ds.fingerprint()?;
    let mut cfg = cfg.clone();
    bind_dataset(&mut cfg, &ds, req.explicit_max_len);
    cfg.validate()?;
    let split = split_leave_one_out(&ds, cfg.model.max_len)?;

    let mut trainer = match &req.resume {
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
        Some(path) => resume_trainer(path, &cfg, &fingerprint)?,
    };

    let staged = Staged::new(&req.out)?;
    RunManifest::new(req.command.clone(), cfg.clone(), fingerprint.clone(), ds.stats.clone())
        .save(&staged.file(MANIFEST_FILE))?;
    {
        let path = staged.file(METRICS_FILE);
        let file = File::create(&path).map_err(|e| EmkdError::io(&path, e))?;
        let mut log = BufWriter::new(file);
        for record in &trainer.history {
            writeln!(log, "{}", serde_json::to_string(record)?).map_err(|e| EmkdError::io(&path, e))?;
        }
        trainer.fit(&split, Some(&mut log))?;
        log.flush().map_err(|e| EmkdError::io(&path, e))?;
    }

    let fp = Some(fingerprint);
    Checkpoint::from_trainer(&trainer, fp.clone()).save(&staged.file(LAST_CHECKPOINT))?;
    let best = trainer.best_or_current().clone();
    Checkpoint::weights_only(&trainer, &best, fp).save(&staged.file(BEST_CHECKPOINT))?;

    let opts = cfg.eval.options();
    let report = RunReport {
        best: trainer.best,
        validation: evaluate(&best, &cfg.model, &split, EvalTarget::Validation, opts)?,
        test: evaluate(&best, &cfg.model, &split, EvalTarget::Test, opts)?,
    };
    write_json(&staged.file(REPORT_FILE), &report)?;
    let dir = staged.commit()?;
    Ok(TrainOutcome {
        dir,
        report,
        ensemble: best,
        config: cfg,
        split,
    })
}

fn resume_trainer(path: &Path, cfg: &RunConfig, fingerprint: &str) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    check_fingerprint(&ckpt, fingerprint)?;
    if ckpt.optimizers.is_none() {
        return Err(CliError::Usage(format!(
            "{} holds weights only; resume needs a full checkpoint",
            path.display()
        )));
    }
    let mut t = ckpt.into_trainer()?;
    t.train.epochs = cfg.train.epochs;
    // the best parameters live in a sibling file
    if let Some(best) = path.parent().map(|d| d.join(BEST_CHECKPOINT)) {
        if best.exists() && t.best.is_some() {
            t.best_ensemble = Some(Checkpoint::load(&best)?.ensemble);
        }
    }
    Ok(t)
}

fn check_fingerprint(ckpt: &Checkpoint, found: &str) -> Result<()> {
    match &ckpt.dataset_fingerprint {
        Some(expected) if expected != found => Err(CliError::Fingerprint {
            expected: expected.clone(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

/// Evaluates a checkpoint. Without an explicit dataset, the data section of
/// the manifest next to the checkpoint is used.
pub fn eval(
    checkpoint: &Path,
    data: Option<&DataSection>,
    target: EvalTarget,
    exclude_seen: bool,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let section = match data {
        Some(d) => d.clone(),
        None => {
            let manifest = checkpoint
                .parent()
                .map(|d| d.join(MANIFEST_FILE))
                .filter(|p| p.exists())
                .ok_or_else(|| {
                    CliError::Usage("no dataset given and no manifest beside the checkpoint".into())
                })?;
            RunManifest::load(&manifest)?.config.data
        }
    };
    let ds = dataset::load(&section)?;
    check_fingerprint(&ckpt, &ds.fingerprint()?)?;
    let split = split_leave_one_out(&ds, ckpt.model.max_len)?;
    let opts = emkd_core::eval::EvalOptions {
        exclude_seen,
        ..Default::default()
    };
    Ok(evaluate(&ckpt.ensemble, &ckpt.model, &split, target, opts)?)
}

/// Runs the finite-difference suite; an error lists the failing checks.
pub fn gradcheck(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    Ok(run_suite(opts)?)
}

pub fn render_checks(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<22}{:>14}{:>12}  {}\n", "check", "worst rel err", "tolerance", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<22}{:>14.3e}{:>12.0e}  {}{}\n",
            r.name,
            r.worst_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" },
            r.worst_at.as_ref().map_or(String::new(), |w| format!(" (worst at {w})")),
        ));
    }
    s
}

pub fn failed_checks(rows: &[CheckRow]) -> Vec<String> {
    rows.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect()
}

/// Default data section for a format with no further flags.
pub fn synth_section() -> DataSection {
    DataSection {
        format: Format::Synth,
        ..DataSection::default()
    }
}
