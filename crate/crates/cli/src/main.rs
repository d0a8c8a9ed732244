use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emkd_cli::ablate::{grid_seeds, run_grid, GridRequest, Variant};
use emkd_cli::commands::{self, TrainRequest};
use emkd_cli::manifest::RunManifest;
use emkd_cli::settings::{DataSection, Format, Overrides};
use emkd_cli::{CliError, Result};
use emkd_core::data::SynthConfig;
use emkd_core::eval::EvalTarget;
use emkd_core::gradcheck::SuiteOptions;

#[derive(Parser)]
#[command(name = "emkd", version, about = "Ensemble sequence recommender with mutual distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw interactions into a cached dataset with a stats report
    Preprocess {
        #[arg(long, value_enum)]
        format: Format,
        /// Raw interaction file (not used for --format synth)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Attribute file: `item<TAB>a,b` for tsv, movies.dat for ml1m
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train an ensemble; writes manifest, metric log, checkpoints and report
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a full checkpoint (last.ckpt)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Re-run the configuration recorded in a manifest
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Rank the whole item set for each user and report HR/NDCG
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Dataset; defaults to the one recorded beside the checkpoint
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long)]
        exclude_seen: bool,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of every primitive and loss
    Gradcheck {
        /// Scale one analytic gradient by 1.05 to prove failures are caught
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Train a grid of ablation variants over shared seeds
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants (full, no-icl, no-ccl, no-kd, no-ap,
        /// independent, single, n<N>, m<M>); default is the standard grid
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Number of seeds per variant
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    synth_users: Option<usize>,
    #[arg(long)]
    synth_items: Option<usize>,
    #[arg(long)]
    synth_attrs: Option<usize>,
    #[arg(long)]
    synth_len: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_users: self.synth_users.unwrap_or(d.n_users),
            n_items: self.synth_items.unwrap_or(d.n_items),
            n_attrs: self.synth_attrs.unwrap_or(d.n_attrs),
            avg_len: self.synth_len.unwrap_or(d.avg_len),
            seed: self.synth_seed.unwrap_or(d.seed),
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            format,
            input,
            attributes,
            out,
            synth,
        } => {
            if format != Format::Synth && input.is_none() {
                return Err(CliError::Usage("--input is required for raw formats".into()));
            }
            let data = DataSection {
                format,
                path: input,
                attributes,
                synth: synth.config(),
            };
            let o = commands::preprocess(&data, &out, argv)?;
            println!("{}", o.stats);
            println!("fingerprint {}", o.fingerprint);
            println!("wrote {}", o.dir.display());
        }
        Command::Train {
            overrides,
            out,
            resume,
            manifest,
        } => {
            let (cfg, explicit) = match manifest {
                Some(p) => (RunManifest::load(&p)?.config, true),
                None => overrides.resolve()?,
            };
            let req = TrainRequest {
                out,
                command: argv,
                explicit_max_len: explicit,
                resume,
            };
            let o = commands::train(&cfg, &req)?;
            if let Some(b) = o.report.best {
                println!("best epoch {} (validation NDCG@10 {:.4})", b.epoch, b.ndcg10);
            }
            println!("validation\n{}", o.report.validation);
            println!("test\n{}", o.report.test);
            println!("wrote {}", o.dir.display());
        }
        Command::Eval {
            checkpoint,
            split,
            dataset,
            format,
            exclude_seen,
            out,
        } => {
            let data = match (dataset, format) {
                (None, Some(Format::Synth)) => Some(commands::synth_section()),
                (Some(path), f) => Some(DataSection {
                    format: f.unwrap_or_default(),
                    path: Some(path),
                    ..DataSection::default()
                }),
                (None, _) => None,
            };
            let target = match split {
                SplitArg::Val => EvalTarget::Validation,
                SplitArg::Test => EvalTarget::Test,
            };
            let report = commands::eval(&checkpoint, data.as_ref(), target, exclude_seen)?;
            println!("{report}");
            if let Some(p) = out {
                let mut bytes = serde_json::to_vec_pretty(&report)?;
                bytes.push(b'\n');
                emkd_cli::staging::write_atomic(&p, &bytes)?;
            }
        }
        Command::Gradcheck { corrupt, seeds } => {
            let opts = SuiteOptions {
                corrupt,
                seeds_per_primitive: seeds,
            };
            let rows = commands::gradcheck(&opts)?;
            print!("{}", commands::render_checks(&rows));
            let failed = commands::failed_checks(&rows);
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
        }
        Command::Ablate {
            overrides,
            out,
            variants,
            seeds,
            parallel,
        } => {
            let (cfg, explicit) = overrides.resolve()?;
            let variants = if variants.is_empty() {
                Variant::STANDARD.to_vec()
            } else {
                variants.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let req = GridRequest {
                variants,
                seeds: grid_seeds(cfg.train.seed, seeds),
                out,
                explicit_max_len: explicit,
                parallel,
                command: argv,
            };
            println!("{}", run_grid(&cfg, &req)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMKD_LOG", "info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
