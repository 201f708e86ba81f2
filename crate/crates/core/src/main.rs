use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regionlearner::datagen::{self, DataConfig, Dataset};
use regionlearner::harness::{ablate, evaluate, load_checkpoint, pipeline_check, save_checkpoint, visualize, Config, Trainer};
use regionlearner::numerics::gradcheck::{primitive_registry, run_primitive};
use regionlearner::numerics::DEFAULT_STEP;
use regionlearner::Error;

#[derive(Parser)]
#[command(name = "regionlearner", version, about = "Region-based video-text alignment on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render train.rlds and val.rlds into a directory.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        n_train: usize,
        #[arg(long, default_value_t = 64)]
        n_val: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.rlck and train_log.tsv into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference checks of every primitive and of the full loss.
    Gradcheck {
        /// Only check this primitive ("pipeline" for the full loss).
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export frames, code maps and region masks of one validation sample.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component ablation plus region-count and interaction-depth sweeps.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steps per sweep run (defaults to the config's `steps`).
        #[arg(long)]
        sweep_steps: Option<u64>,
    },
}

enum Failure {
    Error(Error),
    /// A check ran but did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn split_file(data: &Path, name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(name)
    } else {
        data.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { seed, n_train, n_val, out } => {
            let paths = datagen::generate(seed, n_train, n_val, &DataConfig::default(), &out)?;
            println!("wrote {} and {}", paths.train.display(), paths.val.display());
        }
        Command::Train { config, data, out, resume } => {
            let config = load_config(config.as_deref())?;
            let train = Dataset::load(&data.join(datagen::TRAIN_FILE))?;
            let val = Dataset::load(&data.join(datagen::VAL_FILE))?;
            fs::create_dir_all(&out)?;
            let mut trainer = match resume {
                Some(p) => {
                    let mut t = load_checkpoint(&p)?;
                    t.model.config.steps = config.steps;
                    t
                }
                None => Trainer::new(&config)?,
            };
            let ckpt = out.join("model.rlck");
            let mut log = String::from("step\tloss\tbatch_perplexity\treseeded\n");
            let every = trainer.config().log_every.max(1);
            let save_every = trainer.config().checkpoint_every;
            let steps = trainer.config().steps;
            let mut save_error = None;
            trainer.run(&train, steps, |t, r| {
                let ppl = r.batch_perplexity.unwrap_or(f64::NAN);
                log.push_str(&format!("{}\t{:.6}\t{:.3}\t{}\n", r.step, r.loss, ppl, r.reseeded));
                if r.step % every == 0 {
                    println!("step {:>5}  loss {:.4}  batch perplexity {:.2}", r.step, r.loss, ppl);
                }
                if save_every > 0 && r.step % save_every == 0 && save_error.is_none() {
                    save_error = save_checkpoint(t, &ckpt).err();
                }
            })?;
            if let Some(e) = save_error {
                return Err(e.into());
            }
            save_checkpoint(&trainer, &ckpt)?;
            fs::write(out.join("train_log.tsv"), log)?;
            let eval = evaluate(&trainer.model, &val)?;
            println!("{}\n{}", eval.t2v, eval.v2t);
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Eval { checkpoint, data } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let val = Dataset::load(&split_file(&data, datagen::VAL_FILE))?;
            let eval = evaluate(&trainer.model, &val)?;
            println!("{}\n{}", eval.t2v, eval.v2t);
        }
        Command::Gradcheck { op, instances, tol } => {
            let mut failed = Vec::new();
            let mut matched = false;
            for check in primitive_registry() {
                if op.as_deref().is_some_and(|o| o != check.name) {
                    continue;
                }
                matched = true;
                let r = run_primitive(&check, instances, 1, DEFAULT_STEP)?;
                let ok = r.max_rel_error <= tol;
                println!("{:<20} max rel err {:.3e}  {}", check.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(check.name.to_string());
                }
            }
            if op.as_deref().is_none_or(|o| o == "pipeline") {
                matched = true;
                let r = pipeline_check::pipeline_gradcheck(&pipeline_check::tiny_config(), 1)?;
                let ok = r.max_rel_error() <= tol;
                println!("{:<20} max rel err {:.3e}  {}", "pipeline", r.max_rel_error(), if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push("pipeline".into());
                }
            }
            if !matched {
                return Err(Failure::Error(Error::InvalidInput(format!("unknown op {:?}", op.unwrap_or_default()))));
            }
            if !failed.is_empty() {
                return Err(Failure::Check(format!("gradcheck failed for {}", failed.join(", "))));
            }
        }
        Command::Visualize { checkpoint, data, sample_index, out } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let val = Dataset::load(&split_file(&data, datagen::VAL_FILE))?;
            let sample = val.samples.get(sample_index).ok_or_else(|| {
                Error::InvalidInput(format!("sample index {sample_index} out of range for {} samples", val.len()))
            })?;
            let files = visualize(&trainer.model, sample, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Ablate { config, data, out, sweep_steps } => {
            let config = load_config(config.as_deref())?;
            let train = Dataset::load(&data.join(datagen::TRAIN_FILE))?;
            let val = Dataset::load(&data.join(datagen::VAL_FILE))?;
            let sweep = Config { steps: sweep_steps.unwrap_or(config.steps), ..config.clone() };
            let mut report = String::new();
            let rows = ablate::ablation_table(&config, &train, &val)?;
            report.push_str(&ablate::format_table("Component ablation", &rows));
            report.push('\n');
            let rows = ablate::region_sweep(&sweep, &[1, 2, 4, 8, 16], &train, &val)?;
            report.push_str(&ablate::format_table("Number of regions", &rows));
            report.push('\n');
            let rows = ablate::depth_sweep(&sweep, &[1, 2, 3, 4], &train, &val)?;
            report.push_str(&ablate::format_table("Interaction depth", &rows));
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.txt"), &report)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 2,
                _ => 1,
            })
        }
    }
}
