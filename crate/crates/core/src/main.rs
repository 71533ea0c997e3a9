use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use skillab::lab;

#[derive(Parser)]
#[command(name = "skillab", version, about = "Skill discovery lab: train, evaluate, track, compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`[section]` + `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (training seed for `train`, evaluation seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`; repeatable, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Single-threaded, bit-reproducible execution (the only mode implemented).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and encoder into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop (resumably) after this many updates in this invocation.
        #[arg(long, value_name = "N")]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint (file or run directory).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Track a list of goals with a trained checkpoint.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Goal list: `x, y[, heading[, tolerance[, max_steps]]]` per line.
        #[arg(long)]
        goals: PathBuf,
        /// Keep the first selected skill instead of re-selecting every step.
        #[arg(long)]
        open_loop: bool,
        /// Start every goal from a fresh reset instead of chaining legs.
        #[arg(long)]
        independent: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compare evaluation reports of several runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| skillab::Error::Io {
            path: path.clone(),
            source: e,
        })
        .map_err(Into::into)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let text = match &common.config {
                Some(p) => read(p)?,
                None => String::new(),
            };
            let mut overrides = common.overrides.clone();
            if let Some(s) = common.seed {
                overrides.push(format!("run.seed={s}"));
            }
            if common.deterministic {
                overrides.push("run.deterministic=true".into());
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("run"));
            let outcome = lab::train(&text, &overrides, &out, resume, stop_after)?;
            println!(
                "trained {} updates into {} ({})",
                outcome.state.update,
                out.display(),
                outcome.manifest.status
            );
        }
        Command::Eval { checkpoint, common } => {
            let text = common.config.as_ref().map(read).transpose()?;
            let mut overrides = common.overrides.clone();
            if let Some(s) = common.seed {
                overrides.push(format!("eval.seed={s}"));
            }
            let out = common.out.unwrap_or_else(|| default_out(&checkpoint, "eval"));
            let report = lab::eval(&checkpoint, text.as_deref(), &overrides, &out)?;
            print!("{}", report.to_text());
        }
        Command::Track {
            checkpoint,
            goals,
            open_loop,
            independent,
            common,
        } => {
            let text = read(&goals)?;
            let mut overrides = common.overrides.clone();
            if let Some(s) = common.seed {
                overrides.push(format!("eval.seed={s}"));
            }
            let out = common.out.unwrap_or_else(|| default_out(&checkpoint, "track"));
            let outcome = lab::track(&checkpoint, &text, &overrides, open_loop, independent, &out)?;
            let reached = outcome.results.iter().filter(|r| r.reached).count();
            println!(
                "{reached}/{} goals reached; report in {}",
                outcome.results.len(),
                out.join("tracking.csv").display()
            );
        }
        Command::Compare { runs, out } => {
            let cmp = lab::compare(&runs)?;
            for w in &cmp.warnings {
                log::warn!("{w}");
            }
            print!("{}", cmp.table);
            if let Some(out) = out {
                fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                fs::write(out.join("comparison.csv"), &cmp.table)?;
                fs::write(out.join("histograms.csv"), &cmp.histograms)?;
            }
        }
    }
    Ok(())
}

fn default_out(checkpoint: &std::path::Path, sub: &str) -> PathBuf {
    if checkpoint.is_dir() {
        checkpoint.join(sub)
    } else {
        PathBuf::from(sub)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| {
                    c.downcast_ref::<skillab::Error>()
                        .map(|e| e.exit_code())
                        .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| 4))
                })
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
