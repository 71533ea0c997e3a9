//! Run directories: training with periodic checkpoints and resume,
//! evaluation reports, goal tracking and run comparison.
//!
//! A training run directory looks like
//!
//! ```text
//! run/
//!   config.ini           the config file exactly as given
//!   overrides.txt        command-line overrides, one per line
//!   resolved.ini         the effective configuration
//!   train_log.csv        one row per update
//!   checkpoints/update_000050.ckpt ... latest.ckpt
//!   manifest.txt
//!   eval/                written by `eval`
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::env::{self, TrajectoryRow};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numkit::checkpoint::write_atomic;
use crate::numkit::Checkpoint;
use crate::tracking::{self, GoalSpec, TrackingResult};
use crate::trainer::{log_header, TrainState};

pub const CODE_VERSION: &str = concat!("skillab ", env!("CARGO_PKG_VERSION"));

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Config from file text plus `section.key=value` overrides.
pub fn load_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    c.apply_text(text)?;
    c.apply_overrides(overrides)?;
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub status: String,
    pub updates_completed: u64,
    pub config_snapshot: String,
    pub overrides: String,
    pub resolved_config: String,
    pub training_log: String,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    pub metrics_report: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "code_version = {}", self.code_version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "started = {}", self.started);
        let _ = writeln!(s, "finished = {}", self.finished);
        let _ = writeln!(s, "status = {}", self.status);
        let _ = writeln!(s, "updates_completed = {}", self.updates_completed);
        let _ = writeln!(s, "config_snapshot = {}", self.config_snapshot);
        let _ = writeln!(s, "overrides = {}", self.overrides);
        let _ = writeln!(s, "resolved_config = {}", self.resolved_config);
        let _ = writeln!(s, "training_log = {}", self.training_log);
        let _ = writeln!(s, "checkpoints = {}", self.checkpoints.join(","));
        let _ = writeln!(s, "final_checkpoint = {}", self.final_checkpoint);
        let _ = writeln!(s, "metrics_report = {}", self.metrics_report);
        let _ = writeln!(
            s,
            "rerun = skillab train --config {} --out <dir> $(sed 's/^/--override /' {})",
            self.config_snapshot, self.overrides
        );
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
                what: "manifest",
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let v = v.to_string();
            match k {
                "code_version" => m.code_version = v,
                "seed" => m.seed = v.parse().unwrap_or(0),
                "started" => m.started = v,
                "finished" => m.finished = v,
                "status" => m.status = v,
                "updates_completed" => m.updates_completed = v.parse().unwrap_or(0),
                "config_snapshot" => m.config_snapshot = v,
                "overrides" => m.overrides = v,
                "resolved_config" => m.resolved_config = v,
                "training_log" => m.training_log = v,
                "checkpoints" => m.checkpoints = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                "final_checkpoint" => m.final_checkpoint = v,
                "metrics_report" => m.metrics_report = v,
                _ => {}
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
}

fn checkpoint_name(update: u64) -> String {
    format!("checkpoints/update_{update:06}.ckpt")
}

fn save_checkpoint(run: &Path, state: &TrainState, manifest: &mut RunManifest) -> Result<()> {
    let ckpt = state.to_checkpoint();
    let name = checkpoint_name(state.update);
    ckpt.save(&run.join(&name))?;
    ckpt.save(&run.join("checkpoints/latest.ckpt"))?;
    if !manifest.checkpoints.contains(&name) {
        manifest.checkpoints.push(name);
    }
    manifest.final_checkpoint = "checkpoints/latest.ckpt".into();
    Ok(())
}

/// Keeps the header and rows with `update <= last`.
fn truncate_log(path: &Path, last: u64) -> Result<()> {
    let text = read_text(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|u| u.parse::<u64>().ok())
                .is_some_and(|u| u <= last);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

/// Trains for `config.updates` updates into `run`. With `resume`, continues
/// from `checkpoints/latest.ckpt` if present. `stop_after` interrupts the
/// run after that many updates (the run can then be resumed).
pub fn train(
    config_text: &str,
    overrides: &[String],
    run: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<TrainOutcome> {
    let config = load_config(config_text, overrides)?;
    create_dir(&run.join("checkpoints"))?;
    let log_path = run.join("train_log.csv");
    let latest = run.join("checkpoints/latest.ckpt");
    let manifest_path = run.join("manifest.txt");

    let (mut state, mut manifest) = if resume && latest.exists() {
        let state = TrainState::from_checkpoint(&Checkpoint::load(&latest)?)?;
        if state.config != config {
            return Err(Error::config("run", "config differs from the checkpointed run; refusing to resume"));
        }
        let manifest = match fs::read_to_string(&manifest_path) {
            Ok(t) => RunManifest::from_text(&t)?,
            Err(_) => RunManifest::default(),
        };
        truncate_log(&log_path, state.update)?;
        log::info!("resuming {} at update {}", run.display(), state.update);
        (state, manifest)
    } else {
        write_text(&run.join("config.ini"), config_text)?;
        let mut ov = overrides.join("\n");
        if !ov.is_empty() {
            ov.push('\n');
        }
        write_text(&run.join("overrides.txt"), &ov)?;
        write_text(&run.join("resolved.ini"), &config.to_text())?;
        write_text(&log_path, &format!("{}\n", log_header()))?;
        let state = TrainState::new(&config)?;
        let manifest = RunManifest {
            code_version: CODE_VERSION.into(),
            seed: config.seed,
            started: chrono::Utc::now().to_rfc3339(),
            config_snapshot: "config.ini".into(),
            overrides: "overrides.txt".into(),
            resolved_config: "resolved.ini".into(),
            training_log: "train_log.csv".into(),
            ..RunManifest::default()
        };
        (state, manifest)
    };
    let target = config.updates as u64;
    if resume && state.update >= target && manifest.status == "complete" {
        // Nothing left to do; keep the original timestamps.
        return Ok(TrainOutcome {
            state,
            manifest,
            run_dir: run.to_path_buf(),
        });
    }
    if state.update == 0 {
        save_checkpoint(run, &state, &mut manifest)?;
    }

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut done_here = 0u64;
    while state.update < target {
        if stop_after.is_some_and(|k| done_here >= k) {
            break;
        }
        let row = match state.step() {
            Ok(r) => r,
            Err(e) => {
                log::error!("update {} failed: {e}", state.update + 1);
                save_checkpoint(run, &state, &mut manifest)?;
                manifest.status = format!("failed: {e}");
                manifest.updates_completed = state.update;
                manifest.finished = chrono::Utc::now().to_rfc3339();
                write_text(&manifest_path, &manifest.to_text())?;
                return Err(e);
            }
        };
        done_here += 1;
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        if row.update % 10 == 0 || row.update == target {
            log::info!(
                "update {} steps {} intrinsic {:.4} lambda {:.3} kl {:.4} lr {:.2e} speed {:.3}",
                row.update,
                row.env_steps,
                row.mean_intrinsic,
                row.encoder.lambda,
                row.ppo.approx_kl,
                row.ppo.lr,
                row.mean_episode_speed
            );
        }
        if row.update % config.checkpoint_every as u64 == 0 {
            save_checkpoint(run, &state, &mut manifest)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(run, &state, &mut manifest)?;
    manifest.status = if state.update >= target { "complete".into() } else { "interrupted".into() };
    manifest.updates_completed = state.update;
    manifest.finished = chrono::Utc::now().to_rfc3339();
    write_text(&manifest_path, &manifest.to_text())?;
    Ok(TrainOutcome {
        state,
        manifest,
        run_dir: run.to_path_buf(),
    })
}

/// Accepts either a checkpoint file or a run directory.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoints/latest.ckpt")
    } else {
        path.to_path_buf()
    }
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(&resolve_checkpoint(path))?)
}

/// Applies an evaluation config on top of a trained state. Keys that would
/// change the trained architecture must agree with the checkpoint.
pub fn eval_config_for(state: &TrainState, config_text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let trained = &state.config;
    let mut c = trained.clone();
    if let Some(t) = config_text {
        c.apply_text(t)?;
    }
    c.apply_overrides(overrides)?;
    c.validate()?;
    if c.skill_dim != trained.skill_dim {
        return Err(Error::Dimension {
            what: "skill_dim".into(),
            expected: trained.skill_dim,
            found: c.skill_dim,
        });
    }
    if c.env.kind != trained.env.kind {
        return Err(Error::Dimension {
            what: format!("state width ({} vs {})", trained.env.kind, c.env.kind),
            expected: trained.env.kind.state_dim(),
            found: c.env.kind.state_dim(),
        });
    }
    for (what, a, b) in [
        ("encoder.hidden", &trained.encoder_hidden, &c.encoder_hidden),
        ("policy.hidden", &trained.policy_hidden, &c.policy_hidden),
        ("policy.value_hidden", &trained.value_hidden, &c.value_hidden),
    ] {
        if a != b {
            return Err(Error::Shape {
                context: "network widths",
                expected: format!("{what} = {a:?}"),
                found: format!("{b:?}"),
            });
        }
    }
    Ok(c)
}

/// Evaluates a checkpoint and writes the report and data tables to `out`.
pub fn eval(checkpoint: &Path, config_text: Option<&str>, overrides: &[String], out: &Path) -> Result<MetricsReport> {
    let state = load_state(checkpoint)?;
    let config = eval_config_for(&state, config_text, overrides)?;
    create_dir(out)?;
    let encoder = state
        .encoder
        .as_ref()
        .ok_or_else(|| Error::config("run.task", "evaluation needs a skill-trained checkpoint"))?;
    if config.eval.trajectories == 0 {
        write_text(&out.join("report.txt"), "trajectories = 0\nempty = true\n")?;
        return Err(Error::config("eval.trajectories", "no skills to evaluate; wrote an empty report"));
    }
    let (report, tables) = metrics::evaluate(
        &state.policy,
        encoder,
        &config.env_config(),
        &config.objective_config(),
        &config.eval,
    )?;
    write_eval_outputs(out, &report, &tables, config.eval.coverage_cell)?;
    Ok(report)
}

pub fn write_eval_outputs(out: &Path, report: &MetricsReport, tables: &metrics::EvalTables, cell: f64) -> Result<()> {
    write_text(&out.join("report.txt"), &report.to_text())?;
    write_text(&out.join("histogram.csv"), &metrics::histogram_table(&report.speed_histogram))?;
    write_text(&out.join("coverage.csv"), &metrics::coverage_table(&tables.coverage, cell))?;
    let mut traj = String::from("skill_norm,mean_speed,net_distance\n");
    for (z, v, d) in &tables.trajectory_rows {
        let _ = writeln!(traj, "{z},{v},{d}");
    }
    write_text(&out.join("trajectories.csv"), &traj)?;
    let mut sweep = String::from("skill_norm,mean_speed\n");
    for (z, v) in &tables.sweep_rows {
        let _ = writeln!(sweep, "{z},{v}");
    }
    write_text(&out.join("magnitude_sweep.csv"), &sweep)?;
    let title = format!("{} on {}", report.objective, report.env);
    write_text(&out.join("histogram.svg"), &metrics::histogram_svg(&report.speed_histogram, &title))?;
    write_text(&out.join("coverage.svg"), &metrics::coverage_svg(&tables.coverage, cell, &title))?;
    write_text(&out.join("fan.svg"), &metrics::trajectory_fan_svg(&tables.fan, &title))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub goals: Vec<GoalSpec>,
    pub results: Vec<TrackingResult>,
}

/// Runs a goal list. Legs are chained unless `independent`: each leg starts
/// where the previous one ended.
pub fn track(
    checkpoint: &Path,
    goals_text: &str,
    overrides: &[String],
    open_loop: bool,
    independent: bool,
    out: &Path,
) -> Result<TrackOutcome> {
    let state = load_state(checkpoint)?;
    let config = eval_config_for(&state, None, overrides)?;
    let goals = tracking::parse_goals(goals_text, &config.track)?;
    create_dir(out)?;
    let env_cfg = config.env_config();
    let objective = config.objective_config();
    let encoder = state
        .encoder
        .as_ref()
        .ok_or_else(|| Error::config("run.task", "tracking needs a skill-trained checkpoint"))?;
    if goals.is_empty() {
        log::warn!("goal list is empty");
    }
    let mut results = Vec::with_capacity(goals.len());
    let mut start = env::reset_env(&env_cfg, config.eval.seed, 0, 0);
    let mut rows = Vec::new();
    for (leg, g) in goals.iter().enumerate() {
        if independent {
            start = env::reset_env(&env_cfg, config.eval.seed, leg, 0);
        }
        let r = if g.target_heading.is_some() && objective.skill_dim == 3 && !open_loop {
            tracking::track_heading_goal(&state.policy, encoder, &env_cfg, &objective, &config.track, g, start)?
        } else {
            tracking::track_goal(&state.policy, encoder, &env_cfg, &objective, &config.track, g, start, !open_loop)?
        };
        debug_assert!(!r.reached || r.final_distance <= g.tolerance);
        for (t, s) in r.trajectory.iter().enumerate() {
            let (action, skill) = match r.skills.get(t) {
                Some(z) => (
                    r.trajectory.get(t + 1).map_or([0.0; 2], |n| n.previous_action),
                    z.clone(),
                ),
                None => ([0.0; 2], vec![0.0; objective.skill_dim]),
            };
            rows.push(TrajectoryRow {
                env: leg,
                step: t,
                state: s.vector(),
                action,
                skill,
                intrinsic: 0.0,
                extrinsic: 0.0,
            });
        }
        if let Some(last) = r.trajectory.last() {
            start = *last;
        }
        results.push(r);
    }
    write_text(&out.join("tracking.csv"), &tracking::tracking_report(&goals, &results))?;
    write_text(
        &out.join("tracking_trajectories.csv"),
        &env::trajectory_dump(env_cfg.kind, objective.skill_dim, &rows),
    )?;
    let paths: Vec<Vec<[f64; 2]>> = results
        .iter()
        .map(|r| r.trajectory.iter().map(|s| s.position()).collect())
        .collect();
    write_text(&out.join("tracking.svg"), &metrics::trajectory_fan_svg(&paths, "goal tracking"))?;
    Ok(TrackOutcome { goals, results })
}

/// Locates an evaluation report for a run directory (or a report path).
fn report_path(run: &Path) -> PathBuf {
    if run.is_file() {
        run.to_path_buf()
    } else if run.join("report.txt").exists() {
        run.join("report.txt")
    } else {
        run.join("eval/report.txt")
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub table: String,
    pub histograms: String,
    pub warnings: Vec<String>,
}

/// Side-by-side table of evaluation reports; deltas are relative to the first run.
pub fn compare(runs: &[PathBuf]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::config("compare", "need at least two runs"));
    }
    let mut reports = Vec::new();
    for r in runs {
        if !r.exists() {
            return Err(Error::io(r, std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found")));
        }
        let p = report_path(r);
        reports.push(MetricsReport::from_text(&read_text(&p)?)?);
    }
    let mut warnings = Vec::new();
    let base = &reports[0];
    for (r, path) in reports.iter().zip(runs).skip(1) {
        if r.trajectories != base.trajectories
            || r.correlation_skills != base.correlation_skills
            || r.speed_histogram.edges != base.speed_histogram.edges
        {
            warnings.push(format!(
                "{}: evaluation budget differs from {} (trajectories {} vs {}, bins {} vs {})",
                path.display(),
                runs[0].display(),
                r.trajectories,
                base.trajectories,
                r.speed_histogram.counts.len(),
                base.speed_histogram.counts.len()
            ));
        }
    }
    type Metric = (&'static str, fn(&MetricsReport) -> f64);
    let metrics: Vec<Metric> = vec![
        ("mean_speed", |r| r.mean_speed),
        ("speed_inter_decile", |r| r.speed_inter_decile),
        ("spearman_mag_speed", |r| r.spearman_mag_speed),
        ("mean_alignment_cosine", |r| r.mean_alignment_cosine),
        ("mean_traveled", |r| r.mean_traveled),
        ("max_traveled", |r| r.max_traveled),
        ("coverage_cells", |r| r.coverage_cells as f64),
        ("violation_fraction", |r| r.violation_fraction),
    ];
    let mut table = String::from("metric");
    for (i, (r, p)) in reports.iter().zip(runs).enumerate() {
        let _ = write!(table, ",{}[{}]", r.objective, p.display());
        if i > 0 {
            let _ = write!(table, ",delta[{i}]");
        }
    }
    table.push('\n');
    for (name, f) in &metrics {
        let _ = write!(table, "{name}");
        for (i, r) in reports.iter().enumerate() {
            let _ = write!(table, ",{}", f(r));
            if i > 0 {
                let _ = write!(table, ",{}", f(r) - f(base));
            }
        }
        table.push('\n');
    }
    for w in &warnings {
        let _ = writeln!(table, "# warning: {w}");
    }

    let mut hist = String::from("bin_lo,bin_hi");
    for (r, p) in reports.iter().zip(runs) {
        let _ = write!(hist, ",{}[{}]", r.objective, p.display());
    }
    hist.push('\n');
    let mut rows: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let longest = reports.iter().map(|r| r.speed_histogram.counts.len()).max().unwrap_or(0);
    for b in 0..longest {
        let e = reports
            .iter()
            .find(|r| b < r.speed_histogram.counts.len())
            .map(|r| (r.speed_histogram.edges[b], r.speed_histogram.edges[b + 1]))
            .unwrap_or((0.0, 0.0));
        let mut row = vec![e.0.to_string(), e.1.to_string()];
        for r in &reports {
            row.push(r.speed_histogram.densities.get(b).map_or(String::new(), |d| d.to_string()));
        }
        rows.insert(b, row);
    }
    for row in rows.values() {
        hist.push_str(&row.join(","));
        hist.push('\n');
    }
    Ok(Comparison {
        table,
        histograms: hist,
        warnings,
    })
}
