//! Evaluation statistics: speed histograms, traveled distance, rank
//! correlation between skill magnitude and speed, directional alignment,
//! constraint satisfaction and XY coverage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{self, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix, NetParams};
use crate::ppo::{observation, GaussianPolicy, Task};
use crate::seeding::{rng_for, tag};
use crate::skills::{self, ObjectiveConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Skills sampled from the training distribution for the histogram.
    pub trajectories: usize,
    /// Skills on an evenly spaced magnitude sweep for the rank correlation.
    pub correlation_skills: usize,
    pub histogram_bins: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub coverage_cell: f64,
    /// Alignment uses only skills with `||z|| >= fraction * z_max`.
    pub alignment_min_fraction: f64,
    pub violation_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 7,
            trajectories: 1000,
            correlation_skills: 200,
            histogram_bins: 30,
            speed_min: 0.0,
            speed_max: 3.0,
            coverage_cell: 0.25,
            alignment_min_fraction: 0.2,
            violation_tolerance: 1e-3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins == 0 {
            return Err(Error::config("eval.histogram_bins", "must be >= 1"));
        }
        if !(self.speed_max > self.speed_min) {
            return Err(Error::config("eval.speed_max", "must exceed eval.speed_min"));
        }
        if !(self.coverage_cell > 0.0) {
            return Err(Error::config("eval.coverage_cell", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alignment_min_fraction) {
            return Err(Error::config("eval.alignment_min_fraction", "must lie in [0, 1]"));
        }
        if self.violation_tolerance < 0.0 {
            return Err(Error::config("eval.violation_tolerance", "must be non-negative"));
        }
        Ok(())
    }
}

/// Equal-width histogram normalized to unit total mass, including the
/// out-of-range buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
    pub total: usize,
}

impl Histogram {
    pub fn total_mass(&self) -> f64 {
        let t = self.total as f64;
        self.densities.iter().sum::<f64>() + (self.underflow + self.overflow) as f64 / t
    }
}

pub fn speed_histogram(mean_speeds: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    if mean_speeds.is_empty() {
        return Err(Error::shape("speed histogram", "at least one trajectory", 0));
    }
    if bins == 0 || !(range.1 > range.0) {
        return Err(Error::config("eval.histogram_bins", "need >= 1 bin over a non-empty range"));
    }
    if mean_speeds.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean speeds"));
    }
    let width = (range.1 - range.0) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| range.0 + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    let (mut underflow, mut overflow) = (0, 0);
    for &v in mean_speeds {
        if v < range.0 {
            underflow += 1;
        } else if v > range.1 {
            overflow += 1;
        } else {
            let b = (((v - range.0) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let total = mean_speeds.len();
    Ok(Histogram {
        densities: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        edges,
        counts,
        underflow,
        overflow,
        total,
    })
}

/// `(net, path)`: straight-line and accumulated displacement.
pub fn traveled_distance(positions: &[[f64; 2]]) -> Result<(f64, f64)> {
    let (first, last) = match (positions.first(), positions.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::shape("trajectory", "at least one position", 0)),
    };
    let net = (last[0] - first[0]).hypot(last[1] - first[1]);
    let path = positions
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum();
    Ok((net, path))
}

/// Ranks starting at 1, ties receive their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    /// Set when either variable has zero variance; `rho` is then 0.
    pub degenerate: bool,
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman inputs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Ok(Correlation {
            rho: 0.0,
            degenerate: true,
        });
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub mean_cosine: f64,
    pub used: usize,
    /// Pairs dropped because one of the vectors was zero.
    pub filtered: usize,
    pub degenerate: bool,
}

/// Mean cosine between latent transitions and their skills. The cosine is
/// scale free, so the episode-length factor does not enter.
pub fn alignment_score<D: AsRef<[f64]>, Z: AsRef<[f64]>>(pairs: &[(D, Z)]) -> Alignment {
    let mut sum = 0.0;
    let (mut used, mut filtered) = (0usize, 0usize);
    for (d, z) in pairs {
        let (d, z) = (d.as_ref(), z.as_ref());
        let (nd, nz) = (norm(d), norm(z));
        if nd == 0.0 || nz == 0.0 {
            filtered += 1;
            continue;
        }
        sum += (dot(d, z) / (nd * nz)).clamp(-1.0, 1.0);
        used += 1;
    }
    Alignment {
        mean_cosine: if used > 0 { sum / used as f64 } else { 0.0 },
        used,
        filtered,
        degenerate: used == 0,
    }
}

/// Occupancy counts of `cell x cell` squares, keyed by integer cell index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Coverage {
    pub cells: BTreeMap<(i64, i64), usize>,
}

impl Coverage {
    pub fn occupied(&self) -> usize {
        self.cells.len()
    }
}

pub fn coverage_grid<T: AsRef<[[f64; 2]]>>(trajectories: &[T], cell: f64) -> Result<Coverage> {
    if !(cell > 0.0) {
        return Err(Error::config("eval.coverage_cell", "must be positive"));
    }
    let mut cov = Coverage::default();
    for t in trajectories {
        for p in t.as_ref() {
            let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
            *cov.cells.entry(key).or_insert(0) += 1;
        }
    }
    Ok(cov)
}

/// Linear-interpolated quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 90th minus 10th percentile.
pub fn inter_decile_range(values: &[f64]) -> f64 {
    quantile(values, 0.9) - quantile(values, 0.1)
}

/// One deterministic episode under a fixed command.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub command: Vec<f64>,
    /// `steps + 1` states, starting with the reset state.
    pub states: Vec<EnvState>,
    pub actions: Vec<[f64; 2]>,
}

impl EpisodeTrace {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.position()).collect()
    }

    /// Mean body speed over the visited states after the reset state.
    pub fn mean_speed(&self) -> f64 {
        let n = self.states.len().saturating_sub(1).max(1);
        self.states.iter().skip(1).map(|s| s.speed()).sum::<f64>() / n as f64
    }
}

/// Runs every command for `steps` steps with mean actions, batched across
/// commands. Environment `i` is reset from `(seed, i)`.
pub fn rollout_deterministic(
    policy: &GaussianPolicy,
    env_cfg: &EnvConfig,
    task: &Task,
    commands: &[Vec<f64>],
    seed: u64,
    steps: usize,
) -> Result<Vec<EpisodeTrace>> {
    let mut traces: Vec<EpisodeTrace> = commands
        .iter()
        .enumerate()
        .map(|(i, c)| EpisodeTrace {
            command: c.clone(),
            states: vec![env::reset_env(env_cfg, seed, i, 0)],
            actions: Vec::with_capacity(steps),
        })
        .collect();
    if traces.is_empty() {
        return Ok(traces);
    }
    let mut no_limit = env_cfg.clone();
    no_limit.episode_steps = usize::MAX;
    for _ in 0..steps {
        let obs: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| observation(task, t.states.last().expect("non-empty"), &t.command))
            .collect();
        let means = policy.mean.predict(&Matrix::from_rows(&obs)?)?;
        for (i, t) in traces.iter_mut().enumerate() {
            let a = [means.row(i)[0], means.row(i)[1]];
            let res = env::step_env(&no_limit, t.states.last().expect("non-empty"), a)?;
            t.actions.push(a);
            t.states.push(res.next_state);
        }
    }
    Ok(traces)
}

/// Skills on an evenly spaced magnitude sweep `(i + 0.5) / n * z_max` with
/// random directions.
pub fn magnitude_sweep(skill_dim: usize, z_max: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, &[tag::EVAL, 1, i as u64]);
            let g: Vec<f64> = loop {
                let g: Vec<f64> = (0..skill_dim).map(|_| rng.sample(StandardNormal)).collect();
                if norm(&g) > 1e-12 {
                    break g;
                }
            };
            let n = norm(&g);
            let mag = z_max * (i as f64 + 0.5) / count as f64;
            g.iter().map(|x| x / n * mag).collect()
        })
        .collect()
}

/// Skills drawn from the training distribution, keyed by the eval seed.
pub fn eval_skills(objective: &ObjectiveConfig, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, &[tag::EVAL, 0, i as u64]);
            skills::sample_skill(objective.skill_dim, objective.z_max, objective.sampling, &mut rng).0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub objective: String,
    pub env: String,
    pub trajectories: usize,
    pub speed_histogram: Histogram,
    pub mean_speed: f64,
    pub speed_inter_decile: f64,
    pub mean_traveled: f64,
    pub max_traveled: f64,
    pub mean_path: f64,
    pub spearman_mag_speed: f64,
    pub spearman_degenerate: bool,
    pub correlation_skills: usize,
    pub mean_alignment_cosine: f64,
    pub alignment_transitions: usize,
    pub coverage_cells: usize,
    pub violation_fraction: f64,
    pub transitions: usize,
}

/// Per-figure data kept next to the report.
#[derive(Debug, Clone, Default)]
pub struct EvalTables {
    /// `(||z||, mean speed, net distance)` per histogram trajectory.
    pub trajectory_rows: Vec<(f64, f64, f64)>,
    /// `(||z||, mean speed)` over the magnitude sweep.
    pub sweep_rows: Vec<(f64, f64)>,
    pub coverage: Coverage,
    /// Position traces of a few trajectories for plotting.
    pub fan: Vec<Vec<[f64; 2]>>,
}

/// Latent transitions of a trace under `encoder`.
pub fn latent_deltas(encoder: &NetParams, trace: &EpisodeTrace) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = trace.states.iter().map(skills::encoder_input).collect();
    let phi = encoder.predict(&Matrix::from_rows(&rows)?)?;
    Ok((1..phi.rows())
        .map(|t| phi.row(t).iter().zip(phi.row(t - 1)).map(|(a, b)| a - b).collect())
        .collect())
}

/// Full evaluation of a skill policy/encoder pair.
pub fn evaluate(
    policy: &GaussianPolicy,
    encoder: &NetParams,
    env_cfg: &EnvConfig,
    objective: &ObjectiveConfig,
    eval: &EvalConfig,
) -> Result<(MetricsReport, EvalTables)> {
    eval.validate()?;
    if eval.trajectories == 0 {
        return Err(Error::config("eval.trajectories", "evaluation needs at least one skill"));
    }
    let k = encoder.spec().output_width();
    if k != objective.skill_dim || policy.obs_dim() != crate::ppo::observation_dim(env_cfg.kind, &Task::Skills(objective.clone())) {
        return Err(Error::Dimension {
            what: "checkpoint skill dimension".into(),
            expected: objective.skill_dim,
            found: k,
        });
    }
    let task = Task::Skills(objective.clone());
    let steps = env_cfg.episode_steps;
    let commands = eval_skills(objective, eval.trajectories, eval.seed);
    let traces = rollout_deterministic(policy, env_cfg, &task, &commands, eval.seed, steps)?;

    let mut tables = EvalTables::default();
    let mut speeds = Vec::with_capacity(traces.len());
    let mut positions = Vec::with_capacity(traces.len());
    let (mut net_sum, mut net_max, mut path_sum) = (0.0, 0.0f64, 0.0);
    let mut aligned: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let (mut violations, mut transitions) = (0usize, 0usize);
    for t in &traces {
        let pos = t.positions();
        let (net, path) = traveled_distance(&pos)?;
        let speed = t.mean_speed();
        net_sum += net;
        path_sum += path;
        net_max = net_max.max(net);
        speeds.push(speed);
        tables.trajectory_rows.push((norm(&t.command), speed, net));

        let deltas = latent_deltas(encoder, t)?;
        let use_for_alignment = norm(&t.command) >= eval.alignment_min_fraction * objective.z_max;
        for (i, d) in deltas.into_iter().enumerate() {
            let dist = match objective.distance_metric {
                skills::DistanceMetric::Euclidean => env::state_distance(env_cfg, &t.states[i], &t.states[i + 1]),
                skills::DistanceMetric::Temporal => 1.0,
            };
            transitions += 1;
            if norm(&d) > dist + eval.violation_tolerance {
                violations += 1;
            }
            if use_for_alignment {
                aligned.push((d, t.command.clone()));
            }
        }
        positions.push(pos);
    }
    let hist = speed_histogram(&speeds, eval.histogram_bins, (eval.speed_min, eval.speed_max))?;
    let coverage = coverage_grid(&positions, eval.coverage_cell)?;
    let alignment = alignment_score(&aligned);

    let sweep = magnitude_sweep(objective.skill_dim, objective.z_max, eval.correlation_skills, eval.seed);
    let sweep_traces = rollout_deterministic(policy, env_cfg, &task, &sweep, eval.seed ^ 0x5eed, steps)?;
    let mags: Vec<f64> = sweep.iter().map(|z| norm(z)).collect();
    let sweep_speeds: Vec<f64> = sweep_traces.iter().map(EpisodeTrace::mean_speed).collect();
    let corr = spearman(&mags, &sweep_speeds)?;
    tables.sweep_rows = mags.iter().copied().zip(sweep_speeds.iter().copied()).collect();
    tables.fan = positions.iter().take(64).cloned().collect();
    tables.coverage = coverage.clone();

    let n = traces.len() as f64;
    let report = MetricsReport {
        objective: objective.kind.to_string(),
        env: env_cfg.kind.to_string(),
        trajectories: traces.len(),
        mean_speed: speeds.iter().sum::<f64>() / n,
        speed_inter_decile: inter_decile_range(&speeds),
        speed_histogram: hist,
        mean_traveled: net_sum / n,
        max_traveled: net_max,
        mean_path: path_sum / n,
        spearman_mag_speed: corr.rho,
        spearman_degenerate: corr.degenerate,
        correlation_skills: sweep.len(),
        mean_alignment_cosine: alignment.mean_cosine,
        alignment_transitions: alignment.used,
        coverage_cells: coverage.occupied(),
        violation_fraction: if transitions > 0 { violations as f64 / transitions as f64 } else { 0.0 },
        transitions,
    };
    Ok((report, tables))
}

impl MetricsReport {
    /// `key = value` lines, one statistic per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let h = &self.speed_histogram;
        let _ = writeln!(s, "objective = {}", self.objective);
        let _ = writeln!(s, "env = {}", self.env);
        let _ = writeln!(s, "trajectories = {}", self.trajectories);
        let _ = writeln!(s, "mean_speed = {}", self.mean_speed);
        let _ = writeln!(s, "speed_inter_decile = {}", self.speed_inter_decile);
        let _ = writeln!(s, "mean_traveled = {}", self.mean_traveled);
        let _ = writeln!(s, "max_traveled = {}", self.max_traveled);
        let _ = writeln!(s, "mean_path = {}", self.mean_path);
        let _ = writeln!(s, "spearman_mag_speed = {}", self.spearman_mag_speed);
        let _ = writeln!(s, "spearman_degenerate = {}", self.spearman_degenerate);
        let _ = writeln!(s, "correlation_skills = {}", self.correlation_skills);
        let _ = writeln!(s, "mean_alignment_cosine = {}", self.mean_alignment_cosine);
        let _ = writeln!(s, "alignment_transitions = {}", self.alignment_transitions);
        let _ = writeln!(s, "coverage_cells = {}", self.coverage_cells);
        let _ = writeln!(s, "violation_fraction = {}", self.violation_fraction);
        let _ = writeln!(s, "transitions = {}", self.transitions);
        let _ = writeln!(s, "histogram_bins = {}", h.counts.len());
        let _ = writeln!(s, "histogram_range = {},{}", h.edges[0], h.edges[h.edges.len() - 1]);
        let _ = writeln!(s, "histogram_underflow = {}", h.underflow);
        let _ = writeln!(s, "histogram_overflow = {}", h.overflow);
        let dens: Vec<String> = h.densities.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "histogram_densities = {}", dens.join(","));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "metrics report",
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| Error::Parse {
                what: "metrics report",
                line: 0,
                message: format!("missing key `{k}`"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|e| Error::Parse {
                what: "metrics report",
                line: 0,
                message: format!("`{k}`: {e}"),
            })
        };
        let int = |k: &str| -> Result<usize> { Ok(num(k)? as usize) };
        let range = get("histogram_range")?;
        let (lo, hi) = range.split_once(',').ok_or_else(|| Error::Parse {
            what: "metrics report",
            line: 0,
            message: "bad histogram_range".into(),
        })?;
        let lo: f64 = lo.trim().parse().unwrap_or(0.0);
        let hi: f64 = hi.trim().parse().unwrap_or(0.0);
        let bins = int("histogram_bins")?;
        let densities: Vec<f64> = get("histogram_densities")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        let trajectories = int("trajectories")?;
        let width = (hi - lo) / bins.max(1) as f64;
        let speed_histogram = Histogram {
            edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
            counts: densities.iter().map(|d| (d * trajectories as f64).round() as usize).collect(),
            densities,
            underflow: int("histogram_underflow")?,
            overflow: int("histogram_overflow")?,
            total: trajectories,
        };
        Ok(MetricsReport {
            objective: get("objective")?,
            env: get("env")?,
            trajectories,
            speed_histogram,
            mean_speed: num("mean_speed")?,
            speed_inter_decile: num("speed_inter_decile")?,
            mean_traveled: num("mean_traveled")?,
            max_traveled: num("max_traveled")?,
            mean_path: num("mean_path")?,
            spearman_mag_speed: num("spearman_mag_speed")?,
            spearman_degenerate: get("spearman_degenerate")? == "true",
            correlation_skills: int("correlation_skills")?,
            mean_alignment_cosine: num("mean_alignment_cosine")?,
            alignment_transitions: int("alignment_transitions")?,
            coverage_cells: int("coverage_cells")?,
            violation_fraction: num("violation_fraction")?,
            transitions: int("transitions")?,
        })
    }
}

pub fn histogram_table(h: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count,density\n");
    for i in 0..h.counts.len() {
        let _ = writeln!(s, "{},{},{},{}", h.edges[i], h.edges[i + 1], h.counts[i], h.densities[i]);
    }
    let _ = writeln!(s, "underflow,,{},{}", h.underflow, h.underflow as f64 / h.total as f64);
    let _ = writeln!(s, "overflow,,{},{}", h.overflow, h.overflow as f64 / h.total as f64);
    s
}

pub fn coverage_table(c: &Coverage, cell: f64) -> String {
    let mut s = String::from("ix,iy,x,y,visits\n");
    for (&(ix, iy), &n) in &c.cells {
        let _ = writeln!(s, "{ix},{iy},{},{},{n}", ix as f64 * cell, iy as f64 * cell);
    }
    s
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Bar chart of histogram densities.
pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let (w, ht, pad) = (480.0, 300.0, 40.0);
    let mut s = svg_open(w, ht);
    let max = h.densities.iter().cloned().fold(1e-12, f64::max);
    let bw = (w - 2.0 * pad) / h.densities.len() as f64;
    for (i, d) in h.densities.iter().enumerate() {
        let bh = d / max * (ht - 2.0 * pad);
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#3a7d44\"/>",
            pad + i as f64 * bw,
            ht - pad - bh,
            bw * 0.9,
            bh
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        ht - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        "<text x=\"{pad}\" y=\"{}\" font-size=\"12\">{}</text>",
        ht - 10.0,
        h.edges[0]
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{} m/s</text>",
        w - pad,
        ht - 10.0,
        h.edges[h.edges.len() - 1]
    );
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"20\" font-size=\"14\">{title}</text>");
    s.push_str("</svg>\n");
    s
}

fn bounds(points: impl Iterator<Item = [f64; 2]>) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        b = (b.0.min(p[0]), b.1.min(p[1]), b.2.max(p[0]), b.3.max(p[1]));
    }
    if !b.0.is_finite() {
        return (-1.0, -1.0, 1.0, 1.0);
    }
    let span = (b.2 - b.0).max(b.3 - b.1).max(1e-6) * 0.55;
    let (cx, cy) = ((b.0 + b.2) / 2.0, (b.1 + b.3) / 2.0);
    (cx - span, cy - span, cx + span, cy + span)
}

/// Occupied cells drawn as squares.
pub fn coverage_svg(c: &Coverage, cell: f64, title: &str) -> String {
    let size = 480.0;
    let mut s = svg_open(size, size);
    let pts = c
        .cells
        .keys()
        .map(|&(ix, iy)| [ix as f64 * cell, iy as f64 * cell]);
    let (x0, y0, x1, _) = bounds(pts.chain(std::iter::once([0.0, 0.0])));
    let scale = size / (x1 - x0);
    for &(ix, iy) in c.cells.keys() {
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f4e79\"/>",
            (ix as f64 * cell - x0) * scale,
            size - ((iy as f64 + 1.0) * cell - y0) * scale,
            cell * scale,
            cell * scale
        );
    }
    let _ = writeln!(s, "<text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>");
    s.push_str("</svg>\n");
    s
}

/// Position traces as polylines.
pub fn trajectory_fan_svg(traces: &[Vec<[f64; 2]>], title: &str) -> String {
    let size = 480.0;
    let mut s = svg_open(size, size);
    let (x0, y0, x1, _) = bounds(traces.iter().flatten().copied());
    let scale = size / (x1 - x0);
    for t in traces {
        let pts: Vec<String> = t
            .iter()
            .map(|p| format!("{:.2},{:.2}", (p[0] - x0) * scale, size - (p[1] - y0) * scale))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#b5541c\" stroke-width=\"1\"/>",
            pts.join(" ")
        );
    }
    let _ = writeln!(s, "<text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_examples() {
        let h = speed_histogram(&[0.0; 5], 30, (0.0, 3.0)).unwrap();
        assert_eq!(h.densities[0], 1.0);
        let h = speed_histogram(&[0.05, 2.95], 30, (0.0, 3.0)).unwrap();
        assert_eq!(h.densities[0], 0.5);
        assert_eq!(h.densities[29], 0.5);
        let h = speed_histogram(&[0.5, 3.5, 3.0], 30, (0.0, 3.0)).unwrap();
        assert_eq!(h.overflow, 1);
        assert_eq!(h.counts[29], 1);
        assert!((h.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn traveled_examples() {
        assert_eq!(traveled_distance(&[[1.0, 1.0]; 10]).unwrap(), (0.0, 0.0));
        let line: Vec<[f64; 2]> = (0..=300).map(|i| [i as f64 * 0.02, 0.0]).collect();
        let (net, path) = traveled_distance(&line).unwrap();
        assert!((net - 6.0).abs() < 1e-9 && (path - 6.0).abs() < 1e-9);
        let (net, path) = traveled_distance(&[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!((net, path), (0.0, 2.0));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let c = spearman(&x, &[2.0, 1.0, 3.0, 5.0, 4.0]).unwrap();
        assert!((c.rho - 0.8).abs() < 1e-12);
        let c = spearman(&x, &x.map(|v| 3.0 * v)).unwrap();
        assert_eq!(c.rho, 1.0);
        let c = spearman(&x, &[1.0; 5]).unwrap();
        assert!(c.degenerate && c.rho == 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn alignment_examples() {
        let a = alignment_score(&[(vec![1.0, 0.0], vec![1.0, 1.0])]);
        assert!((a.mean_cosine - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let a = alignment_score(&[(vec![1.0, 0.0], vec![-2.0, 0.0]), (vec![0.0, 0.0], vec![1.0, 0.0])]);
        assert_eq!(a.mean_cosine, -1.0);
        assert_eq!(a.filtered, 1);
        let a = alignment_score::<Vec<f64>, Vec<f64>>(&[]);
        assert!(a.degenerate);
    }

    #[test]
    fn coverage_examples() {
        let c = coverage_grid(&[vec![[0.1, 0.1]; 5]], 0.25).unwrap();
        assert_eq!(c.occupied(), 1);
        let line: Vec<[f64; 2]> = (0..=300).map(|i| [i as f64 * 0.02, 0.0]).collect();
        assert_eq!(coverage_grid(&[line], 1.0).unwrap().occupied(), 7);
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert!((inter_decile_range(&v) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn report_text_round_trip() {
        let h = speed_histogram(&[0.2, 0.4, 1.7, 9.0], 30, (0.0, 3.0)).unwrap();
        let r = MetricsReport {
            objective: "ours".into(),
            env: "point_mass".into(),
            trajectories: 4,
            speed_histogram: h,
            mean_speed: 1.2,
            speed_inter_decile: 0.7,
            mean_traveled: 3.0,
            max_traveled: 5.5,
            mean_path: 3.2,
            spearman_mag_speed: 0.93,
            spearman_degenerate: false,
            correlation_skills: 200,
            mean_alignment_cosine: 0.97,
            alignment_transitions: 1000,
            coverage_cells: 321,
            violation_fraction: 0.01,
            transitions: 1200,
        };
        let back = MetricsReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
    }
}
