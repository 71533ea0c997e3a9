//! Skill sampling, the latent encoder, the three encoder objectives and the
//! distance constraint with its Lagrange multiplier.
//!
//! Per step, the encoder sees a transition `(s_t, s_{t+1})` produced under
//! skill `z` in an episode of `N` steps:
//!
//! * `ours`: Smooth-L1 of `N (phi(s_{t+1}) - phi(s_t)) - z`, reward `1 / (1 + sigma e)`
//!   with `e = ||N dphi - z||^2`.
//! * `lsd` / `metra`: loss `-dphi . z`, reward `dphi . z`.
//!
//! All three are subject to `||dphi|| <= d(s_t, s_{t+1})`, where `d` is the
//! state distance (`ours`, `lsd`) or the temporal distance, 1 per step (`metra`).

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::numkit::{
    adam_step, dot, norm, smooth_l1, smooth_l1_scalar, smooth_l1_scalar_grad, AdamState, Matrix,
    NetParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Ours,
    Lsd,
    Metra,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Ours => "ours",
            ObjectiveKind::Lsd => "lsd",
            ObjectiveKind::Metra => "metra",
        })
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ours" => Ok(ObjectiveKind::Ours),
            "lsd" => Ok(ObjectiveKind::Lsd),
            "metra" => Ok(ObjectiveKind::Metra),
            other => Err(format!("unknown objective `{other}` (ours|lsd|metra)")),
        }
    }
}

impl ObjectiveKind {
    pub fn default_metric(self) -> DistanceMetric {
        match self {
            ObjectiveKind::Metra => DistanceMetric::Temporal,
            _ => DistanceMetric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Euclidean,
    Temporal,
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Temporal => "temporal",
        })
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "temporal" => Ok(DistanceMetric::Temporal),
            other => Err(format!("unknown distance metric `{other}` (euclidean|temporal)")),
        }
    }
}

/// How skills fill the ball of radius `z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkillSampling {
    /// Uniform over the solid ball (area / volume uniform).
    Ball,
    /// Uniform direction times uniform magnitude.
    DirectionMagnitude,
}

impl fmt::Display for SkillSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkillSampling::Ball => "ball",
            SkillSampling::DirectionMagnitude => "direction_magnitude",
        })
    }
}

impl std::str::FromStr for SkillSampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ball" => Ok(SkillSampling::Ball),
            "direction_magnitude" => Ok(SkillSampling::DirectionMagnitude),
            other => Err(format!("unknown skill sampling `{other}` (ball|direction_magnitude)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub skill_dim: usize,
    pub z_max: f64,
    /// Reward scale; `1 / z_max^2` unless overridden.
    pub sigma: f64,
    /// Smooth-L1 width.
    pub beta: f64,
    pub distance_metric: DistanceMetric,
    pub episode_steps: usize,
    pub sampling: SkillSampling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::new(ObjectiveKind::Ours, 2, 50.0, 300)
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, skill_dim: usize, z_max: f64, episode_steps: usize) -> Self {
        ObjectiveConfig {
            kind,
            skill_dim,
            z_max,
            sigma: 1.0 / (z_max * z_max),
            beta: 5.0,
            distance_metric: kind.default_metric(),
            episode_steps,
            sampling: SkillSampling::Ball,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.skill_dim) {
            return Err(Error::config("objective.skill_dim", "must be 2 or 3"));
        }
        if !(self.z_max > 0.0) || !self.z_max.is_finite() {
            return Err(Error::config("objective.z_max", "must be positive"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("objective.sigma", "must be positive"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config("objective.beta", "must be positive"));
        }
        if self.episode_steps == 0 {
            return Err(Error::config("objective.episode_steps", "must be >= 1"));
        }
        if self.distance_metric != self.kind.default_metric() {
            return Err(Error::config(
                "objective.distance_metric",
                format!(
                    "{} requires the {} metric",
                    self.kind,
                    self.kind.default_metric()
                ),
            ));
        }
        Ok(())
    }
}

/// Continuous latent command.
#[derive(Debug, Clone, PartialEq)]
pub struct Skill(pub Vec<f64>);

impl Skill {
    pub fn zeros(dim: usize) -> Self {
        Skill(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Lagrange multiplier for the latent-distance constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub lambda_lr: f64,
    pub slack: f64,
}

impl Default for DualState {
    fn default() -> Self {
        DualState {
            lambda: 30.0,
            lambda_lr: 1e-4,
            slack: 1e-6,
        }
    }
}

impl DualState {
    /// Projected dual ascent: `lambda <- max(0, lambda + lr * mean(max(0, c - slack)))`.
    pub fn ascend(&mut self, residuals: &[f64]) -> f64 {
        if residuals.is_empty() {
            return self.lambda;
        }
        let mean = residuals
            .iter()
            .map(|c| (c - self.slack).max(0.0))
            .sum::<f64>()
            / residuals.len() as f64;
        self.lambda = (self.lambda + self.lambda_lr * mean).max(0.0);
        self.lambda
    }
}

/// `phi(s_{t+1}) - phi(s_t)` together with `d(s_t, s_{t+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTransition {
    pub delta_phi: Vec<f64>,
    pub state_distance: f64,
}

pub fn sample_skill<R: Rng + ?Sized>(
    skill_dim: usize,
    z_max: f64,
    sampling: SkillSampling,
    rng: &mut R,
) -> Skill {
    if z_max <= 0.0 {
        return Skill::zeros(skill_dim);
    }
    let dir = loop {
        let g: Vec<f64> = (0..skill_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-12 {
            break g.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let u: f64 = rng.random();
    let radius = match sampling {
        SkillSampling::Ball => z_max * u.powf(1.0 / skill_dim as f64),
        SkillSampling::DirectionMagnitude => z_max * u,
    };
    Skill(dir.into_iter().map(|d| d * radius).collect())
}

/// Encoder input for a state: the full state vector.
pub fn encoder_input(s: &EnvState) -> Vec<f64> {
    s.vector()
}

pub fn encode(encoder: &NetParams, s: &EnvState) -> Result<Vec<f64>> {
    encoder.predict_one(&encoder_input(s))
}

pub fn encode_batch(encoder: &NetParams, states: &[EnvState]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = states.iter().map(encoder_input).collect();
    encoder.predict(&Matrix::from_rows(&rows)?)
}

/// `e = ||N dphi - z||^2`.
pub fn per_step_matching_error(delta_phi: &[f64], z: &[f64], episode_steps: usize) -> f64 {
    let n = episode_steps as f64;
    delta_phi
        .iter()
        .zip(z)
        .map(|(d, z)| {
            let r = n * d - z;
            r * r
        })
        .sum()
}

/// `1 / (1 + sigma e)`, in `(0, 1]`.
pub fn intrinsic_reward(e: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + sigma * e)
}

/// Alignment reward of the baselines, `dphi . z`.
pub fn baseline_intrinsic_reward(delta_phi: &[f64], z: &[f64]) -> f64 {
    dot(delta_phi, z)
}

/// Per-step reward for the configured objective.
pub fn skill_reward(config: &ObjectiveConfig, delta_phi: &[f64], z: &[f64]) -> f64 {
    match config.kind {
        ObjectiveKind::Ours => intrinsic_reward(
            per_step_matching_error(delta_phi, z, config.episode_steps),
            config.sigma,
        ),
        ObjectiveKind::Lsd | ObjectiveKind::Metra => baseline_intrinsic_reward(delta_phi, z),
    }
}

fn check_pairs(batch: &[(LatentTransition, Skill)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::shape("objective batch", "non-empty", 0));
    }
    for (t, z) in batch {
        if t.delta_phi.len() != z.dim() {
            return Err(Error::Dimension {
                what: "latent transition".into(),
                expected: z.dim(),
                found: t.delta_phi.len(),
            });
        }
    }
    Ok(())
}

/// Mean over the batch of `smooth_l1(N dphi - z, beta)` (summed over dims).
pub fn ours_encoder_loss(
    batch: &[(LatentTransition, Skill)],
    episode_steps: usize,
    beta: f64,
) -> Result<f64> {
    check_pairs(batch)?;
    let n = episode_steps as f64;
    let mut total = 0.0;
    for (t, z) in batch {
        let r: Vec<f64> = t.delta_phi.iter().zip(&z.0).map(|(d, z)| n * d - z).collect();
        total += smooth_l1(&r, beta)?;
    }
    Ok(total / batch.len() as f64)
}

/// `-mean(dphi . z)`; used by both baselines.
pub fn lsd_alignment_loss(batch: &[(LatentTransition, Skill)]) -> Result<f64> {
    check_pairs(batch)?;
    Ok(-batch
        .iter()
        .map(|(t, z)| dot(&t.delta_phi, &z.0))
        .sum::<f64>()
        / batch.len() as f64)
}

/// `c = ||dphi|| - d`; `c <= 0` means the constraint holds.
pub fn constraint_residual(t: &LatentTransition, metric: DistanceMetric) -> f64 {
    let d = match metric {
        DistanceMetric::Euclidean => t.state_distance,
        DistanceMetric::Temporal => 1.0,
    };
    norm(&t.delta_phi) - d
}

/// `||(phi(s_T) - phi(s_0)) - z||^2` for a trajectory of latent points.
pub fn episode_matching_loss(latents: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    let (first, last) = match (latents.first(), latents.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::shape("latent trajectory", "at least one point", 0)),
    };
    Ok(last
        .iter()
        .zip(first)
        .zip(z)
        .map(|((l, f), z)| {
            let r = l - f - z;
            r * r
        })
        .sum())
}

/// Result of comparing the episodic loss with `T` times the summed per-step loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `lhs = ||sum_t (dphi_t - z/T)||^2`, `rhs = T * sum_t ||dphi_t - z/T||^2`.
///
/// `lhs <= rhs` is Cauchy-Schwarz; the version without the factor `T` fails
/// whenever the per-step residuals agree in direction.
pub fn telescoping_bound_check(deltas: &[Vec<f64>], z: &[f64], rel_tol: f64) -> Result<BoundCheck> {
    let t = deltas.len();
    if t == 0 {
        return Err(Error::shape("telescoping trajectory", "T >= 1", 0));
    }
    let tf = t as f64;
    let mut sum = vec![0.0; z.len()];
    let mut sq = 0.0;
    for d in deltas {
        if d.len() != z.len() {
            return Err(Error::Dimension {
                what: "latent transition".into(),
                expected: z.len(),
                found: d.len(),
            });
        }
        let mut e = 0.0;
        for ((s, di), zi) in sum.iter_mut().zip(d).zip(z) {
            let a = di - zi / tf;
            *s += a;
            e += a * a;
        }
        sq += e;
    }
    let lhs: f64 = sum.iter().map(|x| x * x).sum();
    let rhs = tf * sq;
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + rel_tol) + f64::MIN_POSITIVE,
    })
}

/// Transitions used for one encoder update.
#[derive(Debug, Clone, Default)]
pub struct EncoderBatch {
    /// Encoder inputs for `s_t`, one per row.
    pub states: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
    pub skills: Vec<Vec<f64>>,
    /// `d(s_t, s_{t+1})` under the state metric.
    pub state_distances: Vec<f64>,
}

impl EncoderBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EncoderDiagnostics {
    pub objective_loss: f64,
    pub constraint_penalty: f64,
    pub violation_fraction: f64,
    pub mean_residual: f64,
    pub mean_dphi_norm: f64,
    pub lambda: f64,
}

/// Objective value and its gradient with respect to each `dphi` row.
fn objective_and_grad(config: &ObjectiveConfig, delta: &[Vec<f64>], skills: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let b = delta.len() as f64;
    let n = config.episode_steps as f64;
    let mut loss = 0.0;
    let grads = delta
        .iter()
        .zip(skills)
        .map(|(d, z)| match config.kind {
            ObjectiveKind::Ours => d
                .iter()
                .zip(z)
                .map(|(di, zi)| {
                    let r = n * di - zi;
                    loss += smooth_l1_scalar(r, config.beta) / b;
                    n * smooth_l1_scalar_grad(r, config.beta) / b
                })
                .collect(),
            ObjectiveKind::Lsd | ObjectiveKind::Metra => {
                loss -= dot(d, z) / b;
                z.iter().map(|zi| -zi / b).collect()
            }
        })
        .collect();
    (loss, grads)
}

/// Value and parameter gradient of `objective + lambda * mean(max(0, c))`.
#[derive(Debug, Clone)]
pub struct EncoderLoss {
    pub objective_loss: f64,
    pub constraint_penalty: f64,
    /// `c_i = ||dphi_i|| - d_i` per transition.
    pub residuals: Vec<f64>,
    pub mean_dphi_norm: f64,
    pub grad: NetParams,
}

impl EncoderLoss {
    pub fn total(&self) -> f64 {
        self.objective_loss + self.constraint_penalty
    }
}

pub fn encoder_loss(
    encoder: &NetParams,
    batch: &EncoderBatch,
    config: &ObjectiveConfig,
    lambda: f64,
) -> Result<EncoderLoss> {
    let b = batch.len();
    if b == 0 || batch.next_states.len() != b || batch.skills.len() != b || batch.state_distances.len() != b {
        return Err(Error::shape("encoder batch", "matching non-empty columns", b));
    }
    let k = encoder.spec().output_width();
    if let Some(z) = batch.skills.iter().find(|z| z.len() != k) {
        return Err(Error::Dimension {
            what: "skill".into(),
            expected: k,
            found: z.len(),
        });
    }
    let mut rows: Vec<&[f64]> = batch.states.iter().map(|v| v.as_slice()).collect();
    rows.extend(batch.next_states.iter().map(|v| v.as_slice()));
    let input = Matrix::from_rows(&rows)?;
    let (phi, cache) = encoder.forward(&input)?;
    let delta: Vec<Vec<f64>> = (0..b)
        .map(|i| phi.row(b + i).iter().zip(phi.row(i)).map(|(a, c)| a - c).collect())
        .collect();

    let (objective_loss, mut grads) = objective_and_grad(config, &delta, &batch.skills);
    let bf = b as f64;
    let mut residuals = Vec::with_capacity(b);
    let mut penalty = 0.0;
    let mut dphi_norm_sum = 0.0;
    for i in 0..b {
        let t = LatentTransition {
            delta_phi: delta[i].clone(),
            state_distance: batch.state_distances[i],
        };
        let c = constraint_residual(&t, config.distance_metric);
        let dn = norm(&delta[i]);
        dphi_norm_sum += dn;
        if c > 0.0 {
            penalty += lambda * c / bf;
            if dn > 0.0 {
                for (g, d) in grads[i].iter_mut().zip(&delta[i]) {
                    *g += lambda * d / (dn * bf);
                }
            }
        }
        residuals.push(c);
    }
    let total = objective_loss + penalty;
    if !total.is_finite() {
        return Err(Error::NumericFault(format!("encoder loss is {total}")));
    }

    let mut out_grad = Matrix::zeros(2 * b, k);
    for (i, g) in grads.iter().enumerate() {
        for (j, gj) in g.iter().enumerate().take(k) {
            out_grad.row_mut(i)[j] = -gj;
            out_grad.row_mut(b + i)[j] = *gj;
        }
    }
    let grad = encoder.backward(&cache, &out_grad)?.params;
    Ok(EncoderLoss {
        objective_loss,
        constraint_penalty: penalty,
        residuals,
        mean_dphi_norm: dphi_norm_sum / bf,
        grad,
    })
}

/// One Adam step on `objective + lambda * mean(max(0, c))`, followed by the
/// dual ascent step on `lambda`. On a non-finite loss nothing is modified.
pub fn constrained_encoder_step(
    encoder: &mut NetParams,
    adam: &mut AdamState,
    dual: &mut DualState,
    batch: &EncoderBatch,
    config: &ObjectiveConfig,
) -> Result<EncoderDiagnostics> {
    let l = encoder_loss(encoder, batch, config, dual.lambda)?;
    adam_step(encoder, &l.grad, adam)?;
    let lambda = dual.ascend(&l.residuals);
    let bf = l.residuals.len() as f64;
    Ok(EncoderDiagnostics {
        objective_loss: l.objective_loss,
        constraint_penalty: l.constraint_penalty,
        violation_fraction: l.residuals.iter().filter(|&&c| c > 0.0).count() as f64 / bf,
        mean_residual: l.residuals.iter().sum::<f64>() / bf,
        mean_dphi_norm: l.mean_dphi_norm,
        lambda,
    })
}
