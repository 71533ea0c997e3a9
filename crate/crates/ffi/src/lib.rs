//! C ABI over the skillab library.
//!
//! Two opaque handles are exported. A `SkillabTrainer` owns a complete
//! training state and advances it one update at a time; a `SkillabAgent` is
//! a frozen policy and encoder paired with its own environment instance, for
//! driving skills or goals from C.
//!
//! Every fallible function returns a `SkillabStatus`. On failure the message
//! is kept per thread and can be copied out with `skillab_last_error`.
//! Handles are not thread safe; use one handle per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use skillab::env::{self, EnvConfig, EnvState};
use skillab::lab;
use skillab::numkit::{Checkpoint, NetParams};
use skillab::ppo::{observation, GaussianPolicy, Task};
use skillab::skills::{self, ObjectiveConfig};
use skillab::tracking::{self, TrackConfig};
use skillab::trainer::{LogRow, TrainState};
use skillab::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkillabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Dimension = 6,
    NoEncoder = 7,
    Panic = 8,
}

/// Opaque training state.
pub struct SkillabTrainer {
    state: TrainState,
}

/// Opaque trained agent with its own environment.
pub struct SkillabAgent {
    policy: GaussianPolicy,
    encoder: NetParams,
    env: EnvConfig,
    objective: ObjectiveConfig,
    track: TrackConfig,
    state: EnvState,
}

/// Per-update training statistics, one row of the training log.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SkillabLogRow {
    pub update: u64,
    pub env_steps: u64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub encoder_loss: f64,
    pub lambda: f64,
    pub violation_fraction: f64,
    pub mean_dphi_norm: f64,
    pub mean_intrinsic: f64,
    pub mean_extrinsic: f64,
    pub mean_episode_speed: f64,
    pub episodes: u64,
    pub success_rate: f64,
}

impl From<&LogRow> for SkillabLogRow {
    fn from(r: &LogRow) -> Self {
        SkillabLogRow {
            update: r.update,
            env_steps: r.env_steps,
            policy_loss: r.ppo.policy_loss,
            value_loss: r.ppo.value_loss,
            entropy: r.ppo.entropy,
            approx_kl: r.ppo.approx_kl,
            clip_fraction: r.ppo.clip_fraction,
            lr: r.ppo.lr,
            encoder_loss: r.encoder.objective_loss,
            lambda: r.encoder.lambda,
            violation_fraction: r.encoder.violation_fraction,
            mean_dphi_norm: r.encoder.mean_dphi_norm,
            mean_intrinsic: r.mean_intrinsic,
            mean_extrinsic: r.mean_extrinsic,
            mean_episode_speed: r.mean_episode_speed,
            episodes: r.episodes as u64,
            success_rate: r.success_rate,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(SkillabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::Parse { .. } | Error::InvalidSpec(_) => SkillabStatus::Config,
            Error::NumericFault(_) | Error::NonFinite(_) => SkillabStatus::Numeric,
            Error::Io { .. } | Error::Checkpoint(_) => SkillabStatus::Io,
            Error::Shape { .. } | Error::Dimension { .. } | Error::StaleCache => SkillabStatus::Dimension,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: SkillabStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SkillabStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(fail(SkillabStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            SkillabStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(SkillabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SkillabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(fail(SkillabStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(SkillabStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(SkillabStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(SkillabStatus::NullPointer, format!("{what} is null")))
}

fn expect_len(what: &str, expected: usize, found: usize) -> Result<(), Failure> {
    if expected != found {
        return Err(Error::Dimension {
            what: what.into(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

unsafe fn publish<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(SkillabStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the length the full message
/// needs including the terminator; 1 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn skillab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn skillab_status_name(status: SkillabStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        SkillabStatus::Ok => b"ok\0",
        SkillabStatus::NullPointer => b"null pointer\0",
        SkillabStatus::InvalidUtf8 => b"invalid utf-8\0",
        SkillabStatus::Config => b"configuration error\0",
        SkillabStatus::Numeric => b"numeric fault\0",
        SkillabStatus::Io => b"i/o or checkpoint error\0",
        SkillabStatus::Dimension => b"dimension mismatch\0",
        SkillabStatus::NoEncoder => b"checkpoint has no skill encoder\0",
        SkillabStatus::Panic => b"internal panic\0",
    };
    s.as_ptr() as *const c_char
}

/// Builds a fresh trainer from config text (`[section]` and `key = value`
/// lines; an empty string selects the defaults).
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_new(config_text: *const c_char, out: *mut *mut SkillabTrainer) -> SkillabStatus {
    guard(|| {
        let cfg = lab::load_config(text(config_text, "config_text")?, &[])?;
        publish(out, SkillabTrainer { state: TrainState::new(&cfg)? })
    })
}

/// Restores a trainer from a checkpoint file or run directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_load(path: *const c_char, out: *mut *mut SkillabTrainer) -> SkillabStatus {
    guard(|| {
        let state = lab::load_state(Path::new(text(path, "path")?))?;
        publish(out, SkillabTrainer { state })
    })
}

/// Runs one rollout and update. On failure the trainer is unchanged.
/// `row` may be null.
///
/// # Safety
/// `trainer` must come from this library; `row` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_step(trainer: *mut SkillabTrainer, row: *mut SkillabLogRow) -> SkillabStatus {
    guard(|| {
        let t = handle_mut(trainer, "trainer")?;
        let r = t.state.step()?;
        if !row.is_null() {
            *row = SkillabLogRow::from(&r);
        }
        Ok(())
    })
}

/// Writes a checkpoint that `skillab_trainer_load` and the CLI can read.
///
/// # Safety
/// `trainer` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_save(trainer: *const SkillabTrainer, path: *const c_char) -> SkillabStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        t.state.to_checkpoint().save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Updates completed so far; 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_updates(trainer: *const SkillabTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.state.update)
}

/// # Safety
/// `trainer` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skillab_trainer_free(trainer: *mut SkillabTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

fn agent_from_state(state: &TrainState) -> Result<SkillabAgent, Failure> {
    let encoder = state
        .encoder
        .clone()
        .ok_or_else(|| fail(SkillabStatus::NoEncoder, "checkpoint was trained without a skill encoder"))?;
    let env = state.config.env_config();
    Ok(SkillabAgent {
        policy: state.policy.clone(),
        encoder,
        objective: state.config.objective_config(),
        track: state.config.track.clone(),
        state: env::reset_env(&env, state.config.eval.seed, 0, 0),
        env,
    })
}

/// Snapshot of the trainer's current policy and encoder.
///
/// # Safety
/// `trainer` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_from_trainer(
    trainer: *const SkillabTrainer,
    out: *mut *mut SkillabAgent,
) -> SkillabStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        publish(out, agent_from_state(&t.state)?)
    })
}

/// Loads an agent from a checkpoint file or run directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_load(path: *const c_char, out: *mut *mut SkillabAgent) -> SkillabStatus {
    guard(|| {
        let path = Path::new(text(path, "path")?);
        let state = TrainState::from_checkpoint(&Checkpoint::load(&lab::resolve_checkpoint(path))?)?;
        publish(out, agent_from_state(&state)?)
    })
}

/// Width of the environment state vector; 0 for a null handle.
///
/// # Safety
/// `agent` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_state_dim(agent: *const SkillabAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.env.kind.state_dim())
}

/// Skill (latent) width; 0 for a null handle.
///
/// # Safety
/// `agent` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_skill_dim(agent: *const SkillabAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.objective.skill_dim)
}

/// Resets the agent's environment with the given seed.
///
/// # Safety
/// `agent` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_reset(agent: *mut SkillabAgent, seed: u64) -> SkillabStatus {
    guard(|| {
        let a = handle_mut(agent, "agent")?;
        a.state = env::reset_env(&a.env, seed, 0, 0);
        Ok(())
    })
}

/// Copies the current environment state into `out` (`len` must equal the
/// state width).
///
/// # Safety
/// `agent` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_state(agent: *const SkillabAgent, out: *mut f64, len: usize) -> SkillabStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        let v = a.state.vector();
        expect_len("state buffer", v.len(), len)?;
        slice_mut(out, len, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Encodes an arbitrary state vector into the latent space.
///
/// # Safety
/// `agent` must come from this library; `state` must hold `state_len`
/// doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_encode(
    agent: *const SkillabAgent,
    state: *const f64,
    state_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SkillabStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        let s = EnvState::from_vector(a.env.kind, slice(state, state_len, "state")?)?;
        expect_len("latent buffer", a.objective.skill_dim, out_len)?;
        let phi = skills::encode(&a.encoder, &s)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(&phi);
        Ok(())
    })
}

/// Skill that moves the agent toward the goal position from its current
/// state, clipped to the trained skill radius.
///
/// # Safety
/// `agent` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_select_skill(
    agent: *const SkillabAgent,
    goal_x: f64,
    goal_y: f64,
    out: *mut f64,
    len: usize,
) -> SkillabStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        expect_len("skill buffer", a.objective.skill_dim, len)?;
        let goal = a.track.goal([goal_x, goal_y], None);
        goal.validate()?;
        let desired = tracking::desired_state(&a.state, &goal, a.track.desired_velocity);
        let z = tracking::select_skill(&a.encoder, &a.state, &desired, a.objective.z_max, a.track.gain)?;
        slice_mut(out, len, "out")?.copy_from_slice(&z.0);
        Ok(())
    })
}

/// Executes the deterministic action for `skill` and advances the
/// environment one step. The applied (clipped) action is written to
/// `action_out` when it is not null (two doubles).
///
/// # Safety
/// `agent` must come from this library; `skill` must hold `len` doubles;
/// `action_out` must be null or hold two doubles.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_step(
    agent: *mut SkillabAgent,
    skill: *const f64,
    len: usize,
    action_out: *mut f64,
) -> SkillabStatus {
    guard(|| {
        let a = handle_mut(agent, "agent")?;
        expect_len("skill", a.objective.skill_dim, len)?;
        let z = slice(skill, len, "skill")?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("skill").into());
        }
        let task = Task::Skills(a.objective.clone());
        let act = a.policy.act_deterministic(&observation(&task, &a.state, z))?;
        let mut unlimited = a.env.clone();
        unlimited.episode_steps = usize::MAX;
        let next = env::step_env(&unlimited, &a.state, act)?.next_state;
        a.state = next;
        if !action_out.is_null() {
            slice_mut(action_out, 2, "action_out")?.copy_from_slice(&next.previous_action);
        }
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skillab_agent_free(agent: *mut SkillabAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}
