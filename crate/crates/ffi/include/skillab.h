#ifndef SKILLAB_H
#define SKILLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum {
  SKILLAB_STATUS_OK = 0,
  SKILLAB_STATUS_NULL_POINTER = 1,
  SKILLAB_STATUS_INVALID_UTF8 = 2,
  SKILLAB_STATUS_CONFIG = 3,
  SKILLAB_STATUS_NUMERIC = 4,
  SKILLAB_STATUS_IO = 5,
  SKILLAB_STATUS_DIMENSION = 6,
  SKILLAB_STATUS_NO_ENCODER = 7,
  SKILLAB_STATUS_PANIC = 8,
} SkillabStatus;

// Opaque trained agent with its own environment.
typedef struct SkillabAgent SkillabAgent;

// Opaque training state.
typedef struct SkillabTrainer SkillabTrainer;

// Per-update training statistics, one row of the training log.
typedef struct {
  uint64_t update;
  uint64_t env_steps;
  double policy_loss;
  double value_loss;
  double entropy;
  double approx_kl;
  double clip_fraction;
  double lr;
  double encoder_loss;
  double lambda;
  double violation_fraction;
  double mean_dphi_norm;
  double mean_intrinsic;
  double mean_extrinsic;
  double mean_episode_speed;
  uint64_t episodes;
  double success_rate;
} SkillabLogRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the length the full message
// needs including the terminator; 1 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t skillab_last_error(char *buf, size_t len);

// Static description of a status code.
const char *skillab_status_name(SkillabStatus status);

// Builds a fresh trainer from config text (`[section]` and `key = value`
// lines; an empty string selects the defaults).
//
// # Safety
// `config_text` must be a NUL-terminated string; `out` must be writable.
SkillabStatus skillab_trainer_new(const char *config_text, SkillabTrainer **out);

// Restores a trainer from a checkpoint file or run directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
SkillabStatus skillab_trainer_load(const char *path, SkillabTrainer **out);

// Runs one rollout and update. On failure the trainer is unchanged.
// `row` may be null.
//
// # Safety
// `trainer` must come from this library; `row` must be null or writable.
SkillabStatus skillab_trainer_step(SkillabTrainer *trainer, SkillabLogRow *row);

// Writes a checkpoint that `skillab_trainer_load` and the CLI can read.
//
// # Safety
// `trainer` must come from this library; `path` must be a NUL-terminated string.
SkillabStatus skillab_trainer_save(const SkillabTrainer *trainer, const char *path);

// Updates completed so far; 0 for a null handle.
//
// # Safety
// `trainer` must be null or come from this library.
uint64_t skillab_trainer_updates(const SkillabTrainer *trainer);

// # Safety
// `trainer` must be null or come from this library, and not be used afterwards.
void skillab_trainer_free(SkillabTrainer *trainer);

// Snapshot of the trainer's current policy and encoder.
//
// # Safety
// `trainer` must come from this library; `out` must be writable.
SkillabStatus skillab_agent_from_trainer(const SkillabTrainer *trainer, SkillabAgent **out);

// Loads an agent from a checkpoint file or run directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
SkillabStatus skillab_agent_load(const char *path, SkillabAgent **out);

// Width of the environment state vector; 0 for a null handle.
//
// # Safety
// `agent` must be null or come from this library.
size_t skillab_agent_state_dim(const SkillabAgent *agent);

// Skill (latent) width; 0 for a null handle.
//
// # Safety
// `agent` must be null or come from this library.
size_t skillab_agent_skill_dim(const SkillabAgent *agent);

// Resets the agent's environment with the given seed.
//
// # Safety
// `agent` must come from this library.
SkillabStatus skillab_agent_reset(SkillabAgent *agent, uint64_t seed);

// Copies the current environment state into `out` (`len` must equal the
// state width).
//
// # Safety
// `agent` must come from this library; `out` must hold `len` doubles.
SkillabStatus skillab_agent_state(const SkillabAgent *agent, double *out, size_t len);

// Encodes an arbitrary state vector into the latent space.
//
// # Safety
// `agent` must come from this library; `state` must hold `state_len`
// doubles and `out` `out_len` doubles.
SkillabStatus skillab_agent_encode(const SkillabAgent *agent,
                                   const double *state,
                                   size_t state_len,
                                   double *out,
                                   size_t out_len);

// Skill that moves the agent toward the goal position from its current
// state, clipped to the trained skill radius.
//
// # Safety
// `agent` must come from this library; `out` must hold `len` doubles.
SkillabStatus skillab_agent_select_skill(const SkillabAgent *agent,
                                         double goal_x,
                                         double goal_y,
                                         double *out,
                                         size_t len);

// Executes the deterministic action for `skill` and advances the
// environment one step. The applied (clipped) action is written to
// `action_out` when it is not null (two doubles).
//
// # Safety
// `agent` must come from this library; `skill` must hold `len` doubles;
// `action_out` must be null or hold two doubles.
SkillabStatus skillab_agent_step(SkillabAgent *agent,
                                 const double *skill,
                                 size_t len,
                                 double *action_out);

// # Safety
// `agent` must be null or come from this library, and not be used afterwards.
void skillab_agent_free(SkillabAgent *agent);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLAB_H */
