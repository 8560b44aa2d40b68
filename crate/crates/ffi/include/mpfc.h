#ifndef MPFC_H
#define MPFC_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum MpfcStatus {
  MPFC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MPFC_STATUS_NULL_POINTER = 1,
  /**
   * An argument was malformed, such as a string that is not UTF-8.
   */
  MPFC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A scenario, parameter set or path was rejected.
   */
  MPFC_STATUS_INVALID_CONFIG = 3,
  /**
   * A scenario or waypoint file could not be parsed.
   */
  MPFC_STATUS_PARSE = 4,
  MPFC_STATUS_IO = 5,
  /**
   * The optimal control or QP solver failed.
   */
  MPFC_STATUS_SOLVER = 6,
  /**
   * The simulated plant diverged.
   */
  MPFC_STATUS_SIMULATION = 7,
  /**
   * An index was past the end of a log.
   */
  MPFC_STATUS_OUT_OF_RANGE = 8,
  /**
   * The library panicked; the handle involved should be freed.
   */
  MPFC_STATUS_PANIC = 9,
} MpfcStatus;

/**
 * Controller state carried from one sample to the next.
 */
typedef struct MpfcController MpfcController;

/**
 * Finished closed-loop run and its log.
 */
typedef struct MpfcRun MpfcRun;

/**
 * Scenario: path, weights, plant settings and disturbances.
 */
typedef struct MpfcScenario MpfcScenario;

/**
 * Timing of a scenario.
 */
typedef struct MpfcScenarioInfo {
  double sample_period;
  double duration;
  double settle_time;
  size_t n_samples;
} MpfcScenarioInfo;

/**
 * One sample of a closed-loop log.
 */
typedef struct MpfcLogRow {
  double t;
  double q[3];
  /**
   * True joint velocity of the plant.
   */
  double qdot[3];
  /**
   * Velocity handed to the controller.
   */
  double qdot_est[3];
  double u[3];
  double theta;
  double theta_dot;
  double v;
  double e[3];
  double e_norm;
  double cost;
  uint32_t qp_iterations;
  /**
   * 0 none, 1 integrator, 2 QP iteration limit, 3 QP failure.
   */
  uint8_t fault;
  /**
   * Solver wall time in seconds.
   */
  double solve_time;
} MpfcLogRow;

/**
 * Output of one controller sample.
 */
typedef struct MpfcStepResult {
  /**
   * Torques to hold until the next sample.
   */
  double u[3];
  double theta;
  double theta_dot;
  double v;
  double cost;
  uint32_t qp_iterations;
  /**
   * Same codes as [`MpfcLogRow::fault`].
   */
  uint8_t fault;
  double wall_time;
} MpfcStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mpfc_version(void);

/**
 * Copies the message of the last failed call on this thread into `buf`.
 *
 * Returns the full message length in bytes, excluding the terminating NUL,
 * or 0 if there is none. At most `capacity - 1` bytes are copied and the
 * result is always NUL-terminated when `capacity > 0`.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t mpfc_last_error(char *buf, size_t capacity);

/**
 * Loads one of the scenarios compiled into the library ("clover", "hello").
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_scenario_builtin(const char *name, struct MpfcScenario **out);

/**
 * Loads a scenario file; its waypoint file is resolved relative to it.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_scenario_load(const char *path, struct MpfcScenario **out);

/**
 * # Safety
 * `scenario` must be null or a handle from `mpfc_scenario_*` not yet freed.
 */
void mpfc_scenario_free(struct MpfcScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_scenario_info(const struct MpfcScenario *scenario,
                                   struct MpfcScenarioInfo *out);

/**
 * Writes the scenario's initial joint positions and velocities.
 *
 * # Safety
 * `scenario` must be a live handle; `q` and `qdot` must be valid for three doubles each.
 */
enum MpfcStatus mpfc_scenario_initial_state(const struct MpfcScenario *scenario,
                                            double *q,
                                            double *qdot);

/**
 * Advances the scenario's simulated arm by one sample period under torques
 * `u`, adding the disturbance active at time `t`.
 *
 * # Safety
 * `scenario` must be a live handle; `q`, `qdot`, `u` must point to three
 * readable doubles and `q_next`, `qdot_next` to three writable doubles.
 */
enum MpfcStatus mpfc_plant_step(const struct MpfcScenario *scenario,
                                double t,
                                const double *q,
                                const double *qdot,
                                const double *u,
                                double *q_next,
                                double *qdot_next);

/**
 * Simulates the scenario in closed loop. A run that ends early (for example
 * because the plant diverged) still returns `MPFC_STATUS_OK` and a handle;
 * query it with [`mpfc_run_status`].
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_run(const struct MpfcScenario *scenario, struct MpfcRun **out);

/**
 * # Safety
 * `run` must be null or a handle from [`mpfc_run`] not yet freed.
 */
void mpfc_run_free(struct MpfcRun *run);

/**
 * `MPFC_STATUS_OK` if the run reached its end, otherwise the error that
 * stopped it (with its message available from [`mpfc_last_error`]).
 *
 * # Safety
 * `run` must be a live handle.
 */
enum MpfcStatus mpfc_run_status(const struct MpfcRun *run);

/**
 * Number of logged samples.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_run_len(const struct MpfcRun *run, size_t *out);

/**
 * Copies sample `index` of the log.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_run_row(const struct MpfcRun *run, size_t index, struct MpfcLogRow *out);

/**
 * Writes the log as CSV; `with_timing` adds the solver wall-time column.
 *
 * # Safety
 * `run` must be a live handle; `path` must be a NUL-terminated string.
 */
enum MpfcStatus mpfc_run_write_csv(const struct MpfcRun *run, const char *path, bool with_timing);

/**
 * Creates a controller for the scenario, starting from the given state.
 *
 * # Safety
 * `scenario` must be a live handle; `q0` and `qdot0` must point to three
 * doubles each; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_controller_new(const struct MpfcScenario *scenario,
                                    const double *q0,
                                    const double *qdot0,
                                    struct MpfcController **out);

/**
 * # Safety
 * `controller` must be null or a handle from [`mpfc_controller_new`] not yet freed.
 */
void mpfc_controller_free(struct MpfcController *controller);

/**
 * One sample: takes the measured joint state and returns the torques to hold.
 *
 * # Safety
 * `controller` must be a live handle; `q` and `qdot` must point to three
 * doubles each; `out` must be valid for writes.
 */
enum MpfcStatus mpfc_controller_step(struct MpfcController *controller,
                                     const double *q,
                                     const double *qdot,
                                     struct MpfcStepResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPFC_H */
