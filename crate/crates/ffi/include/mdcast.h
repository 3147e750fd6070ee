#ifndef MDCAST_H
#define MDCAST_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status code returned by every fallible call.
typedef enum MdcastStatus {
  MDCAST_STATUS_OK = 0,
  MDCAST_STATUS_NULL_POINTER = 1,
  MDCAST_STATUS_INVALID_ARGUMENT = 2,
  MDCAST_STATUS_IO = 3,
  MDCAST_STATUS_PARSE = 4,
  MDCAST_STATUS_SHAPE_MISMATCH = 5,
  MDCAST_STATUS_FIT_FAILED = 6,
  MDCAST_STATUS_MISSING_PAIR = 7,
  MDCAST_STATUS_CONFIG = 8,
  MDCAST_STATUS_RUNTIME = 9,
  MDCAST_STATUS_PANIC = 10,
} MdcastStatus;

// Threshold granularity.
typedef enum MdcastGranularity {
  MDCAST_GRANULARITY_SPECIES = 0,
  MDCAST_GRANULARITY_ATOM = 1,
} MdcastGranularity;

// Opaque trained forecaster.
typedef struct MdcastModel MdcastModel;

// Opaque Morse parameter table.
typedef struct MdcastMorseTable MdcastMorseTable;

// Opaque per-pair energy threshold table.
typedef struct MdcastThresholds MdcastThresholds;

// Opaque trajectory handle.
typedef struct MdcastTrajectory MdcastTrajectory;

// Morse parameters `E(d) = depth (1 - exp(-steepness (d - r_eq)))^2 + offset`.
typedef struct MdcastMorseParams {
  double depth;
  double steepness;
  double r_eq;
  double offset;
} MdcastMorseParams;

// Rollout settings. `window == 0` uses the model horizon.
typedef struct MdcastRolloutOptions {
  size_t total_steps;
  size_t window;
  bool pii;
  size_t pairs_per_step;
  uint64_t seed;
  // Freeze only violating atoms instead of the whole frame.
  bool freeze_violating_only;
} MdcastRolloutOptions;

// Displacement and position errors of a forecast.
typedef struct MdcastForecastErrors {
  double mse_delta;
  double mae_delta;
  double mse_r;
  double mae_r;
} MdcastForecastErrors;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until
// the next mdcast call on the same thread.
const char *mdcast_last_error(void);

// Library version as a static NUL-terminated string.
const char *mdcast_version(void);

// Builds a trajectory from `n_frames * n_atoms * 3` positions in Å,
// frame-major. `species` holds `n_atoms` NUL-terminated labels.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum MdcastStatus mdcast_trajectory_new(const char *const *species,
                                        size_t n_atoms,
                                        const double *positions,
                                        size_t n_frames,
                                        double dt_fs,
                                        struct MdcastTrajectory **out_traj);

// Reads an extended-XYZ (`.xyz`) or CSV (`.csv`) trajectory.
//
// # Safety
// `path` must be a NUL-terminated string and `out_traj` writable.
enum MdcastStatus mdcast_trajectory_read(const char *path, struct MdcastTrajectory **out_traj);

// Writes a trajectory; the format follows the file extension.
//
// # Safety
// `traj` must be a live handle and `path` NUL-terminated.
enum MdcastStatus mdcast_trajectory_write(const struct MdcastTrajectory *traj, const char *path);

// Number of frames, or 0 for NULL.
//
// # Safety
// `traj` must be NULL or a live handle.
size_t mdcast_trajectory_n_frames(const struct MdcastTrajectory *traj);

// Number of atoms, or 0 for NULL.
//
// # Safety
// `traj` must be NULL or a live handle.
size_t mdcast_trajectory_n_atoms(const struct MdcastTrajectory *traj);

// Copies frame `frame` into `out_xyz` (`n_atoms * 3` doubles).
//
// # Safety
// `out_xyz` must be writable for `len` doubles.
enum MdcastStatus mdcast_trajectory_positions(const struct MdcastTrajectory *traj,
                                              size_t frame,
                                              double *out_xyz,
                                              size_t len);

// # Safety
// `traj` must be NULL or a handle not yet freed.
void mdcast_trajectory_free(struct MdcastTrajectory *traj);

// Empty Morse table.
struct MdcastMorseTable *mdcast_morse_table_new(void);

// Reads `species_i,species_j,D_e,a,d_e,b` rows.
//
// # Safety
// `path` must be NUL-terminated and `out_table` writable.
enum MdcastStatus mdcast_morse_table_read(const char *path, struct MdcastMorseTable **out_table);

// Sets parameters for an unordered species pair.
//
// # Safety
// `table` must be a live handle; labels NUL-terminated.
enum MdcastStatus mdcast_morse_table_set(struct MdcastMorseTable *table,
                                         const char *species_i,
                                         const char *species_j,
                                         struct MdcastMorseParams params);

// Pair energy at distance `d` Å.
//
// # Safety
// `table` must be a live handle; labels NUL-terminated; `out_energy` writable.
enum MdcastStatus mdcast_morse_energy(const struct MdcastMorseTable *table,
                                      const char *species_i,
                                      const char *species_j,
                                      double d,
                                      double *out_energy);

// # Safety
// `table` must be NULL or a handle not yet freed.
void mdcast_morse_table_free(struct MdcastMorseTable *table);

// Least-squares Morse fit to `n` (distance, energy) samples.
//
// # Safety
// `d` and `energy` must hold `n` doubles; out pointers writable (`out_rmse` may be NULL).
enum MdcastStatus mdcast_fit_morse(const double *d,
                                   const double *energy,
                                   size_t n,
                                   struct MdcastMorseParams *out_params,
                                   double *out_rmse);

// Per-pair maximum energy over `traj`.
//
// # Safety
// Handles must be live; `out_thresholds` writable.
enum MdcastStatus mdcast_thresholds_compute(const struct MdcastTrajectory *traj,
                                            const struct MdcastMorseTable *table,
                                            enum MdcastGranularity granularity,
                                            struct MdcastThresholds **out_thresholds);

// Threshold for atoms `i`, `j` of the given species.
//
// # Safety
// `thresholds` must be live; labels NUL-terminated; `out_tau` writable.
enum MdcastStatus mdcast_thresholds_get(const struct MdcastThresholds *thresholds,
                                        size_t i,
                                        size_t j,
                                        const char *species_i,
                                        const char *species_j,
                                        double *out_tau);

// Writes the table as `key,tau` CSV.
//
// # Safety
// `thresholds` must be live and `path` NUL-terminated.
enum MdcastStatus mdcast_thresholds_write(const struct MdcastThresholds *thresholds,
                                          const char *path);

// Reads a `key,tau` CSV.
//
// # Safety
// `path` must be NUL-terminated and `out_thresholds` writable.
enum MdcastStatus mdcast_thresholds_read(const char *path,
                                         struct MdcastThresholds **out_thresholds);

// # Safety
// `thresholds` must be NULL or a handle not yet freed.
void mdcast_thresholds_free(struct MdcastThresholds *thresholds);

// Loads a JSON checkpoint written by `mdcast train`.
//
// # Safety
// `path` must be NUL-terminated and `out_model` writable.
enum MdcastStatus mdcast_model_load(const char *path, struct MdcastModel **out_model);

// History length H, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t mdcast_model_history(const struct MdcastModel *model);

// Horizon length L, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t mdcast_model_horizon(const struct MdcastModel *model);

// # Safety
// `model` must be NULL or a handle not yet freed.
void mdcast_model_free(struct MdcastModel *model);

// Default rollout options.
struct MdcastRolloutOptions mdcast_rollout_options_default(void);

// Autoregressive rollout from the last `H` frames of `seed_history`. The
// output holds the seed frames followed by `total_steps` predicted frames.
// `thresholds` is the rejection table. `out_frozen` (may be NULL)
// receives the number of frozen steps.
//
// # Safety
// Handles must be live; `out_traj` writable.
enum MdcastStatus mdcast_rollout(const struct MdcastModel *model,
                                 const struct MdcastTrajectory *seed_history,
                                 const struct MdcastMorseTable *table,
                                 const struct MdcastThresholds *thresholds,
                                 struct MdcastRolloutOptions options,
                                 struct MdcastTrajectory **out_traj,
                                 size_t *out_frozen);

// Errors of `pred` against `truth`; frame 0 is the shared anchor.
//
// # Safety
// Handles must be live; `out_errors` writable.
enum MdcastStatus mdcast_forecast_errors(const struct MdcastTrajectory *pred,
                                         const struct MdcastTrajectory *truth,
                                         struct MdcastForecastErrors *out_errors);

// Violation count and rate over frames `1..` of `traj`, sampling
// `pairs_per_step` pairs per step.
//
// # Safety
// Handles must be live; out pointers writable.
enum MdcastStatus mdcast_violations(const struct MdcastTrajectory *traj,
                                    const struct MdcastMorseTable *table,
                                    const struct MdcastThresholds *thresholds,
                                    size_t pairs_per_step,
                                    uint64_t seed,
                                    size_t *out_count,
                                    double *out_rate);

// Diffusion coefficient (Å²/fs) from a multi-origin MSD fitted over lags
// `fit_start..fit_end`. `species` may be NULL for all atoms.
//
// # Safety
// `traj` must be live; `species` NULL or NUL-terminated; `out_d` writable.
enum MdcastStatus mdcast_diffusivity(const struct MdcastTrajectory *traj,
                                     const char *species,
                                     size_t fit_start,
                                     size_t fit_end,
                                     double *out_d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDCAST_H */
