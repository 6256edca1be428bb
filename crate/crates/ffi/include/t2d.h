#ifndef T2D_H
#define T2D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

#define T2D_SPLIT_TRAIN 0

#define T2D_SPLIT_EVAL 1

#define T2D_POLICY_DO_NOTHING 0

#define T2D_POLICY_RANDOM 1

#define T2D_POLICY_AUTOPILOT 2

// Number of discrete actions.
#define T2D_NUM_ACTIONS 30

// Number of BEV channels per observation.
#define T2D_NUM_CHANNELS 34

// Number of measurement values per observation.
#define T2D_MEASUREMENT_LEN 20

// Result of every call.
typedef enum T2dStatus {
  T2D_STATUS_OK = 0,
  T2D_STATUS_NULL_ARGUMENT = 1,
  T2D_STATUS_INVALID_UTF8 = 2,
  T2D_STATUS_OUT_OF_RANGE = 3,
  T2D_STATUS_BUFFER_TOO_SMALL = 4,
  T2D_STATUS_USAGE = 10,
  T2D_STATUS_VALIDATION = 11,
  T2D_STATUS_MALFORMED_ROUTE = 12,
  T2D_STATUS_PLACEMENT = 13,
  T2D_STATUS_PARSE = 14,
  T2D_STATUS_CHECKPOINT = 15,
  T2D_STATUS_UNKNOWN_INFRACTION = 16,
  T2D_STATUS_IO = 20,
  T2D_STATUS_NON_FINITE = 21,
  T2D_STATUS_UNAVAILABLE = 22,
  T2D_STATUS_PANIC = 99,
} T2dStatus;

// Training and evaluation routes.
typedef struct T2dBenchmark T2dBenchmark;

// One episode on one route.
typedef struct T2dEnv T2dEnv;

// A driving policy; tracks the previous action of the episode it drives.
typedef struct T2dPolicy T2dPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from the same thread.
const char *t2d_last_error(void);

// Library version as a static NUL-terminated string.
const char *t2d_version(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void t2d_string_free(char *s);

// Generates a benchmark from a TOML config (NULL for defaults).
//
// # Safety
// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
enum T2dStatus t2d_benchmark_generate(const char *config_toml,
                                      uint64_t seed,
                                      struct T2dBenchmark **out);

// Loads `benchmark.json` from a directory, or the file itself.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum T2dStatus t2d_benchmark_load(const char *path, struct T2dBenchmark **out);

// Writes `benchmark.json` into `dir`, creating it if needed.
//
// # Safety
// `bench` is a live handle and `dir` a NUL-terminated string.
enum T2dStatus t2d_benchmark_save(const struct T2dBenchmark *bench, const char *dir);

// Number of routes in a split.
//
// # Safety
// `bench` is a live handle; `out` is writable.
enum T2dStatus t2d_benchmark_route_count(const struct T2dBenchmark *bench,
                                         int32_t split,
                                         uintptr_t *out);

// Copies a route id as a newly allocated string.
//
// # Safety
// `bench` is a live handle; `out` is writable. Free the result with
// [`t2d_string_free`].
enum T2dStatus t2d_benchmark_route_id(const struct T2dBenchmark *bench,
                                      int32_t split,
                                      uintptr_t index,
                                      char **out);

// # Safety
// `bench` is NULL or a handle not yet freed.
void t2d_benchmark_free(struct T2dBenchmark *bench);

// Starts an episode on route `index` of a split with default simulator
// settings. The benchmark may be freed afterwards.
//
// # Safety
// `bench` is a live handle; `out` is writable.
enum T2dStatus t2d_env_new(const struct T2dBenchmark *bench,
                           int32_t split,
                           uintptr_t index,
                           uint64_t seed,
                           struct T2dEnv **out);

// Side length in pixels of the square BEV raster.
//
// # Safety
// `env` is a live handle; `out` is writable.
enum T2dStatus t2d_env_bev_size(const struct T2dEnv *env, uintptr_t *out);

// Copies the current observation: `T2D_NUM_CHANNELS * size * size` mask
// bytes in channel-major order and `T2D_MEASUREMENT_LEN` measurements.
// Either buffer may be NULL to skip it.
//
// # Safety
// Non-null buffers hold at least the given number of elements.
enum T2dStatus t2d_env_observe(const struct T2dEnv *env,
                               uint8_t *masks,
                               uintptr_t masks_len,
                               float *measurements,
                               uintptr_t measurements_len);

// Applies one action. `reward` and `done` may be NULL.
//
// # Safety
// `env` is a live handle.
enum T2dStatus t2d_env_step(struct T2dEnv *env, uintptr_t action, double *reward, int32_t *done);

// Route completion in `[0, 1]`.
//
// # Safety
// `env` is a live handle; `out` is writable.
enum T2dStatus t2d_env_completion(const struct T2dEnv *env, double *out);

// Sum of rewards so far.
//
// # Safety
// `env` is a live handle; `out` is writable.
enum T2dStatus t2d_env_total_reward(const struct T2dEnv *env, double *out);

// The episode log as one JSON line, as accepted by the metrics functions.
//
// # Safety
// `env` is a live handle; `out` is writable. Free the result with
// [`t2d_string_free`].
enum T2dStatus t2d_env_log(const struct T2dEnv *env, char **out);

// # Safety
// `env` is NULL or a handle not yet freed.
void t2d_env_free(struct T2dEnv *env);

// One of the scripted policies (`T2D_POLICY_*`).
//
// # Safety
// `out` is writable.
enum T2dStatus t2d_policy_scripted(int32_t kind, uint64_t seed, struct T2dPolicy **out);

// The greedy actor of a training checkpoint.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum T2dStatus t2d_policy_load(const char *path, struct T2dPolicy **out);

// Chooses the next action for `env`. The policy restarts its episode state
// whenever `env` has not stepped yet.
//
// # Safety
// `policy` and `env` are live handles; `out` is writable.
enum T2dStatus t2d_policy_act(struct T2dPolicy *policy, const struct T2dEnv *env, uintptr_t *out);

// # Safety
// `policy` is NULL or a handle not yet freed.
void t2d_policy_free(struct T2dPolicy *policy);

// Summary table (CSV) of newline-separated JSON episode logs. `penalties`
// is a TOML table of `kind = factor`, or NULL for defaults.
//
// # Safety
// String arguments are NULL-terminated; `out` is writable. Free the result
// with [`t2d_string_free`].
enum T2dStatus t2d_metrics_summary(const char *logs, const char *penalties, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* T2D_H */
