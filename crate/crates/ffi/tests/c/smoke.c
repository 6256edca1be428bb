#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "t2d.h"

#define CHECK(call)                                                         \
  do {                                                                      \
    T2dStatus s_ = (call);                                                  \
    if (s_ != T2D_STATUS_OK) {                                              \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,               \
              t2d_last_error() ? t2d_last_error() : "(no message)");        \
      return 1;                                                             \
    }                                                                       \
  } while (0)

int main(void) {
  const char *config = "kinds = [\"LaneFollow\"]\ntrain-per-kind = 0\nplain = 0\neval-per-kind = 1\n";
  T2dBenchmark *bench = NULL;
  CHECK(t2d_benchmark_generate(config, 7, &bench));
  size_t n = 0;
  CHECK(t2d_benchmark_route_count(bench, T2D_SPLIT_EVAL, &n));
  if (n != 1) return 2;

  T2dEnv *env = NULL;
  CHECK(t2d_env_new(bench, T2D_SPLIT_EVAL, 0, 1, &env));
  t2d_benchmark_free(bench);
  size_t size = 0;
  CHECK(t2d_env_bev_size(env, &size));
  uint8_t *masks = malloc(T2D_NUM_CHANNELS * size * size);
  float meas[T2D_MEASUREMENT_LEN];
  CHECK(t2d_env_observe(env, masks, T2D_NUM_CHANNELS * size * size, meas, T2D_MEASUREMENT_LEN));

  T2dPolicy *policy = NULL;
  CHECK(t2d_policy_scripted(T2D_POLICY_AUTOPILOT, 0, &policy));
  int done = 0;
  while (!done) {
    size_t action = 0;
    CHECK(t2d_policy_act(policy, env, &action));
    CHECK(t2d_env_step(env, action, NULL, &done));
  }
  double completion = 0.0;
  CHECK(t2d_env_completion(env, &completion));
  if (t2d_env_step(env, 0, NULL, NULL) != T2D_STATUS_USAGE || t2d_last_error() == NULL) return 3;

  char *line = NULL;
  CHECK(t2d_env_log(env, &line));
  char *csv = NULL;
  CHECK(t2d_metrics_summary(line, NULL, &csv));
  printf("completion %.3f\n%s", completion, csv);
  t2d_string_free(line);
  t2d_string_free(csv);
  t2d_policy_free(policy);
  t2d_env_free(env);
  free(masks);
  return completion == 1.0 ? 0 : 4;
}
