#ifndef ENTALIGN_H
#define ENTALIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EntalignError {
  ENTALIGN_ERROR_OK = 0,
  ENTALIGN_ERROR_NULL_POINTER = 1,
  ENTALIGN_ERROR_INVALID_UTF8 = 2,
  ENTALIGN_ERROR_NOT_UNITARY = 3,
  ENTALIGN_ERROR_NOT_MAXIMALLY_ENTANGLED = 4,
  ENTALIGN_ERROR_OUT_OF_RANGE = 5,
  ENTALIGN_ERROR_EMPTY_COUNTS = 6,
  ENTALIGN_ERROR_ZERO_COUNTS = 7,
  ENTALIGN_ERROR_CONFIG = 8,
  ENTALIGN_ERROR_PARSE = 9,
  ENTALIGN_ERROR_BUFFER_TOO_SMALL = 10,
  ENTALIGN_ERROR_PANIC = 11,
} EntalignError;

typedef enum EntalignStatus {
  ENTALIGN_STATUS_RUNNING = 0,
  ENTALIGN_STATUS_CONVERGED = 1,
  ENTALIGN_STATUS_FAILED_WITNESS = 2,
  ENTALIGN_STATUS_BUDGET_EXHAUSTED = 3,
} EntalignStatus;

// Opaque finished alignment run.
typedef struct EntalignRun EntalignRun;

// Opaque scenario configuration.
typedef struct EntalignScenario EntalignScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *entalign_version(void);

// Message of the last error raised on this thread, NUL-terminated.
// `needed` receives the required buffer size including the NUL.
//
// # Safety
// `buf` must be valid for `cap` bytes or null with `cap == 0`; `needed`
// may be null.
enum EntalignError entalign_last_error(char *buf, size_t cap, size_t *needed);

// Scenario with every key at its default.
//
// # Safety
// `out` must be a valid pointer.
enum EntalignError entalign_scenario_default(struct EntalignScenario **out);

// Parses a scenario from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum EntalignError entalign_scenario_from_toml(const char *toml, struct EntalignScenario **out);

// # Safety
// `scenario` must be a live handle.
enum EntalignError entalign_scenario_set_seed(struct EntalignScenario *scenario, uint64_t seed);

// # Safety
// `scenario` must be null or a handle not yet freed.
void entalign_scenario_free(struct EntalignScenario *scenario);

// Runs a full alignment for the scenario.
//
// # Safety
// `scenario` must be a live handle and `out` a valid pointer.
enum EntalignError entalign_align(const struct EntalignScenario *scenario,
                                  struct EntalignRun **out);

// # Safety
// `run` must be a live handle and `status` a valid pointer.
enum EntalignError entalign_run_status(const struct EntalignRun *run, enum EntalignStatus *status);

// Model visibilities of the aligned link in the order 11, 12, 21, 22.
//
// # Safety
// `run` must be a live handle and `out` valid for four doubles.
enum EntalignError entalign_run_visibilities(const struct EntalignRun *run, double *out);

// # Safety
// `run` must be a live handle and `pairs` a valid pointer.
enum EntalignError entalign_run_pairs_used(const struct EntalignRun *run, uint64_t *pairs);

// Trace as NUL-terminated CSV text. `needed` receives the required
// buffer size including the NUL.
//
// # Safety
// `run` must be a live handle; `buf` must be valid for `cap` bytes or
// null with `cap == 0`; `needed` may be null.
enum EntalignError entalign_run_trace_csv(const struct EntalignRun *run,
                                          char *buf,
                                          size_t cap,
                                          size_t *needed);

// # Safety
// `run` must be null or a handle not yet freed.
void entalign_run_free(struct EntalignRun *run);

// Visibility and its uncertainty from four coincidence counts.
//
// # Safety
// `v` and `sigma` must be valid pointers.
enum EntalignError entalign_visibility(uint64_t pp,
                                       uint64_t pm,
                                       uint64_t mp,
                                       uint64_t mm,
                                       double *v,
                                       double *sigma);

// Sets `certified` to 1 when `|v11| + |v22|` exceeds one by more than
// three combined standard deviations, 0 otherwise. Pass negative sigmas
// to compare against one exactly.
//
// # Safety
// `certified` must be a valid pointer.
enum EntalignError entalign_witness(double v11,
                                    double v22,
                                    double s11,
                                    double s22,
                                    int32_t *certified);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTALIGN_H */
