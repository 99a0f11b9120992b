#ifndef GAMEIRL_H
#define GAMEIRL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GAMEIRL_OK 0

#define GAMEIRL_INVALID_ARGUMENT 1

#define GAMEIRL_STABILITY 2

#define GAMEIRL_NUMERIC 3

#define GAMEIRL_NO_SOLUTION 4

#define GAMEIRL_RANK_DEFICIENT 5

#define GAMEIRL_DIVERGENCE 6

#define GAMEIRL_IO 7

#define GAMEIRL_CONFIG 8

#define GAMEIRL_NULL_POINTER 9

#define GAMEIRL_PANIC 10

/**
 * Window integrals of one agent.
 */
typedef struct GameirlBatch GameirlBatch;

/**
 * Loaded experiment scenario.
 */
typedef struct GameirlScenario GameirlScenario;

/**
 * Plant `dx/dt = A x + B u + D d`.
 */
typedef struct GameirlSystem GameirlSystem;

/**
 * Iteration history of an inverse run.
 */
typedef struct GameirlTrace GameirlTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *gameirl_last_error_message(void);

/**
 * Creates a plant from row-major `A` (n x n), `B` (n x m), `D` (n x z).
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `out` must be writable.
 */
int32_t gameirl_system_new(const double *a, const double *b, const double *d, size_t n, size_t m, size_t z, struct GameirlSystem **out);

/**
 * # Safety
 * `sys` must be null or a handle from `gameirl_system_new` not yet freed.
 */
void gameirl_system_free(struct GameirlSystem *sys);

/**
 * Solves the game Riccati equation for `(Q, R, gamma)`. Writes `P` (n x n),
 * `K` (m x n) and `L` (z x n).
 *
 * # Safety
 * Input buffers must hold n*n and m*m doubles; outputs must be writable for
 * n*n, m*n and z*n doubles.
 */
int32_t gameirl_solve_gare(const struct GameirlSystem *sys, const double *q, const double *r, double gamma, double *p_out, double *k_out, double *l_out);

/**
 * Solves `A'P + PA + M = 0` for a Hurwitz `A` and symmetric `M`.
 *
 * # Safety
 * `a` and `m` must hold n*n doubles; `p_out` must be writable for n*n.
 */
int32_t gameirl_solve_lyapunov(const double *a, const double *m, size_t n, double *p_out);

/**
 * Reads a batch CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t gameirl_batch_read_csv(const char *path, struct GameirlBatch **out);

/**
 * # Safety
 * `batch` must be a live handle and `path` a NUL-terminated string.
 */
int32_t gameirl_batch_write_csv(const struct GameirlBatch *batch, const char *path);

/**
 * Number of windows, or 0 for a null handle.
 *
 * # Safety
 * `batch` must be null or a live handle.
 */
size_t gameirl_batch_len(const struct GameirlBatch *batch);

/**
 * # Safety
 * `batch` must be null or a handle not yet freed.
 */
void gameirl_batch_free(struct GameirlBatch *batch);

/**
 * Model-based inverse iteration against the target gain `k_t` (m x n).
 *
 * # Safety
 * `sys` must be a live handle; `k_t`, `r`, `q0` must hold m*n, m*m and n*n
 * doubles; `out` must be writable.
 */
int32_t gameirl_run_algorithm1(const struct GameirlSystem *sys, const double *k_t, const double *r, double gamma, const double *q0, size_t max_iters, double tol, struct GameirlTrace **out);

/**
 * Data-driven inverse iteration on an expert and a learner batch.
 *
 * # Safety
 * Handles must be live; `r` and `q0` must hold m*m and n*n doubles;
 * `out` must be writable.
 */
int32_t gameirl_run_algorithm2(const struct GameirlBatch *expert, const struct GameirlBatch *learner, const double *r, double gamma, const double *q0, size_t max_iters, double tol, struct GameirlTrace **out);

/**
 * Number of records, or 0 for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t gameirl_trace_len(const struct GameirlTrace *trace);

/**
 * 1 if the stopping rule was met, 0 otherwise (also for null).
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
int32_t gameirl_trace_converged(const struct GameirlTrace *trace);

/**
 * Copies `K`, `P` and `Q^(i+1)` of record `index` into caller buffers
 * (m*n, n*n, n*n doubles). Any output may be null to skip it.
 *
 * # Safety
 * `trace` must be a live handle; non-null outputs must be large enough.
 */
int32_t gameirl_trace_record(const struct GameirlTrace *trace, size_t index, double *k_out, double *p_out, double *q_out);

/**
 * # Safety
 * `trace` must be a live handle and `path` a NUL-terminated string.
 */
int32_t gameirl_trace_write_csv(const struct GameirlTrace *trace, const char *path);

/**
 * # Safety
 * `trace` must be null or a handle not yet freed.
 */
void gameirl_trace_free(struct GameirlTrace *trace);

/**
 * Imitation index over `samples` states of dimension `n`, stored row by row.
 *
 * # Safety
 * Both buffers must hold `samples * n` doubles; `out` must be writable.
 */
int32_t gameirl_imitation_error(const double *learner, const double *target, size_t samples, size_t n, double *out);

/**
 * Loads and validates a scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t gameirl_scenario_load(const char *path, struct GameirlScenario **out);

/**
 * Redirects all artifacts of the scenario to `dir`.
 *
 * # Safety
 * `scenario` must be a live handle and `dir` a NUL-terminated string.
 */
int32_t gameirl_scenario_set_output_dir(struct GameirlScenario *scenario, const char *dir);

/**
 * Runs the scenario and writes its artifacts. `passed_out`, if non-null,
 * receives 1 when every run converged and every required check passed.
 *
 * # Safety
 * `scenario` must be a live handle; `passed_out` null or writable.
 */
int32_t gameirl_scenario_run(const struct GameirlScenario *scenario, int32_t *passed_out);

/**
 * Simulates the scenario's expert and learner and returns both batches.
 *
 * # Safety
 * `scenario` must be a live handle; both outputs must be writable.
 */
int32_t gameirl_scenario_collect(const struct GameirlScenario *scenario, struct GameirlBatch **expert_out, struct GameirlBatch **learner_out);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void gameirl_scenario_free(struct GameirlScenario *scenario);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAMEIRL_H */
