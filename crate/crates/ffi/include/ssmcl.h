#ifndef SSMCL_H
#define SSMCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsmclStatus {
  SSMCL_STATUS_OK = 0,
  SSMCL_STATUS_NULL_POINTER = 1,
  SSMCL_STATUS_SHAPE = 2,
  SSMCL_STATUS_DOMAIN = 3,
  SSMCL_STATUS_CONFIG = 4,
  SSMCL_STATUS_FORMAT = 5,
  SSMCL_STATUS_NUMERIC = 6,
  SSMCL_STATUS_CONVERGENCE = 7,
  SSMCL_STATUS_IO = 8,
  SSMCL_STATUS_PANIC = 9,
} SsmclStatus;

// Generated or loaded task list.
typedef struct SsmclDataset SsmclDataset;

// Result of a completed training run.
typedef struct SsmclRun SsmclRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Why the most recent call on this thread failed, or null if it
// succeeded. Valid until the next call into this library on the thread.
const char *ssmcl_last_error(void);

// Symmetric eigendecomposition of the `n×n` matrix `s`. Writes `n`
// descending eigenvalues and the `n×n` eigenvector matrix (columns).
//
// # Safety
// `s` and `vectors_out` must hold `n*n` doubles, `values_out` `n` doubles.
enum SsmclStatus ssmcl_sym_eigh(const double *s, size_t n, double *values_out, double *vectors_out);

// Null-space dimension chosen by the L-shape corner rule.
//
// # Safety
// `eigvals` must hold `len` doubles; `rank_out` must be writable.
enum SsmclStatus ssmcl_select_null_rank(const double *eigvals, size_t len, size_t *rank_out);

// Relaxed projector `ηU₀U₀ᵀ + (1−η)I` of the `n×n` covariance `q`.
//
// # Safety
// `q` and `h_out` must hold `n*n` doubles.
enum SsmclStatus ssmcl_build_projector(const double *q, size_t n, double eta, double *h_out);

// Final average accuracy and forgetting of a `t×t` row-major accuracy
// matrix; entries above the diagonal are ignored. `has_forgetting` is 0
// when `t == 1`.
//
// # Safety
// `acc` must hold `t*t` doubles; the outputs must be writable.
enum SsmclStatus ssmcl_final_metrics(const double *acc,
                                     size_t t,
                                     double *avg_accuracy,
                                     double *avg_forgetting,
                                     int *has_forgetting);

// Generates the benchmark described by the `[bench]` table of a TOML
// config (null for defaults).
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` writable.
enum SsmclStatus ssmcl_dataset_generate(const char *config_toml, struct SsmclDataset **out);

// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum SsmclStatus ssmcl_dataset_load(const char *path, struct SsmclDataset **out);

// # Safety
// `ds` must come from this library; `path` must be a NUL-terminated string.
enum SsmclStatus ssmcl_dataset_save(const struct SsmclDataset *ds, const char *path);

// # Safety
// `ds` must come from this library; `out` writable.
enum SsmclStatus ssmcl_dataset_num_tasks(const struct SsmclDataset *ds, size_t *out);

// # Safety
// `ds` must be null or come from this library, and not be used afterwards.
void ssmcl_dataset_free(struct SsmclDataset *ds);

// Trains on `ds` (or on the config's benchmark when `ds` is null) with the
// settings of a TOML run config (null for defaults).
//
// # Safety
// Pointers must be null or valid as described; `out` writable.
enum SsmclStatus ssmcl_run_train(const char *config_toml,
                                 const struct SsmclDataset *ds,
                                 struct SsmclRun **out);

// # Safety
// `run` must come from this library; `out` writable.
enum SsmclStatus ssmcl_run_num_tasks(const struct SsmclRun *run, size_t *out);

// Copies the accuracy matrix as `t×t` row-major doubles; entries above the
// diagonal are written as NaN. `capacity` is the buffer length in doubles.
//
// # Safety
// `run` must come from this library; `acc_out` must hold `capacity` doubles.
enum SsmclStatus ssmcl_run_accuracy(const struct SsmclRun *run, double *acc_out, size_t capacity);

// # Safety
// `run` must come from this library; the outputs must be writable.
enum SsmclStatus ssmcl_run_metrics(const struct SsmclRun *run,
                                   double *avg_accuracy,
                                   double *avg_forgetting,
                                   int *has_forgetting);

// # Safety
// `run` must come from this library; `path` must be a NUL-terminated string.
enum SsmclStatus ssmcl_run_save_checkpoint(const struct SsmclRun *run, const char *path);

// # Safety
// `run` must be null or come from this library, and not be used afterwards.
void ssmcl_run_free(struct SsmclRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSMCL_H */
