#ifndef MLORA_H
#define MLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdbool.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum MloraStatus {
    MLORA_STATUS_OK = 0,
    MLORA_STATUS_NULL_POINTER = 1,
    MLORA_STATUS_INVALID_ARGUMENT = 2,
    MLORA_STATUS_DIMENSION_MISMATCH = 3,
    MLORA_STATUS_RANK_OUT_OF_RANGE = 4,
    MLORA_STATUS_IO = 5,
    MLORA_STATUS_FORMAT = 6,
    MLORA_STATUS_DIVERGENCE = 7,
    MLORA_STATUS_PANIC = 8,
} MloraStatus;

// Per-rank multiplier `s_k`. Passed as `uint32_t` so that out-of-range
// values from C are rejected instead of being undefined behaviour.
typedef enum MloraScaling {
    MLORA_SCALING_UNIT = 0,
    MLORA_SCALING_INVERSE = 1,
    MLORA_SCALING_INVERSE_SQRT = 2,
} MloraScaling;

// A trained or loaded checkpoint.
typedef struct MloraCheckpoint MloraCheckpoint;

// Message describing the last failure on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *mlora_last_error(void);

// Rank weights `P` for the rank set `ranks[0..n_ranks]` (strictly
// ascending, within `1..=max_rank`). Writes `max_rank` values to `out`.
//
// # Safety
// `ranks` must be valid for `n_ranks` reads and `out` for `out_len` writes.
enum MloraStatus mlora_compute_p(const size_t *ranks,
                                 size_t n_ranks,
                                 size_t max_rank,
                                 uint32_t scaling_mode,
                                 double *out,
                                 size_t out_len);

// Weights that reproduce plain LoRA (`k == 0`) or the rank-`k` slice.
//
// # Safety
// `out` must be valid for `out_len` writes.
enum MloraStatus mlora_recovery_weights(size_t k,
                                        size_t max_rank,
                                        uint32_t scaling_mode,
                                        double *out,
                                        size_t out_len);

// Area under the rank-accuracy curve given by `len` points; with
// `log_spaced` the ranks are placed at `log₂(rank)`.
//
// # Safety
// `ranks` and `scores` must be valid for `len` reads; `out` for one write.
enum MloraStatus mlora_aurac(const size_t *ranks,
                             const double *scores,
                             size_t len,
                             bool log_spaced,
                             double *out);

// `y = x·(W₀ + A·diag(p)·B)` with `x` `d×m`, `W₀` `m×n`, `A` `m×r`,
// `B` `r×n`, `p` of length `r`; writes `d×n` values to `y`.
//
// # Safety
// Every pointer must be valid for the number of elements its shape implies.
enum MloraStatus mlora_forward_diag(const double *x,
                                    size_t d,
                                    size_t m,
                                    const double *w0,
                                    size_t n,
                                    const double *a,
                                    const double *b,
                                    size_t r,
                                    const double *p,
                                    double *y);

// Adapter gradients for upstream weight gradient `delta` (`m×n`):
// `grad_a = delta·Bᵀ·diag(p)` (`m×r`) and `grad_b = diag(p)·Aᵀ·delta` (`r×n`).
//
// # Safety
// Every pointer must be valid for the number of elements its shape implies.
enum MloraStatus mlora_grad_adapters(const double *delta,
                                     size_t m,
                                     size_t n,
                                     const double *a,
                                     const double *b,
                                     size_t r,
                                     const double *p,
                                     double *grad_a,
                                     double *grad_b);

// Read a checkpoint file. On success `*out` receives a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for one write.
enum MloraStatus mlora_checkpoint_load(const char *path, struct MloraCheckpoint **out);

// Train from a JSON training configuration (the same document embedded in
// checkpoint files). On success `*out` receives a new handle.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` valid for one write.
enum MloraStatus mlora_train_json(const char *config_json, struct MloraCheckpoint **out);

// Write the checkpoint atomically to `path`.
//
// # Safety
// `ckpt` must be a live handle and `path` a NUL-terminated string.
enum MloraStatus mlora_checkpoint_save(const struct MloraCheckpoint *ckpt, const char *path);

// Release a handle. Null is ignored.
//
// # Safety
// `ckpt` must be null or a handle not yet freed.
void mlora_checkpoint_free(struct MloraCheckpoint *ckpt);

// Input dimension `m`, output dimension `n` and bottleneck `R`.
//
// # Safety
// `ckpt` must be a live handle; the outputs valid for one write each.
enum MloraStatus mlora_checkpoint_dims(const struct MloraCheckpoint *ckpt,
                                       size_t *in_dim,
                                       size_t *out_dim,
                                       size_t *max_rank);

// Deployment weight `W₀ + s_k·A_k·B_k`, `m×n` row-major.
//
// # Safety
// `ckpt` must be a live handle and `out` valid for `out_len` writes.
enum MloraStatus mlora_checkpoint_merge(const struct MloraCheckpoint *ckpt,
                                        size_t k,
                                        double *out,
                                        size_t out_len);

// Rank weights implied by the checkpoint's training configuration
// (`R` values).
//
// # Safety
// `ckpt` must be a live handle and `out` valid for `out_len` writes.
enum MloraStatus mlora_checkpoint_training_p(const struct MloraCheckpoint *ckpt,
                                             double *out,
                                             size_t out_len);

// Explained-variance score (0–100) of the rank-`k` deployment weight on the
// checkpoint's own synthetic task.
//
// # Safety
// `ckpt` must be a live handle and `out` valid for one write.
enum MloraStatus mlora_checkpoint_score(const struct MloraCheckpoint *ckpt, size_t k, double *out);

#endif  /* MLORA_H */
