#ifndef ZOFT_H
#define ZOFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ZoftStatus {
  ZOFT_STATUS_OK = 0,
  ZOFT_STATUS_NULL_POINTER = 1,
  ZOFT_STATUS_INVALID_ARGUMENT = 2,
  ZOFT_STATUS_PARTITION_MISMATCH = 3,
  ZOFT_STATUS_NUMERIC = 4,
  ZOFT_STATUS_CHECKPOINT = 5,
  ZOFT_STATUS_DIVERGED = 6,
  ZOFT_STATUS_PANIC = 7,
} ZoftStatus;

/**
 * Named contiguous blocks over a flat parameter vector.
 */
typedef struct ZoftPartition ZoftPartition;

/**
 * Per-block perturbation network.
 */
typedef struct ZoftPertNN ZoftPertNN;

/**
 * Block-diagonal quadratic testbed.
 */
typedef struct ZoftQuadratic ZoftQuadratic;

/**
 * Descent bounds at `theta` for step size `eta`.
 */
typedef struct ZoftBounds {
  double mezo;
  double blockwise_unit;
  double blockwise_optimal;
} ZoftBounds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *zoft_last_error(void);

/**
 * # Safety
 * `sizes` must point to `n` readable values and `out` must be writable.
 */
enum ZoftStatus zoft_partition_new(const uintptr_t *sizes,
                                   uintptr_t n,
                                   struct ZoftPartition **out_partition);

/**
 * # Safety
 * `partition` must come from [`zoft_partition_new`] and not be freed yet, or be null.
 */
void zoft_partition_free(struct ZoftPartition *partition);

/**
 * Total dimension; 0 for a null handle.
 *
 * # Safety
 * `partition` must be a live handle or null.
 */
uintptr_t zoft_partition_dim(const struct ZoftPartition *partition);

/**
 * Number of blocks; 0 for a null handle.
 *
 * # Safety
 * `partition` must be a live handle or null.
 */
uintptr_t zoft_partition_blocks(const struct ZoftPartition *partition);

/**
 * Rescales `raw` (one std per block) onto the variance budget.
 *
 * # Safety
 * `raw` and `out_scales` must each hold `n` values.
 */
enum ZoftStatus zoft_normalize_scales(const struct ZoftPartition *partition,
                                      const double *raw,
                                      double *out_scales,
                                      uintptr_t n);

/**
 * Writes the seeded perturbation `u|block i = s_i z` into `out_noise`.
 *
 * # Safety
 * `scales` holds one value per block; `out_noise` holds `dim` values.
 */
enum ZoftStatus zoft_sample_noise(const struct ZoftPartition *partition,
                                  const double *scales,
                                  uintptr_t blocks,
                                  uint64_t seed,
                                  uint64_t stream,
                                  double *out_noise,
                                  uintptr_t dim);

/**
 * `theta <- theta + step * u(seed, stream, scales)`.
 *
 * # Safety
 * `theta` holds `dim` values; `scales` holds one value per block.
 */
enum ZoftStatus zoft_perturb_in_place(const struct ZoftPartition *partition,
                                      double *theta,
                                      uintptr_t dim,
                                      const double *scales,
                                      uintptr_t blocks,
                                      uint64_t seed,
                                      uint64_t stream,
                                      double step);

/**
 * Random initialization whose outputs start near 1.
 *
 * # Safety
 * `partition` must be live; `out_net` must be writable.
 */
enum ZoftStatus zoft_pertnn_init(const struct ZoftPartition *partition,
                                 uintptr_t hidden,
                                 uint64_t seed,
                                 struct ZoftPertNN **out_net);

/**
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out_net` must be writable.
 */
enum ZoftStatus zoft_pertnn_load(const char *path_utf8, struct ZoftPertNN **out_net);

/**
 * # Safety
 * `net` must be live; `path` must be a NUL-terminated UTF-8 string.
 */
enum ZoftStatus zoft_pertnn_save(const struct ZoftPertNN *net, const char *path_utf8);

/**
 * # Safety
 * `net` must come from an init or load call and not be freed yet, or be null.
 */
void zoft_pertnn_free(struct ZoftPertNN *net);

/**
 * Raw scale for `block` from the five features
 * `(loss_plus, loss_minus, prev_scale, mean, var)`.
 *
 * # Safety
 * `features` holds 5 values; `out_scale` must be writable.
 */
enum ZoftStatus zoft_pertnn_forward(const struct ZoftPertNN *net,
                                    uintptr_t block,
                                    const double *features,
                                    double *out_scale);

/**
 * Quadratic with per-block rank profile; optimum at 0, start at all ones.
 *
 * # Safety
 * `sizes`, `ranks` and `opnorms` each hold `n` values; `out_task` must be writable.
 */
enum ZoftStatus zoft_quadratic_rank_family(const uintptr_t *sizes,
                                           const double *ranks,
                                           const double *opnorms,
                                           uintptr_t n,
                                           struct ZoftQuadratic **out_task);

/**
 * # Safety
 * `task` must come from [`zoft_quadratic_rank_family`] and not be freed yet, or be null.
 */
void zoft_quadratic_free(struct ZoftQuadratic *task);

/**
 * Dimension of the task; 0 for a null handle.
 *
 * # Safety
 * `task` must be a live handle or null.
 */
uintptr_t zoft_quadratic_dim(const struct ZoftQuadratic *task);

/**
 * Exact (noise-free) loss at `theta`.
 *
 * # Safety
 * `theta` holds `dim` values; `out_loss` must be writable.
 */
enum ZoftStatus zoft_quadratic_loss(const struct ZoftQuadratic *task,
                                    const double *theta,
                                    uintptr_t dim,
                                    double *out_loss);

/**
 * Runs `steps` ZO-SGD steps from the task's initial point and writes the
 * pre-update loss of each step into `out_losses`. A null `net` selects
 * unit scales (MeZO). Returns `ZOFT_STATUS_DIVERGED` when the guard trips;
 * the losses recorded up to that point are still written.
 *
 * # Safety
 * `out_losses` holds `steps` values.
 */
enum ZoftStatus zoft_finetune(const struct ZoftQuadratic *task,
                              const struct ZoftPertNN *net,
                              double learning_rate,
                              uintptr_t steps,
                              uint64_t seed,
                              double *out_losses);

/**
 * # Safety
 * `theta` holds `dim` values; `out_bounds` must be writable.
 */
enum ZoftStatus zoft_bounds(const struct ZoftQuadratic *task,
                            const double *theta,
                            uintptr_t dim,
                            double eta,
                            struct ZoftBounds *out_bounds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZOFT_H */
