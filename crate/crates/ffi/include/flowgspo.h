#ifndef FLOWGSPO_H
#define FLOWGSPO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_DIMENSION_MISMATCH = 3,
  FG_STATUS_IO = 4,
  FG_STATUS_PARSE = 5,
  FG_STATUS_SHAPE_MISMATCH = 6,
  FG_STATUS_NON_FINITE = 7,
  FG_STATUS_DEGENERATE_DENSITY = 8,
  FG_STATUS_PANIC = 9,
  FG_STATUS_OTHER = 10,
} FgStatus;

typedef enum FgActivation {
  FG_ACTIVATION_TANH = 0,
  FG_ACTIVATION_RELU = 1,
  FG_ACTIVATION_IDENTITY = 2,
} FgActivation;

/**
 * Velocity network, its parameters and the block shape it produces.
 */
typedef struct FgPolicy FgPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a randomly initialized policy.
 *
 * # Safety
 * `hidden` must point to `n_hidden` values and `out` must be writable.
 */
enum FgStatus fg_policy_new(size_t horizon,
                            size_t action_dim,
                            size_t state_dim,
                            const size_t *hidden,
                            size_t n_hidden,
                            enum FgActivation activation,
                            uint64_t seed,
                            struct FgPolicy **out);

/**
 * Loads parameters from a checkpoint file into a network of the given shape.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `hidden` must point to `n_hidden`
 * values and `out` must be writable.
 */
enum FgStatus fg_policy_load(const char *path,
                             size_t horizon,
                             size_t action_dim,
                             size_t state_dim,
                             const size_t *hidden,
                             size_t n_hidden,
                             enum FgActivation activation,
                             struct FgPolicy **out);

/**
 * # Safety
 * `policy` must come from this library; `path` must be NUL-terminated.
 */
enum FgStatus fg_policy_save(const struct FgPolicy *policy, const char *path);

/**
 * Releases a policy. Null is ignored.
 *
 * # Safety
 * `policy` must come from this library and must not be used afterwards.
 */
void fg_policy_free(struct FgPolicy *policy);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or come from this library.
 */
size_t fg_policy_num_params(const struct FgPolicy *policy);

/**
 * Length of one flattened action block, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or come from this library.
 */
size_t fg_policy_block_len(const struct FgPolicy *policy);

/**
 * Evaluates the velocity field at one noisy block.
 *
 * # Safety
 * Each pointer must reference at least its stated number of values.
 */
enum FgStatus fg_policy_velocity(const struct FgPolicy *policy,
                                 const double *block,
                                 size_t block_len,
                                 const double *state,
                                 size_t state_len,
                                 double tau,
                                 double *out,
                                 size_t out_len);

/**
 * Samples one action block. With `sigma_max > 0` the stochastic sampler is
 * used and its log-likelihood is written to `out_logp` when non-null; with
 * `sigma_max == 0` the deterministic sampler runs and `out_logp` gets NaN.
 *
 * # Safety
 * Each pointer must reference at least its stated number of values;
 * `out_logp` may be null.
 */
enum FgStatus fg_policy_sample(const struct FgPolicy *policy,
                               const double *state,
                               size_t state_len,
                               size_t steps,
                               double sigma_max,
                               uint64_t seed,
                               double *out_block,
                               size_t out_len,
                               double *out_logp);

/**
 * Group-standardized advantages `(r - mean) / (std + guard)`.
 *
 * # Safety
 * `rewards` and `out` must each reference `n` values.
 */
enum FgStatus fg_group_advantages(const double *rewards, size_t n, double guard_eps, double *out);

/**
 * Writes the block-wise causal attention mask row by row into `out`
 * (1 = query may attend to key). `out_len` must be the squared token count.
 *
 * # Safety
 * `out` must reference `out_len` bytes.
 */
enum FgStatus fg_mask_build(size_t n_spatial,
                            size_t n_semantic,
                            size_t n_action,
                            size_t chunk_size,
                            uint8_t *out,
                            size_t out_len);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length without the
 * terminator, so a caller can size a buffer by passing `len = 0`.
 *
 * # Safety
 * `buf` must reference `len` writable bytes or be null with `len = 0`.
 */
size_t fg_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWGSPO_H */
