#ifndef GRADLEAK_H
#define GRADLEAK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum GlStatus {
  GL_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  GL_STATUS_NULL_POINTER = 1,
  /**
   * Arguments were rejected before any work started.
   */
  GL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The computation failed; see the last error message.
   */
  GL_STATUS_RUNTIME = 3,
  /**
   * A caller buffer is too small.
   */
  GL_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * An internal panic was caught.
   */
  GL_STATUS_PANIC = 5,
} GlStatus;

/**
 * An ordered list of labelled images.
 */
typedef struct GlDataset GlDataset;

/**
 * A model architecture.
 */
typedef struct GlModel GlModel;

/**
 * A flat parameter vector tied to a model layout.
 */
typedef struct GlParams GlParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns its full length in bytes.
 * Pass a null `buf` to query the length.
 */
size_t gl_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gl_version(void);

/**
 * Tanh MLP on `channels x height x width` inputs with `n_hidden` hidden
 * widths (none gives a linear model).
 */
enum GlStatus gl_model_mlp(size_t channels,
                           size_t height,
                           size_t width,
                           const size_t *hidden,
                           size_t n_hidden,
                           size_t classes,
                           struct GlModel **out);

/**
 * Two-stage tanh CNN with mean pooling.
 */
enum GlStatus gl_model_lenet_tiny(size_t channels,
                                  size_t height,
                                  size_t width,
                                  size_t classes,
                                  struct GlModel **out);

void gl_model_free(struct GlModel *model);

/**
 * Parameter count of `model`, 0 if it is null.
 */
size_t gl_model_param_count(const struct GlModel *model);

/**
 * Seeded initial parameters.
 */
enum GlStatus gl_params_init(const struct GlModel *model, uint64_t seed, struct GlParams **out);

/**
 * Parameters from `len` caller values laid out as in `gl_params_copy`.
 */
enum GlStatus gl_params_from_values(const struct GlModel *model,
                                    const double *values,
                                    size_t len,
                                    struct GlParams **out);

void gl_params_free(struct GlParams *params);

/**
 * Entry count, 0 if `params` is null.
 */
size_t gl_params_len(const struct GlParams *params);

/**
 * Copies the values into `buf`, which must hold `gl_params_len` entries.
 */
enum GlStatus gl_params_copy(const struct GlParams *params, double *buf, size_t len);

/**
 * `count` synthetic blob images for `model`'s input shape and classes.
 */
enum GlStatus gl_dataset_synth(const struct GlModel *model,
                               size_t blobs,
                               size_t count,
                               uint64_t seed,
                               struct GlDataset **out);

void gl_dataset_free(struct GlDataset *dataset);

/**
 * Example count, 0 if `dataset` is null.
 */
size_t gl_dataset_len(const struct GlDataset *dataset);

/**
 * Copies image `index` (`C*H*W` values) into `buf` and its label into `label`.
 */
enum GlStatus gl_dataset_image(const struct GlDataset *dataset,
                               size_t index,
                               double *buf,
                               size_t len,
                               size_t *label);

/**
 * One FedAvg round: `dataset` is split into consecutive shards of
 * `sizes[0..clients]`, each client runs `local_iters` full-batch steps.
 */
enum GlStatus gl_fedavg_round(const struct GlModel *model,
                              const struct GlParams *params,
                              const struct GlDataset *dataset,
                              const size_t *sizes,
                              size_t clients,
                              size_t local_iters,
                              double eta,
                              struct GlParams **out);

/**
 * Gradient sum over the round's images divided by its size, recovered
 * from two consecutive global parameter vectors.
 */
enum GlStatus gl_extract_update(const struct GlParams *w_t,
                                const struct GlParams *w_t1,
                                double eta,
                                struct GlParams **out);

/**
 * Norm of the gap between the FedAvg round and the super-client round
 * on the same data; written to `norm`.
 */
enum GlStatus gl_delta_tau(const struct GlModel *model,
                           const struct GlParams *params,
                           const struct GlDataset *dataset,
                           const size_t *sizes,
                           size_t clients,
                           size_t local_iters,
                           double eta,
                           double *norm);

/**
 * Super-client inversion of the update from `w_t` to `w_t1`.
 *
 * `labels[0..count]` are the assumed labels; the best reconstruction
 * (`count*C*H*W` values) goes to `recon` and its loss to `loss`.
 */
enum GlStatus gl_attack(const struct GlModel *model,
                        const struct GlParams *w_t,
                        const struct GlParams *w_t1,
                        const size_t *labels,
                        size_t count,
                        double eta,
                        size_t local_iters,
                        double lr,
                        size_t budget,
                        size_t upsample,
                        uint64_t seed,
                        double *recon,
                        size_t recon_len,
                        double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADLEAK_H */
