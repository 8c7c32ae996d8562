#ifndef ONEBIT_CE_H
#define ONEBIT_CE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Representation a channel matrix is expressed in.
 */
typedef enum OcDomain {
  OC_DOMAIN_SPATIAL = 0,
  OC_DOMAIN_ANGULAR = 1,
} OcDomain;

/**
 * Result code of every fallible call.
 */
typedef enum OcStatus {
  OC_STATUS_OK = 0,
  OC_STATUS_NULL_POINTER = 1,
  OC_STATUS_INVALID_ARGUMENT = 2,
  OC_STATUS_INVALID_STATE = 3,
  OC_STATUS_CONFIG = 4,
  OC_STATUS_IO = 5,
  OC_STATUS_FORMAT = 6,
  OC_STATUS_MISSING_PREREQUISITE = 7,
  OC_STATUS_DIVERGED = 8,
  OC_STATUS_PANIC = 9,
} OcStatus;

/**
 * Experiment configuration.
 */
typedef struct OcConfig OcConfig;

/**
 * A loaded stage-1 model with an optional stage-2 refiner.
 */
typedef struct OcEstimator OcEstimator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *oc_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *oc_version(void);

/**
 * New configuration holding the desk preset.
 */
enum OcStatus oc_config_new_desk(struct OcConfig **out);

/**
 * Parse a TOML configuration document.
 */
enum OcStatus oc_config_from_toml(const char *text, struct OcConfig **out);

enum OcStatus oc_config_set_output_dir(struct OcConfig *cfg, const char *dir);

/**
 * Array size, users and pilot length of a configuration.
 */
enum OcStatus oc_config_dims(const struct OcConfig *cfg,
                             size_t *num_antennas,
                             size_t *num_users,
                             size_t *num_pilots);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void oc_config_free(struct OcConfig *cfg);

/**
 * Generate the training and test corpora under the configured output dir.
 */
enum OcStatus oc_generate_data(const struct OcConfig *cfg);

/**
 * Train the cGAN on the generated corpus (`resume != 0` extends the
 * existing checkpoint).
 */
enum OcStatus oc_train_cgan(const struct OcConfig *cfg, int resume);

/**
 * Train a RIDNet in `domain` on top of the existing cGAN checkpoint.
 */
enum OcStatus oc_train_ridnet(const struct OcConfig *cfg, enum OcDomain domain, int resume);

/**
 * Load the trained checkpoints of `cfg`. With `refine != 0` the RIDNet of
 * `domain` is loaded as well.
 */
enum OcStatus oc_estimator_load(const struct OcConfig *cfg,
                                int refine,
                                enum OcDomain domain,
                                struct OcEstimator **out);

enum OcStatus oc_estimator_dims(const struct OcEstimator *est,
                                size_t *num_antennas,
                                size_t *num_users,
                                size_t *num_pilots);

/**
 * Estimate the spatial `N x K` channel from a one-bit observation `y`
 * (`N x Q`) and the pilot block `pilots` (`K x Q`).
 */
enum OcStatus oc_estimate(const struct OcEstimator *est,
                          const double *y,
                          const double *pilots,
                          double *h_out);

/**
 * # Safety
 * `est` must be null or a handle from this library not yet freed.
 */
void oc_estimator_free(struct OcEstimator *est);

/**
 * Draw sample `index` of the channel stream `seed` for a half-wavelength
 * ULA: `N x K`, `num_paths` paths per user.
 */
enum OcStatus oc_draw_channel(size_t num_antennas,
                              size_t num_users,
                              size_t num_paths,
                              uint64_t seed,
                              uint64_t index,
                              double *h_out);

/**
 * Random unit-modulus QPSK pilot block, `K x Q`.
 */
enum OcStatus oc_generate_pilots(size_t num_users, size_t num_pilots, uint64_t seed, double *p_out);

/**
 * One-bit observation `sgn(H P + noise)` at `snr_db`, noise from `seed`.
 */
enum OcStatus oc_observe(const double *h,
                         size_t num_antennas,
                         size_t num_users,
                         const double *pilots,
                         size_t num_pilots,
                         double snr_db,
                         uint64_t seed,
                         double *y_out);

/**
 * NMSE in dB of `len` interleaved complex entries of `est` against `truth`.
 */
enum OcStatus oc_nmse_db(const double *est, const double *truth, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONEBIT_CE_H */
