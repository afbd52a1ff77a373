#ifndef SDEGEO_H
#define SDEGEO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SdgConnection {
  SDG_CONNECTION_LE_JAN_WATANABE = 0,
  SDG_CONNECTION_ADJOINT = 1,
  SDG_CONNECTION_LEVI_CIVITA = 2,
} SdgConnection;

typedef enum SdgStatus {
  SDG_STATUS_OK = 0,
  /**
   * The run completed but at least one check failed or was not applicable.
   */
  SDG_STATUS_CHECKS_FAILED = 1,
  SDG_STATUS_CONFIG = 2,
  SDG_STATUS_RUNTIME = 3,
  SDG_STATUS_NULL_POINTER = 4,
  SDG_STATUS_INVALID_ARGUMENT = 5,
  SDG_STATUS_PANIC = 6,
} SdgStatus;

/**
 * Opaque scenario handle.
 */
typedef struct SdgScenario SdgScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *sdg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sdg_version(void);

/**
 * Runs a JSON configuration and stores the JSON report in `*report_out`.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `report_out` a valid
 * pointer. The report must be released with [`sdg_string_free`].
 */
enum SdgStatus sdg_run_json(const char *config, char **report_out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void sdg_string_free(char *s);

/**
 * Builds a scenario from a JSON block such as `{"name": "sphere-gradient", "n": 2}`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SdgStatus sdg_scenario_new(const char *spec, struct SdgScenario **out);

/**
 * # Safety
 * `h` must be null or a handle from [`sdg_scenario_new`], not yet freed.
 */
void sdg_scenario_free(struct SdgScenario *h);

/**
 * Manifold dimension `n`, noise dimension `m` and the number of
 * coordinates a point takes (`n + 1` on spheres, `n` elsewhere).
 *
 * # Safety
 * `h` must be a live handle; the out pointers must be valid.
 */
enum SdgStatus sdg_scenario_dims(const struct SdgScenario *h,
                                 size_t *n,
                                 size_t *m,
                                 size_t *point_len);

/**
 * Induced metric `g = (XXᵀ)⁻¹` in chart coordinates, row-major `n×n`.
 *
 * # Safety
 * `coords` must hold `coords_len` doubles and `out` at least `out_len`.
 */
enum SdgStatus sdg_metric(const struct SdgScenario *h,
                          const double *coords,
                          size_t coords_len,
                          double *out,
                          size_t out_len);

/**
 * Christoffel symbols `Γⁱ_jk` at index `(i·n + j)·n + k`. `connection`
 * takes an [`SdgConnection`] value.
 *
 * # Safety
 * `coords` must hold `coords_len` doubles and `out` at least `out_len`.
 */
enum SdgStatus sdg_christoffel(const struct SdgScenario *h,
                               uint32_t connection,
                               const double *coords,
                               size_t coords_len,
                               double *out,
                               size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDEGEO_H */
