#ifndef OCCUFLOW_H
#define OCCUFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OccuflowStatus {
  OCCUFLOW_STATUS_OK = 0,
  OCCUFLOW_STATUS_NULL_POINTER = 1,
  OCCUFLOW_STATUS_INVALID_ARGUMENT = 2,
  OCCUFLOW_STATUS_IO = 3,
  OCCUFLOW_STATUS_NUMERICAL = 4,
  OCCUFLOW_STATUS_BUFFER_TOO_SMALL = 5,
  OCCUFLOW_STATUS_PANIC = 6,
} OccuflowStatus;

/**
 * Completed estimation run.
 */
typedef struct OccuflowFit OccuflowFit;

/**
 * Loaded occupancy panel.
 */
typedef struct OccuflowPanel OccuflowPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *occuflow_version(void);

/**
 * Message of the last failure on this thread, or null. Free with
 * `occuflow_string_free`.
 */
char *occuflow_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed at most once.
 */
void occuflow_string_free(char *s);

/**
 * `P(I − R = delta)` for `I ~ Poisson(lambda_in)`, `R ~ Poisson(lambda_out)`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
enum OccuflowStatus occuflow_skellam_pmf(int64_t delta,
                                         double lambda_in,
                                         double lambda_out,
                                         double *out);

/**
 * Shrinkage ratio of `refit` relative to `reference`, both of length `len`
 * and on the simplex.
 *
 * # Safety
 * `reference` and `refit` must point to `len` doubles, `out` to one.
 */
enum OccuflowStatus occuflow_estimate_c(const double *reference,
                                        const double *refit,
                                        uintptr_t len,
                                        double *out);

/**
 * Scale squared deviations of `omega` from `1/len` by `factor`, clip and
 * renormalize into `out` (length `len`).
 *
 * # Safety
 * `omega` and `out` must point to `len` doubles.
 */
enum OccuflowStatus occuflow_correct_omega(const double *omega,
                                           uintptr_t len,
                                           double factor,
                                           double *out);

/**
 * Load a panel CSV with the default column names.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OccuflowStatus occuflow_panel_load(const char *path, struct OccuflowPanel **out);

/**
 * # Safety
 * `panel` must be null or a handle from `occuflow_panel_load`, freed once.
 */
void occuflow_panel_free(struct OccuflowPanel *panel);

/**
 * # Safety
 * `panel` must be a live handle.
 */
uintptr_t occuflow_panel_districts(const struct OccuflowPanel *panel);

/**
 * Number of dates in the panel.
 *
 * # Safety
 * `panel` must be a live handle.
 */
uintptr_t occuflow_panel_days(const struct OccuflowPanel *panel);

/**
 * Run the estimation. `config_toml` may be null for defaults; otherwise it
 * is the text of a run configuration whose `fit` section is used.
 *
 * # Safety
 * `panel` must be a live handle, `config_toml` null or NUL-terminated,
 * `out` a valid pointer.
 */
enum OccuflowStatus occuflow_fit_run(const struct OccuflowPanel *panel,
                                     const char *config_toml,
                                     uint64_t seed,
                                     struct OccuflowFit **out);

/**
 * # Safety
 * `fit` must be null or a handle from `occuflow_fit_run`, freed once.
 */
void occuflow_fit_free(struct OccuflowFit *fit);

/**
 * Completed iterations.
 *
 * # Safety
 * `fit` must be a live handle.
 */
uintptr_t occuflow_fit_iterations(const struct OccuflowFit *fit);

/**
 * Window medians of the exit rates. `written` receives the number of lags
 * even when the buffer is too small.
 *
 * # Safety
 * `fit` must be a live handle, `out` must hold `capacity` doubles, `written`
 * may be null.
 */
enum OccuflowStatus occuflow_fit_exit_rates(const struct OccuflowFit *fit,
                                            double *out,
                                            uintptr_t capacity,
                                            uintptr_t *written);

/**
 * Window medians of the inflow coefficients, in design order.
 *
 * # Safety
 * As for `occuflow_fit_exit_rates`.
 */
enum OccuflowStatus occuflow_fit_coefficients(const struct OccuflowFit *fit,
                                              double *out,
                                              uintptr_t capacity,
                                              uintptr_t *written);

/**
 * Write the iteration trace as line-delimited JSON.
 *
 * # Safety
 * `fit` must be a live handle and `path` NUL-terminated.
 */
enum OccuflowStatus occuflow_fit_write_trace(const struct OccuflowFit *fit, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCCUFLOW_H */
