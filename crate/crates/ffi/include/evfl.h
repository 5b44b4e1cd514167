#ifndef EVFL_H
#define EVFL_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

#define EVFL_ABI_VERSION 1

typedef enum EvflStatus {
  EVFL_STATUS_OK = 0,
  EVFL_STATUS_NULL_POINTER = 1,
  EVFL_STATUS_INVALID_ARGUMENT = 2,
  EVFL_STATUS_IO = 3,
  EVFL_STATUS_PARSE = 4,
  EVFL_STATUS_INVALID_CONFIG = 5,
  EVFL_STATUS_DIMENSION_MISMATCH = 6,
  EVFL_STATUS_LAYOUT_MISMATCH = 7,
  EVFL_STATUS_CHECKPOINT = 8,
  EVFL_STATUS_EMPTY = 9,
  EVFL_STATUS_NUMERIC = 10,
  EVFL_STATUS_PANIC = 99,
} EvflStatus;

/**
 * A trained predictor and its preprocessing, restored from a run directory.
 */
typedef struct EvflPredictor EvflPredictor;

/**
 * Result of a station-level heterogeneity analysis.
 */
typedef struct EvflReport EvflReport;

typedef struct EvflHeterogeneitySummary {
  double js_weighted;
  double js_max;
  double mu_iid;
  double sigma_iid;
  double tau_iid;
  bool non_iid;
  size_t n_clients;
} EvflHeterogeneitySummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t evfl_abi_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *evfl_last_error(void);

/**
 * Number of base (pre-imputation) feature columns a predictor takes.
 */
size_t evfl_base_feature_count(void);

/**
 * Trapezoidal energy in kWh of current samples (A) at times (s).
 *
 * # Safety
 * `times` and `currents` must be valid for `n` reads; `out` for one write.
 */
enum EvflStatus evfl_early_energy(const double *times,
                                  const double *currents,
                                  size_t n,
                                  double voltage_v,
                                  double *out);

/**
 * Least-squares slope of `values` over `times`. Fails with
 * `EVFL_STATUS_NUMERIC` when fewer than two distinct times are given.
 *
 * # Safety
 * `times` and `values` must be valid for `n` reads; `out` for one write.
 */
enum EvflStatus evfl_slope(const double *times, const double *values, size_t n, double *out);

/**
 * Jensen–Shannon divergence (natural log) between two probability vectors
 * over the same `bins` bins.
 *
 * # Safety
 * `p` and `q` must be valid for `bins` reads; `out` for one write.
 */
enum EvflStatus evfl_js_divergence(const double *p, const double *q, size_t bins, double *out);

/**
 * Sample-weighted average of `n_clients` parameter vectors stored row-major
 * in `params` (`n_clients × n_params`).
 *
 * # Safety
 * `params` must be valid for `n_clients·n_params` reads, `n_samples` for
 * `n_clients` reads and `out` for `n_params` writes.
 */
enum EvflStatus evfl_aggregate(const double *params,
                               const size_t *n_samples,
                               size_t n_clients,
                               size_t n_params,
                               double *out);

/**
 * Station-level heterogeneity analysis of `targets`, where `station_ids[i]`
 * names the station of `targets[i]`. `bins`/`n_permutations` of 0 select the
 * defaults.
 *
 * # Safety
 * `targets` and `station_ids` must be valid for `n` reads, each id a
 * NUL-terminated string; `out` must be valid for one write.
 */
enum EvflStatus evfl_heterogeneity_analyze(const double *targets,
                                           const char *const *station_ids,
                                           size_t n,
                                           size_t bins,
                                           size_t n_permutations,
                                           uint64_t seed,
                                           struct EvflReport **out);

/**
 * # Safety
 * `report` and `out` must be valid.
 */
enum EvflStatus evfl_report_summary(const struct EvflReport *report,
                                    struct EvflHeterogeneitySummary *out);

/**
 * Station id, divergence and sample count of the client at `rank`
 * (0 = most divergent). The id pointer stays valid until the report is
 * freed.
 *
 * # Safety
 * `report` must be valid; each output valid for one write.
 */
enum EvflStatus evfl_report_client(const struct EvflReport *report,
                                   size_t rank,
                                   const char **station_id,
                                   double *js,
                                   size_t *n_samples);

/**
 * # Safety
 * `report` must be null or a pointer from `evfl_heterogeneity_analyze`
 * that has not been freed.
 */
void evfl_report_free(struct EvflReport *report);

/**
 * Loads the predictor saved in run directory `run_dir`.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated path; `out` valid for one write.
 */
enum EvflStatus evfl_predictor_load(const char *run_dir, struct EvflPredictor **out);

/**
 * # Safety
 * `predictor` must be null or a live handle from `evfl_predictor_load`.
 */
void evfl_predictor_free(struct EvflPredictor *predictor);

/**
 * Number of parameters held by the predictor.
 *
 * # Safety
 * `predictor` must be valid; `out` valid for one write.
 */
enum EvflStatus evfl_predictor_param_count(const struct EvflPredictor *predictor, size_t *out);

/**
 * Copies the predictor's parameters into `out` (capacity `cap`).
 *
 * # Safety
 * `predictor` must be valid and `out` valid for `cap` writes.
 */
enum EvflStatus evfl_predictor_params(const struct EvflPredictor *predictor,
                                      double *out,
                                      size_t cap);

/**
 * Predicts delivered energy (kWh) for one session from its base feature
 * columns (`evfl_base_feature_count()` values, NaN where missing) and its
 * station id. Unseen stations map to the unknown-station embedding.
 *
 * # Safety
 * `base` must be valid for `n_base` reads, `station_id` NUL-terminated and
 * `out` valid for one write.
 */
enum EvflStatus evfl_predictor_predict(const struct EvflPredictor *predictor,
                                       const double *base,
                                       size_t n_base,
                                       const char *station_id,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVFL_H */
