#ifndef CELLMIL_H
#define CELLMIL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CellmilStatus {
  CELLMIL_STATUS_OK = 0,
  CELLMIL_STATUS_NULL_ARGUMENT = 1,
  CELLMIL_STATUS_INVALID_ARGUMENT = 2,
  CELLMIL_STATUS_IO = 3,
  /**
   * Malformed or inconsistent cohort data.
   */
  CELLMIL_STATUS_FORMAT = 4,
  CELLMIL_STATUS_CONFIG = 5,
  /**
   * The statistic is not defined for the input (for example no events).
   */
  CELLMIL_STATUS_UNDEFINED = 6,
  CELLMIL_STATUS_NUMERICAL = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  CELLMIL_STATUS_PANIC = 8,
  CELLMIL_STATUS_FAILED = 9,
} CellmilStatus;

/**
 * A loaded or generated cohort.
 */
typedef struct CellmilCohort CellmilCohort;

/**
 * Mean and sample standard deviation of per-fold test metrics. NaN marks a
 * metric that no fold could compute.
 */
typedef struct CellmilTrainSummary {
  uint32_t folds;
  double auc_mean;
  double auc_std;
  double accuracy_mean;
  double sensitivity_mean;
  double specificity_mean;
} CellmilTrainSummary;

typedef struct CellmilCoxFit {
  double beta;
  double se;
  double hazard_ratio;
  double ci_low;
  double ci_high;
  double p_value;
  uint32_t iterations;
  bool converged;
} CellmilCoxFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static nul-terminated string.
 */
const char *cellmil_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into the library from this thread.
 */
const char *cellmil_last_error(void);

/**
 * Loads a cohort from its manifest path.
 *
 * # Safety
 * `manifest_path` must be a nul-terminated string and `out` a valid pointer.
 */
enum CellmilStatus cellmil_cohort_load(const char *manifest_path, struct CellmilCohort **out);

/**
 * Generates a synthetic cohort. `config_json` is a synthesis configuration
 * object; null uses the defaults.
 *
 * # Safety
 * `config_json` must be null or nul-terminated and `out` a valid pointer.
 */
enum CellmilStatus cellmil_cohort_synthesize(const char *config_json, struct CellmilCohort **out);

/**
 * Writes the cohort's slide files and manifest under `dir`.
 *
 * # Safety
 * `cohort` must come from this library; `dir` must be nul-terminated.
 */
enum CellmilStatus cellmil_cohort_save(const struct CellmilCohort *cohort, const char *dir);

/**
 * # Safety
 * `cohort` must be null or come from this library, and not be used again.
 */
void cellmil_cohort_free(struct CellmilCohort *cohort);

/**
 * Number of patients; 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or come from this library.
 */
size_t cellmil_cohort_patient_count(const struct CellmilCohort *cohort);

/**
 * Number of slides; 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or come from this library.
 */
size_t cellmil_cohort_slide_count(const struct CellmilCohort *cohort);

/**
 * Cross-validates one model on the cohort. `config_json` is a training
 * configuration object (null for defaults). When `out_dir` is not null the
 * run directory is written there.
 *
 * # Safety
 * Pointers must be valid; strings nul-terminated.
 */
enum CellmilStatus cellmil_train(const struct CellmilCohort *cohort,
                                 const char *config_json,
                                 size_t workers,
                                 const char *out_dir,
                                 struct CellmilTrainSummary *summary);

/**
 * `2·min(sensitivity, specificity)`.
 */
double cellmil_clinical_score(double sensitivity, double specificity);

/**
 * Area under the ROC curve; `labels` are 0 or non-zero.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum CellmilStatus cellmil_roc_auc(const double *scores,
                                   const uint8_t *labels,
                                   size_t n,
                                   double *out);

/**
 * Harrell's C of risk scores against follow-up times and event flags.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum CellmilStatus cellmil_concordance_index(const double *scores,
                                             const double *times,
                                             const uint8_t *events,
                                             size_t n,
                                             double *out);

/**
 * Kaplan-Meier survival probability at time `t`.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum CellmilStatus cellmil_km_survival_at(const double *times,
                                          const uint8_t *events,
                                          size_t n,
                                          double t,
                                          double *out);

/**
 * Log-rank test between records with `groups[i] != 0` and the rest.
 *
 * # Safety
 * Arrays must hold `n` elements; outputs must be valid.
 */
enum CellmilStatus cellmil_logrank(const double *times,
                                   const uint8_t *events,
                                   const uint8_t *groups,
                                   size_t n,
                                   double *statistic,
                                   double *p_value);

/**
 * Univariable Cox model with Efron ties.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid.
 */
enum CellmilStatus cellmil_cox_univariable(const double *times,
                                           const uint8_t *events,
                                           const double *covariates,
                                           size_t n,
                                           struct CellmilCoxFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELLMIL_H */
