#ifndef SCSREC_H
#define SCSREC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ScsStatus {
  SCS_STATUS_OK = 0,
  SCS_STATUS_NULL_POINTER = 1,
  SCS_STATUS_INVALID_ARGUMENT = 2,
  SCS_STATUS_DIMENSION_MISMATCH = 3,
  SCS_STATUS_UNKNOWN_ARM = 4,
  SCS_STATUS_NUMERICAL = 5,
  SCS_STATUS_PARSE = 6,
  SCS_STATUS_PANIC = 7,
} ScsStatus;

typedef enum ScsSubgroup {
  SCS_SUBGROUP_ACTIVE_RECOMMENDATIONS = 0,
  SCS_SUBGROUP_ACTIVE_MONITORING = 1,
  SCS_SUBGROUP_OPPORTUNITY_FOR_FOLLOW_UP = 2,
} ScsSubgroup;

typedef enum ScsDwellChange {
  SCS_DWELL_CHANGE_IMPROVED = 0,
  SCS_DWELL_CHANGE_WORSENED = 1,
  SCS_DWELL_CHANGE_SAME = 2,
} ScsDwellChange;

// Patient State, A (best) through E (worst).
typedef enum ScsPatientState {
  SCS_PATIENT_STATE_A = 0,
  SCS_PATIENT_STATE_B = 1,
  SCS_PATIENT_STATE_C = 2,
  SCS_PATIENT_STATE_D = 3,
  SCS_PATIENT_STATE_E = 4,
} ScsPatientState;

// Opaque engine handle.
typedef struct ScsBandit ScsBandit;

typedef struct ScsArm {
  uint32_t program_id;
  uint32_t intensity_bin;
} ScsArm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or an empty string.
// Valid until the next call into this library on the same thread.
const char *scs_last_error(void);

// Library version as a static NUL-terminated string.
const char *scs_version(void);

// Creates an engine over `n_arms` arms with `dim`-dimensional contexts.
//
// # Safety
// `arms` must point to `n_arms` values and `out` to writable storage.
enum ScsStatus scs_bandit_new(const struct ScsArm *arms,
                              size_t n_arms,
                              size_t dim,
                              double lambda,
                              double alpha,
                              struct ScsBandit **out);

// Restores an engine from its JSON form.
//
// # Safety
// `json` must be a NUL-terminated string and `out` writable.
enum ScsStatus scs_bandit_from_json(const char *json, struct ScsBandit **out);

// Serializes the engine. Release the string with [`scs_string_free`].
//
// # Safety
// `bandit` must be a live handle and `out` writable.
enum ScsStatus scs_bandit_to_json(const struct ScsBandit *bandit_ptr, char **out);

// Number of arms known to the engine.
//
// # Safety
// `bandit` must be null or a live handle.
size_t scs_bandit_arm_count(const struct ScsBandit *bandit_ptr);

// Context dimension of the engine.
//
// # Safety
// `bandit` must be null or a live handle.
size_t scs_bandit_dim(const struct ScsBandit *bandit_ptr);

// Folds one observation into the model of `arm`.
//
// # Safety
// `bandit` must be a live handle and `context` point to `dim` values.
enum ScsStatus scs_bandit_update(struct ScsBandit *bandit_ptr,
                                 const double *context,
                                 size_t dim,
                                 struct ScsArm arm,
                                 double reward);

// Writes the arm with the highest predicted reward to `out`.
//
// # Safety
// `bandit` must be a live handle, `context` point to `dim` values and
// `out` be writable.
enum ScsStatus scs_bandit_recommend(const struct ScsBandit *bandit_ptr,
                                    const double *context,
                                    size_t dim,
                                    struct ScsArm *out);

// Writes up to `capacity` (arm, prediction) pairs in arm order and the
// total arm count to `written`.
//
// # Safety
// `bandit` must be a live handle, `context` point to `dim` values, `arms`
// and `predictions` to `capacity` writable slots, `written` be writable.
enum ScsStatus scs_bandit_predict(const struct ScsBandit *bandit_ptr,
                                  const double *context,
                                  size_t dim,
                                  struct ScsArm *arms,
                                  double *predictions,
                                  size_t capacity,
                                  size_t *written);

// # Safety
// `bandit` must be null or a handle not yet freed.
void scs_bandit_free(struct ScsBandit *bandit_ptr);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void scs_string_free(char *s);

// Reward of a day against a baseline, both as 7 normalized features.
// `weights` may be null for equal weights.
//
// # Safety
// `today` and `baseline` must point to 7 values, `weights` to 7 values or
// be null, and `out` be writable.
enum ScsStatus scs_compute_reward(const double *today,
                                  const double *baseline,
                                  const double *weights,
                                  double *out);

// Two-sided permutation test on the difference of means. Exact when the
// number of splits is small, seeded Monte Carlo otherwise.
//
// # Safety
// `a` and `b` must point to `na` and `nb` values and `p_value` be
// writable.
enum ScsStatus scs_permutation_test(const double *a,
                                    size_t na,
                                    const double *b,
                                    size_t nb,
                                    size_t n_resamples,
                                    uint64_t seed,
                                    double *p_value);

// Triage subgroup from comparison-period dwell fractions (A..E).
//
// # Safety
// `fractions` must point to 5 values and `out` be writable.
enum ScsStatus scs_classify_subgroup(const double *fractions,
                                     double monitoring_threshold,
                                     double follow_up_threshold,
                                     enum ScsSubgroup *out);

// Dwell change between two periods' fractions (A..E). `relative` nonzero
// measures rises relative to the comparison fraction.
//
// # Safety
// `comparison` and `recommendation` must point to 5 values and `out` be
// writable.
enum ScsStatus scs_classify_dwell_change(const double *comparison,
                                         const double *recommendation,
                                         double threshold,
                                         int32_t relative,
                                         enum ScsDwellChange *out);

// Nearest reference state for 7 normalized features.
//
// # Safety
// `features` must point to 7 values and `out` be writable.
enum ScsStatus scs_assign_state(const double *features, enum ScsPatientState *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCSREC_H */
