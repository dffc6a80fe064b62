#ifndef TCRGEN_H
#define TCRGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TcrgenStatus {
  TCRGEN_STATUS_OK = 0,
  TCRGEN_STATUS_NULL_POINTER = 1,
  TCRGEN_STATUS_INVALID_UTF8 = 2,
  TCRGEN_STATUS_INVALID_ARGUMENT = 3,
  TCRGEN_STATUS_UNKNOWN_RESIDUE = 4,
  TCRGEN_STATUS_IO = 5,
  TCRGEN_STATUS_CHECKPOINT = 6,
  TCRGEN_STATUS_EMPTY = 7,
  TCRGEN_STATUS_OUT_OF_RANGE = 8,
  TCRGEN_STATUS_INTERNAL = 99,
} TcrgenStatus;

// Selected candidates for one context, best first.
typedef struct TcrgenCandidates TcrgenCandidates;

// A loaded checkpoint.
typedef struct TcrgenModel TcrgenModel;

// Generation settings. Obtain defaults from
// [`tcrgen_generate_options_default`] and override fields.
typedef struct TcrgenGenerateOptions {
  size_t n_starts;
  double t_min;
  double t_max;
  size_t beam_min;
  size_t beam_max;
  size_t len_min;
  size_t len_max;
  size_t k;
  // 0 = unique-ranked, 1 = MMR.
  int32_t mmr;
  double mmr_lambda;
  // 0 = best hypothesis per start, 1 = whole final beam.
  int32_t wide_pool;
  size_t candidate_cap;
  uint64_t seed;
} TcrgenGenerateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *tcrgen_last_error(void);

// Library version, statically allocated.
const char *tcrgen_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum TcrgenStatus tcrgen_model_load(const char *path, struct TcrgenModel **out);

// # Safety
// `model` is null or a handle from [`tcrgen_model_load`] not yet freed.
void tcrgen_model_free(struct TcrgenModel *model);

// Number of learnable scalars, or 0 for a null handle.
//
// # Safety
// `model` is null or a live handle.
size_t tcrgen_model_num_params(const struct TcrgenModel *model);

// 1 if the physicochemical channel is present, 0 otherwise or for null.
//
// # Safety
// `model` is null or a live handle.
int32_t tcrgen_model_phys_enabled(const struct TcrgenModel *model);

struct TcrgenGenerateOptions tcrgen_generate_options_default(void);

// Runs the generation pipeline for one context. `exclude` lists
// `n_exclude` training receptors that may not be returned; it may be null
// when `n_exclude` is 0.
//
// # Safety
// String arguments are NUL-terminated; `exclude` points to `n_exclude`
// such strings; `options` is null (defaults) or readable; `out` is writable.
enum TcrgenStatus tcrgen_generate(const struct TcrgenModel *model,
                                  const char *mhc,
                                  const char *peptide,
                                  const struct TcrgenGenerateOptions *options,
                                  const char *const *exclude,
                                  size_t n_exclude,
                                  struct TcrgenCandidates **out);

// # Safety
// `c` is null or a live handle.
size_t tcrgen_candidates_len(const struct TcrgenCandidates *c);

// Sequence `i`, owned by the handle; null when out of range.
//
// # Safety
// `c` is null or a live handle.
const char *tcrgen_candidates_sequence(const struct TcrgenCandidates *c, size_t i);

// Length-normalized negative log-likelihood of candidate `i`; NaN when out
// of range.
//
// # Safety
// `c` is null or a live handle.
double tcrgen_candidates_e_llh(const struct TcrgenCandidates *c, size_t i);

// # Safety
// `c` is null or a handle from [`tcrgen_generate`] not yet freed.
void tcrgen_candidates_free(struct TcrgenCandidates *c);

// Teacher-forced `e_llh` of `tcr` in the given context.
//
// # Safety
// String arguments are NUL-terminated; `out` is writable.
enum TcrgenStatus tcrgen_score(const struct TcrgenModel *model,
                               const char *mhc,
                               const char *peptide,
                               const char *tcr,
                               double *out);

// Levenshtein distance.
//
// # Safety
// `a`, `b` are NUL-terminated; `out` is writable.
enum TcrgenStatus tcrgen_levenshtein(const char *a, const char *b, size_t *out);

// Longest common subsequence length.
//
// # Safety
// `a`, `b` are NUL-terminated; `out` is writable.
enum TcrgenStatus tcrgen_lcs(const char *a, const char *b, size_t *out);

// Normalized Smith-Waterman similarity under BLOSUM62 with the given affine
// gap penalties (a gap of length k costs `gap_open + (k - 1) * gap_extend`).
//
// # Safety
// `a`, `b` are NUL-terminated; `out` is writable.
enum TcrgenStatus tcrgen_similarity(const char *a,
                                    const char *b,
                                    int32_t gap_open,
                                    int32_t gap_extend,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCRGEN_H */
