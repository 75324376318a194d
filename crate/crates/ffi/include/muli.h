#ifndef MULI_H
#define MULI_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes. Values 1 to 3 match the CLI exit codes.
typedef enum MuliStatus {
  MULI_STATUS_OK = 0,
  MULI_STATUS_INVALID_ARGUMENT = 1,
  MULI_STATUS_DATA = 2,
  MULI_STATUS_BACKEND = 3,
  MULI_STATUS_NULL_POINTER = 4,
  MULI_STATUS_DIMENSION_MISMATCH = 5,
  MULI_STATUS_FINGERPRINT_MISMATCH = 6,
  MULI_STATUS_VERSION = 7,
  MULI_STATUS_IO = 8,
  MULI_STATUS_PANIC = 9,
} MuliStatus;

// Loaded logit dump.
typedef struct MuliDump MuliDump;

// Loaded detector.
typedef struct MuliModel MuliModel;

typedef struct MuliModeration {
  double score;
  double threshold;
  bool flagged;
} MuliModeration;

typedef struct MuliTprAtFpr {
  double tpr;
  double threshold;
  double achieved_fpr;
} MuliTprAtFpr;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. Valid until
// the next failing call on this thread.
const char *muli_last_error(void);

// Library version as a static NUL-terminated string.
const char *muli_version(void);

// Loads a model file. On success `*out` owns a handle for [`muli_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum MuliStatus muli_model_load(const char *path, struct MuliModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `m` must come from [`muli_model_load`] and not be used afterwards.
void muli_model_free(struct MuliModel *m);

// # Safety
// `m` must be a live model handle; `out` valid for writes.
enum MuliStatus muli_model_vocab_size(const struct MuliModel *m, size_t *out);

// Backend fingerprint of the model, owned by the handle.
//
// # Safety
// `m` must be a live model handle or null (returns null).
const char *muli_model_fingerprint(const struct MuliModel *m);

// Scores one logit vector of length `vocab_size`.
//
// # Safety
// `logits` must point to `len` doubles; `out` valid for writes.
enum MuliStatus muli_model_score(const struct MuliModel *m,
                                 const double *logits,
                                 size_t len,
                                 double *out);

// Like [`muli_model_score`] for single-precision logits.
//
// # Safety
// `logits` must point to `len` floats; `out` valid for writes.
enum MuliStatus muli_model_score_f32(const struct MuliModel *m,
                                     const float *logits,
                                     size_t len,
                                     double *out);

// Threshold stored for `profile`.
//
// # Safety
// `profile` must be a NUL-terminated string; `out` valid for writes.
enum MuliStatus muli_model_threshold(const struct MuliModel *m, const char *profile, double *out);

// Scores and applies the profile threshold (`flagged = score > threshold`).
// A null `profile` selects the default profile.
//
// # Safety
// `logits` must point to `len` doubles; `profile` null or NUL-terminated;
// `out` valid for writes.
enum MuliStatus muli_model_moderate(const struct MuliModel *m,
                                    const double *logits,
                                    size_t len,
                                    const char *profile,
                                    struct MuliModeration *out);

// Opens a logit dump. On success `*out` owns a handle for [`muli_dump_free`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum MuliStatus muli_dump_open(const char *path, struct MuliDump **out);

// Releases a dump handle. Null is ignored.
//
// # Safety
// `d` must come from [`muli_dump_open`] and not be used afterwards.
void muli_dump_free(struct MuliDump *d);

// # Safety
// `d` must be a live dump handle; `rows` and `cols` valid for writes.
enum MuliStatus muli_dump_shape(const struct MuliDump *d, size_t *rows, size_t *cols);

// Backend fingerprint of the dump, owned by the handle.
//
// # Safety
// `d` must be a live dump handle or null (returns null).
const char *muli_dump_fingerprint(const struct MuliDump *d);

// Points `*out` at the `cols` floats of row `i`, owned by the handle.
//
// # Safety
// `d` must be a live dump handle; `out` valid for writes.
enum MuliStatus muli_dump_row(const struct MuliDump *d, size_t i, const float **out);

// Label (0 benign, 1 toxic) of row `i`.
//
// # Safety
// `d` must be a live dump handle; `out` valid for writes.
enum MuliStatus muli_dump_label(const struct MuliDump *d, size_t i, uint8_t *out);

// Scores every dump row into `out[0..rows)`. Fails on a fingerprint
// mismatch unless `force` is set, and when `cap < rows`.
//
// # Safety
// Handles must be live; `out` must point to `cap` writable doubles.
enum MuliStatus muli_model_score_dump(const struct MuliModel *m,
                                      const struct MuliDump *d,
                                      bool force,
                                      double *out,
                                      size_t cap);

// Average precision of `n` scores with 0/1 labels.
//
// # Safety
// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
enum MuliStatus muli_auprc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Balanced optimal accuracy in percent.
//
// # Safety
// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
enum MuliStatus muli_balanced_accuracy(const double *scores,
                                       const uint8_t *labels,
                                       size_t n,
                                       double *out);

// Best TPR with FPR at most `fpr_cap`, and the threshold realizing it.
//
// # Safety
// `scores` and `labels` must each point to `n` elements; `out` valid for writes.
enum MuliStatus muli_tpr_at_fpr(const double *scores,
                                const uint8_t *labels,
                                size_t n,
                                double fpr_cap,
                                struct MuliTprAtFpr *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULI_H */
