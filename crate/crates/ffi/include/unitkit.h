#ifndef UNITKIT_H
#define UNITKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum UkStatus {
  UK_STATUS_OK = 0,
  UK_STATUS_NULL_POINTER = 1,
  UK_STATUS_INVALID_ARGUMENT = 2,
  UK_STATUS_IO = 3,
  UK_STATUS_FORMAT = 4,
  UK_STATUS_DATA = 5,
  UK_STATUS_BUFFER_TOO_SMALL = 6,
  UK_STATUS_PANIC = 7,
} UkStatus;

/**
 * A trained k-means codebook.
 */
typedef struct UkCodebook UkCodebook;

/**
 * A loaded text-to-unit predictor.
 */
typedef struct UkPredictor UkPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *uk_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uk_version(void);

/**
 * Reads a codebook file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UkStatus uk_codebook_load(const char *path, struct UkCodebook **out);

/**
 * Fits a codebook on `n_frames × dim` row-major features.
 *
 * # Safety
 * `data` must hold `n_frames * dim` floats; `out` must be writable.
 */
enum UkStatus uk_codebook_fit(const float *data,
                              size_t n_frames,
                              size_t dim,
                              size_t k,
                              size_t max_iters,
                              uint64_t seed,
                              struct UkCodebook **out);

/**
 * Writes the codebook to `path`.
 *
 * # Safety
 * `cb` must be a live handle; `path` a NUL-terminated string.
 */
enum UkStatus uk_codebook_save(const struct UkCodebook *cb, const char *path);

/**
 * Number of centroids, or 0 for a null handle.
 *
 * # Safety
 * `cb` must be null or a live handle.
 */
size_t uk_codebook_k(const struct UkCodebook *cb);

/**
 * Feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `cb` must be null or a live handle.
 */
size_t uk_codebook_dim(const struct UkCodebook *cb);

/**
 * Nearest-centroid unit for each of `n_frames` rows; writes `n_frames`
 * values to `out_units`.
 *
 * # Safety
 * `cb` must be a live handle, `data` must hold `n_frames * dim` floats and
 * `out_units` must have room for `n_frames` values.
 */
enum UkStatus uk_codebook_assign(const struct UkCodebook *cb,
                                 const float *data,
                                 size_t n_frames,
                                 size_t dim,
                                 uint32_t *out_units);

/**
 * Releases a codebook. Null is ignored.
 *
 * # Safety
 * `cb` must be null or a handle not yet freed.
 */
void uk_codebook_free(struct UkCodebook *cb);

/**
 * Loads a predictor checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UkStatus uk_predictor_load(const char *path, struct UkPredictor **out);

/**
 * Codebook size the predictor was trained for, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t uk_predictor_num_units(const struct UkPredictor *p);

/**
 * Greedy-decodes `text_len` bytes of UTF-8 text into deduplicated units.
 * `max_len` of 0 means the model's own target limit. The unit count is
 * always stored in `out_len`; if it exceeds `cap` nothing is copied and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `p` must be a live handle, `text` must hold `text_len` bytes,
 * `out_units` must have room for `cap` values and `out_len` be writable.
 */
enum UkStatus uk_predictor_predict(const struct UkPredictor *p,
                                   const uint8_t *text,
                                   size_t text_len,
                                   size_t max_len,
                                   uint32_t *out_units,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Releases a predictor. Null is ignored.
 *
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void uk_predictor_free(struct UkPredictor *p);

/**
 * Edit distance between two unit sequences.
 *
 * # Safety
 * `a` and `b` must hold `a_len` and `b_len` values (either may be null
 * when its length is 0).
 */
enum UkStatus uk_levenshtein(const uint32_t *a,
                             size_t a_len,
                             const uint32_t *b,
                             size_t b_len,
                             size_t *out);

/**
 * Unit error rate in percent.
 *
 * # Safety
 * As [`uk_levenshtein`]; `out` must be writable.
 */
enum UkStatus uk_uer(const uint32_t *hyp,
                     size_t hyp_len,
                     const uint32_t *reference,
                     size_t ref_len,
                     double *out);

/**
 * Removes adjacent repeats; `out_units` needs room for `len` values and
 * `out_len` receives the new length.
 *
 * # Safety
 * `units_in` must hold `len` values, `out_units` room for `len`.
 */
enum UkStatus uk_dedup(const uint32_t *units_in, size_t len, uint32_t *out_units, size_t *out_len);

/**
 * Signal-to-distortion ratio in dB of `estimate` against `reference`,
 * both `len` samples at the same rate.
 *
 * # Safety
 * Both buffers must hold `len` values; `out` must be writable.
 */
enum UkStatus uk_sdr(const double *reference, const double *estimate, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNITKIT_H */
