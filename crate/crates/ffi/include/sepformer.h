#ifndef SEPFORMER_H
#define SEPFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_ARGUMENT = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_IO = 3,
  SF_STATUS_BAD_CHECKPOINT = 4,
  SF_STATUS_SHAPE = 5,
  SF_STATUS_NUMERIC = 6,
  SF_STATUS_BUFFER_TOO_SMALL = 7,
  SF_STATUS_PANIC = 8,
} SfStatus;

// A loaded separator.
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Load a checkpoint from `path` into a new handle written to `out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SfStatus sf_model_load(const char *path, struct SfModel **out);

// Build a freshly initialised model from `key = value` config text, or
// from the built-in defaults when `config` is null.
//
// # Safety
// `config` must be null or NUL-terminated; `out` must be valid.
enum SfStatus sf_model_new(const char *config, struct SfModel **out);

// Release a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void sf_model_free(struct SfModel *model);

// Number of sources the model separates, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t sf_num_sources(const struct SfModel *model);

// Sample rate the model expects, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t sf_sample_rate(const struct SfModel *model);

// Separate `len` samples into `out`, laid out source-major: source `k`
// occupies `out[k*len .. (k+1)*len]`. `out_len` must be at least
// `sf_num_sources(model) * len`.
//
// # Safety
// `input` must hold `len` doubles and `out` must hold `out_len`.
enum SfStatus sf_separate(const struct SfModel *model,
                          const double *input,
                          size_t len,
                          double *out,
                          size_t out_len);

// Scale-invariant SNR of `est` against `target`, in dB.
//
// # Safety
// Both arrays must hold `len` doubles; `out_db` must be valid.
enum SfStatus sf_si_snr(const double *est, const double *target, size_t len, double *out_db);

// Learnable scalar count for a config (null means built-in defaults).
//
// # Safety
// `config` must be null or NUL-terminated; `out` must be valid.
enum SfStatus sf_parameter_census(const char *config, size_t *out);

// Copy the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`). Returns the full message length, so a
// return value of `cap` or more means the copy was truncated.
//
// # Safety
// `buf` must be null or hold `cap` bytes.
size_t sf_last_error_message(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEPFORMER_H */
