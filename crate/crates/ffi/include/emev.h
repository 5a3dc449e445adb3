#ifndef EMEV_H
#define EMEV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EmevStatus {
  EMEV_STATUS_OK = 0,
  EMEV_STATUS_NULL_POINTER = 1,
  EMEV_STATUS_INVALID_ARGUMENT = 2,
  EMEV_STATUS_DIMENSION_MISMATCH = 3,
  EMEV_STATUS_BAD_FILE = 4,
  EMEV_STATUS_IO = 5,
  EMEV_STATUS_NUMERICAL = 6,
  // The reference signal has zero energy.
  EMEV_STATUS_UNDEFINED = 7,
  EMEV_STATUS_PANIC = 8,
} EmevStatus;

// A trained EMEVNet loaded from a checkpoint.
typedef struct EmevModel EmevModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t emev_last_error(char *buf, size_t len);

// Payload length for compression ratio `beta_h` of an `n_rb x n_r x n_t`
// channel.
//
// # Safety
// `l_eps` must point to a writable `usize`.
enum EmevStatus emev_codeword_length(double beta_h,
                                     size_t n_rb,
                                     size_t n_r,
                                     size_t n_t,
                                     size_t *l_eps);

// Compression ratio of the eigen representation for a given `beta_h`.
//
// # Safety
// `ratio` must point to a writable `double`.
enum EmevStatus emev_compression_ratio(double beta_h,
                                       size_t n_rb,
                                       size_t n_r,
                                       size_t n_t,
                                       double *ratio);

// # Safety
// `p` must point to a writable `double`.
enum EmevStatus emev_los_probability(double d_2d, double h_ut, double *p);

// Draws one channel of a named profile into `h`, which must hold
// `2 n_rb n_r n_t` floats laid out `[rb][rx][tx][re, im]`.
//
// # Safety
// `profile` must be a NUL-terminated string; `h` must point to `h_len`
// writable floats.
enum EmevStatus emev_generate_channel(const char *profile,
                                      size_t n_rb,
                                      size_t n_r,
                                      size_t n_t,
                                      uint64_t seed,
                                      float *h,
                                      size_t h_len);

// SVD of one `n_r x n_t` block (`n_r <= n_t`). `u` receives `n_r x n_r`,
// `s` the `n_r` singular values in descending order, `v` the full
// `n_t x n_t` right factor.
//
// # Safety
// `h`, `u` and `v` must hold `2 n_r n_t`, `2 n_r n_r` and `2 n_t n_t`
// doubles; `s` must hold `n_r`.
enum EmevStatus emev_svd(const double *h, size_t n_r, size_t n_t, double *u, double *s, double *v);

// NMSE in dB between a reference and its estimate. A perfect estimate
// yields negative infinity.
//
// # Safety
// `x` and `x_hat` must hold `len` floats; `db` must be writable.
enum EmevStatus emev_nmse_db(const float *x, const float *x_hat, size_t len, double *db);

// Mean column cosine similarity over `blocks` stacked `rows x cols`
// matrices; complex entries when `complex` is non-zero.
//
// # Safety
// `x` and `x_hat` must hold `blocks rows cols` values (twice that when
// complex); `rho` must be writable.
enum EmevStatus emev_cosine_similarity(const float *x,
                                       const float *x_hat,
                                       size_t blocks,
                                       size_t rows,
                                       size_t cols,
                                       int32_t complex,
                                       double *rho);

// Loads an EMEVNet checkpoint. Free the handle with [`emev_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `model` writable.
enum EmevStatus emev_model_load(const char *path, struct EmevModel **model);

// # Safety
// `model` must be null or a handle from [`emev_model_load`] not yet freed.
void emev_model_free(struct EmevModel *model);

// Dimensions and payload length of a loaded model.
//
// # Safety
// `model` must be a live handle; the output pointers must be writable.
enum EmevStatus emev_model_info(const struct EmevModel *model,
                                size_t *n_rb,
                                size_t *n_r,
                                size_t *n_t,
                                size_t *l_eps);

// Compresses `V` (`2 n_rb n_t n_t` floats) and raw singular values `S`
// (`n_rb n_r`) into a payload of `l_eps` floats.
//
// # Safety
// `model` must be a live handle and every array must hold the stated
// number of floats.
enum EmevStatus emev_model_encode(const struct EmevModel *model,
                                  const float *v,
                                  size_t v_len,
                                  const float *s,
                                  size_t s_len,
                                  float *payload,
                                  size_t payload_len);

// Reconstructs `V_hat` and `S_hat` (physical units) from a payload.
//
// # Safety
// `model` must be a live handle and every array must hold the stated
// number of floats.
enum EmevStatus emev_model_decode(const struct EmevModel *model,
                                  const float *payload,
                                  size_t payload_len,
                                  float *v,
                                  size_t v_len,
                                  float *s,
                                  size_t s_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMEV_H */
