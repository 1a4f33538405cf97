#ifndef SLICESPLAT_H
#define SLICESPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_DIMENSION_MISMATCH = 3,
  SS_STATUS_IO = 4,
  SS_STATUS_CHECKPOINT = 5,
  SS_STATUS_NUMERIC = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

/**
 * A trained reconstruction loaded from a checkpoint.
 */
typedef struct SsModel SsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ss_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Loads a checkpoint from `path` into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * Releases a handle from [`ss_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle; it must not be used afterwards.
 */
void ss_model_free(struct SsModel *model);

/**
 * Writes the frame size of `model`.
 *
 * # Safety
 * `model` must be a live handle; `width` and `height` valid pointers.
 */
enum SsStatus ss_model_dims(const struct SsModel *model, size_t *width, size_t *height);

/**
 * Writes the number of Gaussians in `model`.
 *
 * # Safety
 * `model` must be a live handle and `count` a valid pointer.
 */
enum SsStatus ss_model_gaussian_count(const struct SsModel *model, size_t *count);

/**
 * Renders the slice at normalized depth `t` in `[0, 1]` into `out`, which
 * must hold `len == width * height` doubles.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for `len` writes.
 */
enum SsStatus ss_model_render(const struct SsModel *model, double t, double *out, size_t len);

/**
 * PSNR in dB of two `width x height` images with peak 1; infinite when equal.
 *
 * # Safety
 * `a` and `b` must be valid for `width * height` reads; `out` a valid pointer.
 */
enum SsStatus ss_psnr(const double *a, const double *b, size_t width, size_t height, double *out);

/**
 * Mean SSIM (11x11 Gaussian window) of two `width x height` images.
 *
 * # Safety
 * `a` and `b` must be valid for `width * height` reads; `out` a valid pointer.
 */
enum SsStatus ss_ssim(const double *a, const double *b, size_t width, size_t height, double *out);

/**
 * Generates a phantom volume into `out`, slice-major, which must hold
 * `len == width * height * depth` doubles.
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
enum SsStatus ss_phantom(uint64_t seed,
                         size_t width,
                         size_t height,
                         size_t depth,
                         size_t structures,
                         double *out,
                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLICESPLAT_H */
