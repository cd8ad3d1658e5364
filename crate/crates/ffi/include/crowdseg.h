#ifndef CROWDSEG_H
#define CROWDSEG_H

#include <stddef.h>
#include <stdint.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_SHAPE_MISMATCH = 3,
  CS_STATUS_DECAY_OUT_OF_RANGE = 4,
  CS_STATUS_KAPPA_UNDEFINED = 5,
  CS_STATUS_SINGULAR = 6,
  CS_STATUS_PANIC = 7,
} CsStatus;

// Collectiveness scores and the keep/drop decision for each particle.
typedef struct CsCollectiveness CsCollectiveness;

// Binary mask produced by circular region merging.
typedef struct CsMask CsMask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. Valid until the next call on this thread.
const char *cs_last_error(void);

// Upper bound `z / (1 - zK)` on path-similarity entries.
//
// # Safety
// `out_kappa` must be a valid pointer to a double.
enum CsStatus cs_kappa(double z, size_t k, double *out_kappa);

// `Z = (I - zW)^-1 - I` for a dense row-major `n x n` weight matrix.
//
// # Safety
// `w` and `out_z` must each point to `n * n` doubles.
enum CsStatus cs_z_closed_form(const double *w, size_t n, double z, double *out_z);

// Collectiveness and outlier filtering from a dense row-major `n x n` weight matrix.
//
// # Safety
// `w` must point to `n * n` doubles and `out_handle` to a writable handle pointer.
enum CsStatus cs_collectiveness(const double *w,
                                size_t n,
                                size_t k,
                                double z,
                                double factor,
                                struct CsCollectiveness **out_handle);

// Number of particles; 0 for NULL.
//
// # Safety
// `h` must be NULL or a live handle.
size_t cs_collectiveness_len(const struct CsCollectiveness *h);

// Kappa and threshold of the result.
//
// # Safety
// `h` must be a live handle; the out pointers may be NULL.
enum CsStatus cs_collectiveness_bounds(const struct CsCollectiveness *h,
                                       double *out_kappa,
                                       double *out_threshold);

// Copies phi (doubles) and kept flags (0/1 bytes); either output may be NULL.
//
// # Safety
// `h` must be a live handle and each non-NULL output must hold `len` elements.
enum CsStatus cs_collectiveness_copy(const struct CsCollectiveness *h,
                                     double *out_phi,
                                     uint8_t *out_kept,
                                     size_t len);

// # Safety
// `h` must be NULL or a handle not yet freed.
void cs_collectiveness_free(struct CsCollectiveness *h);

// Union of discs of `radius` around `n` particles given as interleaved `x, y` pairs.
//
// # Safety
// `xy` must point to `2 * n` doubles and `out_handle` to a writable handle pointer.
enum CsStatus cs_region_merge(const double *xy,
                              size_t n,
                              double radius,
                              size_t width,
                              size_t height,
                              struct CsMask **out_handle);

// Wraps row-major 0/non-zero bytes as a mask handle.
//
// # Safety
// `bits` must point to `width * height` bytes and `out_handle` to a writable handle pointer.
enum CsStatus cs_mask_from_bytes(const uint8_t *bits,
                                 size_t width,
                                 size_t height,
                                 struct CsMask **out_handle);

// Writes width, height and foreground count; any output may be NULL.
//
// # Safety
// `m` must be a live handle.
enum CsStatus cs_mask_info(const struct CsMask *m,
                           size_t *out_width,
                           size_t *out_height,
                           size_t *out_count);

// Copies the mask as row-major 0/1 bytes.
//
// # Safety
// `m` must be a live handle and `out_bits` must hold `len` bytes.
enum CsStatus cs_mask_copy(const struct CsMask *m, uint8_t *out_bits, size_t len);

// # Safety
// `m` must be NULL or a handle not yet freed.
void cs_mask_free(struct CsMask *m);

// Intersection over union of two masks; two empty masks score 1.
//
// # Safety
// `pred` and `gt` must be live handles and `out_iou` writable.
enum CsStatus cs_iou(const struct CsMask *pred, const struct CsMask *gt, double *out_iou);

// Mean of `n` per-scene IoUs.
//
// # Safety
// `ious` must point to `n` doubles and `out_miou` be writable.
enum CsStatus cs_miou(const double *ious, size_t n, double *out_miou);

// Smoothed Dice loss of predictions `o` against 0/1 labels `y`.
//
// # Safety
// `o` and `y` must hold `width * height` elements; `out_loss` must be writable.
enum CsStatus cs_dice_loss(const double *o,
                           const uint8_t *y,
                           size_t width,
                           size_t height,
                           double *out_loss);

// Gradient of the Dice loss with respect to `o`.
//
// # Safety
// `o`, `y` and `out_grad` must hold `width * height` elements.
enum CsStatus cs_dice_grad(const double *o,
                           const uint8_t *y,
                           size_t width,
                           size_t height,
                           double *out_grad);

// Mean squared difference of two channel-interleaved feature maps.
//
// # Safety
// `f` and `f_hat` must hold `width * height * channels` doubles; `out_loss` must be writable.
enum CsStatus cs_air_loss(const double *f,
                          const double *f_hat,
                          size_t width,
                          size_t height,
                          size_t channels,
                          double *out_loss);

// Gradient of the AIR loss with respect to `f`.
//
// # Safety
// `f`, `f_hat` and `out_grad` must hold `width * height * channels` doubles.
enum CsStatus cs_air_grad(const double *f,
                          const double *f_hat,
                          size_t width,
                          size_t height,
                          size_t channels,
                          double *out_grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROWDSEG_H */
