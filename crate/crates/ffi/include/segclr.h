#ifndef SEGCLR_H
#define SEGCLR_H

#include <stddef.h>
#include <stdint.h>

typedef enum SegclrStatus {
  SEGCLR_STATUS_OK = 0,
  SEGCLR_STATUS_NULL_POINTER = 1,
  SEGCLR_STATUS_INVALID_ARGUMENT = 2,
  SEGCLR_STATUS_SHAPE = 3,
  SEGCLR_STATUS_IO = 4,
  SEGCLR_STATUS_FORMAT = 5,
  SEGCLR_STATUS_RUNTIME = 6,
  SEGCLR_STATUS_PANIC = 7,
} SegclrStatus;

/*
 A loaded checkpoint.
 */
typedef struct SegclrModel SegclrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, static NUL-terminated string.
 */
const char *segclr_version(void);

/*
 Message of the last failed call on this thread, or NULL after a success.
 Valid until the next call into the library on this thread.
 */
const char *segclr_last_error(void);

/*
 Loads a checkpoint for inference. On success `*out` owns the handle;
 release it with `segclr_model_free`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegclrStatus segclr_model_load(const char *path, struct SegclrModel **out);

/*
 # Safety
 `model` must come from `segclr_model_load` and not be used afterwards.
 NULL is ignored.
 */
void segclr_model_free(struct SegclrModel *model);

/*
 Slice height and width the model accepts.

 # Safety
 All pointers must be valid.
 */
enum SegclrStatus segclr_model_input_shape(const struct SegclrModel *model,
                                           size_t *height,
                                           size_t *width);

/*
 Number of output channels, one per class.

 # Safety
 All pointers must be valid.
 */
enum SegclrStatus segclr_model_n_classes(const struct SegclrModel *model, size_t *out);

/*
 Name of output channel `index`, or NULL when out of range. Owned by the
 model handle.

 # Safety
 `model` must be a valid handle or NULL.
 */
const char *segclr_model_class_name(const struct SegclrModel *model, size_t index);

/*
 Parameters used at inference time.

 # Safety
 All pointers must be valid.
 */
enum SegclrStatus segclr_model_param_count(const struct SegclrModel *model, size_t *out);

/*
 Per-class probabilities for `n_slices` grey slices laid out
 `[slice][row][col]`. `probs` receives `[slice][class][row][col]` and must
 hold exactly `n_slices * n_classes * height * width` values.

 # Safety
 `image` must point to `n_slices * height * width` floats and `probs` to
 `out_len` writable floats.
 */
enum SegclrStatus segclr_model_predict(const struct SegclrModel *model,
                                       const float *image,
                                       size_t n_slices,
                                       size_t height,
                                       size_t width,
                                       float *probs,
                                       size_t out_len);

/*
 Binary masks, 1 where the class probability is `>= threshold`, in the
 layout of `segclr_model_predict`.

 # Safety
 As for `segclr_model_predict`, with `masks` pointing to `out_len` bytes.
 */
enum SegclrStatus segclr_model_segment(const struct SegclrModel *model,
                                       const float *image,
                                       size_t n_slices,
                                       size_t height,
                                       size_t width,
                                       double threshold,
                                       uint8_t *masks,
                                       size_t out_len);

/*
 Dice in percent of two binary masks of `len` pixels; nonzero is
 foreground. Two empty masks score 100.

 # Safety
 `pred` and `truth` must point to `len` bytes, `out` must be valid.
 */
enum SegclrStatus segclr_dice_score(const uint8_t *pred,
                                    const uint8_t *truth,
                                    size_t len,
                                    double *out);

/*
 Volume of the symmetric difference of two masks of one slice, in fL.

 # Safety
 As for `segclr_dice_score`.
 */
enum SegclrStatus segclr_uvd(const uint8_t *pred,
                             const uint8_t *truth,
                             size_t len,
                             double pixel_area_um2,
                             double slice_spacing_um,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGCLR_H */
