/* C interface of the spreg deformable image registration engine. */

#ifndef SPREG_H
#define SPREG_H

/* Generated by cbindgen from the spreg-capi crate. Do not edit by hand; regenerate with `cbindgen --crate spreg-capi --output include/spreg.h` from crates/capi. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a fallible API call.
typedef enum SpregStatus {
  // The call succeeded.
  SPREG_STATUS_OK = 0,
  // A required pointer argument was null.
  SPREG_STATUS_NULL_ARGUMENT = 1,
  // Invalid input: bad dimensions, configuration, or encoding.
  SPREG_STATUS_INVALID_INPUT = 2,
  // Numeric failure: the optimization produced a non-finite value.
  SPREG_STATUS_NUMERIC_FAILURE = 3,
  // A file could not be read, written, or decoded.
  SPREG_STATUS_IO_FAILURE = 4,
  // An internal invariant failed; the handle state is unspecified.
  SPREG_STATUS_PANIC = 5,
} SpregStatus;

// A full run configuration (pyramid, smoothing layer, loss, optimizer,
// output, and benchmark sections).
typedef struct SpregConfig SpregConfig;

// A dense 2D displacement field (one dx/dy pair per pixel).
typedef struct SpregFlow SpregFlow;

// A grayscale image with double-precision samples in [0, 1].
typedef struct SpregImage SpregImage;

// Everything a registration run produced.
typedef struct SpregResult SpregResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static string.
const char *spreg_version(void);

// Returns a description of the calling thread's most recent failure
// (empty if none). The pointer stays valid until the next failing call
// on the same thread.
const char *spreg_last_error_message(void);

// Releases a string returned by this library (null is a no-op).
//
// # Safety
// `s` must be null or an owned string obtained from this library.
void spreg_string_destroy(char *s);

// Creates an image by copying `width * height` row-major samples.
//
// # Safety
// `data` must be null or point to at least `width * height` doubles.
struct SpregImage *spreg_image_create(size_t width,
                                      size_t height,
                                      const double *data);

// Loads a grayscale PNG or binary PGM image.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct SpregImage *spreg_image_load(const char *path);

// Writes an image as a grayscale PNG (16-bit when `sixteen_bit`,
// 8-bit otherwise).
//
// # Safety
// `image` must be a live handle; `path` a valid NUL-terminated string.
enum SpregStatus spreg_image_save(const struct SpregImage *image,
                                  const char *path,
                                  bool sixteen_bit);

// Image width in pixels (0 for a null handle).
//
// # Safety
// `image` must be null or a live handle.
size_t spreg_image_width(const struct SpregImage *image);

// Image height in pixels (0 for a null handle).
//
// # Safety
// `image` must be null or a live handle.
size_t spreg_image_height(const struct SpregImage *image);

// Borrowed pointer to the row-major samples (`width * height`
// doubles), or null for a null handle. Valid until the handle is
// destroyed.
//
// # Safety
// `image` must be null or a live handle.
const double *spreg_image_data(const struct SpregImage *image);

// Releases an image handle (null is a no-op).
//
// # Safety
// `image` must be null or an owned handle not used afterwards.
void spreg_image_destroy(struct SpregImage *image);

// Creates a displacement field by copying `width * height` row-major
// samples per component.
//
// # Safety
// `dx` and `dy` must be null or point to `width * height` doubles.
struct SpregFlow *spreg_flow_create(size_t width,
                                    size_t height,
                                    const double *dx,
                                    const double *dy);

// Reads a little-endian two-band float flow file.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct SpregFlow *spreg_flow_read(const char *path);

// Writes a flow field to a little-endian two-band float flow file.
//
// # Safety
// `flow` must be a live handle; `path` a valid NUL-terminated string.
enum SpregStatus spreg_flow_write(const struct SpregFlow *flow,
                                  const char *path);

// Flow width in pixels (0 for a null handle).
//
// # Safety
// `flow` must be null or a live handle.
size_t spreg_flow_width(const struct SpregFlow *flow);

// Flow height in pixels (0 for a null handle).
//
// # Safety
// `flow` must be null or a live handle.
size_t spreg_flow_height(const struct SpregFlow *flow);

// Borrowed pointer to the row-major x-displacements, or null for a
// null handle. Valid until the handle is destroyed.
//
// # Safety
// `flow` must be null or a live handle.
const double *spreg_flow_dx(const struct SpregFlow *flow);

// Borrowed pointer to the row-major y-displacements, or null for a
// null handle. Valid until the handle is destroyed.
//
// # Safety
// `flow` must be null or a live handle.
const double *spreg_flow_dy(const struct SpregFlow *flow);

// Smallest interior Jacobian determinant of the map `x + flow(x)`
// (negative values mean folding). Requires at least a 3x3 field.
//
// # Safety
// `flow` must be a live handle; `out_min_det` a writable double.
enum SpregStatus spreg_flow_min_jacobian_det(const struct SpregFlow *flow,
                                             double *out_min_det);

// Releases a flow handle (null is a no-op).
//
// # Safety
// `flow` must be null or an owned handle not used afterwards.
void spreg_flow_destroy(struct SpregFlow *flow);

// Creates a configuration with every key at its documented default.
struct SpregConfig *spreg_config_create(void);

// Parses a JSON configuration document. Missing keys take defaults;
// unknown keys are rejected.
//
// # Safety
// `json` must be a valid NUL-terminated string.
struct SpregConfig *spreg_config_from_json(const char *json);

// Sets one dotted configuration key (e.g. `"optim.iterations"`,
// `"sp.K"`). The value parses as JSON where possible, otherwise as a
// string. The handle is revalidated after every set and left unchanged
// on error, so coupled keys (such as `sp.m` and `sp.basis_scales`,
// whose sizes must agree) cannot be changed one at a time: pass them
// together, either by building the handle with
// [`spreg_config_from_json`] or by assigning a whole section as a JSON
// object value (e.g. key `"sp"`, value `"{\"m\": 9, \"basis_scales\":
// [1.0]}"`; unnamed keys of the section then return to their
// defaults).
//
// # Safety
// `config` must be a live handle; `key` and `value` valid
// NUL-terminated strings.
enum SpregStatus spreg_config_set(struct SpregConfig *config,
                                  const char *key,
                                  const char *value);

// Serializes the configuration as pretty-printed JSON. The caller
// releases the string with [`spreg_string_destroy`].
//
// # Safety
// `config` must be null or a live handle.
char *spreg_config_to_json(const struct SpregConfig *config);

// Releases a configuration handle (null is a no-op).
//
// # Safety
// `config` must be null or an owned handle not used afterwards.
void spreg_config_destroy(struct SpregConfig *config);

// Registers `moving` onto `fixed` under the given configuration. Both
// images must share dimensions. Returns an owned result handle, or
// null on failure.
//
// # Safety
// All three arguments must be live handles.
struct SpregResult *spreg_register(const struct SpregImage *fixed,
                                   const struct SpregImage *moving,
                                   const struct SpregConfig *config);

// Applies a displacement field to an image: output pixel `x` samples
// the input at `x + flow(x)` bilinearly. Returns an owned image.
//
// # Safety
// `image` and `flow` must be live handles.
struct SpregImage *spreg_warp_image(const struct SpregImage *image,
                                    const struct SpregFlow *flow);

// Owned copy of the final full-resolution velocity field (the field
// the smoothness penalty acted on).
//
// # Safety
// `result` must be null or a live handle.
struct SpregFlow *spreg_result_velocity(const struct SpregResult *result);

// Owned copy of the accumulated displacement map; warping the moving
// image by it aligns it to the fixed image.
//
// # Safety
// `result` must be null or a live handle.
struct SpregFlow *spreg_result_displacement(const struct SpregResult *result);

// Final objective value (NaN for a null handle or an empty trace).
//
// # Safety
// `result` must be null or a live handle.
double spreg_result_final_loss(const struct SpregResult *result);

// Smallest interior Jacobian determinant of the final map (NaN for a
// null handle).
//
// # Safety
// `result` must be null or a live handle.
double spreg_result_min_jacobian_det(const struct SpregResult *result);

// Mean velocity magnitude in pixels (NaN for a null handle).
//
// # Safety
// `result` must be null or a live handle.
double spreg_result_mean_velocity(const struct SpregResult *result);

// Number of recorded objective evaluations (0 for a null handle).
//
// # Safety
// `result` must be null or a live handle.
size_t spreg_result_trace_len(const struct SpregResult *result);

// Copies one objective-trace sample. Null output pointers are
// skipped. Fails with an invalid-input status when `index` is out of
// range.
//
// # Safety
// `result` must be a live handle; non-null outputs must be writable.
enum SpregStatus spreg_result_trace_sample(const struct SpregResult *result,
                                           size_t index,
                                           size_t *out_iteration,
                                           size_t *out_level,
                                           double *out_total,
                                           double *out_similarity,
                                           double *out_regularizer);

// Releases a result handle (null is a no-op).
//
// # Safety
// `result` must be null or an owned handle not used afterwards.
void spreg_result_destroy(struct SpregResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPREG_H */
