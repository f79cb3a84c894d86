#ifndef AXIALSEG_H
#define AXIALSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AxsStatus {
  AXS_STATUS_OK = 0,
  AXS_STATUS_NULL_POINTER = 1,
  AXS_STATUS_INVALID_ARGUMENT = 2,
  AXS_STATUS_CONFIG = 3,
  AXS_STATUS_IO = 4,
  AXS_STATUS_CHECKPOINT = 5,
  AXS_STATUS_SHAPE = 6,
  AXS_STATUS_PANIC = 7,
} AxsStatus;

// Opaque model handle.
typedef struct AxsModel AxsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a freshly initialized model from `key=value` lines (model keys
// only; `#` starts a comment). An empty string gives the default MedT.
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
enum AxsStatus axs_model_new(const char *config, struct AxsModel **out);

// Loads a checkpoint written by `axialseg train` or [`axs_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AxsStatus axs_model_load(const char *path, struct AxsModel **out);

// # Safety
// `model` must come from this library; `path` must be a NUL-terminated string.
enum AxsStatus axs_model_save(const struct AxsModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a live handle from this library, freed at most once.
void axs_model_free(struct AxsModel *model);

// Side length of the square images the model accepts, 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t axs_model_img_size(const struct AxsModel *model);

// Trainable scalar count, 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t axs_model_param_count(const struct AxsModel *model);

// Foreground probabilities for `batch` grayscale images of
// `img_size * img_size` floats each, row-major. `input` and `output` hold
// `len` floats and may not overlap.
//
// # Safety
// `input` must be readable and `output` writable for `len` floats.
enum AxsStatus axs_model_predict(const struct AxsModel *model,
                                 const float *input,
                                 float *output,
                                 size_t batch,
                                 size_t len);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into the library on the same thread.
const char *axs_last_error(void);

// Static description of a status code.
const char *axs_status_str(enum AxsStatus status);

// Library version, NUL-terminated.
const char *axs_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AXIALSEG_H */
