#ifndef ONELORA_H
#define ONELORA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OneloraStatus {
  ONELORA_STATUS_OK = 0,
  ONELORA_STATUS_NULL_POINTER = 1,
  ONELORA_STATUS_SHAPE = 2,
  ONELORA_STATUS_DOMAIN = 3,
  ONELORA_STATUS_INVALID_ARGUMENT = 4,
  ONELORA_STATUS_DEGENERATE = 5,
  ONELORA_STATUS_INVALID_STATE = 6,
  ONELORA_STATUS_IO = 7,
  // A Rust panic was caught at the boundary.
  ONELORA_STATUS_INTERNAL = 8,
} OneloraStatus;

typedef enum OneloraMethod {
  ONELORA_METHOD_ONE_LORA = 0,
  ONELORA_METHOD_LORA = 1,
  ONELORA_METHOD_DORA = 2,
  ONELORA_METHOD_VERA = 3,
  ONELORA_METHOD_MORA1 = 4,
  ONELORA_METHOD_MORA6 = 5,
  ONELORA_METHOD_BIT_FIT = 6,
  ONELORA_METHOD_DIFF_FIT = 7,
  ONELORA_METHOD_ALL = 8,
  ONELORA_METHOD_RANDOM_COMPRESSION = 9,
} OneloraMethod;

// Opaque layer handle.
typedef struct OneloraLayer OneloraLayer;

// Extra forward work of an unmerged adapter on one input.
typedef struct OneloraFlops {
  size_t mults;
  size_t adds;
} OneloraFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *onelora_last_error(void);

// Parses a method name such as `"ilora"` or `"mora6"`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum OneloraStatus onelora_method_from_name(const char *name, enum OneloraMethod *out);

// Trainable parameters `method` (a `OneloraMethod` code) adds to a
// `d × k` layer. `rank` matters for LoRA, DoRA and VeRA only.
//
// # Safety
// `out` must be writable.
enum OneloraStatus onelora_param_count(int32_t method,
                                       size_t k,
                                       size_t d,
                                       size_t rank,
                                       size_t *out);

// # Safety
// `out` must be writable.
enum OneloraStatus onelora_flop_count(int32_t method,
                                      size_t k,
                                      size_t d,
                                      size_t rank,
                                      struct OneloraFlops *out);

// MoRA's square inner rank; `very_low` selects `round(√d)`.
size_t onelora_mora_rank(size_t k, size_t d, size_t r, bool very_low);

// Builds a layer with frozen `w0` (`d × k`) and `beta0` (`d`, may be NULL
// for zero) and attaches a zero-shift adapter of `method` (a
// `OneloraMethod` code) seeded by `seed`.
//
// # Safety
// Pointers must reference arrays of the stated lengths; `out` must be
// writable. Free the result with `onelora_layer_free`.
enum OneloraStatus onelora_layer_new(int32_t method,
                                     size_t rank,
                                     size_t d,
                                     size_t k,
                                     const double *w0,
                                     const double *beta0,
                                     uint64_t seed,
                                     struct OneloraLayer **out);

// # Safety
// `layer` must come from `onelora_layer_new` and not be used afterwards.
// NULL is ignored.
void onelora_layer_free(struct OneloraLayer *layer);

// Number of trainable scalars in the layer.
//
// # Safety
// `layer` must be a live handle or NULL (returns 0).
size_t onelora_layer_param_len(const struct OneloraLayer *layer);

// # Safety
// `out` must hold `len` doubles.
enum OneloraStatus onelora_layer_get_params(const struct OneloraLayer *layer,
                                            double *out,
                                            size_t len);

// # Safety
// `params` must hold `len` doubles.
enum OneloraStatus onelora_layer_set_params(struct OneloraLayer *layer,
                                            const double *params,
                                            size_t len);

// `out = adapted(x)`; `x` has `k` entries, `out` has `d`.
//
// # Safety
// Arrays must have the stated lengths.
enum OneloraStatus onelora_layer_forward(const struct OneloraLayer *layer,
                                         const double *x,
                                         size_t k,
                                         double *out,
                                         size_t d);

// Pulls `g_out` (`d`) back through the layer at input `x` (`k`). Writes the
// parameter gradient in `get_params` order to `grad` (`grad_len`), and the
// input gradient to `g_in` (`k`) unless it is NULL.
//
// # Safety
// Arrays must have the stated lengths.
enum OneloraStatus onelora_layer_backward(const struct OneloraLayer *layer,
                                          const double *x,
                                          const double *g_out,
                                          double *grad,
                                          size_t grad_len,
                                          double *g_in);

// Folds the adapter into plain weights: `w_out` (`d × k`), `beta_out` (`d`).
//
// # Safety
// Arrays must have the stated lengths.
enum OneloraStatus onelora_layer_merge(const struct OneloraLayer *layer,
                                       double *w_out,
                                       double *beta_out);

// Method of a live handle.
//
// # Safety
// `layer` and `out` must be valid.
enum OneloraStatus onelora_layer_method(const struct OneloraLayer *layer, enum OneloraMethod *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONELORA_H */
