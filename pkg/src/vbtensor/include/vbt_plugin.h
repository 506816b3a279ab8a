/* Stable C ABI for out-of-tree operator plugins.
 *
 * Contract:
 *   - A plugin is a shared library exporting:
 *       void vbt_plugin_get_abi(uint32_t *major, uint32_t *minor);
 *       int32_t vbt_plugin_init(const VbtHostApi *host,
 *                               uint32_t host_abi_major,
 *                               uint32_t host_abi_minor);
 *   - vbt_plugin_init returns 0 on success. Any nonzero return rolls back
 *     every operator the plugin registered (the host registry is unchanged).
 *   - The host refuses to load plugins whose abi major differs from
 *     VBT_ABI_MAJOR. The negotiated minor is min(host, plugin).
 *   - The VbtHostApi table is append-only across minor versions: existing
 *     slots never move or change signature.
 *   - No exceptions or unwinding may cross this boundary. All failure is
 *     status codes; human-readable detail goes through report_error.
 */
#ifndef VBT_PLUGIN_H
#define VBT_PLUGIN_H

#include <stdint.h>
#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define VBT_ABI_MAJOR 1u
#define VBT_ABI_MINOR 0u

/* Status codes. */
#define VBT_OK 0
#define VBT_ERR 1
#define VBT_ERR_OVERLAP 2
#define VBT_ERR_INVALID_HANDLE 3
#define VBT_ERR_BAD_ARGS 4

/* Exchange dtype codes (bits distinguish widths). */
#define VBT_DTYPE_INT 0u
#define VBT_DTYPE_UINT 1u
#define VBT_DTYPE_FLOAT 2u
#define VBT_DTYPE_BOOL 6u

/* Device type codes. */
#define VBT_DEVICE_HOST 1
#define VBT_DEVICE_VIRT 2

/* register_op device keys. */
#define VBT_KEY_HOST 0
#define VBT_KEY_VIRT 1

/* iter_build flags. */
#define VBT_ITER_FIRST_IS_OUTPUT 1u
#define VBT_ITER_ALLOW_INPLACE_ALIAS 2u

typedef void *vbt_tensor; /* opaque tensor handle, valid for the call */
typedef void *vbt_iter;   /* opaque iterator handle */
typedef void *vbt_call;   /* opaque call-context handle */

typedef struct {
  uint8_t code;
  uint8_t bits;
  uint16_t lanes; /* always 1 */
} vbt_dtype;

/* Kernel entry: read arguments through the call context accessors, produce
 * outputs with call_new_output / call_set_output, return a status code. */
typedef int32_t (*vbt_kernel_fn)(vbt_call call, void *user_data);

/* Per-element callback: elem_ptrs[k] is the address of operand k's element. */
typedef void (*vbt_element_fn)(void **elem_ptrs, int32_t n_operands, void *ctx);

typedef struct VbtHostApi {
  uint32_t abi_major;
  uint32_t abi_minor;

  /* -- operator registration -- */
  int32_t (*register_op)(const char *name, int32_t n_tensor_in,
                         int32_t n_tensor_out, vbt_kernel_fn fn,
                         int32_t device_key, void *user_data);

  /* -- tensor metadata -- */
  int32_t (*tensor_ndim)(vbt_tensor t);
  int32_t (*tensor_sizes)(vbt_tensor t, int64_t *out, int32_t cap);
  int32_t (*tensor_strides)(vbt_tensor t, int64_t *out, int32_t cap);
  int32_t (*tensor_dtype_code)(vbt_tensor t, vbt_dtype *out);
  int32_t (*tensor_device)(vbt_tensor t, int32_t *type_code, int32_t *id);
  void *(*tensor_data)(vbt_tensor t);

  /* -- iterator helpers -- */
  int32_t (*iter_build)(const vbt_tensor *operands, int32_t n_operands,
                        uint32_t flags, vbt_iter *out);
  int32_t (*iter_common_shape)(vbt_iter it, int64_t *out, int32_t cap);
  int32_t (*iter_for_each)(vbt_iter it, vbt_element_fn fn, void *ctx);
  void (*iter_destroy)(vbt_iter it);

  /* -- memory -- */
  void *(*alloc)(int32_t device_index, int64_t bytes, int32_t stream);
  void (*dealloc)(void *p);

  /* -- diagnostics -- */
  void (*report_error)(int32_t code, const char *message);

  /* -- call-context accessors -- */
  int32_t (*call_num_args)(vbt_call call);
  vbt_tensor (*call_arg_tensor)(vbt_call call, int32_t index);
  int32_t (*call_arg_double)(vbt_call call, int32_t index, double *out);
  int32_t (*call_arg_int)(vbt_call call, int32_t index, int64_t *out);
  vbt_tensor (*call_new_output)(vbt_call call, int32_t out_index,
                                const int64_t *sizes, int32_t ndim,
                                vbt_dtype dtype, int32_t device_type,
                                int32_t device_id);
  int32_t (*call_set_output)(vbt_call call, int32_t out_index, vbt_tensor t);
} VbtHostApi;

typedef void (*vbt_plugin_get_abi_fn)(uint32_t *major, uint32_t *minor);
typedef int32_t (*vbt_plugin_init_fn)(const VbtHostApi *host,
                                      uint32_t host_abi_major,
                                      uint32_t host_abi_minor);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VBT_PLUGIN_H */
