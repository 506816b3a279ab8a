// Sample out-of-tree operator plugin.
//
// Builds against only the shipped vbt_plugin.h: registers plug::axpby
// (y = a*x + b*y, in place) and plug::square (fresh output) through the
// host's iterator helpers. No host internals are included or linked.

#include <vbt_plugin.h>

#include <cstdint>

namespace {

const VbtHostApi *g_host = nullptr;

struct AxpbyCtx {
  double a;
  double b;
};

void axpby_elem(void **p, int32_t /*n_operands*/, void *ctx) {
  const AxpbyCtx *c = static_cast<const AxpbyCtx *>(ctx);
  double *y = static_cast<double *>(p[0]);
  const double *x = static_cast<const double *>(p[1]);
  *y = c->a * *x + c->b * *y;
}

void square_elem(void **p, int32_t /*n_operands*/, void * /*ctx*/) {
  double *out = static_cast<double *>(p[0]);
  const double *x = static_cast<const double *>(p[1]);
  *out = *x * *x;
}

bool is_f64(vbt_tensor t) {
  vbt_dtype dt;
  if (g_host->tensor_dtype_code(t, &dt) != VBT_OK) return false;
  return dt.code == VBT_DTYPE_FLOAT && dt.bits == 64;
}

// args: x, y (tensors), a, b (doubles); output 0 aliases y.
int32_t axpby_kernel(vbt_call call, void * /*user_data*/) {
  vbt_tensor x = g_host->call_arg_tensor(call, 0);
  vbt_tensor y = g_host->call_arg_tensor(call, 1);
  if (!x || !y) return VBT_ERR_BAD_ARGS;
  if (!is_f64(x) || !is_f64(y)) {
    g_host->report_error(VBT_ERR_BAD_ARGS, "plug::axpby takes F64 tensors");
    return VBT_ERR_BAD_ARGS;
  }
  AxpbyCtx c;
  if (g_host->call_arg_double(call, 2, &c.a) != VBT_OK ||
      g_host->call_arg_double(call, 3, &c.b) != VBT_OK) {
    return VBT_ERR_BAD_ARGS;
  }
  vbt_tensor ops[2] = {y, x};
  vbt_iter it = nullptr;
  int32_t rc = g_host->iter_build(
      ops, 2, VBT_ITER_FIRST_IS_OUTPUT | VBT_ITER_ALLOW_INPLACE_ALIAS, &it);
  if (rc != VBT_OK) return rc;
  rc = g_host->iter_for_each(it, axpby_elem, &c);
  g_host->iter_destroy(it);
  if (rc != VBT_OK) return rc;
  return g_host->call_set_output(call, 0, y);
}

int32_t square_kernel(vbt_call call, void * /*user_data*/) {
  vbt_tensor x = g_host->call_arg_tensor(call, 0);
  if (!x) return VBT_ERR_BAD_ARGS;
  if (!is_f64(x)) {
    g_host->report_error(VBT_ERR_BAD_ARGS, "plug::square takes F64 tensors");
    return VBT_ERR_BAD_ARGS;
  }
  int32_t ndim = g_host->tensor_ndim(x);
  if (ndim < 0) return VBT_ERR_INVALID_HANDLE;
  int64_t sizes[16];
  if (ndim > 16 || g_host->tensor_sizes(x, sizes, 16) != VBT_OK) {
    return VBT_ERR_BAD_ARGS;
  }
  vbt_dtype dt;
  g_host->tensor_dtype_code(x, &dt);
  int32_t dev_type = 0;
  int32_t dev_id = 0;
  g_host->tensor_device(x, &dev_type, &dev_id);
  vbt_tensor out =
      g_host->call_new_output(call, 0, sizes, ndim, dt, dev_type, dev_id);
  if (!out) return VBT_ERR;
  vbt_tensor ops[2] = {out, x};
  vbt_iter it = nullptr;
  int32_t rc = g_host->iter_build(ops, 2, VBT_ITER_FIRST_IS_OUTPUT, &it);
  if (rc != VBT_OK) return rc;
  rc = g_host->iter_for_each(it, square_elem, nullptr);
  g_host->iter_destroy(it);
  return rc;
}

}  // namespace

extern "C" {

void vbt_plugin_get_abi(uint32_t *major, uint32_t *minor) {
  *major = VBT_ABI_MAJOR;
  *minor = VBT_ABI_MINOR;
}

int32_t vbt_plugin_init(const VbtHostApi *host, uint32_t host_abi_major,
                        uint32_t /*host_abi_minor*/) {
  if (host_abi_major != VBT_ABI_MAJOR) return -1;
  g_host = host;
  if (host->register_op("plug::axpby", 2, 1, axpby_kernel, VBT_KEY_HOST,
                        nullptr) != VBT_OK) {
    return -2;
  }
  if (host->register_op("plug::square", 1, 1, square_kernel, VBT_KEY_HOST,
                        nullptr) != VBT_OK) {
    return -3;
  }
  return 0;
}

}  // extern "C"
