// Deliberately failing plugin: registers one operator, then reports failure
// from init. The host must roll the registration back atomically.

#include <vbt_plugin.h>

namespace {

int32_t never_called(vbt_call /*call*/, void * /*user_data*/) {
  return VBT_ERR;
}

}  // namespace

extern "C" {

void vbt_plugin_get_abi(uint32_t *major, uint32_t *minor) {
  *major = VBT_ABI_MAJOR;
  *minor = VBT_ABI_MINOR;
}

int32_t vbt_plugin_init(const VbtHostApi *host, uint32_t /*host_abi_major*/,
                        uint32_t /*host_abi_minor*/) {
  host->register_op("plug::bad", 1, 1, never_called, VBT_KEY_HOST, nullptr);
  host->report_error(VBT_ERR, "plug::bad init fails on purpose");
  return -1;
}

}  // extern "C"
