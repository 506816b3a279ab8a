// Declares ABI major 2: the host must refuse to load it before init runs.

#include <vbt_plugin.h>

#include <cstdlib>

extern "C" {

void vbt_plugin_get_abi(uint32_t *major, uint32_t *minor) {
  *major = 2;
  *minor = 0;
}

int32_t vbt_plugin_init(const VbtHostApi * /*host*/,
                        uint32_t /*host_abi_major*/,
                        uint32_t /*host_abi_minor*/) {
  // Must never run on a major-1 host.
  std::abort();
}

}  // extern "C"
