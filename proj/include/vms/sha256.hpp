// SHA-256 with a runtime-dispatched x86 SHA-NI fast path.
#ifndef VMS_SHA256_HPP
#define VMS_SHA256_HPP

#include <array>
#include <cstddef>
#include <cstdint>

namespace vms {

using Sha256Digest = std::array<std::uint8_t, 32>;

Sha256Digest sha256(const std::uint8_t* data, std::size_t len);

// Test hook: force the portable implementation regardless of CPU support.
void sha256_force_portable(bool on);
bool sha256_using_hw();

}  // namespace vms

#endif
