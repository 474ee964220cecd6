// Policy-based footprint management: exact accounting, watermark eviction of
// clean refetchable pages, and admission by expected private footprint.
#ifndef VMS_FOOTPRINT_HPP
#define VMS_FOOTPRINT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "vms/guest.hpp"
#include "vms/host.hpp"

namespace vms {

struct VmView {
  std::uint32_t slot = 0;
  std::string vm_id;
  AddressSpace* space = nullptr;
  std::uint64_t admitted_estimate_bytes = 0;
};

struct HostView {
  const HostSpec* spec = nullptr;
  HostMemory* memory = nullptr;
  std::vector<VmView> vms;
};

struct VmFootprint {
  std::uint64_t logical_bytes = 0;
  std::uint64_t private_bytes = 0;
  std::uint64_t shared_bytes = 0;
};

struct FootprintReport {
  std::vector<std::pair<std::string, VmFootprint>> per_vm;  // sorted by vm_id
  std::uint64_t host_physical_bytes = 0;
  std::int64_t savings_bytes = 0;
  double oversubscription_ratio = 0.0;
};

// A page shared by n VMs on the host is charged once; cache frames are
// charged as cache bytes.
FootprintReport account(const HostView& host);

struct EvictionPolicy {
  double high_watermark = 0.90;
  double low_watermark = 0.80;
};

struct EvictionReport {
  std::uint64_t evicted_pages = 0;
  std::uint64_t freed_bytes = 0;
};

// Evicts clean shared/cache frames in global LRU order until physical usage
// drops to the low watermark (or nothing evictable remains). Evicted shared
// pages revert to Remote in their owning spaces; private pages are never
// touched. Throws OvercommitFailure when private bytes alone exceed capacity.
EvictionReport enforce(HostView& host, const EvictionPolicy& policy);

enum class Admission { Admit, Reject };

// Admission charges the expected private footprint (logical size scaled by
// the expected touch fraction), not the logical size.
Admission admit(const HostView& host, std::uint64_t vm_logical_bytes,
                double expected_touch_fraction);

std::uint64_t host_physical_bytes(const HostView& host);
std::uint64_t host_private_bytes(const HostView& host);

}  // namespace vms

#endif
