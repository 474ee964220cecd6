#include "vms/footprint.hpp"

#include <algorithm>
#include <unordered_map>

namespace vms {

std::uint64_t host_private_bytes(const HostView& host) {
  std::uint64_t b = 0;
  for (const auto& v : host.vms) b += v.space->private_pages() * kPageSize;
  return b;
}

std::uint64_t host_physical_bytes(const HostView& host) {
  return host_private_bytes(host) + host.memory->shared_unique_bytes() +
         host.memory->cache_bytes();
}

FootprintReport account(const HostView& host) {
  FootprintReport rep;
  std::uint64_t sum_logical = 0;
  std::uint64_t sum_resident = 0;
  std::uint64_t sum_private = 0;
  for (const auto& v : host.vms) {
    VmFootprint f;
    f.logical_bytes = v.space->logical_bytes();
    f.private_bytes = v.space->private_pages() * kPageSize;
    f.shared_bytes = v.space->shared_pages() * kPageSize;
    sum_logical += f.logical_bytes;
    sum_resident += f.private_bytes + f.shared_bytes;
    sum_private += f.private_bytes;
    rep.per_vm.emplace_back(v.vm_id, f);
  }
  std::sort(rep.per_vm.begin(), rep.per_vm.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  rep.host_physical_bytes =
      sum_private + host.memory->shared_unique_bytes() + host.memory->cache_bytes();
  rep.savings_bytes = static_cast<std::int64_t>(sum_resident) -
                      static_cast<std::int64_t>(rep.host_physical_bytes);
  rep.oversubscription_ratio =
      static_cast<double>(sum_logical) / static_cast<double>(host.spec->ram_bytes);
  return rep;
}

EvictionReport enforce(HostView& host, const EvictionPolicy& policy) {
  if (policy.low_watermark >= policy.high_watermark || policy.high_watermark > 1.0)
    throw VmsError(Err::InvalidConfig, "watermarks must satisfy low < high <= 1");
  EvictionReport rep;
  const std::uint64_t capacity = host.spec->ram_bytes;
  const auto high = static_cast<std::uint64_t>(policy.high_watermark * capacity);
  const auto low = static_cast<std::uint64_t>(policy.low_watermark * capacity);

  if (host_private_bytes(host) > capacity)
    throw VmsError(Err::OvercommitFailure,
                   "private working sets exceed host capacity on " + host.spec->host_id);

  if (host_physical_bytes(host) <= high) return rep;

  std::unordered_map<std::uint32_t, AddressSpace*> spaces;
  for (const auto& v : host.vms) spaces.emplace(v.slot, v.space);

  while (host_physical_bytes(host) > low) {
    auto victim = host.memory->evict_oldest();
    if (!victim) break;  // nothing clean left
    for (const auto& ref : victim->refs) {
      auto it = spaces.find(ref.vm_slot);
      if (it == spaces.end())
        throw VmsError(Err::StoreError, "pool reference to a VM not on this host");
      it->second->evict_to_remote(ref.page);
    }
    rep.evicted_pages++;
    rep.freed_bytes += victim->freed_bytes;
  }
  return rep;
}

Admission admit(const HostView& host, std::uint64_t vm_logical_bytes,
                double expected_touch_fraction) {
  std::uint64_t committed = 0;
  for (const auto& v : host.vms) committed += v.admitted_estimate_bytes;
  auto estimate = static_cast<std::uint64_t>(
      static_cast<double>(vm_logical_bytes) * expected_touch_fraction);
  if (committed + estimate > host.spec->ram_bytes) return Admission::Reject;
  return Admission::Admit;
}

}  // namespace vms
