// live-image-create: capture a running guest into an immutable live image.
#ifndef VMS_SNAPSHOT_HPP
#define VMS_SNAPSHOT_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vms/guest.hpp"

namespace vms {

struct SuspensionReport {
  std::uint64_t paused_virtual_us = 0;      // vCPU copy + CoW marking only
  std::uint64_t pages_marked = 0;
  std::uint64_t serialize_background_us = 0;  // overlaps guest execution
};

struct SnapshotOptions {
  std::uint64_t pause_fixed_us = 1000;
  double pause_per_page_us = 0.01;
  // Background serialization rate used when no simulator link is modeling it.
  std::uint64_t serialize_bits_per_s = 10'000'000'000ULL;
  TimeUs created_at_us = 0;
  // Backing manifest of a partially streamed clone; lets its Remote pages be
  // captured by hash without fetching them first.
  const LiveImageManifest* backing = nullptr;
};

// Captures vcpu state, identity, and every page as of the pause instant.
// The parent resumes with its resident pages in Shared state (copy-on-write:
// later parent writes privatize without touching the image). The store takes
// one reference per manifest map entry; the parent's new Shared pages are
// referenced through its own space hooks.
std::pair<LiveImageManifest, SuspensionReport> live_image_create(
    const std::string& image_id, GuestVm& vm, PageStore& store,
    const SnapshotOptions& opts = {});

// Flat memory_page_count * kPageSize bytes in page order. Test-oracle support
// and desk-scale only; throws MissingPage on unresolvable hashes.
std::vector<std::uint8_t> materialize_image(const LiveImageManifest& manifest,
                                            const PageStore& store);

std::uint64_t image_unique_content_bytes(const LiveImageManifest& manifest);

}  // namespace vms

#endif
