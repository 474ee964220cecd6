#include "vms/snapshot.hpp"

#include <cmath>
#include <set>

namespace vms {

std::pair<LiveImageManifest, SuspensionReport> live_image_create(
    const std::string& image_id, GuestVm& vm, PageStore& store,
    const SnapshotOptions& opts) {
  LiveImageManifest m;
  m.image_id = image_id;
  m.vcpu_state = vm.vcpu_state;
  m.identity = vm.identity;
  m.memory_page_count = vm.space.page_count();
  m.disk_page_count = vm.disk_page_count;
  m.created_at_us = opts.created_at_us;
  // The synthetic workload never writes the disk, so disk pages are all zero
  // and the disk map stays empty at its configured size.

  AddressSpace& space = vm.space;
  m.memory_map.reserve(space.shared_pages() + space.private_pages());
  for (PageNumber p = 0; p < space.page_count(); p++) {
    switch (space.state(p)) {
      case PageState::Zero:
        break;
      case PageState::Private: {
        PageContent content = space.private_content(p);
        ContentHash h = store.put(content);
        m.memory_map.emplace_back(p, h);
        // CoW: the parent's copy becomes Shared against its own image.
        space.make_shared(p, h, &content);
        break;
      }
      case PageState::Shared: {
        ContentHash h = space.shared_hash(p);
        store.add_ref(h);
        m.memory_map.emplace_back(p, h);
        break;
      }
      case PageState::Remote: {
        // A partially streamed clone: the backing image already resolves this
        // page in the shared store, so capture the hash without fetching.
        if (!opts.backing)
          throw VmsError(Err::StoreError,
                         "snapshot of unstreamed remote pages needs the backing manifest");
        auto h = opts.backing->memory_hash(p);
        if (!h)
          throw VmsError(Err::StoreError, "backing manifest does not cover page " +
                                              std::to_string(p));
        if (!h->is_zero()) {
          store.add_ref(*h);
          m.memory_map.emplace_back(p, *h);
        }
        break;
      }
    }
  }

  SuspensionReport rep;
  rep.pages_marked = space.page_count();
  rep.paused_virtual_us =
      opts.pause_fixed_us +
      static_cast<std::uint64_t>(std::llround(opts.pause_per_page_us *
                                              static_cast<double>(space.page_count())));
  std::uint64_t content_bytes = image_unique_content_bytes(m);
  rep.serialize_background_us = static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(content_bytes) * 8 * 1'000'000 +
       opts.serialize_bits_per_s - 1) /
      opts.serialize_bits_per_s);
  return {std::move(m), rep};
}

std::vector<std::uint8_t> materialize_image(const LiveImageManifest& manifest,
                                            const PageStore& store) {
  std::vector<std::uint8_t> out(manifest.memory_page_count * kPageSize, 0);
  for (const auto& [page, hash] : manifest.memory_map)
    store.get(hash).copy_to(out.data() + page * kPageSize);
  return out;
}

std::uint64_t image_unique_content_bytes(const LiveImageManifest& manifest) {
  std::set<ContentHash> uniq;
  for (const auto& [page, h] : manifest.memory_map) uniq.insert(h);
  for (const auto& [page, h] : manifest.disk_map) uniq.insert(h);
  return uniq.size() * kPageSize;
}

}  // namespace vms
