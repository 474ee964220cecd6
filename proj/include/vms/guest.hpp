// Synthetic guests: page-state machine plus deterministic workload programs.
#ifndef VMS_GUEST_HPP
#define VMS_GUEST_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vms/image.hpp"
#include "vms/page.hpp"

namespace vms {

enum class PageState : std::uint8_t { Zero = 0, Remote = 1, Shared = 2, Private = 3 };

const char* page_state_name(PageState s);

// Residency callbacks bound to wherever the space physically lives (a host's
// resident pool in the simulator, a plain PageStore in unit contexts).
// resolve_shared returns the bytes behind a Shared page; the ref hooks keep
// the backing store's reference counts in step with page transitions.
struct SpaceHooks {
  virtual PageContent resolve_shared(PageNumber page, const ContentHash& hash) = 0;
  // content is non-null when the caller carries bytes (first install) and
  // null when the backing store must already hold the hash.
  virtual void shared_ref_added(PageNumber page, const ContentHash& hash,
                                const PageContent* content) = 0;
  virtual void shared_ref_removed(PageNumber page, const ContentHash& hash) = 0;
  virtual ~SpaceHooks() = default;
};

// Adapter backing a space directly with a PageStore.
class StoreSpaceHooks : public SpaceHooks {
 public:
  explicit StoreSpaceHooks(PageStore& store) : store_(store) {}
  PageContent resolve_shared(PageNumber, const ContentHash& h) override { return store_.get(h); }
  void shared_ref_added(PageNumber, const ContentHash& h, const PageContent* c) override {
    if (c)
      store_.put(*c);
    else
      store_.add_ref(h);
  }
  void shared_ref_removed(PageNumber, const ContentHash& h) override { store_.release(h); }

 private:
  PageStore& store_;
};

class AddressSpace {
 public:
  AddressSpace() = default;
  AddressSpace(std::uint64_t page_count, SpaceHooks* hooks);

  std::uint64_t page_count() const { return page_count_; }
  PageState state(PageNumber page) const;
  const ContentHash& shared_hash(PageNumber page) const;
  const PageContent& private_content(PageNumber page) const;

  void set_hooks(SpaceHooks* hooks) { hooks_ = hooks; }
  SpaceHooks* hooks() const { return hooks_; }

  void set_source(std::string source_id) { source_ = std::move(source_id); }
  const std::optional<std::string>& source() const { return source_; }

  // Remote -> Shared (fault install) or Private -> Shared (snapshot marking).
  // content carries bytes on first install; null when the pool holds them.
  void make_shared(PageNumber page, const ContentHash& hash, const PageContent* content);
  // Any state -> Private. Releases a Shared ref through the hooks.
  void make_private(PageNumber page, const PageContent& content);
  // Marks a not-yet-streamed page; requires a source.
  void mark_remote(PageNumber page);
  // Shared -> Remote without firing ref hooks: the evicting pool already
  // dropped the entry and owns the bookkeeping.
  void evict_to_remote(PageNumber page);
  // Remote -> Zero: a streamed reply reported the page as all-zero.
  void clear_to_zero(PageNumber page);
  // Remote -> Private: the arriving transfer is itself the fetch.
  void install_private(PageNumber page, const PageContent& content);
  // Any state -> Remote (ref hooks fired); migration re-install path.
  void reset_remote(PageNumber page);

  std::uint64_t zero_pages() const { return counts_[0]; }
  std::uint64_t remote_pages() const { return counts_[1]; }
  std::uint64_t shared_pages() const { return counts_[2]; }
  std::uint64_t private_pages() const { return counts_[3]; }
  std::uint64_t resident_bytes() const { return (counts_[2] + counts_[3]) * kPageSize; }
  std::uint64_t logical_bytes() const { return page_count_ * kPageSize; }

  // Lowest Remote page >= from, or nullopt.
  std::optional<PageNumber> next_remote(PageNumber from) const;

  // Releases all Shared refs through the hooks (teardown/migration retire).
  void release_all_shared();

 private:
  void check_page(PageNumber page) const;
  void set_state(PageNumber page, PageState s);

  std::uint64_t page_count_ = 0;
  std::vector<std::uint8_t> tags_;
  std::unordered_map<PageNumber, ContentHash> shared_;
  std::unordered_map<PageNumber, PageContent> private_;
  std::optional<std::string> source_;
  SpaceHooks* hooks_ = nullptr;
  std::uint64_t counts_[4] = {0, 0, 0, 0};
};

// --- workloads ---------------------------------------------------------------

struct Phase {
  PageNumber first_page = 0;
  PageNumber last_page = 0;  // inclusive
  double duration_s = 0.0;
};

struct WorkloadSpec {
  enum class Kind { Sequential, Uniform, Hotspot, Phased };
  Kind kind = Kind::Sequential;
  double zipf_s = 1.0;          // Hotspot only
  std::vector<Phase> phases;    // Phased only
  double write_fraction = 0.0;  // [0,1]
  double ops_per_second = 1.0;  // > 0
  std::uint64_t seed = 0;

  bool operator==(const WorkloadSpec&) const = default;
};

struct Access {
  TimeUs at_us = 0;  // nominal completion offset from workload start
  PageNumber page = 0;
  bool is_write = false;
  PageContent content;  // writes only
};

using AccessTrace = std::vector<Access>;

// Pure op stream: op(i) depends only on (spec, page_count, i), so a cursor
// resumed mid-stream and a fresh trace agree exactly.
class WorkloadProgram {
 public:
  WorkloadProgram(const WorkloadSpec& spec, std::uint64_t page_count);
  Access op(std::uint64_t index) const;
  TimeUs op_time(std::uint64_t index) const;
  const WorkloadSpec& spec() const { return spec_; }

 private:
  PageNumber pick_page(std::uint64_t index) const;
  WorkloadSpec spec_;
  std::uint64_t page_count_;
  double period_us_;
  std::shared_ptr<const std::vector<double>> zipf_cdf_;
  double phase_cycle_s_ = 0.0;
};

struct IdentityRecordView;  // fwd not needed; IdentityRecord lives in image.hpp

struct GuestVm {
  std::string vm_id;
  std::vector<std::uint8_t> vcpu_state;
  AddressSpace space;
  WorkloadSpec workload;
  IdentityRecord identity;
  std::uint64_t disk_page_count = 0;
  TimeUs booted_at_us = 0;
};

inline constexpr std::size_t kDefaultVcpuBytes = 16384;

GuestVm create_vm(const std::string& vm_id, std::uint64_t page_count,
                  const WorkloadSpec& workload, const IdentityRecord& identity,
                  std::size_t vcpu_bytes = kDefaultVcpuBytes);

AccessTrace generate_trace(const GuestVm& vm, double duration_s);

struct ApplyReport {
  std::uint64_t reads = 0;
  std::uint64_t writes = 0;
  std::uint64_t faults = 0;
};

// Fault handler contract: leave the page in a non-Remote state or throw.
using FaultHandler = std::function<void(PageNumber)>;

PageContent read_page(AddressSpace& space, PageNumber page, const FaultHandler& fault,
                      ApplyReport* report = nullptr);
void write_page(AddressSpace& space, PageNumber page, const PageContent& content,
                const FaultHandler& fault, ApplyReport* report = nullptr);
ApplyReport apply_trace(AddressSpace& space, const AccessTrace& trace,
                        const FaultHandler& fault);

}  // namespace vms

#endif
