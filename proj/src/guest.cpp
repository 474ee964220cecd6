#include "vms/guest.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace vms {

const char* page_state_name(PageState s) {
  switch (s) {
    case PageState::Zero: return "zero";
    case PageState::Remote: return "remote";
    case PageState::Shared: return "shared";
    case PageState::Private: return "private";
  }
  return "?";
}

AddressSpace::AddressSpace(std::uint64_t page_count, SpaceHooks* hooks)
    : page_count_(page_count), tags_(page_count, 0), hooks_(hooks) {
  counts_[0] = page_count;
}

void AddressSpace::check_page(PageNumber page) const {
  if (page >= page_count_)
    throw VmsError(Err::InvalidConfig,
                   "page " + std::to_string(page) + " outside space of " +
                       std::to_string(page_count_) + " pages");
}

PageState AddressSpace::state(PageNumber page) const {
  check_page(page);
  return static_cast<PageState>(tags_[page]);
}

const ContentHash& AddressSpace::shared_hash(PageNumber page) const {
  auto it = shared_.find(page);
  if (it == shared_.end())
    throw VmsError(Err::MissingPage, "page " + std::to_string(page) + " is not shared");
  return it->second;
}

const PageContent& AddressSpace::private_content(PageNumber page) const {
  auto it = private_.find(page);
  if (it == private_.end())
    throw VmsError(Err::MissingPage, "page " + std::to_string(page) + " is not private");
  return it->second;
}

void AddressSpace::set_state(PageNumber page, PageState s) {
  counts_[tags_[page]]--;
  tags_[page] = static_cast<std::uint8_t>(s);
  counts_[tags_[page]]++;
}

void AddressSpace::make_shared(PageNumber page, const ContentHash& hash,
                               const PageContent* content) {
  check_page(page);
  if (hash.is_zero())
    throw VmsError(Err::InvalidPage, "shared page cannot carry the zero hash");
  PageState st = state(page);
  if (st == PageState::Shared || st == PageState::Zero)
    throw VmsError(Err::InvalidConfig,
                   std::string("invalid transition to shared from ") + page_state_name(st));
  if (!hooks_) throw VmsError(Err::InvalidConfig, "space has no residency hooks");
  hooks_->shared_ref_added(page, hash, content);
  if (st == PageState::Private) private_.erase(page);
  shared_[page] = hash;
  set_state(page, PageState::Shared);
}

void AddressSpace::make_private(PageNumber page, const PageContent& content) {
  check_page(page);
  PageState st = state(page);
  if (st == PageState::Remote)
    throw VmsError(Err::InvalidConfig, "remote page must be fetched before a write");
  if (st == PageState::Shared) {
    ContentHash h = shared_[page];
    shared_.erase(page);
    if (hooks_) hooks_->shared_ref_removed(page, h);
  }
  private_[page] = content;
  set_state(page, PageState::Private);
}

void AddressSpace::mark_remote(PageNumber page) {
  check_page(page);
  if (!source_)
    throw VmsError(Err::InvalidConfig, "remote page in a space without a source");
  PageState st = state(page);
  if (st != PageState::Zero)
    throw VmsError(Err::InvalidConfig,
                   std::string("invalid transition to remote from ") + page_state_name(st));
  set_state(page, PageState::Remote);
}

void AddressSpace::evict_to_remote(PageNumber page) {
  check_page(page);
  if (state(page) != PageState::Shared)
    throw VmsError(Err::InvalidConfig, "only shared pages can be evicted");
  if (!source_)
    throw VmsError(Err::InvalidConfig, "evicting from a space without a source");
  shared_.erase(page);
  set_state(page, PageState::Remote);
}

void AddressSpace::clear_to_zero(PageNumber page) {
  check_page(page);
  if (state(page) != PageState::Remote)
    throw VmsError(Err::InvalidConfig, "only remote pages can be cleared to zero");
  set_state(page, PageState::Zero);
}

void AddressSpace::install_private(PageNumber page, const PageContent& content) {
  check_page(page);
  if (state(page) != PageState::Remote)
    throw VmsError(Err::InvalidConfig, "install_private expects a remote page");
  private_[page] = content;
  set_state(page, PageState::Private);
}

void AddressSpace::reset_remote(PageNumber page) {
  check_page(page);
  if (!source_)
    throw VmsError(Err::InvalidConfig, "remote page in a space without a source");
  PageState st = state(page);
  if (st == PageState::Shared) {
    ContentHash h = shared_[page];
    shared_.erase(page);
    if (hooks_) hooks_->shared_ref_removed(page, h);
  } else if (st == PageState::Private) {
    private_.erase(page);
  }
  set_state(page, PageState::Remote);
}

std::optional<PageNumber> AddressSpace::next_remote(PageNumber from) const {
  if (counts_[1] == 0) return std::nullopt;
  for (PageNumber p = from; p < page_count_; p++)
    if (tags_[p] == static_cast<std::uint8_t>(PageState::Remote)) return p;
  return std::nullopt;
}

void AddressSpace::release_all_shared() {
  for (auto& [page, hash] : shared_) {
    if (hooks_) hooks_->shared_ref_removed(page, hash);
    counts_[2]--;
    tags_[page] = static_cast<std::uint8_t>(PageState::Zero);
    counts_[0]++;
  }
  shared_.clear();
}

// --- workload programs -------------------------------------------------------

namespace {

// Zipf CDFs are shared across programs with the same (pages, s).
std::shared_ptr<const std::vector<double>> zipf_cdf_for(std::uint64_t pages, double s) {
  static std::mutex m;
  static std::map<std::pair<std::uint64_t, double>, std::weak_ptr<const std::vector<double>>> cache;
  std::lock_guard<std::mutex> lk(m);
  auto key = std::make_pair(pages, s);
  if (auto it = cache.find(key); it != cache.end())
    if (auto sp = it->second.lock()) return sp;
  auto cdf = std::make_shared<std::vector<double>>();
  cdf->resize(pages);
  double acc = 0.0;
  for (std::uint64_t r = 1; r <= pages; r++) {
    acc += std::pow(static_cast<double>(r), -s);
    (*cdf)[r - 1] = acc;
  }
  for (auto& v : *cdf) v /= acc;
  cache[key] = cdf;
  return cdf;
}

constexpr std::uint64_t kPageStream = 0x706167657374726dULL;
constexpr std::uint64_t kWriteStream = 0x777269746573746dULL;
constexpr std::uint64_t kContentStream = 0x636f6e74656e7431ULL;

}  // namespace

WorkloadProgram::WorkloadProgram(const WorkloadSpec& spec, std::uint64_t page_count)
    : spec_(spec), page_count_(page_count) {
  if (page_count == 0) throw VmsError(Err::InvalidConfig, "workload over empty space");
  if (spec.ops_per_second <= 0.0)
    throw VmsError(Err::InvalidConfig, "ops_per_second must be positive");
  if (spec.write_fraction < 0.0 || spec.write_fraction > 1.0)
    throw VmsError(Err::InvalidConfig, "write_fraction outside [0,1]");
  period_us_ = 1e6 / spec.ops_per_second;
  switch (spec.kind) {
    case WorkloadSpec::Kind::Hotspot:
      if (spec.zipf_s <= 0.0) throw VmsError(Err::InvalidConfig, "zipf_s must be > 0");
      zipf_cdf_ = zipf_cdf_for(page_count, spec.zipf_s);
      break;
    case WorkloadSpec::Kind::Phased: {
      if (spec.phases.empty())
        throw VmsError(Err::InvalidConfig, "phased workload needs at least one phase");
      for (const auto& ph : spec.phases) {
        if (ph.first_page > ph.last_page || ph.last_page >= page_count)
          throw VmsError(Err::InvalidConfig, "phase working set outside address space");
        if (ph.duration_s <= 0.0)
          throw VmsError(Err::InvalidConfig, "phase duration must be positive");
        phase_cycle_s_ += ph.duration_s;
      }
      break;
    }
    default:
      break;
  }
}

TimeUs WorkloadProgram::op_time(std::uint64_t index) const {
  return static_cast<TimeUs>(std::llround(static_cast<double>(index + 1) * period_us_));
}

PageNumber WorkloadProgram::pick_page(std::uint64_t index) const {
  switch (spec_.kind) {
    case WorkloadSpec::Kind::Sequential:
      return index % page_count_;
    case WorkloadSpec::Kind::Uniform:
      return bounded(mix64(spec_.seed ^ kPageStream, index), page_count_);
    case WorkloadSpec::Kind::Hotspot: {
      double u = u01_from_bits(mix64(spec_.seed ^ kPageStream, index));
      auto it = std::lower_bound(zipf_cdf_->begin(), zipf_cdf_->end(), u);
      std::uint64_t rank = static_cast<std::uint64_t>(it - zipf_cdf_->begin());
      if (rank >= page_count_) rank = page_count_ - 1;
      return rank;  // rank r maps to page r-1
    }
    case WorkloadSpec::Kind::Phased: {
      double t_s = static_cast<double>(index + 1) * period_us_ / 1e6;
      double pos = std::fmod(t_s, phase_cycle_s_);
      const Phase* active = &spec_.phases.back();
      for (const auto& ph : spec_.phases) {
        if (pos < ph.duration_s) {
          active = &ph;
          break;
        }
        pos -= ph.duration_s;
      }
      std::uint64_t span = active->last_page - active->first_page + 1;
      return active->first_page + bounded(mix64(spec_.seed ^ kPageStream, index), span);
    }
  }
  return 0;
}

Access WorkloadProgram::op(std::uint64_t index) const {
  Access a;
  a.at_us = op_time(index);
  a.page = pick_page(index);
  double w = u01_from_bits(mix64(spec_.seed ^ kWriteStream, index));
  a.is_write = w < spec_.write_fraction;
  if (a.is_write)
    a.content = PageContent::pattern(mix64(spec_.seed ^ kContentStream, index));
  return a;
}

GuestVm create_vm(const std::string& vm_id, std::uint64_t page_count,
                  const WorkloadSpec& workload, const IdentityRecord& identity,
                  std::size_t vcpu_bytes) {
  if (page_count == 0) throw VmsError(Err::InvalidConfig, "page_count must be positive");
  if (identity.hostname.empty())
    throw VmsError(Err::InvalidConfig, "identity hostname must not be empty");
  WorkloadProgram check(workload, page_count);  // validates the workload
  (void)check;
  GuestVm vm;
  vm.vm_id = vm_id;
  vm.identity = identity;
  vm.workload = workload;
  vm.space = AddressSpace(page_count, nullptr);
  vm.vcpu_state.resize(vcpu_bytes);
  Rng rng(hash_str64(vm_id) ^ 0x76637075ULL);
  for (auto& b : vm.vcpu_state) b = static_cast<std::uint8_t>(rng.next());
  return vm;
}

AccessTrace generate_trace(const GuestVm& vm, double duration_s) {
  if (duration_s < 0.0) throw VmsError(Err::InvalidConfig, "trace duration must be >= 0");
  WorkloadProgram prog(vm.workload, vm.space.page_count());
  std::uint64_t n =
      static_cast<std::uint64_t>(std::llround(duration_s * vm.workload.ops_per_second));
  AccessTrace trace;
  trace.reserve(n);
  for (std::uint64_t i = 0; i < n; i++) trace.push_back(prog.op(i));
  return trace;
}

PageContent read_page(AddressSpace& space, PageNumber page, const FaultHandler& fault,
                      ApplyReport* report) {
  PageState st = space.state(page);
  if (st == PageState::Remote) {
    if (!fault) throw VmsError(Err::StreamUnavailable, "remote page with no fault handler");
    if (report) report->faults++;
    fault(page);
    st = space.state(page);
    if (st == PageState::Remote)
      throw VmsError(Err::StreamUnavailable,
                     "fault handler left page " + std::to_string(page) + " remote");
  }
  if (report) report->reads++;
  switch (st) {
    case PageState::Zero:
      return PageContent{};
    case PageState::Shared:
      return space.hooks()->resolve_shared(page, space.shared_hash(page));
    case PageState::Private:
      return space.private_content(page);
    default:
      throw VmsError(Err::StreamUnavailable, "unreachable page state");
  }
}

void write_page(AddressSpace& space, PageNumber page, const PageContent& content,
                const FaultHandler& fault, ApplyReport* report) {
  PageState st = space.state(page);
  if (st == PageState::Remote) {
    // Fetch before write: a sub-page write needs the rest of the page.
    if (!fault) throw VmsError(Err::StreamUnavailable, "remote page with no fault handler");
    if (report) report->faults++;
    fault(page);
    if (space.state(page) == PageState::Remote)
      throw VmsError(Err::StreamUnavailable,
                     "fault handler left page " + std::to_string(page) + " remote");
  }
  space.make_private(page, content);
  if (report) report->writes++;
}

ApplyReport apply_trace(AddressSpace& space, const AccessTrace& trace,
                        const FaultHandler& fault) {
  ApplyReport rep;
  for (const auto& a : trace) {
    if (a.is_write)
      write_page(space, a.page, a.content, fault, &rep);
    else
      (void)read_page(space, a.page, fault, &rep);
  }
  return rep;
}

}  // namespace vms
