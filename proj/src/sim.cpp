#include "vms/sim.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "vms/live_server.hpp"

namespace vms {

const char* migration_mode_name(MigrationParams::Mode m) {
  switch (m) {
    case MigrationParams::Mode::PreCopy: return "precopy";
    case MigrationParams::Mode::PostCopy: return "postcopy";
    case MigrationParams::Mode::StopCopy: return "stopcopy";
  }
  return "?";
}

MigrationParams::Mode ClusterSim::mode_from_name(const std::string& name) {
  if (name == "precopy") return MigrationParams::Mode::PreCopy;
  if (name == "postcopy") return MigrationParams::Mode::PostCopy;
  if (name == "stopcopy") return MigrationParams::Mode::StopCopy;
  throw VmsError(Err::InvalidConfig, "unknown migration mode " + name);
}

// --- engine -------------------------------------------------------------------

void Engine::at(TimeUs t, std::function<void()> fn) {
  if (t < now_) t = now_;  // causality: never schedule into the past
  queue_.push(Ev{t, next_seq_++, std::move(fn)});
}

bool Engine::step() {
  if (queue_.empty()) return false;
  Ev ev = queue_.top();
  queue_.pop();
  assert(ev.at >= now_);
  now_ = ev.at;
  ev.fn();
  return true;
}

void Engine::run() {
  while (step()) {
  }
}

// --- runtime structures ----------------------------------------------------------

struct ClusterSim::PoolHooks : SpaceHooks {
  ClusterSim* sim = nullptr;
  int host = 0;
  std::uint32_t slot = 0;
  bool retain_on_release = true;  // cleared when a departed copy retires

  PageContent resolve_shared(PageNumber, const ContentHash& h) override;
  void shared_ref_added(PageNumber page, const ContentHash& h,
                        const PageContent* content) override;
  void shared_ref_removed(PageNumber page, const ContentHash& h) override;
};

struct ClusterSim::HostRt {
  HostSpec spec;
  std::unique_ptr<HostMemory> memory;
  std::vector<std::uint32_t> vm_slots;
  std::uint64_t reserved_bytes = 0;  // in-flight migration reservations
  bool frozen = false;               // refuses placement after OvercommitFailure
  // Content-bearing reply entries on the wire toward this host.
  std::unordered_map<ContentHash, std::uint32_t, ContentHashHasher> inflight_content;
};

PageContent ClusterSim::PoolHooks::resolve_shared(PageNumber, const ContentHash& h) {
  return sim->hosts_[static_cast<std::size_t>(host)]->memory->get(h);
}

void ClusterSim::PoolHooks::shared_ref_added(PageNumber page, const ContentHash& h,
                                             const PageContent* content) {
  if (!sim->hosts_[static_cast<std::size_t>(host)]->memory->install_ref(h, content,
                                                                        PageRef{slot, page}))
    throw VmsError(Err::StoreError, "shared install without resident content");
}

void ClusterSim::PoolHooks::shared_ref_removed(PageNumber page, const ContentHash& h) {
  sim->hosts_[static_cast<std::size_t>(host)]->memory->remove_ref(h, PageRef{slot, page},
                                                                  retain_on_release);
}

struct ClusterSim::MigrationRt {
  MigrationParams params;
  int dst_host = 0;
  std::string src_host_id, dst_host_id;
  std::unique_ptr<AddressSpace> dst_space;
  std::unique_ptr<PoolHooks> dst_hooks;
  std::set<PageNumber> dirty;  // pages written since the current round began
  std::set<PageNumber> fixup_pages;
  std::uint64_t rounds = 0;
  std::uint64_t bytes = 0;
  TimeUs start_at = 0;
  TimeUs pause_at = 0;
  TimeUs downtime_us = 0;
  bool final_phase = false;
  std::uint64_t epoch = 0;
  std::string residual_key;  // postcopy
  int fixup_attempts = 0;
};

struct ClusterSim::VmRt {
  GuestVm guest;
  std::uint32_t slot = 0;
  std::string kind;  // "boot" | "clone"
  int host = 0;
  std::uint64_t admitted_estimate = 0;
  std::string template_name;
  std::unique_ptr<WorkloadProgram> program;
  std::unique_ptr<PoolHooks> hooks;

  std::uint64_t next_op = 0;
  std::uint64_t ops_completed = 0;
  TimeUs op_time_base = 0;  // nonzero for adopted mid-stream workloads
  TimeUs command_at = 0;
  TimeUs workload_start = 0;
  bool workload_started = false;
  bool ready_recorded = false;

  enum class St { Provisioning, Running, Failed } st = St::Provisioning;
  TimeUs pause_until = 0;  // 0: not paused; UINT64_MAX: until resume_vm
  bool op_deferred = false;
  bool op_event_pending = false;

  // demand paging
  bool fault_outstanding = false;
  PageNumber fault_page = 0;
  std::uint32_t fault_attempts = 0;
  Access fault_access;
  std::uint64_t space_generation = 0;
  std::string stream_source;
  std::string fallback_source;
  const LiveImageManifest* backing = nullptr;

  // background streaming
  bool bg_active = false;
  bool bg_inflight = false;
  PageNumber bg_cursor = 0;
  TimeUs bg_next_allowed = 0;
  std::uint64_t bg_budget = 0;  // bytes/s, 0 = link-paced
  Purpose bg_purpose = Purpose::BackgroundStream;
  int bg_rescans = 0;
  bool bg_event_pending = false;
  std::uint64_t bg_batch_seq = 0;
  std::uint32_t bg_attempts = 0;

  std::unique_ptr<MigrationRt> mig;
  std::uint64_t mig_epoch = 0;
};

struct ClusterSim::ImageRt {
  LiveImageManifest manifest;
  bool complete = false;
  std::string source_template;
  std::vector<std::function<void()>> pending;
};

// Frozen pre-pause copy serving post-copy demand from the source host.
struct ResidualRt {
  std::unique_ptr<AddressSpace> space;
  std::unique_ptr<ClusterSim::PoolHooks> hooks;
  int host = 0;
  std::uint32_t slot = 0;
  const LiveImageManifest* backing = nullptr;
};

// --- construction -----------------------------------------------------------------

ClusterSim::ClusterSim(Scenario scenario) : scenario_(std::move(scenario)) {
  scenario_.validate();
  for (const auto& hs : scenario_.hosts) {
    auto h = std::make_unique<HostRt>();
    h->spec = hs;
    h->memory = std::make_unique<HostMemory>(hs.cache_capacity_bytes());
    hosts_.push_back(std::move(h));
  }
  horizon_us_ = scenario_.horizon_us();
}

ClusterSim::~ClusterSim() = default;

// --- links & transport ---------------------------------------------------------------

std::uint64_t ClusterSim::link_bits_per_s(NodeId from, NodeId to) const {
  auto nic = [this](NodeId n) -> std::uint64_t {
    if (n == kStoreNode) return scenario_.params.store_nic_bits_per_s;
    return hosts_[static_cast<std::size_t>(n)]->spec.nic_bits_per_s;
  };
  return std::min(nic(from), nic(to));
}

bool ClusterSim::send(const WireMessage& msg, NodeId from, NodeId to, Purpose purpose,
                      std::optional<std::uint32_t> vm_attr,
                      std::function<void()> on_delivered) {
  if (from == to) {  // local exchange: no link, no wire bytes
    engine_.at(engine_.now(), std::move(on_delivered));
    return true;
  }
  std::uint64_t bytes = frame_size(msg);
  std::uint64_t bw = link_bits_per_s(from, to);
  auto occupy_us = static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(bytes) * 8 * 1'000'000 + bw - 1) / bw);
  std::uint64_t key =
      (static_cast<std::uint64_t>(static_cast<std::uint32_t>(from + 2)) << 32) |
      static_cast<std::uint32_t>(to + 2);
  TimeUs& busy = link_busy_[key];
  TimeUs start = std::max(engine_.now(), busy);
  busy = start + occupy_us;
  TimeUs deliver = busy + scenario_.params.link_latency_us;

  transport_bytes_ += bytes;
  metrics_.add_wire(purpose, bytes);
  if (vm_attr) metrics_.vm(vms_[*vm_attr]->guest.vm_id).wire_bytes += bytes;
  if (to != kStoreNode &&
      (purpose == Purpose::DemandStream || purpose == Purpose::BackgroundStream ||
       purpose == Purpose::Migration)) {
    if (const auto* reply = std::get_if<PageReply>(&msg)) {
      std::uint64_t pages = 0;
      for (const auto& e : reply->entries)
        if (e.content) pages++;
      if (pages) {
        metrics_.add_host_content_pages(hosts_[static_cast<std::size_t>(to)]->spec.host_id,
                                        pages);
        if (vm_attr) metrics_.vm(vms_[*vm_attr]->guest.vm_id).content_pages_in += pages;
      }
    }
  }

  if (fail_injector_ && fail_injector_(msg, from, to)) return false;  // dropped
  engine_.at(deliver, std::move(on_delivered));
  return true;
}

void ClusterSim::track_inflight(NodeId host, const PageReply& reply, bool add) {
  if (host == kStoreNode) return;
  auto& table = hosts_[static_cast<std::size_t>(host)]->inflight_content;
  for (const auto& e : reply.entries) {
    if (!e.content || e.hash.is_zero()) continue;
    if (add) {
      table[e.hash]++;
    } else {
      auto it = table.find(e.hash);
      if (it != table.end() && --it->second == 0) table.erase(it);
    }
  }
}

// --- lookups --------------------------------------------------------------------------

std::uint64_t ClusterSim::vm_workload_seed(const std::string& vm_id,
                                           const WorkloadSpec& w) const {
  return mix64(scenario_.seed ^ w.seed, hash_str64(vm_id));
}

bool ClusterSim::vm_exists(const std::string& vm_id) const {
  return vm_by_id_.count(vm_id) != 0;
}

const GuestVm& ClusterSim::vm(const std::string& vm_id) const {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  return vms_[it->second]->guest;
}

GuestVm& ClusterSim::vm_mutable(const std::string& vm_id) {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  return vms_[it->second]->guest;
}

const std::string& ClusterSim::vm_host(const std::string& vm_id) const {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  return hosts_[static_cast<std::size_t>(vms_[it->second]->host)]->spec.host_id;
}

bool ClusterSim::vm_failed(const std::string& vm_id) const {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  return vms_[it->second]->st == VmRt::St::Failed;
}

std::uint64_t ClusterSim::vm_ops_completed(const std::string& vm_id) const {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  return vms_[it->second]->ops_completed;
}

const LiveImageManifest& ClusterSim::image(const std::string& image_id) const {
  auto it = images_.find(image_id);
  if (it == images_.end()) throw VmsError(Err::CorruptImage, "unknown image " + image_id);
  return it->second->manifest;
}

bool ClusterSim::image_complete(const std::string& image_id) const {
  auto it = images_.find(image_id);
  return it != images_.end() && it->second->complete;
}

HostMemory& ClusterSim::host_memory(const std::string& host_id) {
  int idx = scenario_.host_index(host_id);
  if (idx < 0) throw VmsError(Err::UnknownHost, host_id);
  return *hosts_[static_cast<std::size_t>(idx)]->memory;
}

HostView ClusterSim::view_of(std::size_t host_idx) {
  HostView v;
  v.spec = &hosts_[host_idx]->spec;
  v.memory = hosts_[host_idx]->memory.get();
  for (auto slot : hosts_[host_idx]->vm_slots) {
    VmRt& vm = *vms_[slot];
    v.vms.push_back(VmView{slot, vm.guest.vm_id, &vm.guest.space, vm.admitted_estimate});
  }
  return v;
}

HostView ClusterSim::host_view(const std::string& host_id) {
  int idx = scenario_.host_index(host_id);
  if (idx < 0) throw VmsError(Err::UnknownHost, host_id);
  return view_of(static_cast<std::size_t>(idx));
}

EvictionReport ClusterSim::run_enforce(const std::string& host_id) {
  int idx = scenario_.host_index(host_id);
  if (idx < 0) throw VmsError(Err::UnknownHost, host_id);
  HostView v = view_of(static_cast<std::size_t>(idx));
  return enforce(v, EvictionPolicy{scenario_.params.high_watermark,
                                   scenario_.params.low_watermark});
}

void ClusterSim::note_admitted(std::size_t host_idx) {
  std::uint64_t n = hosts_[host_idx]->vm_slots.size();
  if (n > max_host_admitted_) max_host_admitted_ = n;
  metrics_.record(engine_.now(), "host_admitted", hosts_[host_idx]->spec.host_id, n);
}

// --- VM lifecycle ------------------------------------------------------------------------

std::uint32_t ClusterSim::make_vm(const std::string& vm_id, const TemplateSpec& tmpl,
                                  const WorkloadSpec& workload,
                                  const IdentityRecord& identity, int host,
                                  const char* kind, TimeUs command_at,
                                  std::uint64_t admitted_estimate) {
  if (vm_by_id_.count(vm_id))
    throw VmsError(Err::InvalidConfig, "duplicate vm id " + vm_id);
  auto rt = std::make_unique<VmRt>();
  rt->slot = static_cast<std::uint32_t>(vms_.size());
  WorkloadSpec w = workload;
  w.seed = vm_workload_seed(vm_id, workload);
  rt->guest = create_vm(vm_id, tmpl.memory_pages, w, identity, tmpl.vcpu_bytes);
  rt->guest.disk_page_count = (tmpl.disk_bytes + kPageSize - 1) / kPageSize;
  rt->kind = kind;
  rt->host = host;
  rt->template_name = tmpl.name;
  rt->admitted_estimate = admitted_estimate;
  rt->command_at = command_at;
  rt->program = std::make_unique<WorkloadProgram>(w, tmpl.memory_pages);
  rt->hooks = std::make_unique<PoolHooks>();
  rt->hooks->sim = this;
  rt->hooks->host = host;
  rt->hooks->slot = rt->slot;
  rt->guest.space.set_hooks(rt->hooks.get());

  auto& vm_sum = metrics_.vm(vm_id);
  vm_sum.kind = kind;
  vm_sum.command_at_us = command_at;

  std::uint32_t slot = rt->slot;
  hosts_[static_cast<std::size_t>(host)]->vm_slots.push_back(slot);
  vm_by_id_.emplace(vm_id, slot);
  vms_.push_back(std::move(rt));
  note_admitted(static_cast<std::size_t>(host));
  return slot;
}

void ClusterSim::start_workload(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  vm.st = VmRt::St::Running;
  vm.workload_started = true;
  vm.workload_start = engine_.now();
  vm.guest.booted_at_us = engine_.now();
  metrics_.record(engine_.now(), "vm_running", vm.guest.vm_id, vm.kind);
  if (scenario_.params.ready_ops == 0 && !vm.ready_recorded) {
    vm.ready_recorded = true;
    auto& s = metrics_.vm(vm.guest.vm_id);
    s.ready = true;
    s.ready_at_us = engine_.now();
    metrics_.record(engine_.now(), "vm_ready", vm.guest.vm_id,
                    engine_.now() - vm.command_at);
  }
  schedule_op(slot);
}

void ClusterSim::schedule_op(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  if (vm.st != VmRt::St::Running || vm.op_event_pending || vm.fault_outstanding) return;
  TimeUs op_rel = vm.program->op_time(vm.next_op) - vm.op_time_base;
  TimeUs nominal = vm.workload_start + op_rel;
  if (nominal > horizon_us_) return;  // workloads end at the scenario horizon
  vm.op_event_pending = true;
  engine_.at(std::max(nominal, engine_.now()), [this, slot]() {
    vms_[slot]->op_event_pending = false;
    exec_op(slot);
  });
}

void ClusterSim::exec_op(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  if (vm.st != VmRt::St::Running) return;
  if (vm.pause_until != 0) {
    if (vm.pause_until == UINT64_MAX) {
      vm.op_deferred = true;
      return;
    }
    if (engine_.now() < vm.pause_until) {
      vm.op_event_pending = true;
      TimeUs t = vm.pause_until;
      engine_.at(t, [this, slot]() {
        vms_[slot]->op_event_pending = false;
        exec_op(slot);
      });
      return;
    }
    vm.pause_until = 0;
  }
  Access a = vm.program->op(vm.next_op);
  AddressSpace& space = vm.guest.space;
  if (space.state(a.page) == PageState::Remote) {
    vm.fault_outstanding = true;
    vm.fault_page = a.page;
    vm.fault_attempts = 0;
    vm.fault_access = a;
    issue_fault(slot, a.page, false);
    return;
  }
  if (a.is_write) {
    space.make_private(a.page, a.content);
  } else if (space.state(a.page) == PageState::Shared) {
    (void)space.hooks()->resolve_shared(a.page, space.shared_hash(a.page));  // LRU touch
  }
  complete_op(slot, a);
}

void ClusterSim::complete_op(std::uint32_t slot, const Access& access) {
  VmRt& vm = *vms_[slot];
  vm.next_op++;
  vm.ops_completed++;
  if (vm.mig && access.is_write) vm.mig->dirty.insert(access.page);
  if (!vm.ready_recorded && vm.ops_completed >= scenario_.params.ready_ops) {
    vm.ready_recorded = true;
    auto& s = metrics_.vm(vm.guest.vm_id);
    s.ready = true;
    s.ready_at_us = engine_.now();
    metrics_.record(engine_.now(), "vm_ready", vm.guest.vm_id,
                    engine_.now() - vm.command_at);
  }
  schedule_op(slot);
}

void ClusterSim::pause_vm(std::uint32_t slot, TimeUs until) {
  vms_[slot]->pause_until = until;
}

void ClusterSim::resume_vm(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  vm.pause_until = 0;
  if (vm.op_deferred) {
    vm.op_deferred = false;
    if (!vm.op_event_pending && !vm.fault_outstanding) {
      vm.op_event_pending = true;
      engine_.at(engine_.now(), [this, slot]() {
        vms_[slot]->op_event_pending = false;
        exec_op(slot);
      });
    }
  }
}

void ClusterSim::fail_vm(std::uint32_t slot, const std::string& why) {
  VmRt& vm = *vms_[slot];
  if (vm.st == VmRt::St::Failed) return;
  vm.st = VmRt::St::Failed;
  vm.fault_outstanding = false;
  vm.bg_active = false;
  metrics_.record(engine_.now(), "vm_failed", vm.guest.vm_id, why);
  if (vm.mig) mig_abort(slot, why);
}

// --- demand paging ----------------------------------------------------------------------

NodeId ClusterSim::source_node(const std::string& source_id) const {
  if (source_id.rfind("img:", 0) == 0) return kStoreNode;
  auto it = residuals_.find(source_id);
  if (it == residuals_.end())
    throw VmsError(Err::StreamUnavailable, "source gone: " + source_id);
  return it->second->host;
}

PageReply ClusterSim::serve_source(const std::string& source_id, const PageRequest& req,
                                   NodeId requester_host, bool include_all_content) {
  for (const auto& r : req.pages)
    if (r.end < r.start)
      throw VmsError(Err::ProtocolError, "malformed range: end precedes start");
  const HostMemory* view =
      requester_host == kStoreNode
          ? nullptr
          : hosts_[static_cast<std::size_t>(requester_host)]->memory.get();
  const auto* inflight =
      requester_host == kStoreNode
          ? nullptr
          : &hosts_[static_cast<std::size_t>(requester_host)]->inflight_content;
  auto want_content = [&](const ContentHash& h) {
    if (h.is_zero()) return false;
    if (include_all_content) return true;
    if (view && view->contains(h)) return false;
    // Content already on the wire toward this host counts as held: by the
    // time this reply lands, the earlier transfer has installed it.
    if (inflight && inflight->count(h)) return false;
    return true;
  };

  PageReply reply;
  reply.image_id = req.image_id;
  if (source_id.rfind("img:", 0) == 0) {
    auto it = images_.find(source_id.substr(4));
    if (it == images_.end() || !it->second->complete)
      throw VmsError(Err::CorruptImage, "unknown image " + source_id);
    const LiveImageManifest& man = it->second->manifest;
    for (const auto& r : req.pages) {
      for (PageNumber p = r.start; p <= r.end; p++) {
        auto h = man.memory_hash(p);
        if (!h)
          throw VmsError(Err::ProtocolError,
                         "page " + std::to_string(p) + " beyond image size");
        PageReplyEntry e;
        e.page = p;
        e.hash = *h;
        if (want_content(*h)) e.content = store_.get(*h);
        reply.entries.push_back(std::move(e));
      }
    }
    return reply;
  }
  auto it = residuals_.find(source_id);
  if (it == residuals_.end())
    throw VmsError(Err::StreamUnavailable, "source gone: " + source_id);
  ResidualRt& res = *it->second;
  AddressSpace& space = *res.space;
  HostMemory& src_pool = *hosts_[static_cast<std::size_t>(res.host)]->memory;
  for (const auto& r : req.pages) {
    for (PageNumber p = r.start; p <= r.end; p++) {
      if (p >= space.page_count())
        throw VmsError(Err::ProtocolError, "page " + std::to_string(p) + " beyond space");
      PageReplyEntry e;
      e.page = p;
      switch (space.state(p)) {
        case PageState::Zero:
          e.hash = kZeroHash;
          break;
        case PageState::Shared:
          e.hash = space.shared_hash(p);
          if (want_content(e.hash)) e.content = src_pool.peek(e.hash);
          break;
        case PageState::Private: {
          const PageContent& c = space.private_content(p);
          e.hash = c.hash();
          if (want_content(e.hash)) e.content = c;
          break;
        }
        case PageState::Remote: {
          // Not resident at the source either: return the backing hash and
          // let the requester pull the bytes from the image server.
          if (!res.backing)
            throw VmsError(Err::StreamUnavailable,
                           "residual remote page without backing image");
          auto h = res.backing->memory_hash(p);
          if (!h) throw VmsError(Err::ProtocolError, "page beyond backing image");
          e.hash = *h;
          break;
        }
      }
      reply.entries.push_back(std::move(e));
    }
  }
  return reply;
}

bool ClusterSim::install_entry(std::uint32_t slot, const PageReplyEntry& entry) {
  VmRt& vm = *vms_[slot];
  AddressSpace& space = vm.guest.space;
  if (entry.page >= space.page_count())
    throw VmsError(Err::ProtocolError, "reply entry beyond address space");
  if (space.state(entry.page) != PageState::Remote) return true;  // already satisfied
  if (entry.hash.is_zero()) {
    space.clear_to_zero(entry.page);
    return true;
  }
  HostMemory& pool = *hosts_[static_cast<std::size_t>(vm.host)]->memory;
  // Shared only while the backing image can still refetch this exact content;
  // everything else lands as a private frame.
  bool as_shared = false;
  if (vm.backing) {
    auto h = vm.backing->memory_hash(entry.page);
    as_shared = h && *h == entry.hash;
  }
  if (as_shared) {
    if (entry.content) {
      space.make_shared(entry.page, entry.hash, &*entry.content);
      return true;
    }
    if (pool.contains(entry.hash)) {
      space.make_shared(entry.page, entry.hash, nullptr);
      return true;
    }
    return false;  // view raced an eviction; refault for the bytes
  }
  if (entry.content) {
    space.install_private(entry.page, *entry.content);
    return true;
  }
  if (pool.contains(entry.hash)) {
    space.install_private(entry.page, pool.get(entry.hash));
    return true;
  }
  return false;
}

void ClusterSim::issue_fault(std::uint32_t slot, PageNumber page, bool to_fallback) {
  VmRt& vm = *vms_[slot];
  const std::string& source = (to_fallback && !vm.fallback_source.empty())
                                  ? vm.fallback_source
                                  : vm.stream_source;
  if (source.empty()) {
    fail_vm(slot, "StreamUnavailable: no source for page " + std::to_string(page));
    return;
  }
  // Demand page plus the sequential prefetch window [page, page+w-1],
  // still-remote pages only.
  AddressSpace& space = vm.guest.space;
  std::vector<PageRange> ranges;
  ranges.push_back(PageRange{page, page});
  std::uint32_t w = scenario_.params.prefetch_window;
  for (std::uint64_t off = 1; off < std::max<std::uint32_t>(w, 1); off++) {
    PageNumber p = page + off;
    if (p >= space.page_count()) break;
    if (space.state(p) != PageState::Remote) continue;
    if (ranges.back().end + 1 == p)
      ranges.back().end = p;
    else
      ranges.push_back(PageRange{p, p});
  }

  PageRequest req;
  req.image_id = source;
  req.pages = std::move(ranges);
  NodeId src_node;
  try {
    src_node = source_node(source);
  } catch (const VmsError&) {
    retry_or_fail(slot, page, to_fallback);
    return;
  }
  NodeId host_node = vm.host;
  std::uint64_t generation = vm.space_generation;
  // Faults served by a migration residual are migration traffic.
  bool residual_bound = source.rfind("vm:", 0) == 0;
  Purpose purpose = residual_bound ? Purpose::Migration : Purpose::DemandStream;
  if (residual_bound && vm.mig) vm.mig->bytes += frame_size(WireMessage{req});

  send(WireMessage{req}, host_node, src_node, purpose, slot,
       [this, slot, page, generation, to_fallback, req, src_node, host_node, purpose,
        residual_bound]() {
         PageReply reply;
         try {
           if (live_client_ && src_node == kStoreNode)
             reply = live_client_->fetch(req);
           else
             reply = serve_source(req.image_id, req, host_node, false);
         } catch (const VmsError&) {
           retry_or_fail(slot, page, to_fallback);
           return;
         }
         VmRt& v = *vms_[slot];
         if (residual_bound && v.mig) v.mig->bytes += frame_size(WireMessage{reply});
         track_inflight(host_node, reply, true);
         bool sched = send(WireMessage{reply}, src_node, host_node, purpose, slot,
                           [this, slot, page, generation, to_fallback, reply,
                            host_node]() {
                             track_inflight(host_node, reply, false);
                             deliver_fault_reply(slot, page, generation, to_fallback,
                                                 reply);
                           });
         if (!sched) track_inflight(host_node, reply, false);
       });

  // Retry timer covers transport drops (fault injection): fixed 10 ms virtual
  // backoff, three retries, then the clone fails.
  if (fail_injector_) {
    std::uint32_t attempt = vm.fault_attempts;
    TimeUs rtt_bound = 2 * (scenario_.params.link_latency_us + 100'000);
    engine_.at(engine_.now() + rtt_bound + 10'000, [this, slot, page, generation, attempt]() {
      VmRt& v = *vms_[slot];
      if (v.st != VmRt::St::Running || !v.fault_outstanding) return;
      if (v.space_generation != generation || v.fault_page != page) return;
      if (v.fault_attempts != attempt) return;
      retry_or_fail(slot, page, false);
    });
  }
}

void ClusterSim::retry_or_fail(std::uint32_t slot, PageNumber page, bool was_fallback) {
  VmRt& vm = *vms_[slot];
  if (vm.st != VmRt::St::Running) return;
  vm.fault_attempts++;
  if (vm.fault_attempts > 3) {
    fail_vm(slot, "StreamUnavailable: page " + std::to_string(page) +
                      " unresolvable after 3 retries");
    return;
  }
  bool go_fallback = !was_fallback && !vm.fallback_source.empty();
  engine_.at(engine_.now() + 10'000, [this, slot, page, go_fallback]() {
    VmRt& v = *vms_[slot];
    if (v.st != VmRt::St::Running || !v.fault_outstanding || v.fault_page != page) return;
    issue_fault(slot, page, go_fallback);
  });
}

void ClusterSim::deliver_fault_reply(std::uint32_t slot, PageNumber page,
                                     std::uint64_t generation, bool was_fallback,
                                     const PageReply& reply) {
  VmRt& vm = *vms_[slot];
  if (vm.st != VmRt::St::Running) return;
  if (vm.space_generation != generation) return;  // space swapped by a migration
  for (const auto& e : reply.entries) (void)install_entry(slot, e);
  if (!vm.fault_outstanding || vm.fault_page != page) {
    bg_tick(slot);
    return;
  }
  if (vm.guest.space.state(page) == PageState::Remote) {
    retry_or_fail(slot, page, was_fallback);
    return;
  }
  vm.fault_outstanding = false;
  Access a = vm.fault_access;
  if (a.is_write) vm.guest.space.make_private(a.page, a.content);
  complete_op(slot, a);
  bg_tick(slot);
}

// --- background streaming ------------------------------------------------------------------

void ClusterSim::bg_tick(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  if (!vm.bg_active || vm.bg_inflight || vm.st != VmRt::St::Running) return;
  if (vm.fault_outstanding) return;  // demand has priority
  if (engine_.now() < vm.bg_next_allowed) {
    if (!vm.bg_event_pending) {
      vm.bg_event_pending = true;
      engine_.at(vm.bg_next_allowed, [this, slot]() {
        vms_[slot]->bg_event_pending = false;
        bg_tick(slot);
      });
    }
    return;
  }
  AddressSpace& space = vm.guest.space;
  auto next = space.next_remote(vm.bg_cursor);
  if (!next) {
    if (space.remote_pages() == 0) {
      bg_complete(slot);
      return;
    }
    // Pages behind the cursor went Remote again (eviction or racing installs).
    vm.bg_cursor = 0;
    if (++vm.bg_rescans > 64) {
      fail_vm(slot, "StreamUnavailable: background stream cannot converge");
      return;
    }
    engine_.at(engine_.now(), [this, slot]() { bg_tick(slot); });
    return;
  }

  std::vector<PageRange> ranges;
  std::uint64_t collected = 0;
  PageNumber p = *next;
  while (collected < scenario_.params.background_batch_pages) {
    auto r = space.next_remote(p);
    if (!r) break;
    p = *r;
    if (!ranges.empty() && ranges.back().end + 1 == p)
      ranges.back().end = p;
    else
      ranges.push_back(PageRange{p, p});
    collected++;
    p++;
  }
  vm.bg_cursor = p;
  PageRequest req;
  req.image_id = vm.stream_source;
  req.pages = std::move(ranges);
  NodeId src_node;
  try {
    src_node = source_node(vm.stream_source);
  } catch (const VmsError&) {
    fail_vm(slot, "StreamUnavailable: background source gone");
    return;
  }
  NodeId host_node = vm.host;
  std::uint64_t generation = vm.space_generation;
  vm.bg_inflight = true;
  std::uint64_t batch_seq = ++vm.bg_batch_seq;
  std::uint64_t batch_bytes = collected * kPageSize;
  if (vm.bg_purpose == Purpose::Migration && vm.mig)
    vm.mig->bytes += frame_size(WireMessage{req});

  send(WireMessage{req}, host_node, src_node, vm.bg_purpose, slot,
       [this, slot, req, src_node, host_node, generation, batch_bytes]() {
         PageReply reply;
         try {
           if (live_client_ && src_node == kStoreNode)
             reply = live_client_->fetch(req);
           else
             reply = serve_source(req.image_id, req, host_node, false);
         } catch (const VmsError&) {
           VmRt& v = *vms_[slot];
           v.bg_inflight = false;
           fail_vm(slot, "StreamUnavailable: background source failed");
           return;
         }
         VmRt& vr = *vms_[slot];
         if (vr.bg_purpose == Purpose::Migration && vr.mig)
           vr.mig->bytes += frame_size(WireMessage{reply});
         track_inflight(host_node, reply, true);
         bool sched = send(WireMessage{reply}, src_node, host_node, vms_[slot]->bg_purpose,
                           slot, [this, slot, generation, reply, batch_bytes, host_node]() {
                track_inflight(host_node, reply, false);
                VmRt& v = *vms_[slot];
                v.bg_inflight = false;
                if (v.st != VmRt::St::Running || v.space_generation != generation) return;
                v.bg_attempts = 0;
                for (const auto& e : reply.entries) (void)install_entry(slot, e);
                if (v.bg_budget > 0) {
                  auto pace = static_cast<TimeUs>(
                      (static_cast<unsigned __int128>(batch_bytes) * 1'000'000 +
                       v.bg_budget - 1) /
                      v.bg_budget);
                  v.bg_next_allowed = std::max(v.bg_next_allowed + pace, engine_.now());
                }
                bg_tick(slot);
              });
         if (!sched) track_inflight(host_node, reply, false);
       });

  // Watchdog for dropped deliveries (fault injection): retry with a 10 ms
  // backoff, three strikes, then the stream fails.
  if (fail_injector_) {
    TimeUs bound = engine_.now() + 2 * (scenario_.params.link_latency_us + 100'000) + 10'000;
    engine_.at(bound, [this, slot, generation, batch_seq]() {
      VmRt& v = *vms_[slot];
      if (v.st != VmRt::St::Running || v.space_generation != generation) return;
      if (!v.bg_inflight || v.bg_batch_seq != batch_seq) return;
      v.bg_inflight = false;
      if (++v.bg_attempts > 3) {
        fail_vm(slot, "StreamUnavailable: background stream retries exhausted");
        return;
      }
      v.bg_cursor = 0;  // re-scan; installed pages are skipped
      bg_tick(slot);
    });
  }
}

void ClusterSim::bg_complete(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  vm.bg_active = false;
  metrics_.record(engine_.now(), "stream_complete", vm.guest.vm_id,
                  std::string(purpose_name(vm.bg_purpose)));
  if (vm.mig && vm.mig->params.mode == MigrationParams::Mode::PostCopy) mig_finish(slot);
}

}  // namespace vms

namespace vms {

// --- script commands -----------------------------------------------------------------------

bool ClusterSim::sim_admit(std::size_t host_idx, std::uint64_t estimate_bytes) const {
  const HostRt& h = *hosts_[host_idx];
  if (h.frozen) return false;
  std::uint64_t committed = h.reserved_bytes;
  for (auto slot : h.vm_slots) committed += vms_[slot]->admitted_estimate;
  return committed + estimate_bytes <= h.spec.ram_bytes;
}

void ClusterSim::cmd_boot(const CmdBootVm& c) {
  int host = scenario_.host_index(c.host);
  if (host < 0) throw VmsError(Err::UnknownHost, c.host);
  const TemplateSpec& tmpl = scenario_.tmpl(c.tmpl);
  const WorkloadSpec& w =
      c.workload_template ? scenario_.tmpl(*c.workload_template).workload : tmpl.workload;
  std::uint64_t logical = tmpl.memory_pages * kPageSize;
  // A booted VM owns all of its memory privately; admission charges it fully.
  if (!sim_admit(static_cast<std::size_t>(host), logical)) {
    metrics_.record(engine_.now(), "admit_reject", c.vm, c.host);
    return;
  }
  IdentityRecord ident{c.vm, "net-" + c.vm};
  std::uint32_t slot =
      make_vm(c.vm, tmpl, w, ident, host, "boot", engine_.now(), logical);

  // Cold provisioning copies the full disk image from shared storage; the
  // stream is raw page content with no dedup shortcut.
  std::uint64_t disk_pages = (tmpl.disk_bytes + kPageSize - 1) / kPageSize;
  std::uint64_t batch = scenario_.params.batch_pages;
  std::uint64_t nbatches = disk_pages == 0 ? 0 : (disk_pages + batch - 1) / batch;
  double boot_duration = scenario_.params.boot_duration_s;

  if (nbatches == 0) {
    engine_.at(engine_.now() + us_from_s(boot_duration),
               [this, slot]() { start_workload(slot); });
    enforce_host(static_cast<std::size_t>(host));
    return;
  }

  auto state = std::make_shared<std::pair<std::uint64_t, std::uint64_t>>(0, 0);  // sent, done
  auto send_next = std::make_shared<std::function<void()>>();
  std::string image_tag = "bootdisk:" + c.vm;
  *send_next = [this, slot, host, state, send_next, nbatches, disk_pages, batch, image_tag,
                boot_duration]() {
    while (state->first < nbatches &&
           state->first - state->second < 4) {  // keep the pipe full
      std::uint64_t i = state->first++;
      PageNumber first = i * batch;
      PageNumber last = std::min(disk_pages, first + batch) - 1;
      PageReply msg;
      msg.image_id = image_tag;
      msg.entries.reserve(static_cast<std::size_t>(last - first + 1));
      for (PageNumber p = first; p <= last; p++) {
        PageReplyEntry e;
        e.page = p;
        e.hash = kZeroHash;       // synthetic guests ship zero-filled disks
        e.content = PageContent{};  // raw copy: content always on the wire
        msg.entries.push_back(std::move(e));
      }
      send(WireMessage{std::move(msg)}, kStoreNode, host, Purpose::Boot, slot,
           [this, slot, state, send_next, nbatches, boot_duration]() {
             state->second++;
             if (state->second == nbatches) {
               engine_.at(engine_.now() + us_from_s(boot_duration),
                          [this, slot]() { start_workload(slot); });
             } else {
               (*send_next)();
             }
           });
    }
  };
  (*send_next)();
  enforce_host(static_cast<std::size_t>(host));
}

void ClusterSim::cmd_create_image(const CmdCreateImage& c) {
  auto it = vm_by_id_.find(c.vm);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, c.vm);
  VmRt& vm = *vms_[it->second];
  if (vm.mig)
    throw VmsError(Err::InvalidConfig, "cannot snapshot while a migration is in flight");
  if (images_.count(c.image))
    throw VmsError(Err::InvalidConfig, "duplicate image id " + c.image);

  SnapshotOptions opts;
  opts.pause_fixed_us = scenario_.params.pause_fixed_us;
  opts.pause_per_page_us = scenario_.params.pause_per_page_us;
  opts.serialize_bits_per_s = link_bits_per_s(vm.host, kStoreNode);
  opts.created_at_us = engine_.now();
  opts.backing = vm.backing;
  auto [manifest, susp] = live_image_create(c.image, vm.guest, store_, opts);

  pause_vm(it->second, engine_.now() + susp.paused_virtual_us);
  metrics_.record(engine_.now(), "snapshot_pause_us", c.vm, susp.paused_virtual_us);

  auto img = std::make_unique<ImageRt>();
  img->manifest = std::move(manifest);
  img->source_template = vm.template_name;
  const LiveImageManifest* man = &img->manifest;
  images_.emplace(c.image, std::move(img));

  // The parent is now backed by its own image: its shared pages can be
  // evicted and refetched.
  vm.backing = man;
  vm.stream_source = "img:" + c.image;
  if (!vm.guest.space.source()) vm.guest.space.set_source(vm.stream_source);

  // Background serialization to shared storage, overlapping parent execution.
  std::vector<PageReplyEntry> uploads;
  {
    std::set<ContentHash> seen;
    for (const auto& [page, h] : man->memory_map) {
      PageReplyEntry e;
      e.page = page;
      e.hash = h;
      if (seen.insert(h).second) e.content = store_.get(h);
      uploads.push_back(std::move(e));
    }
  }
  std::uint64_t batch = scenario_.params.batch_pages;
  std::uint64_t total = uploads.size();
  std::uint64_t nbatches = total == 0 ? 0 : (total + batch - 1) / batch;
  auto done = std::make_shared<std::uint64_t>(0);
  auto finish = [this, image_id = c.image]() {
    images_.at(image_id)->complete = true;
    metrics_.record(engine_.now(), "image_complete", image_id,
                    images_.at(image_id)->manifest.memory_map.size());
    if (live_server_publish_) live_server_publish_(images_.at(image_id)->manifest);
    auto pending = std::move(images_.at(image_id)->pending);
    images_.at(image_id)->pending.clear();
    for (auto& fn : pending) fn();
  };

  send(WireMessage{VcpuTransfer{c.vm, vm.guest.vcpu_state}}, vm.host, kStoreNode,
       Purpose::Snapshot, it->second, [] {});
  if (nbatches == 0) {
    engine_.at(engine_.now(), finish);
    return;
  }
  auto payload = std::make_shared<std::vector<PageReplyEntry>>(std::move(uploads));
  for (std::uint64_t i = 0; i < nbatches; i++) {
    std::uint64_t first = i * batch;
    std::uint64_t last = std::min<std::uint64_t>(total, first + batch);
    PageReply msg;
    msg.image_id = "img:" + c.image;
    msg.entries.assign(payload->begin() + static_cast<std::ptrdiff_t>(first),
                       payload->begin() + static_cast<std::ptrdiff_t>(last));
    send(WireMessage{std::move(msg)}, vm.host, kStoreNode, Purpose::Snapshot, it->second,
         [this, done, nbatches, finish]() {
           if (++(*done) == nbatches) finish();
         });
  }
}

void ClusterSim::clone_from_image(const std::string& image_id, const CmdCloneVm& c,
                                  std::uint64_t index) {
  ImageRt& img = *images_.at(image_id);
  const LiveImageManifest& man = img.manifest;
  const TemplateSpec& src_tmpl = scenario_.tmpl(img.source_template);
  const TemplateSpec& wl_tmpl =
      c.workload_template ? scenario_.tmpl(*c.workload_template) : src_tmpl;

  int host = scenario_.host_index(c.hosts[index % c.hosts.size()]);
  bool exact = c.exact_names && c.count == 1;
  std::string vm_id =
      exact ? c.vm_prefix : c.vm_prefix + std::to_string(clone_counter_++);

  TemplateSpec eff = src_tmpl;  // geometry from the image's source template
  eff.memory_pages = man.memory_page_count;
  eff.expected_touch_fraction = wl_tmpl.expected_touch_fraction;
  eff.vcpu_bytes = man.vcpu_state.size();

  std::uint64_t estimate = static_cast<std::uint64_t>(
      static_cast<double>(man.memory_page_count * kPageSize) * eff.expected_touch_fraction);
  if (!sim_admit(static_cast<std::size_t>(host), estimate)) {
    metrics_.record(engine_.now(), "admit_reject", vm_id,
                    hosts_[static_cast<std::size_t>(host)]->spec.host_id);
    return;
  }

  // Identity is replaced on the fly; no boot step.
  std::string hostname =
      exact ? c.hostname_prefix : c.hostname_prefix + std::to_string(index);
  IdentityRecord ident{hostname, c.net_id ? *c.net_id : "net-" + hostname};
  std::uint32_t slot = make_vm(vm_id, eff, wl_tmpl.workload, ident, host, "clone",
                               engine_.now(), estimate);
  VmRt& vm = *vms_[slot];
  vm.guest.vcpu_state = man.vcpu_state;
  vm.backing = &man;
  vm.stream_source = "img:" + image_id;
  vm.guest.space.set_source(vm.stream_source);
  for (const auto& [page, h] : man.memory_map) vm.guest.space.mark_remote(page);

  send(WireMessage{VcpuTransfer{vm_id, vm.guest.vcpu_state}}, kStoreNode, host,
       Purpose::CloneStart, slot, [this, slot]() {
         engine_.at(engine_.now() + scenario_.params.clone_setup_us, [this, slot]() {
           start_workload(slot);
           VmRt& v = *vms_[slot];
           if (scenario_.params.background_bytes_per_s > 0 &&
               v.guest.space.remote_pages() > 0) {
             v.bg_active = true;
             v.bg_budget = scenario_.params.background_bytes_per_s;
             v.bg_purpose = Purpose::BackgroundStream;
             v.bg_cursor = 0;
             bg_tick(slot);
           }
         });
       });
  enforce_host(static_cast<std::size_t>(host));
}

void ClusterSim::cmd_clone(const CmdCloneVm& c) {
  auto it = images_.find(c.image);
  if (it == images_.end())
    throw VmsError(Err::CorruptImage, "unknown image " + c.image);
  for (std::uint64_t i = 0; i < c.count; i++) {
    if (it->second->complete) {
      clone_from_image(c.image, c, i);
    } else {
      // live-image-start waits for the snapshot to reach the complete state
      it->second->pending.push_back(
          [this, image = c.image, c, i]() { clone_from_image(image, c, i); });
    }
  }
}

// --- migration -------------------------------------------------------------------------------

std::vector<PageNumber> ClusterSim::resident_pages(const AddressSpace& space) const {
  std::vector<PageNumber> pages;
  pages.reserve(space.shared_pages() + space.private_pages());
  for (PageNumber p = 0; p < space.page_count(); p++) {
    PageState st = space.state(p);
    if (st == PageState::Shared || st == PageState::Private) pages.push_back(p);
  }
  return pages;
}

void ClusterSim::cmd_migrate(const CmdMigrate& c) {
  MigrationParams params;
  params.mode = mode_from_name(c.mode);
  params.max_rounds = scenario_.params.migrate_max_rounds;
  params.stop_threshold_pages = scenario_.params.migrate_stop_threshold_pages;
  params.drain_bytes_per_s = scenario_.params.migrate_drain_bytes_per_s;
  do_migrate(c.vm, c.to_host, params);
}

void ClusterSim::do_migrate(const std::string& vm_id, const std::string& to_host,
                            const MigrationParams& params) {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  VmRt& vm = *vms_[it->second];
  std::uint32_t slot = it->second;
  if (vm.mig) throw VmsError(Err::InvalidConfig, "migration already in flight for " + vm_id);
  if (vm.st != VmRt::St::Running)
    throw VmsError(Err::InvalidConfig, "vm " + vm_id + " is not running");
  int dst = scenario_.host_index(to_host);
  if (dst < 0) throw VmsError(Err::UnknownHost, to_host);
  if (dst == vm.host)
    throw VmsError(Err::InvalidConfig, "vm " + vm_id + " already on " + to_host);
  if (!sim_admit(static_cast<std::size_t>(dst), vm.admitted_estimate))
    throw VmsError(Err::PlacementError, "destination " + to_host + " rejected " + vm_id);

  auto mig = std::make_unique<MigrationRt>();
  mig->params = params;
  mig->dst_host = dst;
  mig->src_host_id = hosts_[static_cast<std::size_t>(vm.host)]->spec.host_id;
  mig->dst_host_id = to_host;
  mig->start_at = engine_.now();
  mig->epoch = ++vm.mig_epoch;
  hosts_[static_cast<std::size_t>(dst)]->reserved_bytes += vm.admitted_estimate;

  mig->dst_hooks = std::make_unique<PoolHooks>();
  mig->dst_hooks->sim = this;
  mig->dst_hooks->host = dst;
  mig->dst_hooks->slot = slot;
  mig->dst_space = std::make_unique<AddressSpace>(vm.guest.space.page_count(),
                                                  mig->dst_hooks.get());
  mig->dst_space->set_source(!vm.stream_source.empty()
                                 ? vm.stream_source
                                 : "mig:" + vm_id + ":" + std::to_string(mig->epoch));
  for (PageNumber p = 0; p < vm.guest.space.page_count(); p++)
    if (vm.guest.space.state(p) != PageState::Zero) mig->dst_space->mark_remote(p);

  metrics_.record(engine_.now(), "migrate_start", vm_id,
                  std::string(migration_mode_name(params.mode)) + ":" + mig->src_host_id +
                      ">" + mig->dst_host_id);

  switch (params.mode) {
    case MigrationParams::Mode::PreCopy: {
      auto resident = resident_pages(vm.guest.space);
      vm.mig = std::move(mig);
      vm.mig->dirty.insert(resident.begin(), resident.end());
      mig_next_round(slot);
      break;
    }
    case MigrationParams::Mode::StopCopy: {
      auto resident = resident_pages(vm.guest.space);
      vm.mig = std::move(mig);
      vm.mig->pause_at = engine_.now();
      pause_vm(slot, UINT64_MAX);
      vm.mig->final_phase = true;
      mig_send_pages(slot, std::move(resident), true);
      break;
    }
    case MigrationParams::Mode::PostCopy: {
      vm.mig = std::move(mig);
      vm.mig->pause_at = engine_.now();
      pause_vm(slot, UINT64_MAX);
      // Downtime covers only the vCPU + constant metadata transfer.
      VcpuTransfer msg{vm_id, vm.guest.vcpu_state};
      vm.mig->bytes += frame_size(WireMessage{msg});
      send(WireMessage{std::move(msg)}, vm.host, dst, Purpose::Migration, slot,
           [this, slot]() { mig_switch(slot); });
      break;
    }
  }
}

void ClusterSim::mig_next_round(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  MigrationRt& m = *vm.mig;
  std::vector<PageNumber> pages(m.dirty.begin(), m.dirty.end());
  m.dirty.clear();
  if (pages.size() <= m.params.stop_threshold_pages || m.rounds >= m.params.max_rounds) {
    m.pause_at = engine_.now();
    pause_vm(slot, UINT64_MAX);
    m.final_phase = true;
    mig_send_pages(slot, std::move(pages), true);
    return;
  }
  m.rounds++;
  DirtyBitmap bm;
  bm.vm_id = vm.guest.vm_id;
  bm.resize_bits(vm.guest.space.page_count());
  for (auto p : pages) bm.set_bit(p);
  m.bytes += frame_size(WireMessage{bm});
  send(WireMessage{std::move(bm)}, vm.host, m.dst_host, Purpose::Migration, slot, [] {});
  mig_send_pages(slot, std::move(pages), false);
}

void ClusterSim::mig_send_pages(std::uint32_t slot, std::vector<PageNumber> pages,
                                bool final_phase) {
  VmRt& vm = *vms_[slot];
  MigrationRt& m = *vm.mig;
  std::uint64_t epoch = m.epoch;
  auto list = std::make_shared<std::vector<PageNumber>>(std::move(pages));
  auto next_index = std::make_shared<std::size_t>(0);
  auto outstanding = std::make_shared<std::uint32_t>(0);
  std::uint64_t batch = scenario_.params.batch_pages;
  NodeId src = vm.host;
  NodeId dst = m.dst_host;
  std::string tag = "mig:" + vm.guest.vm_id + ":" + std::to_string(epoch);

  auto phase_end = std::make_shared<std::function<void()>>();
  *phase_end = [this, slot, epoch, final_phase]() {
    VmRt& v = *vms_[slot];
    if (!v.mig || v.mig->epoch != epoch) return;
    if (final_phase) {
      // Residual content that raced a destination eviction gets re-sent.
      std::vector<PageNumber> missing;
      for (auto p : v.mig->fixup_pages) missing.push_back(p);
      v.mig->fixup_pages.clear();
      if (!missing.empty() && v.mig->fixup_attempts++ < 3) {
        mig_send_pages(slot, std::move(missing), true);
        return;
      }
      if (!missing.empty()) {
        mig_abort(slot, "unresolvable residual pages");
        return;
      }
      VcpuTransfer msg{v.guest.vm_id, v.guest.vcpu_state};
      v.mig->bytes += frame_size(WireMessage{msg});
      send(WireMessage{std::move(msg)}, v.host, v.mig->dst_host, Purpose::Migration, slot,
           [this, slot]() { mig_switch(slot); });
    } else {
      mig_next_round(slot);
    }
  };

  auto send_next = std::make_shared<std::function<void()>>();
  *send_next = [this, slot, epoch, list, next_index, outstanding, batch, src, dst, tag,
                send_next, phase_end]() {
    VmRt& v = *vms_[slot];
    if (!v.mig || v.mig->epoch != epoch) return;
    MigrationRt& mg = *v.mig;
    if (*next_index >= list->size() && *outstanding == 0) {
      (*phase_end)();
      return;
    }
    while (*next_index < list->size() && *outstanding < 4) {
      std::size_t first = *next_index;
      std::size_t last = std::min(list->size(), first + batch);
      *next_index = last;
      PageReply msg;
      msg.image_id = tag;
      msg.entries.reserve(last - first);
      const HostMemory& dst_pool = *hosts_[static_cast<std::size_t>(dst)]->memory;
      for (std::size_t i = first; i < last; i++) {
        PageNumber p = (*list)[i];
        PageState st = v.guest.space.state(p);
        PageReplyEntry e;
        e.page = p;
        if (st == PageState::Shared) {
          e.hash = v.guest.space.shared_hash(p);
          if (!dst_pool.contains(e.hash))
            e.content = hosts_[static_cast<std::size_t>(v.host)]->memory->peek(e.hash);
        } else if (st == PageState::Private) {
          const PageContent& c = v.guest.space.private_content(p);
          e.hash = c.hash();
          if (!e.hash.is_zero() && !dst_pool.contains(e.hash)) e.content = c;
        } else if (st == PageState::Zero) {
          e.hash = kZeroHash;  // page was evicted or zeroed since it was listed
        } else {
          continue;  // went Remote (evicted); refetchable from the image after switch
        }
        msg.entries.push_back(std::move(e));
      }
      (*outstanding)++;
      mg.bytes += frame_size(WireMessage{msg});
      send(WireMessage{msg}, src, dst, Purpose::Migration, slot,
           [this, slot, epoch, msg, outstanding, send_next]() {
             VmRt& vv = *vms_[slot];
             if (!vv.mig || vv.mig->epoch != epoch) return;
             mig_install_batch(slot, epoch, msg);
             (*outstanding)--;
             (*send_next)();
           });
    }
  };
  (*send_next)();
}

void ClusterSim::mig_install_batch(std::uint32_t slot, std::uint64_t epoch,
                                   const PageReply& reply) {
  VmRt& vm = *vms_[slot];
  if (!vm.mig || vm.mig->epoch != epoch) return;
  MigrationRt& m = *vm.mig;
  AddressSpace& sp = *m.dst_space;
  const HostMemory& pool = *hosts_[static_cast<std::size_t>(m.dst_host)]->memory;
  for (const auto& e : reply.entries) {
    if (sp.state(e.page) != PageState::Remote) sp.reset_remote(e.page);
    if (e.hash.is_zero()) {
      sp.clear_to_zero(e.page);
      continue;
    }
    bool as_shared = false;
    if (vm.backing) {
      auto h = vm.backing->memory_hash(e.page);
      as_shared = h && *h == e.hash;
    }
    if (as_shared) {
      if (e.content)
        sp.make_shared(e.page, e.hash, &*e.content);
      else if (pool.contains(e.hash))
        sp.make_shared(e.page, e.hash, nullptr);
      else if (m.final_phase)
        m.fixup_pages.insert(e.page);
      else
        m.dirty.insert(e.page);  // re-sent next round
    } else {
      if (e.content)
        sp.install_private(e.page, *e.content);
      else if (pool.contains(e.hash))
        sp.install_private(e.page, pool.peek(e.hash));
      else if (m.final_phase)
        m.fixup_pages.insert(e.page);
      else
        m.dirty.insert(e.page);
    }
  }
}

void ClusterSim::mig_abort(std::uint32_t slot, const std::string& why) {
  VmRt& vm = *vms_[slot];
  if (!vm.mig) return;
  MigrationRt& m = *vm.mig;
  hosts_[static_cast<std::size_t>(m.dst_host)]->reserved_bytes -= vm.admitted_estimate;
  MigrationSummary sum;
  sum.vm_id = vm.guest.vm_id;
  sum.mode = migration_mode_name(m.params.mode);
  sum.src_host = m.src_host_id;
  sum.dst_host = m.dst_host_id;
  sum.rounds = m.rounds;
  sum.bytes_transferred = m.bytes;
  sum.downtime_us = 0;
  sum.total_us = engine_.now() - m.start_at;
  sum.aborted = true;
  metrics_.add_migration(sum);
  metrics_.record(engine_.now(), "migrate_aborted", vm.guest.vm_id, why);
  // The VM is lost: reported, not hidden.
  if (!m.residual_key.empty()) {
    auto rit = residuals_.find(m.residual_key);
    if (rit != residuals_.end()) {
      rit->second->hooks->retain_on_release = false;
      rit->second->space->release_all_shared();
      residuals_.erase(rit);
    }
  }
  vm.mig.reset();
  if (vm.st != VmRt::St::Failed) {
    vm.st = VmRt::St::Failed;
    vm.fault_outstanding = false;
    vm.bg_active = false;
    metrics_.record(engine_.now(), "vm_failed", vm.guest.vm_id,
                    "MigrationAborted: " + why);
  }
}

void ClusterSim::mig_switch(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  MigrationRt& m = *vm.mig;
  bool postcopy = m.params.mode == MigrationParams::Mode::PostCopy;

  // Accounting moves host: drop the source placement, consume the
  // destination reservation.
  auto& src_slots = hosts_[static_cast<std::size_t>(vm.host)]->vm_slots;
  src_slots.erase(std::find(src_slots.begin(), src_slots.end(), slot));
  hosts_[static_cast<std::size_t>(m.dst_host)]->reserved_bytes -= vm.admitted_estimate;
  hosts_[static_cast<std::size_t>(m.dst_host)]->vm_slots.push_back(slot);

  int src_host = vm.host;
  vm.space_generation++;
  if (postcopy) {
    // Freeze the pre-pause copy on the source; it serves demand until drained.
    m.residual_key = "vm:" + vm.guest.vm_id + ":" + std::to_string(m.epoch);
    auto res = std::make_unique<ResidualRt>();
    res->space = std::make_unique<AddressSpace>(std::move(vm.guest.space));
    res->hooks = std::move(vm.hooks);
    res->space->set_hooks(res->hooks.get());
    res->host = src_host;
    res->slot = slot;
    res->backing = vm.backing;
    residuals_.emplace(m.residual_key, std::move(res));
  } else {
    // Source copy retires now; no cache retention for a departed VM.
    vm.hooks->retain_on_release = false;
    vm.guest.space.release_all_shared();
  }

  vm.guest.space = std::move(*m.dst_space);
  vm.hooks = std::move(m.dst_hooks);
  vm.guest.space.set_hooks(vm.hooks.get());
  vm.host = m.dst_host;
  note_admitted(static_cast<std::size_t>(m.dst_host));

  if (postcopy) {
    vm.stream_source = m.residual_key;
    vm.fallback_source = vm.backing ? "img:" + vm.backing->image_id : "";
  }

  // Resume execution on the destination.
  TimeUs downtime = engine_.now() - m.pause_at;
  metrics_.record(engine_.now(), "migrate_downtime_us", vm.guest.vm_id, downtime);
  bool fault_was_outstanding = vm.fault_outstanding;
  vm.fault_outstanding = false;
  resume_vm(slot);
  if (fault_was_outstanding && !vm.op_event_pending) {
    vm.op_event_pending = true;
    engine_.at(engine_.now(), [this, slot]() {
      vms_[slot]->op_event_pending = false;
      exec_op(slot);
    });
  }

  if (postcopy) {
    // Drain the residual lowest-page-first behind demand faults.
    vm.bg_active = vm.guest.space.remote_pages() > 0;
    vm.bg_budget = m.params.drain_bytes_per_s;
    vm.bg_purpose = Purpose::Migration;
    vm.bg_cursor = 0;
    vm.bg_rescans = 0;
    vm.bg_inflight = false;
    m.downtime_us = downtime;
    if (vm.bg_active)
      bg_tick(slot);
    else
      mig_finish(slot);
  } else {
    m.downtime_us = downtime;
    mig_finish(slot);
  }
}

void ClusterSim::mig_finish(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  MigrationRt& m = *vm.mig;
  bool postcopy = m.params.mode == MigrationParams::Mode::PostCopy;
  if (postcopy) {
    // Commit retires the source copy.
    MigrateCommit msg{vm.guest.vm_id};
    m.bytes += frame_size(WireMessage{msg});
    std::string key = m.residual_key;
    send(WireMessage{std::move(msg)}, vm.host,
         scenario_.host_index(m.src_host_id), Purpose::Migration, slot,
         [this, slot, key]() {
           VmRt& v = *vms_[slot];
           auto rit = residuals_.find(key);
           if (rit != residuals_.end()) {
             rit->second->hooks->retain_on_release = false;
             rit->second->space->release_all_shared();
             residuals_.erase(rit);
           }
           if (!v.mig) return;
           v.stream_source = v.backing ? "img:" + v.backing->image_id : "";
           v.fallback_source.clear();
           finish_migration_report(slot);
         });
    return;
  }
  finish_migration_report(slot);
}

void ClusterSim::finish_migration_report(std::uint32_t slot) {
  VmRt& vm = *vms_[slot];
  MigrationRt& m = *vm.mig;
  MigrationSummary sum;
  sum.vm_id = vm.guest.vm_id;
  sum.mode = migration_mode_name(m.params.mode);
  sum.src_host = m.src_host_id;
  sum.dst_host = m.dst_host_id;
  sum.rounds = m.rounds;
  sum.bytes_transferred = m.bytes;
  sum.downtime_us = m.downtime_us;
  sum.total_us = engine_.now() - m.start_at;
  sum.aborted = false;
  metrics_.add_migration(sum);
  metrics_.record(engine_.now(), "migrate_done", vm.guest.vm_id,
                  sum.mode + ":" + std::to_string(sum.downtime_us));
  vm.mig.reset();
}

// --- policy ticks ------------------------------------------------------------------------------

void ClusterSim::enforce_host(std::size_t host_idx) {
  HostRt& h = *hosts_[host_idx];
  try {
    HostView v = view_of(host_idx);
    EvictionReport rep = enforce(
        v, EvictionPolicy{scenario_.params.high_watermark, scenario_.params.low_watermark});
    if (rep.evicted_pages)
      metrics_.record(engine_.now(), "evicted_pages", h.spec.host_id, rep.evicted_pages);
  } catch (const VmsError& e) {
    if (e.code() != Err::OvercommitFailure) throw;
    if (!h.frozen) {
      h.frozen = true;  // refuses further placement
      metrics_.record(engine_.now(), "overcommit_failure", h.spec.host_id, e.what());
    }
  }
}

void ClusterSim::enforce_tick() {
  for (std::size_t i = 0; i < hosts_.size(); i++) {
    enforce_host(i);
    HostView v = view_of(i);
    metrics_.record(engine_.now(), "host_physical_bytes", hosts_[i]->spec.host_id,
                    host_physical_bytes(v));
  }
  TimeUs period = us_from_s(scenario_.params.enforce_period_s);
  if (period == 0) return;
  TimeUs next = engine_.now() + period;
  if (next <= horizon_us_)
    engine_.at(next, [this]() { enforce_tick(); });
}

// --- run / finalize -------------------------------------------------------------------------------

Metrics ClusterSim::run() {
  for (const auto& entry : scenario_.script) {
    TimeUs at = us_from_s(entry.at_s);
    engine_.at(at, [this, cmd = entry.cmd]() {
      try {
        std::visit(
            [this](const auto& c) {
              using T = std::decay_t<decltype(c)>;
              if constexpr (std::is_same_v<T, CmdBootVm>) cmd_boot(c);
              else if constexpr (std::is_same_v<T, CmdCreateImage>) cmd_create_image(c);
              else if constexpr (std::is_same_v<T, CmdCloneVm>) cmd_clone(c);
              else if constexpr (std::is_same_v<T, CmdMigrate>) cmd_migrate(c);
              else { (void)c; /* run_for only extends the horizon */ }
            },
            cmd);
      } catch (const VmsError& e) {
        metrics_.record(engine_.now(), "command_error", e.code_name(), e.what());
      }
    });
  }
  if (us_from_s(scenario_.params.enforce_period_s) > 0)
    engine_.at(0, [this]() { enforce_tick(); });
  engine_.run();
  return finalize();
}

Metrics ClusterSim::finalize() {
  engine_.run();
  if (!finalized_) {
    finalized_ = true;
    metrics_.set_wire_check(transport_bytes_);
    metrics_.set_max_concurrent_admitted(max_host_admitted_);
    auto st = store_.stats();
    metrics_.set_dedup(st.logical_pages, st.unique_pages);
    for (int i = 0; i < kPurposeCount; i++)
      metrics_.record(engine_.now(), "wire_bytes_total",
                      purpose_name(static_cast<Purpose>(i)),
                      metrics_.wire(static_cast<Purpose>(i)));
    for (std::size_t i = 0; i < hosts_.size(); i++) {
      HostView v = view_of(i);
      metrics_.record(engine_.now(), "host_physical_bytes_final", hosts_[i]->spec.host_id,
                      host_physical_bytes(v));
    }
  }
  return metrics_;
}

// --- materialization (test-oracle support) -----------------------------------------------------

std::vector<std::uint8_t> ClusterSim::materialize_vm_memory(const std::string& vm_id) {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  VmRt& vm = *vms_[it->second];
  AddressSpace& space = vm.guest.space;
  std::vector<std::uint8_t> out(space.page_count() * kPageSize, 0);

  std::function<void(AddressSpace&, int, const LiveImageManifest*, PageNumber, std::uint8_t*)>
      resolve = [&](AddressSpace& sp, int host, const LiveImageManifest* backing,
                    PageNumber p, std::uint8_t* dst) {
        switch (sp.state(p)) {
          case PageState::Zero:
            break;
          case PageState::Private:
            sp.private_content(p).copy_to(dst);
            break;
          case PageState::Shared:
            hosts_[static_cast<std::size_t>(host)]->memory->peek(sp.shared_hash(p)).copy_to(dst);
            break;
          case PageState::Remote: {
            const std::string& src = *sp.source();
            if (src.rfind("img:", 0) == 0) {
              if (!backing) throw VmsError(Err::MissingPage, "remote page without backing");
              auto h = backing->memory_hash(p);
              if (!h) throw VmsError(Err::MissingPage, "page beyond backing image");
              if (!h->is_zero()) store_.get(*h).copy_to(dst);
            } else {
              auto rit = residuals_.find(src);
              if (rit == residuals_.end())
                throw VmsError(Err::MissingPage, "residual source gone");
              resolve(*rit->second->space, rit->second->host, rit->second->backing, p, dst);
            }
            break;
          }
        }
      };

  for (PageNumber p = 0; p < space.page_count(); p++)
    resolve(space, vm.host, vm.backing, p, out.data() + p * kPageSize);
  return out;
}

// --- live mode ----------------------------------------------------------------------------------

void ClusterSim::enable_live_mode(const std::string& socket_path) {
  live_server_ = std::make_unique<LivePageServer>(socket_path);
  live_client_ = std::make_unique<LivePageClient>(socket_path);
  live_server_publish_ = [this](const LiveImageManifest& m) {
    live_server_->publish(m, store_);
  };
  // Images that completed before live mode was switched on.
  for (auto& [id, img] : images_)
    if (img->complete) live_server_->publish(img->manifest, store_);
}

}  // namespace vms

namespace vms {

// --- world persistence (vmsctl) -------------------------------------------------

void ClusterSim::register_image(const LiveImageManifest& manifest,
                                const std::string& source_template) {
  if (images_.count(manifest.image_id))
    throw VmsError(Err::InvalidConfig, "duplicate image id " + manifest.image_id);
  auto img = std::make_unique<ImageRt>();
  img->manifest = manifest;
  img->source_template = source_template;
  img->complete = true;
  images_.emplace(manifest.image_id, std::move(img));
  if (live_server_publish_) live_server_publish_(images_.at(manifest.image_id)->manifest);
}

void ClusterSim::adopt_vm(const VmState& st) {
  int host = scenario_.host_index(st.host);
  if (host < 0) throw VmsError(Err::UnknownHost, st.host);
  const TemplateSpec& tmpl = scenario_.tmpl(st.template_name);
  double frac = st.kind == "boot" ? 1.0 : tmpl.expected_touch_fraction;
  auto estimate = static_cast<std::uint64_t>(
      static_cast<double>(st.page_count * kPageSize) * frac);

  TemplateSpec eff = tmpl;
  eff.memory_pages = st.page_count;
  eff.vcpu_bytes = st.vcpu_state.size();
  std::uint32_t slot = make_vm(st.vm_id, eff, tmpl.workload, st.identity, host,
                               st.kind.c_str(), engine_.now(), estimate);
  VmRt& vm = *vms_[slot];
  vm.guest.vcpu_state = st.vcpu_state;
  vm.guest.booted_at_us = st.booted_at_us;
  if (!st.backing_image.empty()) {
    vm.backing = &image(st.backing_image);
    vm.stream_source = "img:" + st.backing_image;
    vm.guest.space.set_source(vm.stream_source);
  }
  for (PageNumber p : st.remote_pages) vm.guest.space.mark_remote(p);
  for (const auto& [p, c] : st.private_pages) vm.guest.space.make_private(p, c);
  for (const auto& [p, h] : st.shared_pages) {
    PageContent c = store_.get(h);  // backing image must resolve it
    vm.guest.space.mark_remote(p);
    vm.guest.space.make_shared(p, h, &c);
  }
  vm.next_op = st.next_op;
  vm.ops_completed = st.ops_completed;
  vm.op_time_base = vm.program->op_time(st.next_op);
  vm.ready_recorded = true;  // startup was measured in a previous invocation
  if (st.failed) {
    vm.st = VmRt::St::Failed;
  } else {
    vm.st = VmRt::St::Running;
    vm.workload_started = true;
    vm.workload_start = engine_.now();
    schedule_op(slot);
  }
}

ClusterSim::VmState ClusterSim::export_vm(const std::string& vm_id) const {
  auto it = vm_by_id_.find(vm_id);
  if (it == vm_by_id_.end()) throw VmsError(Err::UnknownVm, vm_id);
  const VmRt& vm = *vms_[it->second];
  if (vm.mig)
    throw VmsError(Err::InvalidConfig, "cannot persist mid-migration state for " + vm_id);
  VmState st;
  st.vm_id = vm.guest.vm_id;
  st.kind = vm.kind;
  st.host = hosts_[static_cast<std::size_t>(vm.host)]->spec.host_id;
  st.template_name = vm.template_name;
  if (vm.backing) st.backing_image = vm.backing->image_id;
  st.identity = vm.guest.identity;
  st.vcpu_state = vm.guest.vcpu_state;
  st.page_count = vm.guest.space.page_count();
  st.next_op = vm.next_op;
  st.ops_completed = vm.ops_completed;
  st.booted_at_us = vm.guest.booted_at_us;
  st.failed = vm.st == VmRt::St::Failed;
  const AddressSpace& sp = vm.guest.space;
  for (PageNumber p = 0; p < sp.page_count(); p++) {
    switch (sp.state(p)) {
      case PageState::Zero:
        break;
      case PageState::Remote:
        st.remote_pages.push_back(p);
        break;
      case PageState::Shared:
        st.shared_pages.emplace_back(p, sp.shared_hash(p));
        break;
      case PageState::Private:
        st.private_pages.emplace_back(p, sp.private_content(p));
        break;
    }
  }
  return st;
}

std::vector<std::string> ClusterSim::vm_ids_sorted() const {
  std::vector<std::string> ids;
  ids.reserve(vm_by_id_.size());
  for (const auto& [id, slot] : vm_by_id_) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void ClusterSim::advance_to(TimeUs t) {
  engine_.at(t, [] {});
  engine_.run();
}

}  // namespace vms

namespace vms {

PageReply ClusterSim::serve_page_request(const PageRequest& request,
                                         const std::string& requester_host_id) {
  int idx = scenario_.host_index(requester_host_id);
  if (idx < 0) throw VmsError(Err::UnknownHost, requester_host_id);
  return serve_source(request.image_id, request, idx, false);
}

}  // namespace vms

namespace vms {

void ClusterSim::set_horizon(TimeUs t) {
  bool extended = t > horizon_us_;
  horizon_us_ = t;
  if (!extended) return;
  for (auto& vm : vms_)
    if (vm->st == VmRt::St::Running) schedule_op(vm->slot);
}

}  // namespace vms
