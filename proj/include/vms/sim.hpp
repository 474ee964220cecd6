// Deterministic discrete-event cluster simulator: hosts, FIFO links, a shared
// image store, demand-paged clones, background streaming, watermark
// enforcement, and the three migration state machines.
#ifndef VMS_SIM_HPP
#define VMS_SIM_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "vms/footprint.hpp"
#include "vms/metrics.hpp"
#include "vms/scenario.hpp"
#include "vms/snapshot.hpp"
#include "vms/wire.hpp"

namespace vms {

using NodeId = int;
inline constexpr NodeId kStoreNode = -1;

struct MigrationParams {
  enum class Mode { PreCopy, PostCopy, StopCopy };
  Mode mode = Mode::PreCopy;
  std::uint32_t max_rounds = 8;
  std::uint64_t stop_threshold_pages = 64;
  std::uint64_t drain_bytes_per_s = 0;  // PostCopy: 0 means link-paced
};

const char* migration_mode_name(MigrationParams::Mode m);

class LivePageClient;  // live-mode transport (AF_UNIX), see live_server.hpp
struct ResidualRt;     // frozen post-copy source copy (sim.cpp)

// Discrete event engine: events dispatch in (time, sequence) order; sequence
// numbers break ties by insertion order.
class Engine {
 public:
  TimeUs now() const { return now_; }
  void at(TimeUs t, std::function<void()> fn);
  bool step();
  void run();
  std::size_t pending() const { return queue_.size(); }

 private:
  struct Ev {
    TimeUs at;
    std::uint64_t seq;
    std::function<void()> fn;
  };
  struct Later {
    bool operator()(const Ev& a, const Ev& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };
  TimeUs now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Ev, std::vector<Ev>, Later> queue_;
};

class ClusterSim {
 public:
  explicit ClusterSim(Scenario scenario);
  ~ClusterSim();

  // Runs the full script and returns the final metrics.
  Metrics run();

  // --- direct driving (tests, the CLI world) --------------------------------
  Engine& engine() { return engine_; }
  TimeUs now() const { return engine_.now(); }
  void drain() { engine_.run(); }
  Metrics finalize();  // drain + closing records

  void set_horizon(TimeUs t);  // extending it re-kicks idle workloads
  TimeUs horizon() const { return horizon_us_; }

  // Script commands, executed at the current virtual time.
  void cmd_boot(const CmdBootVm& c);
  void cmd_create_image(const CmdCreateImage& c);
  void cmd_clone(const CmdCloneVm& c);
  void cmd_migrate(const CmdMigrate& c);
  void do_migrate(const std::string& vm_id, const std::string& to_host,
                  const MigrationParams& params);

  // --- introspection ---------------------------------------------------------
  const Scenario& scenario() const { return scenario_; }
  bool vm_exists(const std::string& vm_id) const;
  const GuestVm& vm(const std::string& vm_id) const;
  GuestVm& vm_mutable(const std::string& vm_id);
  const std::string& vm_host(const std::string& vm_id) const;
  bool vm_failed(const std::string& vm_id) const;
  std::uint64_t vm_ops_completed(const std::string& vm_id) const;

  PageStore& shared_store() { return store_; }
  const LiveImageManifest& image(const std::string& image_id) const;
  bool image_complete(const std::string& image_id) const;

  HostMemory& host_memory(const std::string& host_id);
  HostView host_view(const std::string& host_id);
  EvictionReport run_enforce(const std::string& host_id);

  Metrics& metrics() { return metrics_; }
  std::uint64_t transport_bytes() const { return transport_bytes_; }

  // Store-side page service: entries cover the request exactly, content
  // included iff the requester's host does not already hold the hash.
  PageReply serve_page_request(const PageRequest& request,
                               const std::string& requester_host_id);

  // Logical memory as the guest would read it (remote pages resolved through
  // their source). Test-oracle support; desk-scale sizes only.
  std::vector<std::uint8_t> materialize_vm_memory(const std::string& vm_id);

  // Deterministic fault injection: return true to fail a delivery.
  using FailInjector = std::function<bool(const WireMessage&, NodeId from, NodeId to)>;
  void set_fail_injector(FailInjector f) { fail_injector_ = std::move(f); }

  // Live mode: demand-stream requests round-trip through a local-socket page
  // server instead of the in-process service path.
  void enable_live_mode(const std::string& socket_path);

  static MigrationParams::Mode mode_from_name(const std::string& name);

  // --- world persistence (vmsctl) ---------------------------------------------
  // Registers an already-complete image whose contents are in shared_store().
  void register_image(const LiveImageManifest& manifest, const std::string& source_template);

  struct VmState {
    std::string vm_id;
    std::string kind;
    std::string host;
    std::string template_name;
    std::string backing_image;  // empty when none
    IdentityRecord identity;
    std::vector<std::uint8_t> vcpu_state;
    std::uint64_t page_count = 0;
    std::uint64_t next_op = 0;
    std::uint64_t ops_completed = 0;
    TimeUs booted_at_us = 0;
    bool failed = false;
    std::vector<std::pair<PageNumber, ContentHash>> shared_pages;
    std::vector<std::pair<PageNumber, PageContent>> private_pages;
    std::vector<PageNumber> remote_pages;
  };
  // Rebuilds a VM from persisted state; its backing image must already be
  // registered and loaded into the shared store.
  void adopt_vm(const VmState& st);
  VmState export_vm(const std::string& vm_id) const;
  std::vector<std::string> vm_ids_sorted() const;
  void advance_to(TimeUs t);  // jump the clock (idle world time between commands)

 private:
  friend struct ResidualRt;
  struct VmRt;
  struct HostRt;
  struct MigrationRt;
  struct PoolHooks;
  struct ImageRt;

  // --- wiring ---------------------------------------------------------------
  std::uint64_t link_bits_per_s(NodeId from, NodeId to) const;
  // Returns false when fault injection dropped the delivery.
  bool send(const WireMessage& msg, NodeId from, NodeId to, Purpose purpose,
            std::optional<std::uint32_t> vm_attr, std::function<void()> on_delivered);
  void track_inflight(NodeId host, const PageReply& reply, bool add);

  // --- VM lifecycle ----------------------------------------------------------
  std::uint32_t make_vm(const std::string& vm_id, const TemplateSpec& tmpl,
                        const WorkloadSpec& workload, const IdentityRecord& identity,
                        int host, const char* kind, TimeUs command_at,
                        std::uint64_t admitted_estimate);
  void start_workload(std::uint32_t slot);
  void schedule_op(std::uint32_t slot);
  void exec_op(std::uint32_t slot);
  void complete_op(std::uint32_t slot, const Access& access);
  void pause_vm(std::uint32_t slot, TimeUs until);  // UINT64_MAX: until resume
  void resume_vm(std::uint32_t slot);
  void fail_vm(std::uint32_t slot, const std::string& why);

  // --- demand paging ----------------------------------------------------------
  void issue_fault(std::uint32_t slot, PageNumber page, bool to_fallback);
  void retry_or_fail(std::uint32_t slot, PageNumber page, bool was_fallback);
  void deliver_fault_reply(std::uint32_t slot, PageNumber page, std::uint64_t generation,
                           bool to_fallback, const PageReply& reply);
  PageReply serve_source(const std::string& source_id, const PageRequest& req,
                         NodeId requester_host, bool include_all_content);
  NodeId source_node(const std::string& source_id) const;
  // Installs one reply entry; returns false when the content is missing
  // host-side and the page needs a refault.
  bool install_entry(std::uint32_t slot, const PageReplyEntry& entry);

  // --- background streaming ----------------------------------------------------
  void bg_tick(std::uint32_t slot);
  void bg_complete(std::uint32_t slot);

  // --- snapshot / clone ---------------------------------------------------------
  void clone_from_image(const std::string& image_id, const CmdCloneVm& c, std::uint64_t index);

  // --- migration -----------------------------------------------------------------
  void mig_next_round(std::uint32_t slot);
  void mig_send_pages(std::uint32_t slot, std::vector<PageNumber> pages, bool final_phase);
  void mig_install_batch(std::uint32_t slot, std::uint64_t epoch, const PageReply& reply);
  void mig_switch(std::uint32_t slot);
  void mig_finish(std::uint32_t slot);
  void mig_abort(std::uint32_t slot, const std::string& why);
  void finish_migration_report(std::uint32_t slot);
  std::vector<PageNumber> resident_pages(const AddressSpace& space) const;
  bool sim_admit(std::size_t host_idx, std::uint64_t estimate_bytes) const;

  // --- policy -----------------------------------------------------------------------
  void enforce_tick();
  void enforce_host(std::size_t host_idx);
  void note_admitted(std::size_t host_idx);
  HostView view_of(std::size_t host_idx);

  std::uint64_t vm_workload_seed(const std::string& vm_id, const WorkloadSpec& w) const;

  Scenario scenario_;
  Engine engine_;
  PageStore store_;
  Metrics metrics_;
  std::vector<std::unique_ptr<HostRt>> hosts_;
  std::vector<std::unique_ptr<VmRt>> vms_;
  std::unordered_map<std::string, std::uint32_t> vm_by_id_;
  std::unordered_map<std::string, std::unique_ptr<ImageRt>> images_;
  // Frozen pre-pause spaces serving post-copy demand, keyed "vm:<id>:<epoch>".
  std::unordered_map<std::string, std::unique_ptr<ResidualRt>> residuals_;
  std::unordered_map<std::uint64_t, TimeUs> link_busy_;  // directed pair key
  std::uint64_t transport_bytes_ = 0;                    // independent accumulator
  TimeUs horizon_us_ = 0;
  FailInjector fail_injector_;
  std::unique_ptr<LivePageClient> live_client_;
  std::unique_ptr<class LivePageServer> live_server_;
  std::function<void(const LiveImageManifest&)> live_server_publish_;
  std::uint64_t clone_counter_ = 0;
  std::uint64_t max_host_admitted_ = 0;
  bool finalized_ = false;
};

}  // namespace vms

#endif
