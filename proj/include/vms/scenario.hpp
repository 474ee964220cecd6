// Declarative simulation input. Scenario files are JSON documents with a
// format_version field; see README for the schema.
#ifndef VMS_SCENARIO_HPP
#define VMS_SCENARIO_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vms/guest.hpp"
#include "vms/host.hpp"

namespace vms {

struct TemplateSpec {
  std::string name;
  std::uint64_t memory_pages = 262144;  // 1 GiB
  std::uint64_t disk_bytes = 20ULL << 30;
  std::uint64_t vcpu_bytes = kDefaultVcpuBytes;
  double expected_touch_fraction = 0.25;
  WorkloadSpec workload;

  bool operator==(const TemplateSpec&) const = default;
};

struct CmdBootVm {
  std::string vm;
  std::string tmpl;
  std::string host;
  std::optional<std::string> workload_template;  // run a different template's workload
};
struct CmdCreateImage {
  std::string image;
  std::string vm;
};
struct CmdCloneVm {
  std::string image;
  std::uint64_t count = 1;
  std::vector<std::string> hosts;  // round-robin placement
  std::string vm_prefix = "c";
  std::string hostname_prefix = "c";
  std::optional<std::string> workload_template;
  // vmsctl: use vm_prefix/hostname_prefix verbatim for a single clone.
  bool exact_names = false;
  std::optional<std::string> net_id;
};
struct CmdMigrate {
  std::string vm;
  std::string to_host;
  std::string mode;  // precopy | postcopy | stopcopy
};
struct CmdRunFor {
  double seconds = 0.0;
};

using Command = std::variant<CmdBootVm, CmdCreateImage, CmdCloneVm, CmdMigrate, CmdRunFor>;

struct ScriptEntry {
  double at_s = 0.0;
  Command cmd;
};

struct ScenarioParams {
  double boot_duration_s = 96.9;  // external cloud measurement, consumed as a default
  std::uint64_t link_latency_us = 500;
  std::uint64_t store_nic_bits_per_s = 10'000'000'000ULL;
  std::uint64_t ready_ops = 100;
  std::uint32_t prefetch_window = 8;
  std::uint64_t background_bytes_per_s = 0;
  double enforce_period_s = 1.0;
  double high_watermark = 0.90;
  double low_watermark = 0.80;
  std::uint64_t clone_setup_us = 1000;
  std::uint32_t migrate_max_rounds = 8;
  std::uint64_t migrate_stop_threshold_pages = 64;
  std::uint64_t migrate_drain_bytes_per_s = 0;  // 0: link-paced
  std::uint64_t batch_pages = 1024;             // bulk page-transfer batch
  std::uint64_t background_batch_pages = 64;    // background stream quantum
  std::uint64_t pause_fixed_us = 1000;
  double pause_per_page_us = 0.01;
};

struct Scenario {
  std::uint64_t seed = 0;
  ScenarioParams params;
  std::vector<HostSpec> hosts;
  std::vector<TemplateSpec> templates;
  std::vector<ScriptEntry> script;

  void validate() const;  // InvalidConfig on any inconsistency
  const TemplateSpec& tmpl(const std::string& name) const;
  int host_index(const std::string& host_id) const;  // -2 when unknown
  TimeUs horizon_us() const;

  // Canonical serialization of the template list; reports embed it so the
  // comparison tool can refuse mismatched scenario pairs.
  std::string template_fingerprint() const;

  static Scenario from_json_text(const std::string& text);
  static Scenario load_file(const std::filesystem::path& path);
  std::string to_json_text() const;
};

// The four-blade reference cluster: 4 hosts, 16 GiB RAM, 8 cores each.
std::vector<HostSpec> default_hosts(std::size_t count = 4);

}  // namespace vms

#endif
