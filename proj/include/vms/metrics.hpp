// Simulation measurements: line-delimited records plus an aggregate summary.
//
// metrics.log: one record per line, `time_us,kind,subject,value`, first
// record is the format_version. summary.json: aggregates keyed for the
// comparison tool, carrying its own format_version.
#ifndef VMS_METRICS_HPP
#define VMS_METRICS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vms/common.hpp"

namespace vms {

enum class Purpose : std::uint8_t {
  Boot = 0,
  Snapshot,
  CloneStart,
  DemandStream,
  BackgroundStream,
  Migration,
};
inline constexpr int kPurposeCount = 6;
const char* purpose_name(Purpose p);

struct MetricRecord {
  TimeUs time_us = 0;
  std::string kind;
  std::string subject;
  std::string value;
};

struct VmSummary {
  std::string vm_id;
  std::string kind;  // "boot" | "clone"
  TimeUs command_at_us = 0;
  TimeUs ready_at_us = 0;
  bool ready = false;
  std::uint64_t wire_bytes = 0;          // provisioning + streaming attributed here
  std::uint64_t content_pages_in = 0;    // content-bearing page entries received
};

struct MigrationSummary {
  std::string vm_id;
  std::string mode;
  std::string src_host;
  std::string dst_host;
  std::uint64_t rounds = 0;
  std::uint64_t bytes_transferred = 0;
  std::uint64_t downtime_us = 0;
  std::uint64_t total_us = 0;
  bool aborted = false;
};

class Metrics {
 public:
  void record(TimeUs t, const std::string& kind, const std::string& subject,
              const std::string& value);
  void record(TimeUs t, const std::string& kind, const std::string& subject,
              std::uint64_t value);

  void add_wire(Purpose p, std::uint64_t bytes) { wire_by_purpose_[static_cast<int>(p)] += bytes; }
  void add_host_content_pages(const std::string& host, std::uint64_t pages);

  VmSummary& vm(const std::string& vm_id);
  const std::vector<VmSummary>& vms() const { return vms_; }
  void add_migration(const MigrationSummary& m) { migrations_.push_back(m); }
  const std::vector<MigrationSummary>& migrations() const { return migrations_; }

  std::uint64_t wire_total() const;
  std::uint64_t wire(Purpose p) const { return wire_by_purpose_[static_cast<int>(p)]; }
  const std::map<std::string, std::uint64_t>& host_content_pages() const {
    return host_content_pages_;
  }

  // Independent transport-side accumulator, for the conservation audit.
  void set_wire_check(std::uint64_t v) { wire_check_ = v; }
  std::uint64_t wire_check() const { return wire_check_; }

  void set_max_concurrent_admitted(std::uint64_t v) { max_admitted_ = v; }
  std::uint64_t max_concurrent_admitted() const { return max_admitted_; }
  void set_dedup(std::uint64_t logical, std::uint64_t unique) {
    dedup_logical_ = logical;
    dedup_unique_ = unique;
  }
  void set_template_fingerprint(std::string fp) { template_fingerprint_ = std::move(fp); }
  const std::string& template_fingerprint() const { return template_fingerprint_; }

  const std::vector<MetricRecord>& records() const { return records_; }

  std::string render_log() const;
  std::string render_summary() const;  // JSON text

  // Writes metrics.log and summary.json into dir (created if needed).
  void write_report(const std::filesystem::path& dir) const;

 private:
  std::vector<MetricRecord> records_;
  std::vector<VmSummary> vms_;
  std::map<std::string, std::size_t> vm_index_;
  std::vector<MigrationSummary> migrations_;
  std::uint64_t wire_by_purpose_[kPurposeCount] = {};
  std::map<std::string, std::uint64_t> host_content_pages_;
  std::uint64_t wire_check_ = 0;
  std::uint64_t max_admitted_ = 0;
  std::uint64_t dedup_logical_ = 0;
  std::uint64_t dedup_unique_ = 0;
  std::string template_fingerprint_;
};

struct ComparisonReport {
  double speedup = 0.0;
  double density_ratio = 0.0;
  double io_ratio = 0.0;
};

// Compares a cold-boot baseline report with a streaming report. Both must
// come from scenarios with matching templates (InvalidConfig otherwise).
ComparisonReport compare_reports(const std::filesystem::path& baseline_dir,
                                 const std::filesystem::path& vms_dir);
ComparisonReport compare_summaries(const std::string& baseline_json,
                                   const std::string& vms_json);

}  // namespace vms

#endif
