#include "vms/metrics.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace vms {

const char* purpose_name(Purpose p) {
  switch (p) {
    case Purpose::Boot: return "boot";
    case Purpose::Snapshot: return "snapshot";
    case Purpose::CloneStart: return "clone_start";
    case Purpose::DemandStream: return "demand_stream";
    case Purpose::BackgroundStream: return "background_stream";
    case Purpose::Migration: return "migration";
  }
  return "?";
}

void Metrics::record(TimeUs t, const std::string& kind, const std::string& subject,
                     const std::string& value) {
  records_.push_back({t, kind, subject, value});
}

void Metrics::record(TimeUs t, const std::string& kind, const std::string& subject,
                     std::uint64_t value) {
  record(t, kind, subject, std::to_string(value));
}

void Metrics::add_host_content_pages(const std::string& host, std::uint64_t pages) {
  host_content_pages_[host] += pages;
}

VmSummary& Metrics::vm(const std::string& vm_id) {
  auto it = vm_index_.find(vm_id);
  if (it != vm_index_.end()) return vms_[it->second];
  vm_index_.emplace(vm_id, vms_.size());
  vms_.push_back(VmSummary{});
  vms_.back().vm_id = vm_id;
  return vms_.back();
}

std::uint64_t Metrics::wire_total() const {
  std::uint64_t t = 0;
  for (auto b : wire_by_purpose_) t += b;
  return t;
}

std::string Metrics::render_log() const {
  std::string out = "0,format_version,metrics_log,1\n";
  for (const auto& r : records_) {
    out += std::to_string(r.time_us);
    out += ',';
    out += r.kind;
    out += ',';
    out += r.subject;
    out += ',';
    out += r.value;
    out += '\n';
  }
  return out;
}

std::string Metrics::render_summary() const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["template_fingerprint"] = template_fingerprint_;

  nlohmann::ordered_json wire;
  for (int i = 0; i < kPurposeCount; i++)
    wire[purpose_name(static_cast<Purpose>(i))] = wire_by_purpose_[i];
  wire["total"] = wire_total();
  wire["transport_check"] = wire_check_;
  j["wire_bytes"] = wire;

  auto vms_sorted = vms_;
  std::sort(vms_sorted.begin(), vms_sorted.end(),
            [](const VmSummary& a, const VmSummary& b) { return a.vm_id < b.vm_id; });
  nlohmann::ordered_json jvms = nlohmann::ordered_json::array();
  for (const auto& v : vms_sorted) {
    nlohmann::ordered_json e;
    e["vm_id"] = v.vm_id;
    e["kind"] = v.kind;
    e["command_at_us"] = v.command_at_us;
    e["ready"] = v.ready;
    e["ready_at_us"] = v.ready_at_us;
    e["startup_us"] = v.ready ? v.ready_at_us - v.command_at_us : 0;
    e["wire_bytes"] = v.wire_bytes;
    e["content_pages_in"] = v.content_pages_in;
    jvms.push_back(e);
  }
  j["vms"] = jvms;

  nlohmann::ordered_json jmig = nlohmann::ordered_json::array();
  for (const auto& m : migrations_) {
    nlohmann::ordered_json e;
    e["vm_id"] = m.vm_id;
    e["mode"] = m.mode;
    e["src_host"] = m.src_host;
    e["dst_host"] = m.dst_host;
    e["rounds"] = m.rounds;
    e["bytes_transferred"] = m.bytes_transferred;
    e["downtime_us"] = m.downtime_us;
    e["total_us"] = m.total_us;
    e["aborted"] = m.aborted;
    jmig.push_back(e);
  }
  j["migrations"] = jmig;

  nlohmann::ordered_json jhosts;
  for (const auto& [host, pages] : host_content_pages_) jhosts[host] = pages;
  j["host_content_pages"] = jhosts;

  j["max_concurrent_admitted"] = max_admitted_;
  nlohmann::ordered_json dd;
  dd["logical_pages"] = dedup_logical_;
  dd["unique_pages"] = dedup_unique_;
  j["store_dedup"] = dd;
  return j.dump(2) + "\n";
}

void Metrics::write_report(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto write_atomic = [](const std::filesystem::path& p, const std::string& text) {
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw VmsError(Err::StoreError, "cannot open " + tmp.string());
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
      if (!out) throw VmsError(Err::StoreError, "write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, p);
  };
  write_atomic(dir / "metrics.log", render_log());
  write_atomic(dir / "summary.json", render_summary());
}

namespace {

struct SummaryView {
  nlohmann::json j;
  double mean_startup(const std::string& kind) const {
    double sum = 0;
    std::uint64_t n = 0;
    for (const auto& v : j.at("vms")) {
      if (v.at("kind") == kind && v.at("ready").get<bool>()) {
        sum += v.at("startup_us").get<double>();
        n++;
      }
    }
    if (n == 0) throw VmsError(Err::InvalidConfig, "no ready \"" + kind + "\" VMs in report");
    return sum / static_cast<double>(n);
  }
  double mean_wire_bytes(const std::string& kind) const {
    double sum = 0;
    std::uint64_t n = 0;
    for (const auto& v : j.at("vms")) {
      if (v.at("kind") == kind) {
        sum += v.at("wire_bytes").get<double>();
        n++;
      }
    }
    if (n == 0) throw VmsError(Err::InvalidConfig, "no \"" + kind + "\" VMs in report");
    return sum / static_cast<double>(n);
  }
};

}  // namespace

ComparisonReport compare_summaries(const std::string& baseline_json,
                                   const std::string& vms_json) {
  SummaryView base{nlohmann::json::parse(baseline_json)};
  SummaryView vms{nlohmann::json::parse(vms_json)};
  if (base.j.at("format_version") != 1 || vms.j.at("format_version") != 1)
    throw VmsError(Err::InvalidConfig, "unsupported summary format_version");
  if (base.j.at("template_fingerprint") != vms.j.at("template_fingerprint"))
    throw VmsError(Err::InvalidConfig, "reports come from scenarios with different templates");

  ComparisonReport rep;
  rep.speedup = base.mean_startup("boot") / vms.mean_startup("clone");
  double base_adm = base.j.at("max_concurrent_admitted").get<double>();
  double vms_adm = vms.j.at("max_concurrent_admitted").get<double>();
  if (base_adm <= 0) throw VmsError(Err::InvalidConfig, "baseline admitted no VMs");
  rep.density_ratio = vms_adm / base_adm;
  rep.io_ratio = base.mean_wire_bytes("boot") / vms.mean_wire_bytes("clone");
  return rep;
}

ComparisonReport compare_reports(const std::filesystem::path& baseline_dir,
                                 const std::filesystem::path& vms_dir) {
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw VmsError(Err::InvalidConfig, "cannot open " + p.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  return compare_summaries(slurp(baseline_dir / "summary.json"),
                           slurp(vms_dir / "summary.json"));
}

}  // namespace vms
