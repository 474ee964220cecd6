#include "vms/scenario.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

namespace vms {

using nlohmann::json;
using nlohmann::ordered_json;

std::vector<HostSpec> default_hosts(std::size_t count) {
  std::vector<HostSpec> hosts(count);
  for (std::size_t i = 0; i < count; i++) hosts[i].host_id = "h" + std::to_string(i);
  return hosts;
}

const TemplateSpec& Scenario::tmpl(const std::string& name) const {
  for (const auto& t : templates)
    if (t.name == name) return t;
  throw VmsError(Err::InvalidConfig, "unknown template: " + name);
}

int Scenario::host_index(const std::string& host_id) const {
  for (std::size_t i = 0; i < hosts.size(); i++)
    if (hosts[i].host_id == host_id) return static_cast<int>(i);
  return -2;
}

TimeUs Scenario::horizon_us() const {
  TimeUs h = 0;
  for (const auto& e : script) {
    TimeUs t = us_from_s(e.at_s);
    if (const auto* rf = std::get_if<CmdRunFor>(&e.cmd))
      t += us_from_s(rf->seconds);
    if (t > h) h = t;
  }
  return h;
}

void Scenario::validate() const {
  if (hosts.empty()) throw VmsError(Err::InvalidConfig, "scenario has no hosts");
  std::set<std::string> host_ids;
  for (const auto& h : hosts) {
    if (h.ram_bytes == 0 || h.nic_bits_per_s == 0)
      throw VmsError(Err::InvalidConfig, "host capacities must be positive");
    if (h.cache_fraction < 0.0 || h.cache_fraction > 1.0)
      throw VmsError(Err::InvalidConfig, "cache_fraction outside [0,1]");
    if (!host_ids.insert(h.host_id).second)
      throw VmsError(Err::InvalidConfig, "duplicate host id " + h.host_id);
  }
  std::set<std::string> tnames;
  for (const auto& t : templates) {
    if (t.memory_pages == 0)
      throw VmsError(Err::InvalidConfig, "template memory_pages must be positive");
    if (t.expected_touch_fraction < 0.0 || t.expected_touch_fraction > 1.0)
      throw VmsError(Err::InvalidConfig, "expected_touch_fraction outside [0,1]");
    if (!tnames.insert(t.name).second)
      throw VmsError(Err::InvalidConfig, "duplicate template " + t.name);
    WorkloadProgram check(t.workload, t.memory_pages);  // validates
    (void)check;
  }
  if (params.low_watermark >= params.high_watermark || params.high_watermark > 1.0)
    throw VmsError(Err::InvalidConfig, "watermarks must satisfy low < high <= 1");
  if (params.migrate_max_rounds < 1)
    throw VmsError(Err::InvalidConfig, "migrate_max_rounds must be >= 1");
  if (params.batch_pages == 0 || params.background_batch_pages == 0)
    throw VmsError(Err::InvalidConfig, "batch sizes must be positive");

  double prev = 0.0;
  for (const auto& e : script) {
    if (e.at_s < prev)
      throw VmsError(Err::InvalidConfig, "script times must be non-decreasing");
    prev = e.at_s;
    std::visit(
        [&](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, CmdBootVm>) {
            tmpl(c.tmpl);
            if (c.workload_template) tmpl(*c.workload_template);
            if (host_index(c.host) < 0)
              throw VmsError(Err::InvalidConfig, "unknown host " + c.host);
            if (c.vm.empty()) throw VmsError(Err::InvalidConfig, "boot_vm needs a vm id");
          } else if constexpr (std::is_same_v<T, CmdCloneVm>) {
            if (c.count == 0) throw VmsError(Err::InvalidConfig, "clone count must be positive");
            if (c.hosts.empty()) throw VmsError(Err::InvalidConfig, "clone_vm needs hosts");
            for (const auto& h : c.hosts)
              if (host_index(h) < 0) throw VmsError(Err::InvalidConfig, "unknown host " + h);
            if (c.workload_template) tmpl(*c.workload_template);
          } else if constexpr (std::is_same_v<T, CmdMigrate>) {
            if (host_index(c.to_host) < 0)
              throw VmsError(Err::InvalidConfig, "unknown host " + c.to_host);
            if (c.mode != "precopy" && c.mode != "postcopy" && c.mode != "stopcopy")
              throw VmsError(Err::InvalidConfig, "unknown migration mode " + c.mode);
          } else if constexpr (std::is_same_v<T, CmdRunFor>) {
            if (c.seconds < 0) throw VmsError(Err::InvalidConfig, "run_for must be >= 0");
          }
        },
        e.cmd);
  }
}

namespace {

const char* kind_name(WorkloadSpec::Kind k) {
  switch (k) {
    case WorkloadSpec::Kind::Sequential: return "sequential";
    case WorkloadSpec::Kind::Uniform: return "uniform";
    case WorkloadSpec::Kind::Hotspot: return "hotspot";
    case WorkloadSpec::Kind::Phased: return "phased";
  }
  return "?";
}

WorkloadSpec::Kind kind_from_name(const std::string& s) {
  if (s == "sequential") return WorkloadSpec::Kind::Sequential;
  if (s == "uniform") return WorkloadSpec::Kind::Uniform;
  if (s == "hotspot") return WorkloadSpec::Kind::Hotspot;
  if (s == "phased") return WorkloadSpec::Kind::Phased;
  throw VmsError(Err::InvalidConfig, "unknown workload kind " + s);
}

ordered_json workload_to_json(const WorkloadSpec& w) {
  ordered_json j;
  j["kind"] = kind_name(w.kind);
  j["write_fraction"] = w.write_fraction;
  j["ops_per_second"] = w.ops_per_second;
  j["seed"] = w.seed;
  if (w.kind == WorkloadSpec::Kind::Hotspot) j["zipf_s"] = w.zipf_s;
  if (w.kind == WorkloadSpec::Kind::Phased) {
    ordered_json phases = ordered_json::array();
    for (const auto& p : w.phases) {
      ordered_json pj;
      pj["first_page"] = p.first_page;
      pj["last_page"] = p.last_page;
      pj["duration_s"] = p.duration_s;
      phases.push_back(pj);
    }
    j["phases"] = phases;
  }
  return j;
}

WorkloadSpec workload_from_json(const json& j) {
  WorkloadSpec w;
  w.kind = kind_from_name(j.at("kind").get<std::string>());
  w.write_fraction = j.value("write_fraction", 0.0);
  w.ops_per_second = j.value("ops_per_second", 1.0);
  w.seed = j.value("seed", 0ULL);
  w.zipf_s = j.value("zipf_s", 1.0);
  if (j.contains("phases")) {
    for (const auto& pj : j.at("phases")) {
      Phase p;
      p.first_page = pj.at("first_page").get<std::uint64_t>();
      p.last_page = pj.at("last_page").get<std::uint64_t>();
      p.duration_s = pj.at("duration_s").get<double>();
      w.phases.push_back(p);
    }
  }
  return w;
}

ordered_json template_to_json(const TemplateSpec& t) {
  ordered_json j;
  j["name"] = t.name;
  j["memory_pages"] = t.memory_pages;
  j["disk_bytes"] = t.disk_bytes;
  j["vcpu_bytes"] = t.vcpu_bytes;
  j["expected_touch_fraction"] = t.expected_touch_fraction;
  j["workload"] = workload_to_json(t.workload);
  return j;
}

}  // namespace

std::string Scenario::template_fingerprint() const {
  ordered_json arr = ordered_json::array();
  for (const auto& t : templates) arr.push_back(template_to_json(t));
  return arr.dump();
}

std::string Scenario::to_json_text() const {
  ordered_json j;
  j["format_version"] = 1;
  j["seed"] = seed;

  ordered_json p;
  p["boot_duration_s"] = params.boot_duration_s;
  p["link_latency_us"] = params.link_latency_us;
  p["store_nic_bits_per_s"] = params.store_nic_bits_per_s;
  p["ready_ops"] = params.ready_ops;
  p["prefetch_window"] = params.prefetch_window;
  p["background_bytes_per_s"] = params.background_bytes_per_s;
  p["enforce_period_s"] = params.enforce_period_s;
  p["high_watermark"] = params.high_watermark;
  p["low_watermark"] = params.low_watermark;
  p["clone_setup_us"] = params.clone_setup_us;
  p["migrate_max_rounds"] = params.migrate_max_rounds;
  p["migrate_stop_threshold_pages"] = params.migrate_stop_threshold_pages;
  p["migrate_drain_bytes_per_s"] = params.migrate_drain_bytes_per_s;
  p["batch_pages"] = params.batch_pages;
  p["background_batch_pages"] = params.background_batch_pages;
  p["pause_fixed_us"] = params.pause_fixed_us;
  p["pause_per_page_us"] = params.pause_per_page_us;
  j["parameters"] = p;

  ordered_json jh = ordered_json::array();
  for (const auto& h : hosts) {
    ordered_json e;
    e["host_id"] = h.host_id;
    e["ram_bytes"] = h.ram_bytes;
    e["nic_bits_per_s"] = h.nic_bits_per_s;
    e["cache_fraction"] = h.cache_fraction;
    e["cores"] = h.cores;
    jh.push_back(e);
  }
  j["hosts"] = jh;

  ordered_json jt = ordered_json::array();
  for (const auto& t : templates) jt.push_back(template_to_json(t));
  j["templates"] = jt;

  ordered_json js = ordered_json::array();
  for (const auto& e : script) {
    ordered_json c;
    c["at_s"] = e.at_s;
    std::visit(
        [&](const auto& cmd) {
          using T = std::decay_t<decltype(cmd)>;
          if constexpr (std::is_same_v<T, CmdBootVm>) {
            c["cmd"] = "boot_vm";
            c["vm"] = cmd.vm;
            c["template"] = cmd.tmpl;
            c["host"] = cmd.host;
            if (cmd.workload_template) c["workload_template"] = *cmd.workload_template;
          } else if constexpr (std::is_same_v<T, CmdCreateImage>) {
            c["cmd"] = "create_image";
            c["image"] = cmd.image;
            c["vm"] = cmd.vm;
          } else if constexpr (std::is_same_v<T, CmdCloneVm>) {
            c["cmd"] = "clone_vm";
            c["image"] = cmd.image;
            c["count"] = cmd.count;
            c["hosts"] = cmd.hosts;
            c["vm_prefix"] = cmd.vm_prefix;
            c["hostname_prefix"] = cmd.hostname_prefix;
            if (cmd.workload_template) c["workload_template"] = *cmd.workload_template;
          } else if constexpr (std::is_same_v<T, CmdMigrate>) {
            c["cmd"] = "migrate";
            c["vm"] = cmd.vm;
            c["to"] = cmd.to_host;
            c["mode"] = cmd.mode;
          } else if constexpr (std::is_same_v<T, CmdRunFor>) {
            c["cmd"] = "run_for";
            c["seconds"] = cmd.seconds;
          }
        },
        e.cmd);
    js.push_back(c);
  }
  j["script"] = js;
  return j.dump(2) + "\n";
}

Scenario Scenario::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw VmsError(Err::InvalidConfig, std::string("scenario parse error: ") + e.what());
  }
  try {
    if (j.value("format_version", 0) != 1)
      throw VmsError(Err::InvalidConfig, "unsupported scenario format_version");
    Scenario s;
    s.seed = j.value("seed", 0ULL);
    if (j.contains("parameters")) {
      const auto& p = j.at("parameters");
      auto& sp = s.params;
      sp.boot_duration_s = p.value("boot_duration_s", sp.boot_duration_s);
      sp.link_latency_us = p.value("link_latency_us", sp.link_latency_us);
      sp.store_nic_bits_per_s = p.value("store_nic_bits_per_s", sp.store_nic_bits_per_s);
      sp.ready_ops = p.value("ready_ops", sp.ready_ops);
      sp.prefetch_window = p.value("prefetch_window", sp.prefetch_window);
      sp.background_bytes_per_s = p.value("background_bytes_per_s", sp.background_bytes_per_s);
      sp.enforce_period_s = p.value("enforce_period_s", sp.enforce_period_s);
      sp.high_watermark = p.value("high_watermark", sp.high_watermark);
      sp.low_watermark = p.value("low_watermark", sp.low_watermark);
      sp.clone_setup_us = p.value("clone_setup_us", sp.clone_setup_us);
      sp.migrate_max_rounds = p.value("migrate_max_rounds", sp.migrate_max_rounds);
      sp.migrate_stop_threshold_pages =
          p.value("migrate_stop_threshold_pages", sp.migrate_stop_threshold_pages);
      sp.migrate_drain_bytes_per_s =
          p.value("migrate_drain_bytes_per_s", sp.migrate_drain_bytes_per_s);
      sp.batch_pages = p.value("batch_pages", sp.batch_pages);
      sp.background_batch_pages = p.value("background_batch_pages", sp.background_batch_pages);
      sp.pause_fixed_us = p.value("pause_fixed_us", sp.pause_fixed_us);
      sp.pause_per_page_us = p.value("pause_per_page_us", sp.pause_per_page_us);
    }
    if (j.contains("hosts")) {
      for (const auto& hj : j.at("hosts")) {
        HostSpec h;
        h.host_id = hj.at("host_id").get<std::string>();
        h.ram_bytes = hj.value("ram_bytes", h.ram_bytes);
        h.nic_bits_per_s = hj.value("nic_bits_per_s", h.nic_bits_per_s);
        h.cache_fraction = hj.value("cache_fraction", h.cache_fraction);
        h.cores = hj.value("cores", h.cores);
        s.hosts.push_back(h);
      }
    } else {
      s.hosts = default_hosts();
    }
    for (const auto& tj : j.value("templates", json::array())) {
      TemplateSpec t;
      t.name = tj.at("name").get<std::string>();
      t.memory_pages = tj.value("memory_pages", t.memory_pages);
      t.disk_bytes = tj.value("disk_bytes", t.disk_bytes);
      t.vcpu_bytes = tj.value("vcpu_bytes", t.vcpu_bytes);
      t.expected_touch_fraction =
          tj.value("expected_touch_fraction", t.expected_touch_fraction);
      if (tj.contains("workload")) t.workload = workload_from_json(tj.at("workload"));
      s.templates.push_back(t);
    }
    for (const auto& cj : j.value("script", json::array())) {
      ScriptEntry e;
      e.at_s = cj.at("at_s").get<double>();
      std::string cmd = cj.at("cmd").get<std::string>();
      if (cmd == "boot_vm") {
        CmdBootVm c;
        c.vm = cj.at("vm").get<std::string>();
        c.tmpl = cj.at("template").get<std::string>();
        c.host = cj.at("host").get<std::string>();
        if (cj.contains("workload_template"))
          c.workload_template = cj.at("workload_template").get<std::string>();
        e.cmd = c;
      } else if (cmd == "create_image") {
        CmdCreateImage c;
        c.image = cj.at("image").get<std::string>();
        c.vm = cj.at("vm").get<std::string>();
        e.cmd = c;
      } else if (cmd == "clone_vm") {
        CmdCloneVm c;
        c.image = cj.at("image").get<std::string>();
        c.count = cj.value("count", 1ULL);
        if (cj.contains("hosts"))
          c.hosts = cj.at("hosts").get<std::vector<std::string>>();
        else if (cj.contains("host"))
          c.hosts = {cj.at("host").get<std::string>()};
        c.vm_prefix = cj.value("vm_prefix", std::string("c"));
        c.hostname_prefix = cj.value("hostname_prefix", std::string("c"));
        if (cj.contains("workload_template"))
          c.workload_template = cj.at("workload_template").get<std::string>();
        e.cmd = c;
      } else if (cmd == "migrate") {
        CmdMigrate c;
        c.vm = cj.at("vm").get<std::string>();
        c.to_host = cj.at("to").get<std::string>();
        c.mode = cj.at("mode").get<std::string>();
        e.cmd = c;
      } else if (cmd == "run_for") {
        CmdRunFor c;
        c.seconds = cj.at("seconds").get<double>();
        e.cmd = c;
      } else {
        throw VmsError(Err::InvalidConfig, "unknown command " + cmd);
      }
      s.script.push_back(e);
    }
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw VmsError(Err::InvalidConfig, std::string("scenario field error: ") + e.what());
  }
}

Scenario Scenario::load_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VmsError(Err::InvalidConfig, "cannot open scenario " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

}  // namespace vms
