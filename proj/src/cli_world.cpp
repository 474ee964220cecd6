#include "vms/cli_world.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace vms {

namespace {

constexpr char kSpaceMagic[8] = {'V', 'M', 'S', 'S', 'P', 'C', '0', '1'};

Scenario default_world_scenario() {
  Scenario s;
  s.hosts = default_hosts(4);

  TemplateSpec def;
  def.name = "default";
  def.memory_pages = 262144;  // 1 GiB
  def.disk_bytes = 20ULL << 30;
  def.expected_touch_fraction = 0.25;
  def.workload.kind = WorkloadSpec::Kind::Sequential;
  def.workload.ops_per_second = 50.0;
  def.workload.write_fraction = 0.2;
  s.templates.push_back(def);

  TemplateSpec tiny;
  tiny.name = "tiny";
  tiny.memory_pages = 4096;  // 16 MiB, for quick local workflows
  tiny.disk_bytes = 64ULL << 20;
  tiny.expected_touch_fraction = 0.25;
  tiny.workload.kind = WorkloadSpec::Kind::Sequential;
  tiny.workload.ops_per_second = 200.0;
  tiny.workload.write_fraction = 0.5;
  s.templates.push_back(tiny);
  return s;
}

std::string atomic_write(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw VmsError(Err::StoreError, "cannot open " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw VmsError(Err::StoreError, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
  return p.string();
}

std::string human_us(TimeUs us) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3fs", static_cast<double>(us) / 1e6);
  return buf;
}

}  // namespace

void write_vm_state(const ClusterSim::VmState& st, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kSpaceMagic, kSpaceMagic + 8);
  put_str(out, st.vm_id);
  put_str(out, st.kind);
  put_str(out, st.host);
  put_str(out, st.template_name);
  put_str(out, st.backing_image);
  put_str(out, st.identity.hostname);
  put_str(out, st.identity.net_id);
  put_u64(out, st.vcpu_state.size());
  put_bytes(out, st.vcpu_state);
  put_u64(out, st.page_count);
  put_u64(out, st.next_op);
  put_u64(out, st.ops_completed);
  put_u64(out, st.booted_at_us);
  put_u8(out, st.failed ? 1 : 0);
  put_u64(out, st.shared_pages.size());
  for (const auto& [p, h] : st.shared_pages) {
    put_u64(out, p);
    put_bytes(out, h.digest);
  }
  put_u64(out, st.remote_pages.size());
  for (auto p : st.remote_pages) put_u64(out, p);
  put_u64(out, st.private_pages.size());
  std::array<std::uint8_t, kPageSize> buf;
  for (const auto& [p, c] : st.private_pages) {
    put_u64(out, p);
    c.copy_to(buf.data());
    put_bytes(out, buf);
  }
  atomic_write(path, std::string(out.begin(), out.end()));
}

ClusterSim::VmState read_vm_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VmsError(Err::StoreError, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::memcmp(data.data(), kSpaceMagic, 8) != 0)
    throw VmsError(Err::StoreError, "bad vm state file " + path.string());
  ByteReader r(std::span<const std::uint8_t>(data).subspan(8));
  ClusterSim::VmState st;
  st.vm_id = r.str();
  st.kind = r.str();
  st.host = r.str();
  st.template_name = r.str();
  st.backing_image = r.str();
  st.identity.hostname = r.str();
  st.identity.net_id = r.str();
  std::uint64_t vlen = r.u64();
  auto vb = r.bytes(static_cast<std::size_t>(vlen));
  st.vcpu_state.assign(vb.begin(), vb.end());
  st.page_count = r.u64();
  st.next_op = r.u64();
  st.ops_completed = r.u64();
  st.booted_at_us = r.u64();
  st.failed = r.u8() != 0;
  std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; i++) {
    PageNumber p = r.u64();
    ContentHash h;
    auto b = r.bytes(32);
    std::copy(b.begin(), b.end(), h.digest.begin());
    st.shared_pages.emplace_back(p, h);
  }
  n = r.u64();
  for (std::uint64_t i = 0; i < n; i++) st.remote_pages.push_back(r.u64());
  n = r.u64();
  for (std::uint64_t i = 0; i < n; i++) {
    PageNumber p = r.u64();
    st.private_pages.emplace_back(p, PageContent::literal(r.bytes(kPageSize)));
  }
  return st;
}

CliWorld::CliWorld(std::filesystem::path store_dir) : dir_(std::move(store_dir)) {
  std::filesystem::create_directories(dir_ / "spaces");
  load_or_init();
  build_sim();
}

std::filesystem::path CliWorld::space_path(const std::string& vm_id) const {
  return dir_ / "spaces" / (vm_id + ".space");
}

void CliWorld::load_or_init() {
  auto world_file = dir_ / "world.json";
  if (!std::filesystem::exists(world_file)) {
    base_ = default_world_scenario();
    now_us_ = 0;
    vm_counter_ = 0;
    return;
  }
  std::ifstream in(world_file, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw VmsError(Err::StoreError, std::string("corrupt world.json: ") + e.what());
  }
  if (j.value("format_version", 0) != 1)
    throw VmsError(Err::StoreError, "unsupported world.json format_version");
  base_ = Scenario::from_json_text(j.at("scenario").dump());
  now_us_ = j.value("now_us", 0ULL);
  vm_counter_ = j.value("vm_counter", 0ULL);
  warmup_s_ = j.value("warmup_s", 3.0);
  for (const auto& e : j.value("images", nlohmann::json::array()))
    images_.emplace_back(e.at("image_id").get<std::string>(),
                         e.at("path").get<std::string>(),
                         e.at("source_template").get<std::string>());
  for (const auto& e : j.value("vms", nlohmann::json::array()))
    vm_ids_.push_back(e.get<std::string>());
}

void CliWorld::build_sim() {
  sim_ = std::make_unique<ClusterSim>(base_);
  sim_->set_horizon(now_us_);
  sim_->advance_to(now_us_);
  for (const auto& [id, path, tmpl] : images_) {
    LiveImageManifest m = read_image(path, sim_->shared_store());
    if (m.image_id != id)
      throw VmsError(Err::CorruptImage, "image file " + path + " no longer matches " + id);
    sim_->register_image(m, tmpl);
  }
  for (const auto& vm_id : vm_ids_)
    sim_->adopt_vm(read_vm_state(space_path(vm_id)));
}

void CliWorld::save() {
  now_us_ = sim_->now();
  vm_ids_ = sim_->vm_ids_sorted();
  for (const auto& id : vm_ids_) write_vm_state(sim_->export_vm(id), space_path(id));

  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["now_us"] = now_us_;
  j["vm_counter"] = vm_counter_;
  j["warmup_s"] = warmup_s_;
  j["scenario"] = nlohmann::ordered_json::parse(base_.to_json_text());
  nlohmann::ordered_json imgs = nlohmann::ordered_json::array();
  for (const auto& [id, path, tmpl] : images_) {
    nlohmann::ordered_json e;
    e["image_id"] = id;
    e["path"] = path;
    e["source_template"] = tmpl;
    imgs.push_back(e);
  }
  j["images"] = imgs;
  j["vms"] = vm_ids_;
  atomic_write(dir_ / "world.json", j.dump(2) + "\n");
}

std::string CliWorld::fresh_vm_id() { return "vm" + std::to_string(vm_counter_++); }

std::string CliWorld::boot(const std::optional<std::string>& vm_id, const std::string& tmpl,
                           const std::string& host) {
  std::string id = vm_id ? *vm_id : fresh_vm_id();
  const TemplateSpec& t = base_.tmpl(tmpl);  // InvalidConfig on unknown template
  CmdBootVm c;
  c.vm = id;
  c.tmpl = tmpl;
  c.host = host;
  // Horizon covers the transfer, the boot, and a short warmup of the workload.
  std::uint64_t bw = std::min(base_.params.store_nic_bits_per_s,
                              base_.hosts[0].nic_bits_per_s);
  TimeUs transfer = static_cast<TimeUs>(
      (static_cast<unsigned __int128>(t.disk_bytes) * 8 * 1'050'000 + bw - 1) / bw);
  sim_->set_horizon(sim_->now() + transfer + us_from_s(base_.params.boot_duration_s) +
                    us_from_s(warmup_s_) + 1'000'000);
  sim_->cmd_boot(c);
  sim_->drain();
  if (!sim_->vm_exists(id))
    throw VmsError(Err::PlacementError, "host " + host + " rejected " + id);
  save();
  const auto& sum = sim_->metrics().vm(id);
  std::string out = "vm " + id + " template=" + tmpl + " host=" + host +
                    " status=running";
  if (sum.ready) out += " startup=" + human_us(sum.ready_at_us - sum.command_at_us);
  out += "\n";
  return out;
}

std::string CliWorld::image_create(const std::string& vm_id,
                                   const std::filesystem::path& out) {
  if (!sim_->vm_exists(vm_id)) throw VmsError(Err::UnknownVm, vm_id);
  std::string image_id = out.stem().string();
  for (const auto& [id, path, tmpl] : images_)
    if (id == image_id)
      throw VmsError(Err::InvalidConfig, "image id " + image_id + " already exists");
  CmdCreateImage c;
  c.image = image_id;
  c.vm = vm_id;
  sim_->set_horizon(sim_->now());
  sim_->cmd_create_image(c);
  sim_->drain();
  const LiveImageManifest& man = sim_->image(image_id);
  write_image(sim_->shared_store(), man, out);
  std::string tmpl = sim_->export_vm(vm_id).template_name;
  images_.emplace_back(image_id, std::filesystem::absolute(out).string(), tmpl);
  save();
  char line[256];
  std::snprintf(line, sizeof(line),
                "image %s vm=%s memory_pages=%llu mapped=%zu unique_bytes=%llu path=%s\n",
                image_id.c_str(), vm_id.c_str(),
                static_cast<unsigned long long>(man.memory_page_count),
                man.memory_map.size(),
                static_cast<unsigned long long>(image_unique_content_bytes(man)),
                out.string().c_str());
  return line;
}

std::string CliWorld::image_start(const std::filesystem::path& image_path,
                                  const std::string& host,
                                  const std::optional<std::string>& hostname,
                                  const std::optional<std::string>& net_id,
                                  const std::optional<std::string>& vm_id) {
  // Register the image in the world on first use.
  LiveImageManifest man = read_image_manifest(image_path);
  bool known = false;
  for (const auto& [id, path, tmpl] : images_)
    if (id == man.image_id) known = true;
  if (!known) {
    read_image(image_path, sim_->shared_store());
    sim_->register_image(man, base_.templates.front().name);
    images_.emplace_back(man.image_id, std::filesystem::absolute(image_path).string(),
                         base_.templates.front().name);
  }
  std::string id = vm_id ? *vm_id : fresh_vm_id();
  CmdCloneVm c;
  c.image = man.image_id;
  c.count = 1;
  c.hosts = {host};
  c.vm_prefix = id;
  c.hostname_prefix = hostname ? *hostname : id;
  c.net_id = net_id;
  c.exact_names = true;
  sim_->set_horizon(sim_->now() + us_from_s(warmup_s_) + 1'000'000);
  sim_->cmd_clone(c);
  sim_->drain();
  if (!sim_->vm_exists(id))
    throw VmsError(Err::PlacementError, "host " + host + " rejected clone " + id);
  save();
  const auto& vm = sim_->vm(id);
  const auto& sum = sim_->metrics().vm(id);
  std::string out = "vm " + id + " image=" + man.image_id + " host=" + host +
                    " hostname=" + vm.identity.hostname + " net_id=" + vm.identity.net_id +
                    " status=running";
  if (sum.ready) out += " startup=" + human_us(sum.ready_at_us - sum.command_at_us);
  out += " resident_bytes=" + std::to_string(vm.space.resident_bytes());
  out += "\n";
  return out;
}

std::string CliWorld::migrate(const std::string& vm_id, const std::string& to_host,
                              const std::string& mode) {
  CmdMigrate c;
  c.vm = vm_id;
  c.to_host = to_host;
  c.mode = mode;
  sim_->set_horizon(sim_->now());
  sim_->cmd_migrate(c);  // throws UnknownVm / UnknownHost / PlacementError
  sim_->drain();
  if (sim_->metrics().migrations().empty())
    throw VmsError(Err::MigrationAborted, "migration produced no report");
  const MigrationSummary& m = sim_->metrics().migrations().back();
  if (m.aborted) throw VmsError(Err::MigrationAborted, vm_id + " was lost in flight");
  save();
  char line[256];
  std::snprintf(line, sizeof(line),
                "migrated %s mode=%s %s->%s rounds=%llu bytes=%llu downtime=%s total=%s\n",
                m.vm_id.c_str(), m.mode.c_str(), m.src_host.c_str(), m.dst_host.c_str(),
                static_cast<unsigned long long>(m.rounds),
                static_cast<unsigned long long>(m.bytes_transferred),
                human_us(m.downtime_us).c_str(), human_us(m.total_us).c_str());
  return line;
}

std::string CliWorld::image_list(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw VmsError(Err::InvalidConfig, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".vms") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) {
    LiveImageManifest m = read_image_manifest(f);
    char line[512];
    std::snprintf(line, sizeof(line),
                  "%-20s created_at_us=%-12llu memory_pages=%-9llu disk_pages=%-9llu "
                  "hostname=%s\n",
                  m.image_id.c_str(), static_cast<unsigned long long>(m.created_at_us),
                  static_cast<unsigned long long>(m.memory_page_count),
                  static_cast<unsigned long long>(m.disk_page_count),
                  m.identity.hostname.c_str());
    out += line;
  }
  if (out.empty()) out = "(no live images in " + dir.string() + ")\n";
  return out;
}

}  // namespace vms
