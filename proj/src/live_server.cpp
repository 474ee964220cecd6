#include "vms/live_server.hpp"

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstring>

namespace vms {

bool read_exact(int fd, std::uint8_t* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::read(fd, buf + got, n - got);
    if (r <= 0) return false;
    got += static_cast<std::size_t>(r);
  }
  return true;
}

bool write_all(int fd, const std::uint8_t* buf, std::size_t n) {
  std::size_t sent = 0;
  while (sent < n) {
    ssize_t r = ::write(fd, buf + sent, n - sent);
    if (r <= 0) return false;
    sent += static_cast<std::size_t>(r);
  }
  return true;
}

namespace {

bool read_frame(int fd, std::vector<std::uint8_t>& frame) {
  std::uint8_t head[4];
  if (!read_exact(fd, head, 4)) return false;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; i++) len |= static_cast<std::uint32_t>(head[i]) << (8 * i);
  if (len == 0 || len > (64u << 20)) return false;
  frame.resize(4 + len);
  std::memcpy(frame.data(), head, 4);
  return read_exact(fd, frame.data() + 4, len);
}

}  // namespace

LivePageServer::LivePageServer(std::string socket_path) : path_(std::move(socket_path)) {
  if (path_.size() >= sizeof(sockaddr_un{}.sun_path))
    throw VmsError(Err::InvalidConfig, "socket path too long: " + path_);
  ::unlink(path_.c_str());
  listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw VmsError(Err::StreamUnavailable, "socket() failed");
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path_.c_str(), sizeof(addr.sun_path) - 1);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listen_fd_);
    throw VmsError(Err::StreamUnavailable, "bind() failed for " + path_);
  }
  if (::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw VmsError(Err::StreamUnavailable, "listen() failed");
  }
  acceptor_ = std::thread([this]() { accept_loop(); });
}

LivePageServer::~LivePageServer() {
  stopping_.store(true);
  // accept() does not wake on close(); poke it with a throwaway connection.
  int wake = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (wake >= 0) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, path_.c_str(), sizeof(addr.sun_path) - 1);
    ::connect(wake, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
    ::close(wake);
  }
  if (acceptor_.joinable()) acceptor_.join();
  ::close(listen_fd_);
  std::vector<std::thread> workers;
  {
    // Unblock workers parked in read() on live client connections, then
    // join them without holding the mutex they need for fd bookkeeping.
    std::lock_guard<std::mutex> lk(workers_mu_);
    for (int fd : active_fds_) ::shutdown(fd, SHUT_RDWR);
    workers = std::move(workers_);
  }
  for (auto& w : workers)
    if (w.joinable()) w.join();
  ::unlink(path_.c_str());
}

void LivePageServer::publish(const LiveImageManifest& manifest, const PageStore& store) {
  auto entry = std::make_shared<Entry>();
  entry->manifest = manifest;
  for (const auto& [page, h] : manifest.memory_map)
    entry->contents.emplace(h, store.get(h));
  std::lock_guard<std::mutex> lk(mu_);
  images_["img:" + manifest.image_id] = std::move(entry);
}

PageReply LivePageServer::serve(const PageRequest& req) const {
  std::shared_ptr<Entry> entry;
  {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = images_.find(req.image_id);
    if (it == images_.end())
      throw VmsError(Err::CorruptImage, "unknown image " + req.image_id);
    entry = it->second;
  }
  for (const auto& r : req.pages)
    if (r.end < r.start)
      throw VmsError(Err::ProtocolError, "malformed range: end precedes start");
  PageReply reply;
  reply.image_id = req.image_id;
  for (const auto& r : req.pages) {
    for (PageNumber p = r.start; p <= r.end; p++) {
      auto h = entry->manifest.memory_hash(p);
      if (!h)
        throw VmsError(Err::ProtocolError, "page " + std::to_string(p) + " beyond image");
      PageReplyEntry e;
      e.page = p;
      e.hash = *h;
      if (!h->is_zero()) {
        auto cit = entry->contents.find(*h);
        if (cit == entry->contents.end())
          throw VmsError(Err::CorruptImage, "image content missing for " + h->hex());
        e.content = cit->second;
      }
      reply.entries.push_back(std::move(e));
    }
  }
  served_.fetch_add(1);
  return reply;
}

void LivePageServer::accept_loop() {
  for (;;) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (stopping_.load()) {
      if (fd >= 0) ::close(fd);
      return;
    }
    if (fd < 0) continue;
    std::lock_guard<std::mutex> lk(workers_mu_);
    active_fds_.insert(fd);
    workers_.emplace_back([this, fd]() { handle_connection(fd); });
  }
}

void LivePageServer::handle_connection(int fd) {
  std::vector<std::uint8_t> frame;
  while (!stopping_.load() && read_frame(fd, frame)) {
    std::vector<std::uint8_t> out;
    try {
      WireMessage msg = decode_frame(frame);
      const auto* req = std::get_if<PageRequest>(&msg);
      if (!req) break;  // only page requests are served here
      PageReply reply = serve(*req);
      out = encode_frame(WireMessage{std::move(reply)});
    } catch (const VmsError&) {
      break;  // malformed or unknown: drop the connection
    }
    if (!write_all(fd, out.data(), out.size())) break;
  }
  {
    std::lock_guard<std::mutex> lk(workers_mu_);
    active_fds_.erase(fd);
  }
  ::close(fd);
}

LivePageClient::LivePageClient(std::string socket_path) : path_(std::move(socket_path)) {
  connect_once();
}

LivePageClient::~LivePageClient() {
  if (fd_ >= 0) ::close(fd_);
}

void LivePageClient::connect_once() {
  fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd_ < 0) throw VmsError(Err::StreamUnavailable, "socket() failed");
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path_.c_str(), sizeof(addr.sun_path) - 1);
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw VmsError(Err::StreamUnavailable, "cannot connect to page server at " + path_);
  }
}

PageReply LivePageClient::fetch(const PageRequest& req) {
  std::lock_guard<std::mutex> lk(mu_);
  auto frame = encode_frame(WireMessage{req});
  if (!write_all(fd_, frame.data(), frame.size()))
    throw VmsError(Err::StreamUnavailable, "page server write failed");
  std::vector<std::uint8_t> in;
  if (!read_frame(fd_, in))
    throw VmsError(Err::StreamUnavailable, "page server read failed");
  WireMessage msg = decode_frame(in);
  auto* reply = std::get_if<PageReply>(&msg);
  if (!reply) throw VmsError(Err::ProtocolError, "unexpected reply type");
  return std::move(*reply);
}

}  // namespace vms
