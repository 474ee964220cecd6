// Live-mode page service: a concurrent image server on a local stream socket.
//
// The server owns a thread-safe registry of published images and always
// includes page content in replies (the hash-only shortcut needs the
// requester's cache view, which a remote server does not track). Requests are
// idempotent and connections are independent, so replies may be produced in
// any order across clones; each client serializes its own installs.
#ifndef VMS_LIVE_SERVER_HPP
#define VMS_LIVE_SERVER_HPP

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "vms/image.hpp"
#include "vms/wire.hpp"

namespace vms {

class LivePageServer {
 public:
  explicit LivePageServer(std::string socket_path);
  ~LivePageServer();

  LivePageServer(const LivePageServer&) = delete;
  LivePageServer& operator=(const LivePageServer&) = delete;

  // Registers an image; referenced contents are copied out of `store`.
  void publish(const LiveImageManifest& manifest, const PageStore& store);

  const std::string& socket_path() const { return path_; }
  std::uint64_t requests_served() const { return served_.load(); }

  PageReply serve(const PageRequest& req) const;

 private:
  void accept_loop();
  void handle_connection(int fd);

  std::string path_;
  int listen_fd_ = -1;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  mutable std::atomic<std::uint64_t> served_{0};
  mutable std::mutex mu_;
  struct Entry {
    LiveImageManifest manifest;
    std::unordered_map<ContentHash, PageContent, ContentHashHasher> contents;
  };
  std::unordered_map<std::string, std::shared_ptr<Entry>> images_;
  std::vector<std::thread> workers_;
  std::set<int> active_fds_;
  std::mutex workers_mu_;
};

// Blocking client: one request/reply exchange at a time per client.
class LivePageClient {
 public:
  explicit LivePageClient(std::string socket_path);
  ~LivePageClient();

  LivePageClient(const LivePageClient&) = delete;
  LivePageClient& operator=(const LivePageClient&) = delete;

  PageReply fetch(const PageRequest& req);

 private:
  void connect_once();
  std::string path_;
  int fd_ = -1;
  std::mutex mu_;
};

// Frame helpers shared by server and client.
bool read_exact(int fd, std::uint8_t* buf, std::size_t n);
bool write_all(int fd, const std::uint8_t* buf, std::size_t n);

}  // namespace vms

#endif
