#include "vms/wire.hpp"

#include <cstring>

namespace vms {

namespace {

constexpr std::uint8_t kTypePageRequest = 1;
constexpr std::uint8_t kTypePageReply = 2;
constexpr std::uint8_t kTypeVcpuTransfer = 3;
constexpr std::uint8_t kTypeDirtyBitmap = 4;
constexpr std::uint8_t kTypeMigrateCommit = 5;

void encode_body(std::vector<std::uint8_t>& out, const PageRequest& m) {
  put_str(out, m.image_id);
  put_u64(out, m.pages.size());
  for (const auto& r : m.pages) {
    put_u64(out, r.start);
    put_u64(out, r.end);
  }
}

void encode_body(std::vector<std::uint8_t>& out, const PageReply& m) {
  put_str(out, m.image_id);
  put_u64(out, m.entries.size());
  std::array<std::uint8_t, kPageSize> buf;
  for (const auto& e : m.entries) {
    put_u64(out, e.page);
    put_bytes(out, e.hash.digest);
    put_u8(out, e.content ? 1 : 0);
    if (e.content) {
      e.content->copy_to(buf.data());
      put_bytes(out, buf);
    }
  }
}

void encode_body(std::vector<std::uint8_t>& out, const VcpuTransfer& m) {
  put_str(out, m.vm_id);
  put_u64(out, m.vcpu_state.size());
  put_bytes(out, m.vcpu_state);
}

void encode_body(std::vector<std::uint8_t>& out, const DirtyBitmap& m) {
  put_str(out, m.vm_id);
  put_u64(out, m.bit_count);
  put_u64(out, m.bits.size());
  put_bytes(out, m.bits);
}

void encode_body(std::vector<std::uint8_t>& out, const MigrateCommit& m) {
  put_str(out, m.vm_id);
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const WireMessage& msg) {
  std::vector<std::uint8_t> body;
  std::uint8_t type = 0;
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, PageRequest>) type = kTypePageRequest;
        else if constexpr (std::is_same_v<T, PageReply>) type = kTypePageReply;
        else if constexpr (std::is_same_v<T, VcpuTransfer>) type = kTypeVcpuTransfer;
        else if constexpr (std::is_same_v<T, DirtyBitmap>) type = kTypeDirtyBitmap;
        else type = kTypeMigrateCommit;
        encode_body(body, m);
      },
      msg);
  std::vector<std::uint8_t> frame;
  frame.reserve(5 + body.size());
  put_u32(frame, static_cast<std::uint32_t>(body.size() + 1));
  put_u8(frame, type);
  put_bytes(frame, body);
  return frame;
}

std::uint64_t frame_size(const WireMessage& msg) {
  std::uint64_t body = 0;
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, PageRequest>) {
          body = 8 + m.image_id.size() + 8 + 16 * m.pages.size();
        } else if constexpr (std::is_same_v<T, PageReply>) {
          body = 8 + m.image_id.size() + 8;
          for (const auto& e : m.entries) body += 8 + 32 + 1 + (e.content ? kPageSize : 0);
        } else if constexpr (std::is_same_v<T, VcpuTransfer>) {
          body = 8 + m.vm_id.size() + 8 + m.vcpu_state.size();
        } else if constexpr (std::is_same_v<T, DirtyBitmap>) {
          body = 8 + m.vm_id.size() + 8 + 8 + m.bits.size();
        } else {
          body = 8 + m.vm_id.size();
        }
      },
      msg);
  return 5 + body;
}

WireMessage decode_frame(std::span<const std::uint8_t> frame) {
  ByteReader r(frame);
  std::uint32_t len = r.u32();
  if (len != frame.size() - 4)
    throw VmsError(Err::ProtocolError, "frame length mismatch");
  if (len < 1) throw VmsError(Err::ProtocolError, "empty frame");
  std::uint8_t type = r.u8();
  switch (type) {
    case kTypePageRequest: {
      PageRequest m;
      m.image_id = r.str();
      std::uint64_t n = r.u64();
      m.pages.reserve(static_cast<std::size_t>(n));
      for (std::uint64_t i = 0; i < n; i++) {
        PageRange pr;
        pr.start = r.u64();
        pr.end = r.u64();
        m.pages.push_back(pr);
      }
      if (r.remaining()) throw VmsError(Err::ProtocolError, "trailing bytes");
      return m;
    }
    case kTypePageReply: {
      PageReply m;
      m.image_id = r.str();
      std::uint64_t n = r.u64();
      m.entries.reserve(static_cast<std::size_t>(n));
      for (std::uint64_t i = 0; i < n; i++) {
        PageReplyEntry e;
        e.page = r.u64();
        auto h = r.bytes(32);
        std::copy(h.begin(), h.end(), e.hash.digest.begin());
        if (r.u8()) e.content = PageContent::literal(r.bytes(kPageSize));
        m.entries.push_back(std::move(e));
      }
      if (r.remaining()) throw VmsError(Err::ProtocolError, "trailing bytes");
      return m;
    }
    case kTypeVcpuTransfer: {
      VcpuTransfer m;
      m.vm_id = r.str();
      std::uint64_t n = r.u64();
      auto b = r.bytes(static_cast<std::size_t>(n));
      m.vcpu_state.assign(b.begin(), b.end());
      if (r.remaining()) throw VmsError(Err::ProtocolError, "trailing bytes");
      return m;
    }
    case kTypeDirtyBitmap: {
      DirtyBitmap m;
      m.vm_id = r.str();
      m.bit_count = r.u64();
      std::uint64_t n = r.u64();
      if (n != (m.bit_count + 7) / 8)
        throw VmsError(Err::ProtocolError, "bitset byte length inconsistent");
      auto b = r.bytes(static_cast<std::size_t>(n));
      m.bits.assign(b.begin(), b.end());
      if (r.remaining()) throw VmsError(Err::ProtocolError, "trailing bytes");
      return m;
    }
    case kTypeMigrateCommit: {
      MigrateCommit m;
      m.vm_id = r.str();
      if (r.remaining()) throw VmsError(Err::ProtocolError, "trailing bytes");
      return m;
    }
    default:
      throw VmsError(Err::ProtocolError, "unknown message type " + std::to_string(type));
  }
}

const char* message_type_name(const WireMessage& msg) {
  return std::visit(
      [](const auto& m) -> const char* {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, PageRequest>) return "page_request";
        else if constexpr (std::is_same_v<T, PageReply>) return "page_reply";
        else if constexpr (std::is_same_v<T, VcpuTransfer>) return "vcpu_transfer";
        else if constexpr (std::is_same_v<T, DirtyBitmap>) return "dirty_bitmap";
        else return "migrate_commit";
      },
      msg);
}

}  // namespace vms
