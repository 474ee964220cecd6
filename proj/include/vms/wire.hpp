// Streaming/migration wire protocol.
//
// Framing: [u32 LE length of what follows][u8 message type][canonical body].
// Types: 1=PageRequest 2=PageReply 3=VcpuTransfer 4=DirtyBitmap
// 5=MigrateCommit. Integers are 8-byte little-endian, strings are
// length-prefixed UTF-8, ranges are inclusive (start,end) pairs, bitsets are
// length-prefixed (bit count, then packed bytes LSB-first).
#ifndef VMS_WIRE_HPP
#define VMS_WIRE_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vms/page.hpp"

namespace vms {

struct PageRange {
  PageNumber start = 0;
  PageNumber end = 0;  // inclusive
};

struct PageRequest {
  std::string image_id;  // source key: live image or a migration residual
  std::vector<PageRange> pages;
};

struct PageReplyEntry {
  PageNumber page = 0;
  ContentHash hash;
  std::optional<PageContent> content;  // omitted when the requester holds the hash
};

struct PageReply {
  std::string image_id;
  std::vector<PageReplyEntry> entries;
};

struct VcpuTransfer {
  std::string vm_id;
  std::vector<std::uint8_t> vcpu_state;
};

struct DirtyBitmap {
  std::string vm_id;
  std::uint64_t bit_count = 0;
  std::vector<std::uint8_t> bits;  // packed LSB-first

  void resize_bits(std::uint64_t n) {
    bit_count = n;
    bits.assign((n + 7) / 8, 0);
  }
  void set_bit(std::uint64_t i) { bits[i / 8] |= std::uint8_t(1u << (i % 8)); }
  bool bit(std::uint64_t i) const { return (bits[i / 8] >> (i % 8)) & 1; }
};

struct MigrateCommit {
  std::string vm_id;
};

using WireMessage = std::variant<PageRequest, PageReply, VcpuTransfer, DirtyBitmap, MigrateCommit>;

// Full frame (length prefix included).
std::vector<std::uint8_t> encode_frame(const WireMessage& msg);
// Exact size encode_frame would produce, without materializing contents.
std::uint64_t frame_size(const WireMessage& msg);
// Decodes one full frame; throws ProtocolError on malformed input.
WireMessage decode_frame(std::span<const std::uint8_t> frame);

const char* message_type_name(const WireMessage& msg);

}  // namespace vms

#endif
