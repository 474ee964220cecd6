#include "vms/sha256.hpp"

#include <atomic>
#include <cstring>

#if defined(__x86_64__)
#include <cpuid.h>
#endif

namespace vms {
namespace {

constexpr std::uint32_t kK[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

inline std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }
inline std::uint32_t load_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}
inline void store_be32(std::uint8_t* p, std::uint32_t v) {
  p[0] = std::uint8_t(v >> 24);
  p[1] = std::uint8_t(v >> 16);
  p[2] = std::uint8_t(v >> 8);
  p[3] = std::uint8_t(v);
}

void compress_portable(std::uint32_t state[8], const std::uint8_t* block, std::size_t nblocks) {
  while (nblocks--) {
    std::uint32_t w[64];
    for (int i = 0; i < 16; i++) w[i] = load_be32(block + 4 * i);
    for (int i = 16; i < 64; i++) {
      std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = state[0], b = state[1], c = state[2], d = state[3];
    std::uint32_t e = state[4], f = state[5], g = state[6], h = state[7];
    for (int i = 0; i < 64; i++) {
      std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      std::uint32_t ch = (e & f) ^ (~e & g);
      std::uint32_t t1 = h + s1 + ch + kK[i] + w[i];
      std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      std::uint32_t t2 = s0 + maj;
      h = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    state[0] += a;
    state[1] += b;
    state[2] += c;
    state[3] += d;
    state[4] += e;
    state[5] += f;
    state[6] += g;
    state[7] += h;
    block += 64;
  }
}

std::atomic<bool> g_force_portable{false};

#if defined(__x86_64__)
bool detect_sha_ni() {
  unsigned eax, ebx, ecx, edx;
  if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
  return (ebx & (1u << 29)) != 0;  // SHA extensions
}
const bool g_has_sha_ni = detect_sha_ni();
#else
const bool g_has_sha_ni = false;
#endif

}  // namespace

#if defined(__x86_64__)
namespace detail {
// Implemented in sha256_ni.cpp, compiled with -msha.
void sha256_compress_ni(std::uint32_t state[8], const std::uint8_t* block, std::size_t nblocks);
}
#endif

namespace {
void compress_dispatch(std::uint32_t state[8], const std::uint8_t* block, std::size_t n) {
#if defined(__x86_64__)
  if (g_has_sha_ni && !g_force_portable.load(std::memory_order_relaxed)) {
    detail::sha256_compress_ni(state, block, n);
    return;
  }
#endif
  compress_portable(state, block, n);
}
}  // namespace

void sha256_force_portable(bool on) { g_force_portable.store(on, std::memory_order_relaxed); }
bool sha256_using_hw() { return g_has_sha_ni && !g_force_portable.load(std::memory_order_relaxed); }

Sha256Digest sha256(const std::uint8_t* data, std::size_t len) {
  std::uint32_t state[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                            0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  std::size_t full = len / 64;
  compress_dispatch(state, data, full);

  std::uint8_t tail[128];
  std::size_t rem = len - full * 64;
  std::memcpy(tail, data + full * 64, rem);
  tail[rem] = 0x80;
  std::size_t tail_len = (rem + 9 <= 64) ? 64 : 128;
  std::memset(tail + rem + 1, 0, tail_len - rem - 9);
  std::uint64_t bits = static_cast<std::uint64_t>(len) * 8;
  for (int i = 0; i < 8; i++) tail[tail_len - 1 - i] = std::uint8_t(bits >> (8 * i));
  compress_dispatch(state, tail, tail_len / 64);

  Sha256Digest out;
  for (int i = 0; i < 8; i++) store_be32(out.data() + 4 * i, state[i]);
  return out;
}

}  // namespace vms
