#pragma once

// LZ4 block format (sequences of token / literals / 16-bit offset / match
// length) with a greedy hash-table match finder. Blocks produced here decode
// with any conforming LZ4 block decoder. `compress_bytes` additionally
// prepends the original length as a 64-bit little-endian field.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include "defer/bytes.hpp"

namespace defer::lz {

inline constexpr std::size_t kMinMatch = 4;
inline constexpr std::size_t kLastLiterals = 5;
inline constexpr std::size_t kMfLimit = 12;
inline constexpr std::size_t kMaxOffset = 65535;
inline constexpr unsigned kHashLog = 16;

namespace detail {

inline std::uint32_t read32(const std::uint8_t* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

inline std::uint32_t hash4(std::uint32_t v) {
  return (v * 2654435761u) >> (32 - kHashLog);
}

inline void put_length(Bytes& out, std::size_t len) {
  while (len >= 255) {
    out.push_back(255);
    len -= 255;
  }
  out.push_back(static_cast<std::uint8_t>(len));
}

inline void emit_sequence(Bytes& out, const std::uint8_t* literals,
                          std::size_t lit_len, std::size_t offset,
                          std::size_t match_len) {
  const std::size_t ml = match_len - kMinMatch;
  std::uint8_t token = static_cast<std::uint8_t>(std::min<std::size_t>(lit_len, 15) << 4);
  token |= static_cast<std::uint8_t>(std::min<std::size_t>(ml, 15));
  out.push_back(token);
  if (lit_len >= 15) put_length(out, lit_len - 15);
  out.insert(out.end(), literals, literals + lit_len);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(offset));
  if (ml >= 15) put_length(out, ml - 15);
}

inline void emit_last_literals(Bytes& out, const std::uint8_t* literals,
                               std::size_t lit_len) {
  out.push_back(static_cast<std::uint8_t>(std::min<std::size_t>(lit_len, 15) << 4));
  if (lit_len >= 15) put_length(out, lit_len - 15);
  out.insert(out.end(), literals, literals + lit_len);
}

}  // namespace detail

/// Worst-case block size for `n` input bytes.
inline constexpr std::size_t compress_bound(std::size_t n) {
  return n + n / 255 + 16;
}

inline Bytes compress_block(ByteView input) {
  using namespace detail;
  const std::size_t n = input.size();
  const std::uint8_t* in = input.data();
  Bytes out;
  out.reserve(compress_bound(n));
  if (n < kMfLimit + 1) {
    emit_last_literals(out, in, n);
    return out;
  }

  std::vector<std::int64_t> table(std::size_t{1} << kHashLog, -1);
  const std::size_t match_limit = n - kLastLiterals;
  const std::size_t mf_limit = n - kMfLimit;
  std::size_t anchor = 0;
  std::size_t ip = 0;
  std::size_t misses = 0;

  while (ip < mf_limit) {
    const std::uint32_t seq = read32(in + ip);
    const std::uint32_t h = hash4(seq);
    const std::int64_t ref = table[h];
    table[h] = static_cast<std::int64_t>(ip);
    if (ref < 0 || ip - std::size_t(ref) > kMaxOffset ||
        read32(in + ref) != seq) {
      ip += 1 + (misses++ >> 6);
      continue;
    }
    misses = 0;
    std::size_t m = std::size_t(ref);
    while (ip > anchor && m > 0 && in[ip - 1] == in[m - 1]) {
      --ip;
      --m;
    }
    std::size_t len = kMinMatch;
    while (ip + len < match_limit && in[m + len] == in[ip + len]) ++len;

    emit_sequence(out, in + anchor, ip - anchor, ip - m, len);
    ip += len;
    anchor = ip;
    if (ip >= 2 && ip - 2 < mf_limit) {
      table[hash4(read32(in + ip - 2))] = static_cast<std::int64_t>(ip - 2);
    }
  }
  emit_last_literals(out, in + anchor, n - anchor);
  return out;
}

/// Decodes one block whose decoded size must be exactly `original_size`.
inline Bytes decompress_block(ByteView block, std::size_t original_size) {
  Bytes out;
  out.reserve(original_size);
  std::size_t ip = 0;
  const std::size_t n = block.size();
  auto corrupt = [](const char* why) { fail(Errc::CorruptStream, why); };
  auto read_length = [&](std::size_t base) {
    std::size_t len = base;
    if (base == 15) {
      std::uint8_t b;
      do {
        if (ip >= n) corrupt("truncated length");
        b = block[ip++];
        len += b;
      } while (b == 255);
    }
    return len;
  };

  if (n == 0) corrupt("empty block");
  while (true) {
    if (ip >= n) corrupt("truncated token");
    const std::uint8_t token = block[ip++];
    const std::size_t lit = read_length(token >> 4);
    if (lit > n - ip) corrupt("literal run past end of block");
    if (out.size() + lit > original_size) corrupt("output exceeds declared size");
    out.insert(out.end(), block.begin() + ip, block.begin() + ip + lit);
    ip += lit;
    if (ip == n) break;  // last sequence carries literals only

    if (n - ip < 2) corrupt("truncated offset");
    const std::size_t offset = get_le<std::uint16_t>(block.data() + ip);
    ip += 2;
    if (offset == 0 || offset > out.size()) corrupt("match offset out of range");
    const std::size_t len = read_length(token & 15) + kMinMatch;
    if (out.size() + len > original_size) corrupt("output exceeds declared size");
    const std::size_t from = out.size() - offset;
    for (std::size_t i = 0; i < len; ++i) out.push_back(out[from + i]);
  }
  if (out.size() != original_size) corrupt("decoded size differs from declared size");
  return out;
}

inline Bytes compress_bytes(ByteView input) {
  Bytes out;
  put_le<std::uint64_t>(out, input.size());
  Bytes block = compress_block(input);
  out.insert(out.end(), block.begin(), block.end());
  return out;
}

inline Bytes decompress_bytes(ByteView input) {
  if (input.size() < 8) fail(Errc::CorruptStream, "missing length header");
  const std::uint64_t original = get_le<std::uint64_t>(input.data());
  ByteView block = input.subspan(8);
  // Each block byte expands to at most 255 output bytes.
  if (original > std::uint64_t(block.size()) * 255 + 16) {
    fail(Errc::CorruptStream, "declared length impossible for block size");
  }
  return decompress_block(block, static_cast<std::size_t>(original));
}

}  // namespace defer::lz
