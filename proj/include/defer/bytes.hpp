#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "defer/error.hpp"

namespace defer {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline void put_u8(Bytes& out, std::uint8_t v) { out.push_back(v); }

template <typename T>
inline void put_le(Bytes& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <typename T>
inline T get_le(const std::uint8_t* p) {
  static_assert(std::is_unsigned_v<T>);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(p[i]) << (8 * i);
  return v;
}

inline void put_bytes(Bytes& out, ByteView b) {
  out.insert(out.end(), b.begin(), b.end());
}

inline void put_string(Bytes& out, std::string_view s) {
  out.insert(out.end(), s.begin(), s.end());
}

inline ByteView as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string to_string(ByteView b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

/// Bounds-checked cursor over a byte buffer. Reads past the end raise
/// `code`, so each decoder reports its own error kind.
class ByteReader {
 public:
  ByteReader(ByteView data, Errc code) : data_(data), code_(code) {}

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }
  std::size_t position() const noexcept { return pos_; }

  ByteView take(std::size_t n) {
    need(n);
    ByteView v = data_.subspan(pos_, n);
    pos_ += n;
    return v;
  }

  template <typename T>
  T le() {
    need(sizeof(T));
    T v = get_le<T>(data_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  std::uint8_t u8() { return le<std::uint8_t>(); }

  ByteView rest() { return take(remaining()); }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) {
      fail(code_, "need " + std::to_string(n) + " bytes, have " +
                      std::to_string(remaining()));
    }
  }

  ByteView data_;
  std::size_t pos_ = 0;
  Errc code_;
};

}  // namespace defer
