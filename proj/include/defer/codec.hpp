#pragma once

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "defer/bytes.hpp"
#include "defer/lz.hpp"
#include "defer/tensor.hpp"

namespace defer {

enum class Serialization : std::uint8_t { TextArray, BinaryFloat };
enum class Compression : std::uint8_t { None, LZ };

/// Serialization scheme plus optional byte-compression stage.
///
/// TextArray renders shortest round-trip decimals nested by shape.
/// BinaryFloat writes little-endian float32 words keeping only the top
/// `rate_bits` bits of each word; rate 32 is exact.
///
/// codec_id layout: bit 7 serialization, bit 6 compression, bits 0-4 hold
/// rate_bits - 1 for BinaryFloat and are zero for TextArray, bit 5 is zero.
struct CodecSpec {
  Serialization serialization = Serialization::BinaryFloat;
  unsigned rate_bits = 32;
  Compression compression = Compression::None;

  static constexpr CodecSpec text(Compression c = Compression::None) {
    return {Serialization::TextArray, 0, c};
  }
  static constexpr CodecSpec binary(unsigned rate = 32,
                                    Compression c = Compression::None) {
    return {Serialization::BinaryFloat, rate, c};
  }

  bool valid() const {
    return serialization == Serialization::TextArray
               ? rate_bits == 0
               : rate_bits >= 8 && rate_bits <= 32;
  }

  bool lossless() const {
    return serialization == Serialization::TextArray || rate_bits == 32;
  }

  std::uint8_t codec_id() const {
    if (!valid()) fail(Errc::UnknownCodec, "invalid codec spec " + name());
    std::uint8_t id = 0;
    if (serialization == Serialization::BinaryFloat) {
      id |= 0x80 | std::uint8_t(rate_bits - 1);
    }
    if (compression == Compression::LZ) id |= 0x40;
    return id;
  }

  static CodecSpec from_id(std::uint8_t id) {
    CodecSpec s;
    s.compression = (id & 0x40) ? Compression::LZ : Compression::None;
    if (id & 0x20) fail(Errc::UnknownCodec, "reserved bit set in codec id");
    if (id & 0x80) {
      s.serialization = Serialization::BinaryFloat;
      s.rate_bits = (id & 0x1f) + 1u;
    } else {
      s.serialization = Serialization::TextArray;
      s.rate_bits = 0;
      if (id & 0x1f) fail(Errc::UnknownCodec, "text codec with rate bits");
    }
    if (!s.valid()) {
      fail(Errc::UnknownCodec, "codec id " + std::to_string(id) + " unsupported");
    }
    return s;
  }

  /// "text", "text+lz", "bin32", "bin16+lz", ...
  std::string name() const {
    std::string n = serialization == Serialization::TextArray
                        ? "text"
                        : "bin" + std::to_string(rate_bits);
    if (compression == Compression::LZ) n += "+lz";
    return n;
  }

  static CodecSpec parse(std::string_view s) {
    CodecSpec spec;
    if (s.ends_with("+lz")) {
      spec.compression = Compression::LZ;
      s.remove_suffix(3);
    }
    if (s == "text") {
      spec.serialization = Serialization::TextArray;
      spec.rate_bits = 0;
    } else if (s.starts_with("bin")) {
      unsigned rate = 0;
      auto [p, ec] = std::from_chars(s.data() + 3, s.data() + s.size(), rate);
      if (ec != std::errc{} || p != s.data() + s.size()) {
        fail(Errc::InvalidArgument, "bad codec '" + std::string(s) + "'");
      }
      spec.serialization = Serialization::BinaryFloat;
      spec.rate_bits = rate;
    } else {
      fail(Errc::InvalidArgument, "bad codec '" + std::string(s) + "'");
    }
    if (!spec.valid()) {
      fail(Errc::InvalidArgument, "rate out of range in '" + std::string(s) + "'");
    }
    return spec;
  }

  friend bool operator==(const CodecSpec&, const CodecSpec&) = default;
};

inline std::string_view serialization_name(Serialization s) {
  return s == Serialization::TextArray ? "text" : "binary";
}
inline std::string_view compression_name(Compression c) {
  return c == Compression::LZ ? "lz" : "none";
}

/// Blob layout: byte 0 codec_id, byte 1 rank, rank x u64 extents, body.
/// Compressed bodies start with the u64 uncompressed length.
struct EncodedBlob {
  std::uint8_t codec_id = 0;
  Shape shape;
  Bytes body;

  Bytes to_bytes() const {
    Bytes out;
    out.reserve(2 + 8 * shape.size() + body.size());
    put_u8(out, codec_id);
    put_u8(out, static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) put_le<std::uint64_t>(out, e);
    put_bytes(out, body);
    return out;
  }

  static EncodedBlob from_bytes(ByteView b) {
    ByteReader r(b, Errc::MalformedBlob);
    EncodedBlob blob;
    blob.codec_id = r.u8();
    const std::size_t rank = r.u8();
    for (std::size_t i = 0; i < rank; ++i) {
      blob.shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>()));
    }
    auto rest = r.rest();
    blob.body.assign(rest.begin(), rest.end());
    return blob;
  }

  std::size_t byte_size() const { return 2 + 8 * shape.size() + body.size(); }
};

namespace detail {

inline void append_float_text(std::string& out, float v) {
  std::array<char, 32> buf;
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  std::string_view s(buf.data(), std::size_t(end - buf.data()));
  out += s;
  if (s.find_first_of(".einf") == std::string_view::npos) out += ".0";
}

inline void render_text(std::string& out, const Tensor& t, std::size_t axis,
                        std::size_t& cursor) {
  out += '[';
  const std::size_t n = t.extent(axis);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ',';
    if (axis + 1 == t.rank()) {
      append_float_text(out, t[cursor++]);
    } else {
      render_text(out, t, axis + 1, cursor);
    }
  }
  out += ']';
}

class TextParser {
 public:
  TextParser(std::string_view s, const Shape& shape) : s_(s), shape_(shape) {}

  std::vector<float> parse() {
    values_.reserve(element_count(shape_));
    level(0);
    if (pos_ != s_.size()) bad("trailing characters");
    return std::move(values_);
  }

 private:
  [[noreturn]] void bad(const std::string& why) {
    fail(Errc::MalformedBlob,
         "text array at offset " + std::to_string(pos_) + ": " + why);
  }

  void expect(char c) {
    if (pos_ >= s_.size() || s_[pos_] != c) bad(std::string("expected '") + c + "'");
    ++pos_;
  }

  void level(std::size_t axis) {
    expect('[');
    for (std::size_t i = 0; i < shape_[axis]; ++i) {
      if (i) expect(',');
      if (axis + 1 == shape_.size()) {
        number();
      } else {
        level(axis + 1);
      }
    }
    expect(']');
  }

  void number() {
    float v = 0.0f;
    const char* begin = s_.data() + pos_;
    auto [p, ec] = std::from_chars(begin, s_.data() + s_.size(), v);
    if (ec == std::errc::result_out_of_range) bad("number out of range");
    if (ec != std::errc{}) bad("expected number");
    pos_ += std::size_t(p - begin);
    values_.push_back(v);
  }

  std::string_view s_;
  const Shape& shape_;
  std::size_t pos_ = 0;
  std::vector<float> values_;
};

inline std::uint32_t rate_mask(unsigned rate_bits) {
  return rate_bits >= 32 ? 0xffffffffu : ~((1u << (32 - rate_bits)) - 1u);
}

}  // namespace detail

/// Canonical text rendering: no whitespace, shortest round-trip decimals.
inline std::string to_text_array(const Tensor& t) {
  std::string out;
  out.reserve(t.size() * 10 + 2 * t.rank());
  std::size_t cursor = 0;
  detail::render_text(out, t, 0, cursor);
  return out;
}

inline Tensor from_text_array(std::string_view text, const Shape& shape) {
  Tensor probe(shape);  // validates the shape
  return Tensor(shape, detail::TextParser(text, shape).parse());
}

inline Bytes serialize_body(const CodecSpec& spec, const Tensor& t) {
  if (spec.serialization == Serialization::TextArray) {
    std::string s = to_text_array(t);
    return Bytes(s.begin(), s.end());
  }
  const std::uint32_t mask = detail::rate_mask(spec.rate_bits);
  Bytes out(t.size() * 4);
  std::uint8_t* dst = out.data();
  for (float v : t.values()) {
    std::uint32_t w;
    std::memcpy(&w, &v, 4);
    w &= mask;
    std::memcpy(dst, &w, 4);
    dst += 4;
  }
  return out;
}

inline EncodedBlob encode(const CodecSpec& spec, const Tensor& t) {
  EncodedBlob blob;
  blob.codec_id = spec.codec_id();
  blob.shape = t.shape();
  blob.body = serialize_body(spec, t);
  if (spec.compression == Compression::LZ) blob.body = lz::compress_bytes(blob.body);
  return blob;
}

inline Tensor decode(const EncodedBlob& blob) {
  const CodecSpec spec = CodecSpec::from_id(blob.codec_id);
  if (blob.shape.empty()) fail(Errc::MalformedBlob, "rank 0 blob");
  for (auto e : blob.shape) {
    if (e == 0) fail(Errc::MalformedBlob, "zero extent in blob shape");
  }
  Bytes inflated;
  ByteView body = blob.body;
  if (spec.compression == Compression::LZ) {
    try {
      inflated = lz::decompress_bytes(body);
    } catch (const Error& e) {
      fail(Errc::MalformedBlob, e.what());
    }
    body = inflated;
  }
  if (spec.serialization == Serialization::TextArray) {
    return from_text_array(to_string(body), blob.shape);
  }
  const std::size_t n = element_count(blob.shape);
  if (body.size() != n * 4) {
    fail(Errc::MalformedBlob, "binary body has " + std::to_string(body.size()) +
                                  " bytes, expected " + std::to_string(n * 4));
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), body.data(), body.size());
  return Tensor(blob.shape, std::move(values));
}

inline Bytes encode_bytes(const CodecSpec& spec, const Tensor& t) {
  return encode(spec, t).to_bytes();
}

inline Tensor decode_bytes(ByteView b) { return decode(EncodedBlob::from_bytes(b)); }

/// Wall time of encode (serialization plus compression), no I/O.
inline double measure_overhead(const CodecSpec& spec, const Tensor& t) {
  const auto start = std::chrono::steady_clock::now();
  const auto blob = encode(spec, t);
  const auto stop = std::chrono::steady_clock::now();
  (void)blob;
  return std::chrono::duration<double>(stop - start).count();
}

}  // namespace defer
