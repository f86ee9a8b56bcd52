#pragma once

// Frame layout (all integers little-endian):
//
//   magic     2 bytes  0x44 0x46 ("DF")
//   kind      1 byte   MessageKind
//   sequence  8 bytes
//   length    8 bytes  total payload length, < 2^48
//   chunks    repeated { u32 chunk_length; chunk_length payload bytes }
//
// Chunks are at most ChunkConfig::chunk_bytes long; an empty payload has no
// chunks. See docs/wire.md.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "defer/bytes.hpp"

namespace defer {

enum class MessageKind : std::uint8_t {
  Architecture = 1,
  Weights = 2,
  NextHop = 3,
  InferenceData = 4,
  Result = 5,
  Shutdown = 6,
  Ack = 7,
  Reject = 8,
};

inline constexpr std::string_view to_string(MessageKind k) {
  switch (k) {
    case MessageKind::Architecture: return "Architecture";
    case MessageKind::Weights: return "Weights";
    case MessageKind::NextHop: return "NextHop";
    case MessageKind::InferenceData: return "InferenceData";
    case MessageKind::Result: return "Result";
    case MessageKind::Shutdown: return "Shutdown";
    case MessageKind::Ack: return "Ack";
    case MessageKind::Reject: return "Reject";
  }
  return "?";
}

/// Accounting classes used by the metrics report.
enum class MsgClass : std::uint8_t { Architecture, Weights, Data, Control };
inline constexpr std::size_t kMsgClassCount = 4;

inline constexpr MsgClass message_class(MessageKind k) {
  switch (k) {
    case MessageKind::Architecture:
    case MessageKind::NextHop: return MsgClass::Architecture;
    case MessageKind::Weights: return MsgClass::Weights;
    case MessageKind::InferenceData:
    case MessageKind::Result: return MsgClass::Data;
    default: return MsgClass::Control;
  }
}

inline constexpr std::string_view to_string(MsgClass c) {
  switch (c) {
    case MsgClass::Architecture: return "architecture";
    case MsgClass::Weights: return "weights";
    case MsgClass::Data: return "data";
    case MsgClass::Control: return "control";
  }
  return "?";
}

struct Message {
  MessageKind kind = MessageKind::InferenceData;
  std::uint64_t sequence = 0;
  Bytes payload;

  friend bool operator==(const Message&, const Message&) = default;
};

struct ChunkConfig {
  static constexpr std::size_t kDefaultChunkBytes = 512 * 1024;
  static constexpr std::size_t kMinChunkBytes = 4096;

  std::size_t chunk_bytes = kDefaultChunkBytes;

  static ChunkConfig of(std::size_t bytes) {
    if (bytes < kMinChunkBytes) {
      fail(Errc::InvalidArgument, "chunk_bytes must be >= 4096, got " +
                                      std::to_string(bytes));
    }
    return ChunkConfig{bytes};
  }
};

inline constexpr std::uint8_t kMagic0 = 0x44;
inline constexpr std::uint8_t kMagic1 = 0x46;
inline constexpr std::size_t kFrameHeaderBytes = 19;
inline constexpr std::size_t kChunkHeaderBytes = 4;
inline constexpr std::uint64_t kMaxPayload = std::uint64_t{1} << 48;

/// Bytes on the wire for a payload of `n` bytes.
inline std::uint64_t framed_size(std::uint64_t n, const ChunkConfig& cfg = {}) {
  const std::uint64_t chunks = (n + cfg.chunk_bytes - 1) / cfg.chunk_bytes;
  return kFrameHeaderBytes + chunks * kChunkHeaderBytes + n;
}

inline Bytes frame_encode(const Message& msg, const ChunkConfig& cfg = {}) {
  const std::uint64_t n = msg.payload.size();
  if (n >= kMaxPayload) fail(Errc::ChunkOverflow, "payload exceeds 2^48 bytes");
  Bytes out;
  out.reserve(framed_size(n, cfg));
  put_u8(out, kMagic0);
  put_u8(out, kMagic1);
  put_u8(out, static_cast<std::uint8_t>(msg.kind));
  put_le<std::uint64_t>(out, msg.sequence);
  put_le<std::uint64_t>(out, n);
  for (std::uint64_t off = 0; off < n; off += cfg.chunk_bytes) {
    const std::size_t len = static_cast<std::size_t>(
        std::min<std::uint64_t>(cfg.chunk_bytes, n - off));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(len));
    out.insert(out.end(), msg.payload.begin() + off,
               msg.payload.begin() + off + len);
  }
  return out;
}

/// Blocking byte source. `read_some` returns 0 only at end of stream.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::size_t read_some(std::span<std::uint8_t> buf) = 0;
};

/// Blocking byte sink.
class ByteSink {
 public:
  virtual ~ByteSink() = default;
  virtual void write(ByteView data) = 0;
  virtual void flush() {}
};

/// Fills `buf` completely. Returns false if the stream ended before the first
/// byte; throws TruncatedFrame if it ends part-way through.
inline bool read_exact(ByteSource& src, std::span<std::uint8_t> buf) {
  std::size_t got = 0;
  while (got < buf.size()) {
    const std::size_t n = src.read_some(buf.subspan(got));
    if (n == 0) {
      if (got == 0) return false;
      fail(Errc::TruncatedFrame, "stream ended after " + std::to_string(got) +
                                     " of " + std::to_string(buf.size()) +
                                     " bytes");
    }
    got += n;
  }
  return true;
}

/// Reads one frame. Returns nullopt on a clean end of stream at a frame
/// boundary. Consumes exactly the bytes of the frame.
inline std::optional<Message> frame_decode(ByteSource& src) {
  std::uint8_t header[kFrameHeaderBytes];
  if (!read_exact(src, header)) return std::nullopt;
  if (header[0] != kMagic0 || header[1] != kMagic1) {
    fail(Errc::BadMagic, "bad frame magic");
  }
  const std::uint8_t kind = header[2];
  if (kind < 1 || kind > 8) fail(Errc::BadMagic, "unknown message kind " + std::to_string(kind));
  Message msg;
  msg.kind = static_cast<MessageKind>(kind);
  msg.sequence = get_le<std::uint64_t>(header + 3);
  const std::uint64_t total = get_le<std::uint64_t>(header + 11);
  if (total >= kMaxPayload) fail(Errc::ChunkOverflow, "declared payload exceeds 2^48 bytes");

  msg.payload.resize(static_cast<std::size_t>(total));
  std::uint64_t filled = 0;
  while (filled < total) {
    std::uint8_t ch[kChunkHeaderBytes];
    if (!read_exact(src, ch)) {
      fail(Errc::TruncatedFrame, "stream ended before chunk header");
    }
    const std::uint32_t len = get_le<std::uint32_t>(ch);
    if (len == 0 || len > total - filled) {
      fail(Errc::ChunkOverflow, "chunk of " + std::to_string(len) +
                                    " bytes with " +
                                    std::to_string(total - filled) + " remaining");
    }
    if (!read_exact(src, std::span(msg.payload).subspan(filled, len))) {
      fail(Errc::TruncatedFrame, "stream ended before chunk body");
    }
    filled += len;
  }
  return msg;
}

/// ByteSource over an in-memory buffer.
class MemorySource final : public ByteSource {
 public:
  explicit MemorySource(ByteView data) : data_(data) {}

  std::size_t read_some(std::span<std::uint8_t> buf) override {
    const std::size_t n = std::min(buf.size(), data_.size() - pos_);
    std::copy_n(data_.begin() + pos_, n, buf.begin());
    pos_ += n;
    return n;
  }

  std::size_t position() const noexcept { return pos_; }
  bool exhausted() const noexcept { return pos_ == data_.size(); }

 private:
  ByteView data_;
  std::size_t pos_ = 0;
};

/// ByteSink appending to an in-memory buffer.
class MemorySink final : public ByteSink {
 public:
  void write(ByteView data) override { put_bytes(bytes_, data); }
  const Bytes& bytes() const noexcept { return bytes_; }

 private:
  Bytes bytes_;
};

/// Counts every byte passed through to the wrapped sink. This is the
/// transport-level payload counter; it is atomic and readable from any thread.
class CountingSink final : public ByteSink {
 public:
  explicit CountingSink(ByteSink& inner) : inner_(inner) {}

  void write(ByteView data) override {
    inner_.write(data);
    count_.fetch_add(data.size(), std::memory_order_relaxed);
  }
  void flush() override { inner_.flush(); }

  std::uint64_t count_payload() const noexcept {
    return count_.load(std::memory_order_relaxed);
  }
  void reset() noexcept { count_.store(0, std::memory_order_relaxed); }

 private:
  ByteSink& inner_;
  std::atomic<std::uint64_t> count_{0};
};

inline std::uint64_t count_payload(const CountingSink& c) { return c.count_payload(); }

/// Writes one framed message; returns the number of bytes framed.
inline std::uint64_t write_frame(ByteSink& sink, const Message& msg,
                                 const ChunkConfig& cfg = {}) {
  const Bytes frame = frame_encode(msg, cfg);
  sink.write(frame);
  return frame.size();
}

}  // namespace defer
