#pragma once

// Payload formats carried inside frames, above the framing layer.
//
//   Architecture  u8 compression (0 none, 1 LZ), then a JSON document
//                 {"partition":{"index","count"},"data_codec","graph"}
//   Weights       encode_weight_set
//   NextHop       "host:port"
//   InferenceData EncodedBlob (Result on the last hop)
//   Shutdown      empty, or fixed-width metrics records (see ShutdownDoc)
//   Ack           empty
//   Reject        JSON {"code","subject","message"}

#include <bit>

#include "defer/metrics.hpp"
#include "defer/model_io.hpp"
#include "defer/net.hpp"
#include "defer/partitioner.hpp"

namespace defer {

struct ArchitectureDoc {
  std::size_t index = 0;
  std::size_t count = 1;
  CodecSpec data_codec = CodecSpec::binary(32, Compression::LZ);
  ModelGraph graph;  // without weights
};

inline Bytes encode_architecture(const Partition& p, std::size_t count,
                                 const CodecSpec& data_codec, Compression c) {
  const json doc{{"partition", {{"index", p.index}, {"count", count}}},
                 {"data_codec", data_codec.name()},
                 {"graph", graph_to_json(p.graph)}};
  const std::string text = doc.dump();
  Bytes out{static_cast<std::uint8_t>(c == Compression::LZ ? 1 : 0)};
  if (c == Compression::LZ) {
    put_bytes(out, lz::compress_bytes(as_bytes(text)));
  } else {
    put_string(out, text);
  }
  return out;
}

inline ArchitectureDoc decode_architecture(ByteView b) {
  if (b.empty()) fail(Errc::MalformedBlob, "empty architecture payload");
  std::string text;
  if (b[0] == 1) {
    try {
      text = to_string(lz::decompress_bytes(b.subspan(1)));
    } catch (const Error& e) {
      fail(Errc::MalformedBlob, e.what());
    }
  } else if (b[0] == 0) {
    text = to_string(b.subspan(1));
  } else {
    fail(Errc::UnknownCodec, "architecture compression flag " + std::to_string(b[0]));
  }
  const json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    fail(Errc::MalformedBlob, "architecture is not a JSON object");
  }
  try {
    ArchitectureDoc a;
    a.index = doc.at("partition").at("index").get<std::size_t>();
    a.count = doc.at("partition").at("count").get<std::size_t>();
    a.data_codec = CodecSpec::parse(doc.at("data_codec").get<std::string>());
    a.graph = graph_from_json(doc.at("graph"));
    return a;
  } catch (const json::exception& e) {
    fail(Errc::MalformedBlob, std::string("architecture document: ") + e.what());
  }
}

inline Bytes reject_payload(const Error& e) {
  const json j{{"code", std::string(to_string(e.code()))},
               {"subject", e.subject()},
               {"message", e.what()}};
  const std::string s = j.dump();
  return Bytes(s.begin(), s.end());
}

struct RejectInfo {
  std::string code;
  std::string subject;
  std::string message;
};

inline RejectInfo parse_reject(ByteView b) {
  const json j = json::parse(to_string(b), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return {"?", "", to_string(b)};
  return {j.value("code", "?"), j.value("subject", ""), j.value("message", "")};
}

/// Shutdown payload: metrics collected so far plus an optional abort record.
/// Fixed-width so its size depends only on the number of nodes carried:
///   u8 flags (bit 0: abort present), u32 n,
///   n x {i64 index, u64 layers, u64 messages, f64 compute_seconds,
///        i64 overhead_ns[4], u64 framed_bytes[4], u64 transport_bytes},
///   [u64 abort node, u32 length, reason bytes]
struct ShutdownDoc {
  static constexpr std::size_t kRecordBytes = 8 * (5 + 2 * kMsgClassCount);

  std::vector<NodeMetrics> nodes;
  std::optional<std::size_t> abort_node;
  std::string abort_reason;

  Bytes encode() const {
    Bytes out;
    put_u8(out, abort_node ? 1 : 0);
    put_le(out, static_cast<std::uint32_t>(nodes.size()));
    for (const auto& n : nodes) {
      put_le(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(n.index)));
      put_le(out, static_cast<std::uint64_t>(n.layers));
      put_le(out, n.messages);
      put_le(out, std::bit_cast<std::uint64_t>(n.compute_seconds));
      for (auto v : n.overhead_ns) put_le(out, static_cast<std::uint64_t>(v));
      for (auto v : n.framed_bytes) put_le(out, v);
      put_le(out, n.transport_bytes);
    }
    if (abort_node) {
      put_le(out, static_cast<std::uint64_t>(*abort_node));
      put_le(out, static_cast<std::uint32_t>(abort_reason.size()));
      put_string(out, abort_reason);
    }
    return out;
  }

  static ShutdownDoc decode(ByteView b) {
    ShutdownDoc d;
    if (b.empty()) return d;
    ByteReader r(b, Errc::MalformedBlob);
    const auto flags = r.u8();
    if (flags > 1) fail(Errc::MalformedBlob, "shutdown flags " + std::to_string(flags));
    const auto n = r.le<std::uint32_t>();
    if (std::uint64_t(n) * kRecordBytes > r.remaining()) {
      fail(Errc::MalformedBlob, "shutdown payload shorter than its node count");
    }
    for (std::uint32_t i = 0; i < n; ++i) {
      NodeMetrics m;
      m.index = static_cast<int>(static_cast<std::int64_t>(r.le<std::uint64_t>()));
      m.layers = r.le<std::uint64_t>();
      m.messages = r.le<std::uint64_t>();
      m.compute_seconds = std::bit_cast<double>(r.le<std::uint64_t>());
      for (auto& v : m.overhead_ns) v = static_cast<std::int64_t>(r.le<std::uint64_t>());
      for (auto& v : m.framed_bytes) v = r.le<std::uint64_t>();
      m.transport_bytes = r.le<std::uint64_t>();
      d.nodes.push_back(m);
    }
    if (flags & 1) {
      d.abort_node = r.le<std::uint64_t>();
      d.abort_reason = to_string(r.take(r.le<std::uint32_t>()));
    }
    if (!r.done()) fail(Errc::MalformedBlob, "trailing bytes in shutdown payload");
    return d;
  }
};

}  // namespace defer
