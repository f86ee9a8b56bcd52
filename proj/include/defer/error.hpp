#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace defer {

enum class Errc {
  ShapeMismatch,
  MissingWeight,
  CycleDetected,
  InvalidGraph,
  InvalidCut,
  CutOrderError,
  Unpartitionable,
  MalformedBlob,
  UnknownCodec,
  CorruptStream,
  BadMagic,
  TruncatedFrame,
  ChunkOverflow,
  NodeUnreachable,
  ConfigRejected,
  ChainBroken,
  OrderViolation,
  PortBindFailure,
  ChildCrashed,
  Io,
  InvalidArgument,
};

inline constexpr std::string_view to_string(Errc c) {
  switch (c) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::MissingWeight: return "MissingWeight";
    case Errc::CycleDetected: return "CycleDetected";
    case Errc::InvalidGraph: return "InvalidGraph";
    case Errc::InvalidCut: return "InvalidCut";
    case Errc::CutOrderError: return "CutOrderError";
    case Errc::Unpartitionable: return "Unpartitionable";
    case Errc::MalformedBlob: return "MalformedBlob";
    case Errc::UnknownCodec: return "UnknownCodec";
    case Errc::CorruptStream: return "CorruptStream";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFrame: return "TruncatedFrame";
    case Errc::ChunkOverflow: return "ChunkOverflow";
    case Errc::NodeUnreachable: return "NodeUnreachable";
    case Errc::ConfigRejected: return "ConfigRejected";
    case Errc::ChainBroken: return "ChainBroken";
    case Errc::OrderViolation: return "OrderViolation";
    case Errc::PortBindFailure: return "PortBindFailure";
    case Errc::ChildCrashed: return "ChildCrashed";
    case Errc::Io: return "Io";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library. `node()` is set for chain-level
/// errors that can be attributed to one compute node; `subject()` carries
/// the offending layer id or similar name when there is one.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::string subject = {},
        std::optional<std::size_t> node = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        subject_(std::move(subject)),
        node_(node) {}

  Errc code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }
  std::optional<std::size_t> node() const noexcept { return node_; }

 private:
  Errc code_;
  std::string subject_;
  std::optional<std::size_t> node_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what,
                              std::string subject = {}) {
  throw Error(code, what, std::move(subject));
}

[[noreturn]] inline void fail_node(Errc code, std::size_t node,
                                   const std::string& what) {
  throw Error(code, what + " (node " + std::to_string(node) + ")", {}, node);
}

}  // namespace defer
