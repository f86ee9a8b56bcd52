#pragma once

#include <time.h>

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "defer/codec.hpp"
#include "defer/wire.hpp"

namespace defer {

struct EnergyParams {
  double tdp_watts = 15.0;
  double joules_per_bit = 1.0e-11;  // 10 pJ/bit, wired Ethernet

  void check() const {
    if (!(std::isfinite(tdp_watts) && tdp_watts > 0 && std::isfinite(joules_per_bit) &&
          joules_per_bit >= 0)) {
      fail(Errc::InvalidArgument, "energy parameters must be finite, tdp > 0, J/bit >= 0");
    }
  }
};

/// cpu_seconds x TDP + payload_bits x joules_per_bit.
inline double energy_estimate(double cpu_seconds, double payload_bits,
                              const EnergyParams& p = {}) {
  return cpu_seconds * p.tdp_watts + payload_bits * p.joules_per_bit;
}

inline double throughput(std::uint64_t cycles, double window_seconds) {
  return window_seconds > 0 ? double(cycles) / window_seconds : 0.0;
}

/// CPU time consumed by the calling thread.
inline double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return double(ts.tv_sec) + double(ts.tv_nsec) * 1e-9;
}

/// Formatting time (serialize + compress) per message class, in integer
/// nanoseconds so totals are exact sums of the samples.
class OverheadMeter {
 public:
  template <typename F>
  auto time(MsgClass c, F&& f) {
    const auto start = std::chrono::steady_clock::now();
    auto result = f();
    record(c, std::chrono::steady_clock::now() - start);
    return result;
  }

  void record(MsgClass c, std::chrono::nanoseconds d) {
    ns_[static_cast<std::size_t>(c)].fetch_add(d.count(), std::memory_order_relaxed);
    samples_.fetch_add(1, std::memory_order_relaxed);
  }

  std::int64_t nanos(MsgClass c) const {
    return ns_[static_cast<std::size_t>(c)].load(std::memory_order_relaxed);
  }
  std::uint64_t samples() const { return samples_.load(std::memory_order_relaxed); }

 private:
  std::array<std::atomic<std::int64_t>, kMsgClassCount> ns_{};
  std::atomic<std::uint64_t> samples_{0};
};

/// Counters reported by one participant (a compute node or the dispatcher).
struct NodeMetrics {
  static constexpr int kDispatcher = -1;

  int index = 0;
  std::size_t layers = 0;
  std::uint64_t messages = 0;
  double compute_seconds = 0;  // thread CPU time spent in inference
  std::array<std::int64_t, kMsgClassCount> overhead_ns{};
  std::array<std::uint64_t, kMsgClassCount> framed_bytes{};
  std::uint64_t transport_bytes = 0;

  double overhead_seconds() const {
    std::int64_t t = 0;
    for (auto v : overhead_ns) t += v;
    return double(t) * 1e-9;
  }
  double cpu_seconds() const { return compute_seconds + overhead_seconds(); }
  std::uint64_t framed_total() const {
    std::uint64_t t = 0;
    for (auto v : framed_bytes) t += v;
    return t;
  }
};

inline nlohmann::json to_json(const NodeMetrics& m) {
  return {{"index", m.index},
          {"layers", m.layers},
          {"messages", m.messages},
          {"compute_seconds", m.compute_seconds},
          {"overhead_ns", m.overhead_ns},
          {"framed_bytes", m.framed_bytes},
          {"transport_bytes", m.transport_bytes}};
}

inline NodeMetrics node_metrics_from_json(const nlohmann::json& j) {
  NodeMetrics m;
  m.index = j.at("index").get<int>();
  m.layers = j.at("layers").get<std::size_t>();
  m.messages = j.at("messages").get<std::uint64_t>();
  m.compute_seconds = j.at("compute_seconds").get<double>();
  m.overhead_ns = j.at("overhead_ns").get<std::array<std::int64_t, kMsgClassCount>>();
  m.framed_bytes = j.at("framed_bytes").get<std::array<std::uint64_t, kMsgClassCount>>();
  m.transport_bytes = j.at("transport_bytes").get<std::uint64_t>();
  return m;
}

struct MetricsReport {
  std::uint64_t cycles_completed = 0;
  double window_seconds = 0;
  NodeMetrics dispatcher{NodeMetrics::kDispatcher};
  std::vector<NodeMetrics> nodes;

  double throughput() const { return defer::throughput(cycles_completed, window_seconds); }

  std::uint64_t payload_bytes(MsgClass c) const {
    const auto i = static_cast<std::size_t>(c);
    std::uint64_t t = dispatcher.framed_bytes[i];
    for (const auto& n : nodes) t += n.framed_bytes[i];
    return t;
  }
  std::uint64_t payload_bytes() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < kMsgClassCount; ++c) t += payload_bytes(MsgClass(c));
    return t;
  }
  /// Sum of every participant's socket-level byte counter.
  std::uint64_t transport_bytes() const {
    std::uint64_t t = dispatcher.transport_bytes;
    for (const auto& n : nodes) t += n.transport_bytes;
    return t;
  }

  double overhead_seconds(MsgClass c) const {
    const auto i = static_cast<std::size_t>(c);
    std::int64_t t = dispatcher.overhead_ns[i];
    for (const auto& n : nodes) t += n.overhead_ns[i];
    return double(t) * 1e-9;
  }
  double overhead_seconds() const {
    std::int64_t t = 0;
    for (std::size_t c = 0; c < kMsgClassCount; ++c) {
      t += dispatcher.overhead_ns[c];
      for (const auto& n : nodes) t += n.overhead_ns[c];
    }
    return double(t) * 1e-9;
  }

  /// Network-related energy of one message class: formatting time x TDP
  /// plus bits on the wire x J/bit.
  double class_energy(MsgClass c, const EnergyParams& p) const {
    return energy_estimate(overhead_seconds(c), double(payload_bytes(c)) * 8.0, p);
  }
};

/// One entry per compute node: that node's CPU time x TDP plus the bits it
/// sent x J/bit.
inline std::vector<double> per_node_energy(const MetricsReport& report,
                                           const EnergyParams& p = {}) {
  std::vector<double> out;
  for (const auto& n : report.nodes) {
    out.push_back(energy_estimate(n.cpu_seconds(), double(n.framed_total()) * 8.0, p));
  }
  return out;
}

inline std::vector<double> per_node_compute_energy(const MetricsReport& report,
                                                   const EnergyParams& p = {}) {
  std::vector<double> out;
  for (const auto& n : report.nodes) out.push_back(n.cpu_seconds() * p.tdp_watts);
  return out;
}

// ---- CSV ----

inline constexpr const char* kCsvHeader =
    "model,nodes,serialization,compression,msg_class,energy_j,overhead_s,payload_mb,"
    "throughput_cps";

struct CsvRow {
  std::string model;
  std::size_t nodes = 0;
  std::string serialization;
  std::string compression;
  std::string msg_class;
  double energy_j = 0;
  double overhead_s = 0;
  double payload_mb = 0;
  double throughput_cps = 0;
};

inline void write_csv_row(std::ostream& out, const CsvRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g", r.energy_j, r.overhead_s,
                r.payload_mb, r.throughput_cps);
  out << r.model << ',' << r.nodes << ',' << r.serialization << ',' << r.compression
      << ',' << r.msg_class << ',' << buf << '\n';
}

/// Codec used for each message class in a run, for the CSV labels.
struct ClassCodecs {
  CodecSpec architecture = CodecSpec::text();
  CodecSpec weights = CodecSpec::binary(32, Compression::LZ);
  CodecSpec data = CodecSpec::binary(32, Compression::LZ);
};

inline std::vector<CsvRow> csv_rows(const std::string& model, const MetricsReport& report,
                                    const ClassCodecs& codecs, const EnergyParams& p = {}) {
  std::vector<CsvRow> rows;
  auto label = [](const CodecSpec& s) {
    return std::pair<std::string, std::string>{
        s.serialization == Serialization::TextArray ? "text" : "bin" + std::to_string(s.rate_bits),
        std::string(compression_name(s.compression))};
  };
  for (std::size_t c = 0; c < kMsgClassCount; ++c) {
    const auto cls = MsgClass(c);
    std::pair<std::string, std::string> l{"-", "-"};
    if (cls == MsgClass::Architecture) l = label(codecs.architecture);
    if (cls == MsgClass::Weights) l = label(codecs.weights);
    if (cls == MsgClass::Data) l = label(codecs.data);
    rows.push_back(CsvRow{model, report.nodes.size(), l.first, l.second,
                          std::string(to_string(cls)), report.class_energy(cls, p),
                          report.overhead_seconds(cls),
                          double(report.payload_bytes(cls)) / 1e6, report.throughput()});
  }
  return rows;
}

}  // namespace defer
