// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <bit>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "defer/defer.hpp"

using namespace defer;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

// Every metrics report produced by a chain in this run, for the accounting check.
std::vector<std::pair<std::string, MetricsReport>> g_reports;

void record(const std::string& what, const MetricsReport& r) { g_reports.emplace_back(what, r); }

void record(const std::string& what, const BenchResult& b) {
  for (const auto& run : b.runs) {
    record(what + " k=" + std::to_string(run.nodes) + " " + run.codecs.data.name(), run.report);
  }
}

const std::vector<CodecSpec> kLossless = {CodecSpec::text(), CodecSpec::text(Compression::LZ),
                                          CodecSpec::binary(32),
                                          CodecSpec::binary(32, Compression::LZ)};

Outcome composition() {
  const auto start = Clock::now();
  std::size_t chains = 0, models = 0, skipped = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto g = synthetic::random_model(seed, 24);
    ++models;
    const auto xs = std::vector<Tensor>{synthetic::random_tensor(g.input_shape(), seed * 31),
                                        synthetic::random_tensor(g.input_shape(), seed * 31 + 1)};
    std::vector<Tensor> want;
    for (const auto& x : xs) want.push_back(run_model(g, x));
    for (std::size_t k = 1; k <= 4; ++k) {
      try {
        auto_cuts(g, k);
      } catch (const Error& e) {
        if (e.code() != Errc::Unpartitionable) throw;
        ++skipped;
        continue;
      }
      LocalCluster cluster(k);
      ChainConfig cfg;
      cfg.nodes = cluster.addresses();
      cfg.codecs.data = kLossless[(seed + k) % kLossless.size()];
      cfg.codecs.weights = kLossless[seed % kLossless.size()];
      auto chain = ConfiguredChain::configure(g, cfg);
      const auto ys = chain->infer_stream(xs);
      record("composition", chain->shutdown());
      ++chains;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!ys.at(i).bit_equal(want[i])) {
          return {false, fmt("model seed %llu, k=%zu, input %zu differs from run_model",
                             (unsigned long long)seed, k, i)};
        }
      }
    }
  }
  const double t = seconds_since(start);
  return {t < 120.0, fmt("%zu models, %zu chains bit-identical (%zu k values without enough "
                         "bridges), %.1f s (limit 120 s)",
                         models, chains, skipped, t)};
}

Outcome pipelining(const std::string& exe) {
  BenchPlan plan;
  plan.model.layers = 12;
  plan.model.width = 32;
  plan.node_counts = {1, 4};
  plan.codecs = {ClassCodecs{}};
  plan.delay_per_layer_ms = 100.0 / 3.0;  // 100 ms per node at k = 4
  plan.window_seconds = 30;
  plan.mode = BenchMode::Process;
  plan.compute_exe = exe;
  const auto r = run_bench(plan);
  record("pipelining", r);
  const double base = r.runs[0].report.throughput(), four = r.runs[1].report.throughput();
  const double speedup = four / base;
  return {speedup >= 2.0, fmt("k=1 %.3f cycles/s, k=4 %.3f cycles/s, speedup %.2fx (floor 2.0x)",
                              base, four, speedup)};
}

Outcome fifo_under_jitter() {
  const auto g = synthetic::chain(8, 16, 1, 77);
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < 1000; ++i) xs.push_back(synthetic::random_tensor(g.input_shape(), 5000 + i));
  ComputeOptions opt;
  opt.jitter_ms = 20;
  opt.seed = 3;
  LocalCluster cluster(4, opt);
  ChainConfig cfg;
  cfg.nodes = cluster.addresses();
  auto chain = ConfiguredChain::configure(g, cfg);
  const auto start = Clock::now();
  const auto ys = chain->infer_stream(xs);
  const double t = seconds_since(start);
  const auto report = chain->shutdown();
  record("fifo", report);
  if (ys.size() != xs.size()) return {false, fmt("%zu results for 1000 inputs", ys.size())};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!ys[i].bit_equal(run_model(g, xs[i]))) return {false, fmt("result %zu out of place", i)};
  }
  for (const auto& n : report.nodes) {
    if (n.messages != 1000) return {false, fmt("node %d handled %llu messages", n.index,
                                               (unsigned long long)n.messages)};
  }
  return {true, fmt("1000 messages through 4 nodes with 0-20 ms jitter in %.1f s, order exact, "
                    "no drops or duplicates",
                    t)};
}

Outcome codec_laws() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto random_float = [&](bool allow_nan) {
    switch (pick(0, 5)) {
      case 0: return std::uniform_real_distribution<float>(-1, 1)(rng);
      case 1: return std::ldexp(std::uniform_real_distribution<float>(-1, 1)(rng), int(pick(0, 250)) - 125);
      case 2: {
        float f;
        do f = std::bit_cast<float>(std::uint32_t(rng()));
        while (!allow_nan && std::isnan(f));
        return f;
      }
      case 3: return std::bit_cast<float>(std::uint32_t(pick(1, 0x7fffff)) | (std::uint32_t(pick(0, 1)) << 31));
      case 4: return pick(0, 1) ? -0.0f : std::numeric_limits<float>::infinity() * (pick(0, 1) ? 1 : -1);
      default: return float(int(pick(0, 200)) - 100);
    }
  };

  std::size_t tensors = 0;
  for (int n = 0; n < 10000; ++n) {
    Shape shape(pick(1, 4));
    for (auto& e : shape) e = pick(1, 6);
    const auto& spec = kLossless[n % kLossless.size()];
    const bool binary = spec.serialization == Serialization::BinaryFloat;
    Tensor t(shape);
    for (auto& v : t.values()) v = random_float(binary);
    const auto back = decode_bytes(encode_bytes(spec, t));
    if (!back.bit_equal(t)) return {false, fmt("lossless %s round trip differs (tensor %d)", spec.name().c_str(), n)};
    ++tensors;
  }

  double worst = 0;
  std::vector<float> normals;
  while (normals.size() < 200000) {
    const float f = pick(0, 1) ? std::bit_cast<float>(std::uint32_t(rng()))
                               : std::uniform_real_distribution<float>(-1e3f, 1e3f)(rng);
    if (std::isnormal(f)) normals.push_back(f);
  }
  const Tensor t({normals.size()}, normals);
  for (const auto c : {Compression::None, Compression::LZ}) {
    const auto d = decode_bytes(encode_bytes(CodecSpec::binary(24, c), t));
    for (std::size_t i = 0; i < t.size(); ++i) {
      worst = std::max(worst, std::abs(double(d[i]) - t[i]) / std::abs(double(t[i])));
    }
  }

  std::size_t strings = 0;
  for (int n = 0; n < 1000; ++n) {
    std::size_t len = n == 0 ? 0 : (n == 1 || n == 2) ? (4u << 20) : pick(0, pick(0, 1) ? 64 : 40000);
    Bytes b(len);
    const int style = n == 1 ? 0 : n == 2 ? 2 : int(pick(0, 3));
    const std::size_t period = pick(1, 300);
    for (std::size_t i = 0; i < len; ++i) {
      if (style == 0) b[i] = std::uint8_t(rng());
      if (style == 1) b[i] = std::uint8_t(pick(0, 3));
      if (style == 2) b[i] = std::uint8_t((i % period) * 7 + (rng() % 64 == 0 ? rng() : 0));
      if (style == 3) b[i] = std::uint8_t(i / 97);
    }
    if (lz::decompress_bytes(lz::compress_bytes(b)) != b) return {false, fmt("LZ round trip failed on string %d (%zu bytes)", n, len)};
    ++strings;
  }
  const double secs = seconds_since(start);
  const bool pass = worst <= std::ldexp(1.0, -7) && secs < 60;
  return {pass, fmt("%zu lossless tensors exact, rate-24 worst relative error %.3g (limit 2^-7), "
                    "%zu LZ strings incl. empty and 4 MiB exact, %.1f s (limit 60 s)",
                    tensors, worst, strings, secs)};
}

Outcome payload_ordering() {
  // 2.75 M quantized weights: 11 MB as 32-bit floats.
  WeightMap w;
  w.emplace("fixture", synthetic::quantized_weights(2750000, 11));
  auto payload = [&](const CodecSpec& s) {
    return framed_size(encode_weight_set(w, s).size());
  };
  const double bin = double(payload(CodecSpec::binary(32)));
  const double bin_lz = double(payload(CodecSpec::binary(32, Compression::LZ)));
  const double text = double(payload(CodecSpec::text()));
  const double text_lz = double(payload(CodecSpec::text(Compression::LZ)));
  const double reduction = 1.0 - bin_lz / bin;
  const bool pass = bin >= 10e6 && bin_lz < bin && bin_lz < text_lz && text_lz < text &&
                    reduction >= 0.20;
  return {pass, fmt("bin32+lz %.2f MB < bin32 %.2f MB, bin32+lz < text+lz %.2f MB < text %.2f MB, "
                    "LZ reduction on bin32 %.1f%% (floor 20%%)",
                    bin_lz / 1e6, bin / 1e6, text_lz / 1e6, text / 1e6, reduction * 100)};
}

Outcome energy() {
  const bool exact = energy_estimate(1.0, 1e9, EnergyParams{15.0, 1e-11}) == 15.01;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1000.0);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const EnergyParams p{u(rng) + 1.0, u(rng) * 1e-12};
    const double c1 = u(rng), c2 = u(rng), b1 = u(rng) * 1e9, b2 = u(rng) * 1e9, a = u(rng);
    const double sum = energy_estimate(c1, b1, p) + energy_estimate(c2, b2, p);
    const double scaled = a * energy_estimate(c1, b1, p);
    worst = std::max(worst, std::abs(energy_estimate(c1 + c2, b1 + b2, p) - sum) / std::max(1.0, sum));
    worst = std::max(worst, std::abs(energy_estimate(a * c1, a * b1, p) - scaled) / std::max(1.0, scaled));
  }
  const bool linear = worst < 1e-12;

  BenchPlan plan;
  plan.model.layers = 16;
  plan.model.width = 512;
  plan.model.batch = 8;
  plan.node_counts = {1, 2, 4, 8};
  plan.codecs = {ClassCodecs{}};
  plan.cycles = 40;
  const auto r = run_bench(plan);
  record("energy", r);
  std::vector<double> worst_node;
  std::string per_k;
  for (const auto& run : r.runs) {
    const auto e = per_node_compute_energy(run.report, plan.energy);
    worst_node.push_back(*std::max_element(e.begin(), e.end()));
    per_k += fmt(" k=%zu:%.3fJ", run.nodes, worst_node.back());
  }
  bool decreasing = true;
  for (std::size_t i = 1; i < worst_node.size(); ++i) decreasing = decreasing && worst_node[i] < worst_node[i - 1];
  return {exact && linear && decreasing,
          fmt("E(1 s, 1e9 bit) %s 15.01 J, linearity worst relative error %.2g, max per-node "
              "compute energy%s %s",
              exact ? "==" : "!=", worst, per_k.c_str(), decreasing ? "strictly decreasing" : "NOT decreasing")};
}

Outcome accounting(const std::string& exe) {
  auto plan = parse_plan("cycles = 8\ninputs = 4\n");
  record("default plan", run_bench(plan));
  plan.node_counts = {1, 3};
  plan.mode = BenchMode::Process;
  plan.compute_exe = exe;
  record("default plan, processes", run_bench(plan));
  std::size_t exact = 0;
  for (const auto& [what, rep] : g_reports) {
    if (rep.payload_bytes() != rep.transport_bytes()) {
      return {false, fmt("%s: payload %llu != transport %llu", what.c_str(),
                         (unsigned long long)rep.payload_bytes(), (unsigned long long)rep.transport_bytes())};
    }
    ++exact;
  }
  return {exact > 0, fmt("payload_bytes == transport byte counter in all %zu chain runs", exact)};
}

Outcome link_shaping() {
  net::Listener listener(net::Endpoint{"127.0.0.1", 0});
  auto tx = Channel::connect(listener.endpoint(), std::chrono::milliseconds(2000), LinkParams{0.0, 8.0});
  Channel rx(*listener.accept(std::chrono::milliseconds(2000)));
  const Message m{MessageKind::InferenceData, 1, Bytes(1 << 20, 0x5a)};
  const auto start = Clock::now();
  tx->send(m);
  const auto got = rx.receive();
  const double t = seconds_since(start);
  const bool pass = got && *got == m && t >= 1.0 && t <= 1.4;
  return {pass, fmt("1 MiB at 8 Mbit/s delivered in %.3f s (window [1.0, 1.4] s)", t)};
}

}  // namespace

int main() {
  const std::string exe = DEFER_CLI_PATH;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"partition-composition-equivalence", composition},
      {"pipelining-speedup", [&] { return pipelining(exe); }},
      {"fifo-under-jitter", fifo_under_jitter},
      {"codec-laws", codec_laws},
      {"payload-ordering", payload_ordering},
      {"energy-model", energy},
      {"payload-accounting", [&] { return accounting(exe); }},
      {"link-shaping", link_shaping},
  };
  bool all = true;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
