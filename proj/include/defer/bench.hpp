#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <toml.hpp>

#include "defer/cluster.hpp"
#include "defer/synthetic.hpp"

extern char** environ;

namespace defer {

/// Synthetic model used by a bench plan. Weights always come from the
/// 256-level quantized fixture so the LZ stage sees realistic redundancy.
struct ModelSpec {
  enum class Kind { Chain, ResnetLike };

  Kind kind = Kind::Chain;
  std::size_t layers = 12;  // chain
  std::size_t width = 64;   // chain
  std::size_t blocks = 2;   // resnet-like
  std::size_t channels = 8;
  std::size_t hw = 16;
  std::size_t classes = 10;
  std::size_t batch = 1;

  std::string name() const {
    if (kind == Kind::Chain) {
      return "chain-L" + std::to_string(layers) + "-w" + std::to_string(width);
    }
    return "resnet-b" + std::to_string(blocks) + "-c" + std::to_string(channels) + "-" +
           std::to_string(hw);
  }

  ModelGraph build(std::uint64_t seed) const {
    if (kind == Kind::Chain) {
      return synthetic::chain(layers, width, batch, seed, synthetic::WeightInit::Quantized);
    }
    return synthetic::resnet_like(blocks, channels, hw, batch, seed,
                                  synthetic::WeightInit::Quantized, classes);
  }
};

enum class BenchMode { InProcess, Process };

struct BenchPlan {
  ModelSpec model;
  std::vector<std::size_t> node_counts{1, 4, 6, 8};
  std::vector<ClassCodecs> codecs = default_codec_matrix();
  LinkParams link;
  double window_seconds = 0;   // > 0: time window; 0: run exactly `cycles` inputs
  std::size_t cycles = 32;
  std::size_t distinct_inputs = 8;
  double delay_per_layer_ms = 0;
  double jitter_ms = 0;
  std::uint64_t seed = 1;
  std::size_t chunk_bytes = ChunkConfig::kDefaultChunkBytes;
  std::size_t in_flight = 16;
  EnergyParams energy;
  BenchMode mode = BenchMode::InProcess;
  std::string compute_exe;  // binary with a `compute` subcommand, for Process mode

  /// text, text+lz, bin32, bin32+lz applied to weights and data; the
  /// architecture is text, compressed whenever the other two are.
  static std::vector<ClassCodecs> default_codec_matrix() {
    std::vector<ClassCodecs> out;
    for (const bool binary : {false, true}) {
      for (const auto c : {Compression::None, Compression::LZ}) {
        const auto spec = binary ? CodecSpec::binary(32, c) : CodecSpec::text(c);
        out.push_back(ClassCodecs{CodecSpec::text(c), spec, spec});
      }
    }
    return out;
  }

  void check() const {
    if (node_counts.empty()) fail(Errc::InvalidArgument, "plan has no node counts");
    for (auto k : node_counts) {
      if (k < 1) fail(Errc::InvalidArgument, "node counts must be >= 1");
    }
    if (codecs.empty()) fail(Errc::InvalidArgument, "plan has no codec configurations");
    for (const auto& c : codecs) {
      if (c.architecture.serialization != Serialization::TextArray) {
        fail(Errc::InvalidArgument, "architecture codec must be text");
      }
    }
    if (link.latency_ms < 0 || link.bandwidth_mbps < 0) {
      fail(Errc::InvalidArgument, "link latency and bandwidth must be >= 0");
    }
    if (window_seconds < 0) fail(Errc::InvalidArgument, "window_seconds must be >= 0");
    if (window_seconds == 0 && cycles == 0) {
      fail(Errc::InvalidArgument, "need cycles > 0 when window_seconds is 0");
    }
    if (distinct_inputs == 0) fail(Errc::InvalidArgument, "inputs must be >= 1");
    if (delay_per_layer_ms < 0 || jitter_ms < 0) {
      fail(Errc::InvalidArgument, "delays must be >= 0");
    }
    if (in_flight == 0) fail(Errc::InvalidArgument, "in_flight must be >= 1");
    ChunkConfig::of(chunk_bytes);
    energy.check();
  }
};

namespace plan_detail {

template <typename T>
T number(const toml::node& n, std::string_view key) {
  if constexpr (std::is_floating_point_v<T>) {
    if (auto v = n.value<double>()) return static_cast<T>(*v);
  } else {
    if (auto v = n.value<std::int64_t>()) {
      if (*v < 0) fail(Errc::InvalidArgument, std::string(key) + " must be >= 0");
      return static_cast<T>(*v);
    }
  }
  fail(Errc::InvalidArgument, std::string(key) + " has the wrong type");
}

inline std::string text(const toml::node& n, std::string_view key) {
  if (auto v = n.value<std::string>()) return *v;
  fail(Errc::InvalidArgument, std::string(key) + " must be a string");
}

inline void reject_unknown(const toml::table& t, std::initializer_list<std::string_view> known,
                           std::string_view where) {
  for (const auto& [k, v] : t) {
    if (std::find(known.begin(), known.end(), k.str()) == known.end()) {
      fail(Errc::InvalidArgument,
           "unknown key '" + std::string(k.str()) + "' in " + std::string(where));
    }
  }
}

}  // namespace plan_detail

/// Reads a plan from TOML text. Absent keys keep their defaults; unknown
/// keys are rejected.
///
///   seed, node_counts, window_seconds, cycles, inputs, delay_per_layer_ms,
///   jitter_ms, chunk_bytes, in_flight, mode ("in-process" | "process")
///   [model]   kind ("chain" | "resnet"), layers, width, blocks, channels,
///             hw, classes, batch
///   [link]    latency_ms, bandwidth_mbps
///   [energy]  tdp_watts, joules_per_bit
///   [[codecs]] architecture, weights, data   (e.g. "text+lz", "bin32")
inline BenchPlan parse_plan(std::string_view source) {
  using namespace plan_detail;
  toml::table root;
  try {
    root = toml::parse(source);
  } catch (const toml::parse_error& e) {
    fail(Errc::InvalidArgument, std::string("plan: ") + std::string(e.description()));
  }
  reject_unknown(root,
                 {"seed", "node_counts", "window_seconds", "cycles", "inputs",
                  "delay_per_layer_ms", "jitter_ms", "chunk_bytes", "in_flight", "mode", "model",
                  "link", "energy", "codecs"},
                 "plan");
  BenchPlan p;
  for (const auto& [key, node] : root) {
    const std::string_view k = key.str();
    if (k == "seed") p.seed = number<std::uint64_t>(node, k);
    if (k == "window_seconds") p.window_seconds = number<double>(node, k);
    if (k == "cycles") p.cycles = number<std::size_t>(node, k);
    if (k == "inputs") p.distinct_inputs = number<std::size_t>(node, k);
    if (k == "delay_per_layer_ms") p.delay_per_layer_ms = number<double>(node, k);
    if (k == "jitter_ms") p.jitter_ms = number<double>(node, k);
    if (k == "chunk_bytes") p.chunk_bytes = number<std::size_t>(node, k);
    if (k == "in_flight") p.in_flight = number<std::size_t>(node, k);
    if (k == "mode") {
      const auto m = text(node, k);
      if (m == "in-process") {
        p.mode = BenchMode::InProcess;
      } else if (m == "process") {
        p.mode = BenchMode::Process;
      } else {
        fail(Errc::InvalidArgument, "mode must be \"in-process\" or \"process\"");
      }
    }
    if (k == "node_counts") {
      const auto* arr = node.as_array();
      if (!arr) fail(Errc::InvalidArgument, "node_counts must be an array");
      p.node_counts.clear();
      for (const auto& v : *arr) p.node_counts.push_back(number<std::size_t>(v, k));
    }
    if (k == "model") {
      const auto* t = node.as_table();
      if (!t) fail(Errc::InvalidArgument, "[model] must be a table");
      reject_unknown(*t, {"kind", "layers", "width", "blocks", "channels", "hw", "classes", "batch"},
                     "[model]");
      for (const auto& [mk, mv] : *t) {
        const std::string_view m = mk.str();
        if (m == "kind") {
          const auto kind = text(mv, m);
          if (kind == "chain") {
            p.model.kind = ModelSpec::Kind::Chain;
          } else if (kind == "resnet") {
            p.model.kind = ModelSpec::Kind::ResnetLike;
          } else {
            fail(Errc::InvalidArgument, "model kind must be \"chain\" or \"resnet\"");
          }
        }
        if (m == "layers") p.model.layers = number<std::size_t>(mv, m);
        if (m == "width") p.model.width = number<std::size_t>(mv, m);
        if (m == "blocks") p.model.blocks = number<std::size_t>(mv, m);
        if (m == "channels") p.model.channels = number<std::size_t>(mv, m);
        if (m == "hw") p.model.hw = number<std::size_t>(mv, m);
        if (m == "classes") p.model.classes = number<std::size_t>(mv, m);
        if (m == "batch") p.model.batch = number<std::size_t>(mv, m);
      }
    }
    if (k == "link") {
      const auto* t = node.as_table();
      if (!t) fail(Errc::InvalidArgument, "[link] must be a table");
      reject_unknown(*t, {"latency_ms", "bandwidth_mbps"}, "[link]");
      if (auto* v = t->get("latency_ms")) p.link.latency_ms = number<double>(*v, "latency_ms");
      if (auto* v = t->get("bandwidth_mbps")) {
        p.link.bandwidth_mbps = number<double>(*v, "bandwidth_mbps");
      }
    }
    if (k == "energy") {
      const auto* t = node.as_table();
      if (!t) fail(Errc::InvalidArgument, "[energy] must be a table");
      reject_unknown(*t, {"tdp_watts", "joules_per_bit"}, "[energy]");
      if (auto* v = t->get("tdp_watts")) p.energy.tdp_watts = number<double>(*v, "tdp_watts");
      if (auto* v = t->get("joules_per_bit")) {
        p.energy.joules_per_bit = number<double>(*v, "joules_per_bit");
      }
    }
    if (k == "codecs") {
      const auto* arr = node.as_array();
      if (!arr) fail(Errc::InvalidArgument, "[[codecs]] must be an array of tables");
      p.codecs.clear();
      for (const auto& entry : *arr) {
        const auto* t = entry.as_table();
        if (!t) fail(Errc::InvalidArgument, "[[codecs]] entries must be tables");
        reject_unknown(*t, {"architecture", "weights", "data"}, "[[codecs]]");
        ClassCodecs c;
        if (auto* v = t->get("architecture")) c.architecture = CodecSpec::parse(text(*v, "architecture"));
        if (auto* v = t->get("weights")) c.weights = CodecSpec::parse(text(*v, "weights"));
        if (auto* v = t->get("data")) c.data = CodecSpec::parse(text(*v, "data"));
        p.codecs.push_back(c);
      }
    }
  }
  p.check();
  return p;
}

inline BenchPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open plan " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_plan(text.str());
}

/// k compute nodes as child processes of `exe compute ...`, each announcing
/// its ports on stdout. One supervisor thread per child forwards the rest of
/// its stdout to stderr and collects its exit status.
class ProcessCluster {
 public:
  static constexpr std::string_view kReadyTag = "DEFER-READY";

  ProcessCluster(std::size_t k, const std::string& exe, const ComputeOptions& base,
                 std::chrono::milliseconds ready_timeout = std::chrono::seconds(10))
      : children_(k) {
    try {
      for (std::size_t i = 0; i < k; ++i) spawn(i, exe, base, ready_timeout);
    } catch (...) {
      terminate();
      throw;
    }
  }

  ProcessCluster(const ProcessCluster&) = delete;
  ProcessCluster& operator=(const ProcessCluster&) = delete;

  ~ProcessCluster() { terminate(); }

  std::size_t size() const { return children_.size(); }
  std::vector<NodeAddress> addresses() const {
    std::vector<NodeAddress> out;
    for (const auto& c : children_) out.push_back(c.address);
    return out;
  }
  pid_t pid(std::size_t i) const { return children_.at(i).pid; }

  /// Waits up to `timeout` for every child to exit, killing stragglers.
  /// Throws ChildCrashed naming the first child that did not exit with 0.
  void join(std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < deadline && !all_exited()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    const auto first = crashed(std::chrono::milliseconds(0));
    terminate();
    const auto i = first ? first : crashed(std::chrono::milliseconds(0));
    if (i) {
      fail_node(Errc::ChildCrashed, *i,
                "compute node " + std::to_string(*i) + " " + describe_status(status(*i)));
    }
  }

  /// Kills every child still running and joins the supervisors.
  void terminate() {
    {
      std::lock_guard lock(mu_);
      for (auto& c : children_) {
        if (c.pid > 0 && !c.exited) ::kill(c.pid, SIGKILL);
      }
    }
    for (auto& c : children_) {
      if (c.supervisor.joinable()) c.supervisor.join();
    }
  }

  /// Encoded status: exit code, or -signal. Valid once the child exited.
  int status(std::size_t i) {
    std::lock_guard lock(mu_);
    return children_.at(i).status;
  }

  /// The child that crashed first, waiting up to `grace` for one to appear.
  /// Deaths by signal rank before non-zero exits, since a node whose peer
  /// died exits non-zero too; ties go to the earliest exit.
  std::optional<std::size_t> crashed(std::chrono::milliseconds grace) {
    using Clock = std::chrono::steady_clock;
    constexpr auto kSettle = std::chrono::milliseconds(100);
    const auto deadline = Clock::now() + grace;
    std::optional<Clock::time_point> seen;
    while (true) {
      std::optional<std::size_t> first;
      bool all = true;
      {
        std::lock_guard lock(mu_);
        auto key = [](const Child& x) { return std::pair(x.status > 0, x.exit_rank); };
        for (std::size_t i = 0; i < children_.size(); ++i) {
          const auto& c = children_[i];
          all = all && c.exited;
          if (!c.exited || c.status == 0) continue;
          if (!first || key(c) < key(children_[*first])) first = i;
        }
        // A plain non-zero exit may be the echo of a peer's death; give the
        // peer's supervisor a moment to report it.
        if (first && (children_[*first].status < 0 || all)) return first;
      }
      const auto now = Clock::now();
      if (first && !seen) seen = now;
      if (first && now - *seen >= kSettle) return first;
      if (now >= deadline) return first;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }


  static std::string describe_status(int s) {
    return s < 0 ? "killed by signal " + std::to_string(-s) : "exited with status " + std::to_string(s);
  }

 private:
  struct Child {
    pid_t pid = -1;
    int out_fd = -1;
    NodeAddress address;
    std::thread supervisor;
    bool exited = false;  // guarded by mu_, as are status and exit_rank
    int status = 0;
    std::size_t exit_rank = 0;
  };

  bool all_exited() {
    std::lock_guard lock(mu_);
    for (const auto& c : children_) {
      if (c.pid > 0 && !c.exited) return false;
    }
    return true;
  }

  static std::vector<std::string> compute_args(const std::string& exe, const ComputeOptions& o) {
    auto num = [](double v) {
      std::ostringstream s;
      s.precision(17);
      s << v;
      return s.str();
    };
    return {exe, "compute", "--host", o.host, "--model-port", "0", "--weights-port", "0",
            "--data-port", "0", "--delay-per-layer-ms", num(o.delay_per_layer_ms),
            "--jitter-ms", num(o.jitter_ms), "--seed", std::to_string(o.seed),
            "--latency-ms", num(o.link.latency_ms), "--bandwidth-mbps", num(o.link.bandwidth_mbps),
            "--chunk-bytes", std::to_string(o.chunk.chunk_bytes), "--announce"};
  }

  void spawn(std::size_t i, const std::string& exe, ComputeOptions opt,
             std::chrono::milliseconds ready_timeout) {
    opt.seed = opt.seed * 1000 + i;
    const auto args = compute_args(exe, opt);
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);

    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) fail(Errc::Io, "pipe failed");
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, fds[1], STDOUT_FILENO);
    pid_t pid = -1;
    const int rc = ::posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(fds[1]);
    if (rc != 0) {
      ::close(fds[0]);
      fail_node(Errc::ChildCrashed, i, "cannot start " + exe + ": " + std::strerror(rc));
    }
    Child& c = children_[i];
    c.pid = pid;
    c.out_fd = fds[0];
    c.supervisor = std::thread([this, i] { supervise(i); });

    std::string line;
    {
      std::unique_lock lock(mu_);
      if (!ready_cv_.wait_for(lock, ready_timeout, [&] { return ready_.count(i) || c.exited; })) {
        fail_node(Errc::ChildCrashed, i, "compute node " + std::to_string(i) + " never announced");
      }
      if (!ready_.count(i)) {
        fail_node(Errc::ChildCrashed, i, "compute node " + std::to_string(i) + " exited at startup");
      }
      line = ready_[i];
    }
    std::istringstream in(line);
    std::string tag;
    std::uint16_t mp = 0, wp = 0, dp = 0;
    in >> tag >> mp >> wp >> dp;
    if (tag != kReadyTag || !in) {
      fail_node(Errc::ChildCrashed, i, "bad announcement from node " + std::to_string(i) + ": " + line);
    }
    c.address = NodeAddress{opt.host, mp, wp, dp};
  }

  void supervise(std::size_t i) {
    Child& c = children_[i];
    std::string pending;
    bool announced = false;
    char buf[4096];
    while (true) {
      const ssize_t n = ::read(c.out_fd, buf, sizeof(buf));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      pending.append(buf, std::size_t(n));
      for (auto nl = pending.find('\n'); nl != std::string::npos; nl = pending.find('\n')) {
        std::string line = pending.substr(0, nl);
        pending.erase(0, nl + 1);
        if (!announced && line.starts_with(kReadyTag)) {
          announced = true;
          std::lock_guard lock(mu_);
          ready_[i] = line;
          ready_cv_.notify_all();
        } else {
          std::cerr << "[node " << i << "] " << line << '\n';
        }
      }
    }
    ::close(c.out_fd);
    // Wait without reaping so terminate() never signals a recycled pid.
    siginfo_t info{};
    while (::waitid(P_PID, id_t(c.pid), &info, WEXITED | WNOWAIT) != 0 && errno == EINTR) {
    }
    std::lock_guard lock(mu_);
    int raw = 0;
    ::waitpid(c.pid, &raw, 0);
    c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -WTERMSIG(raw);
    c.exited = true;
    c.exit_rank = exits_++;
    ready_cv_.notify_all();
  }

  std::vector<Child> children_;
  std::mutex mu_;
  std::condition_variable ready_cv_;
  std::map<std::size_t, std::string> ready_;
  std::size_t exits_ = 0;
};

/// One (node count, codec configuration) measurement.
struct BenchRun {
  std::size_t nodes = 0;
  ClassCodecs codecs;
  MetricsReport report;

  bool accounting_exact() const { return report.payload_bytes() == report.transport_bytes(); }
};

struct BenchResult {
  std::string model;
  EnergyParams energy;
  std::vector<BenchRun> runs;

  std::vector<CsvRow> rows() const {
    std::vector<CsvRow> out;
    for (const auto& r : runs) {
      for (auto& row : csv_rows(model, r.report, r.codecs, energy)) out.push_back(std::move(row));
    }
    return out;
  }

  void write_csv(std::ostream& out) const {
    out << kCsvHeader << '\n';
    for (const auto& row : rows()) write_csv_row(out, row);
  }

  void write_summary(std::ostream& out) const {
    for (const auto& r : runs) {
      const auto per_node = per_node_energy(r.report, energy);
      double mean = 0;
      for (double e : per_node) mean += e / double(per_node.size());
      char buf[320];
      std::snprintf(buf, sizeof(buf),
                    "%s k=%zu weights=%s data=%s cycles=%llu throughput=%.4f/s "
                    "payload=%.6f MB node_energy_mean=%.6f J accounting=%s\n",
                    model.c_str(), r.nodes, r.codecs.weights.name().c_str(),
                    r.codecs.data.name().c_str(),
                    static_cast<unsigned long long>(r.report.cycles_completed),
                    r.report.throughput(), double(r.report.payload_bytes()) / 1e6, mean,
                    r.accounting_exact() ? "exact" : "MISMATCH");
      out << buf;
    }
  }
};

/// Inputs for a plan: `distinct_inputs` seeded tensors, cycled round-robin.
inline std::vector<Tensor> bench_inputs(const BenchPlan& plan, const ModelGraph& g) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < plan.distinct_inputs; ++i) {
    out.push_back(synthetic::random_tensor(g.input_shape(), plan.seed * 1000003 + i));
  }
  return out;
}

namespace bench_detail {

inline MetricsReport drive(const ModelGraph& g, const std::vector<Tensor>& inputs,
                           const BenchPlan& plan, std::vector<NodeAddress> nodes,
                           const ClassCodecs& codecs) {
  ChainConfig cfg;
  cfg.nodes = std::move(nodes);
  cfg.codecs = codecs;
  cfg.chunk = ChunkConfig::of(plan.chunk_bytes);
  cfg.window = plan.in_flight;
  cfg.link = plan.link;
  auto chain = ConfiguredChain::configure(g, cfg);
  if (plan.window_seconds > 0) {
    chain->measure_throughput(inputs, plan.window_seconds);
  } else {
    chain->infer_stream(
        plan.cycles, [&](std::size_t i) -> const Tensor& { return inputs[i % inputs.size()]; },
        [](std::size_t, Tensor) {});
  }
  return chain->shutdown();
}

inline ComputeOptions node_options(const BenchPlan& plan) {
  ComputeOptions o;
  o.delay_per_layer_ms = plan.delay_per_layer_ms;
  o.jitter_ms = plan.jitter_ms;
  o.seed = plan.seed;
  o.link = plan.link;
  o.chunk = ChunkConfig::of(plan.chunk_bytes);
  return o;
}

}  // namespace bench_detail

/// For every node count and codec configuration: start k compute nodes,
/// configure a chain, run the workload, shut down and collect metrics.
/// Model, weights and inputs depend only on the plan's seed.
inline BenchResult run_bench(const BenchPlan& plan) {
  plan.check();
  if (plan.mode == BenchMode::Process && plan.compute_exe.empty()) {
    fail(Errc::InvalidArgument, "process mode needs the compute executable");
  }
  const ModelGraph g = plan.model.build(plan.seed);
  const auto inputs = bench_inputs(plan, g);
  BenchResult result{plan.model.name(), plan.energy, {}};
  for (const auto k : plan.node_counts) {
    for (const auto& codecs : plan.codecs) {
      BenchRun run{k, codecs, {}};
      const auto opts = bench_detail::node_options(plan);
      if (plan.mode == BenchMode::InProcess) {
        LocalCluster cluster(k, opts);
        run.report = bench_detail::drive(g, inputs, plan, cluster.addresses(), codecs);
        cluster.join();
      } else {
        ProcessCluster cluster(k, plan.compute_exe, opts);
        try {
          run.report = bench_detail::drive(g, inputs, plan, cluster.addresses(), codecs);
        } catch (const Error& e) {
          // A dead child explains a broken chain better than the chain error.
          if (const auto i = cluster.crashed(std::chrono::milliseconds(1000))) {
            fail_node(Errc::ChildCrashed, *i,
                      "compute node " + std::to_string(*i) + " " +
                          ProcessCluster::describe_status(cluster.status(*i)) + " (" + e.what() + ")");
          }
          throw;
        }
        cluster.join();
      }
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

}  // namespace defer
