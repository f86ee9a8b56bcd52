#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "defer/defer.hpp"

namespace fs = std::filesystem;
using namespace defer;

namespace {

// Tensor files are self-delimiting, so a stream is just their concatenation.
std::optional<Tensor> read_tensor(std::istream& in) {
  std::uint8_t head[8];
  if (!in.read(reinterpret_cast<char*>(head), 8)) {
    if (in.gcount() == 0) return std::nullopt;
    fail(Errc::MalformedBlob, "truncated tensor header");
  }
  Bytes bytes(head, head + 8);
  const auto rank = get_le<std::uint64_t>(head);
  if (rank == 0 || rank > 16) fail(Errc::MalformedBlob, "bad tensor rank");
  std::size_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    std::uint8_t e[8];
    if (!in.read(reinterpret_cast<char*>(e), 8)) fail(Errc::MalformedBlob, "truncated shape");
    bytes.insert(bytes.end(), e, e + 8);
    count *= static_cast<std::size_t>(get_le<std::uint64_t>(e));
  }
  const std::size_t body = bytes.size();
  bytes.resize(body + count * 4);
  if (!in.read(reinterpret_cast<char*>(bytes.data() + body), std::streamsize(count * 4))) {
    fail(Errc::MalformedBlob, "truncated tensor body");
  }
  return parse_tensor_file(bytes);
}

void write_tensor(std::ostream& out, const Tensor& t) {
  const auto bytes = tensor_file_bytes(t);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::vector<Tensor> read_inputs(const std::string& source) {
  std::vector<Tensor> out;
  auto drain = [&](std::istream& in) {
    while (auto t = read_tensor(in)) out.push_back(std::move(*t));
  };
  if (source == "-") {
    drain(std::cin);
  } else if (fs::is_directory(source)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(source)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(read_tensor_file(f));
  } else {
    std::ifstream in(source, std::ios::binary);
    if (!in) fail(Errc::Io, "cannot open " + source);
    drain(in);
  }
  return out;
}

/// Writes tensors to a directory (one file each), a stream file, or stdout.
class TensorWriter {
 public:
  explicit TensorWriter(const std::string& target) : target_(target) {
    if (target == "-") return;
    if (fs::is_directory(target) || target.ends_with('/')) {
      fs::create_directories(target);
      dir_ = true;
      return;
    }
    file_.open(target, std::ios::binary | std::ios::trunc);
    if (!file_) fail(Errc::Io, "cannot write " + target);
  }

  void write(std::size_t i, const Tensor& t) {
    if (dir_) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06zu.tensor", i);
      write_tensor_file(fs::path(target_) / name, t);
    } else {
      write_tensor(target_ == "-" ? std::cout : file_, t);
    }
  }

 private:
  std::string target_;
  bool dir_ = false;
  std::ofstream file_;
};

std::vector<NodeAddress> parse_nodes(const std::string& list) {
  std::vector<NodeAddress> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const auto item = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.push_back(NodeAddress::parse(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) fail(Errc::InvalidArgument, "--nodes lists no node");
  return out;
}

void write_csv_to(const std::string& target, const std::function<void(std::ostream&)>& body) {
  if (target == "-") {
    body(std::cout);
    return;
  }
  std::ofstream out(target, std::ios::trunc);
  if (!out) fail(Errc::Io, "cannot write " + target);
  body(out);
}

std::string shape_cell(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

// ---- subcommands ----

struct DispatchArgs {
  std::string model, nodes, inputs = "-", outputs, csv = "-";
  std::string data_codec = "bin32+lz", weights_codec = "bin32+lz", arch_codec = "text";
  std::size_t chunk_bytes = ChunkConfig::kDefaultChunkBytes;
  std::size_t window = 16;
  double latency_ms = 0, bandwidth_mbps = 0;
};

int dispatch(const DispatchArgs& a) {
  if (a.outputs == "-" && a.csv == "-") {
    fail(Errc::InvalidArgument, "results and CSV cannot both go to stdout");
  }
  const auto graph = load_model(a.model);
  ChainConfig cfg;
  cfg.nodes = parse_nodes(a.nodes);
  cfg.codecs = ClassCodecs{CodecSpec::parse(a.arch_codec), CodecSpec::parse(a.weights_codec),
                           CodecSpec::parse(a.data_codec)};
  cfg.chunk = ChunkConfig::of(a.chunk_bytes);
  cfg.window = a.window;
  cfg.link = LinkParams{a.latency_ms, a.bandwidth_mbps};
  const auto inputs = read_inputs(a.inputs);
  auto chain = ConfiguredChain::configure(graph, cfg);
  TensorWriter writer(a.outputs);
  chain->infer_stream(
      inputs.size(), [&](std::size_t i) -> const Tensor& { return inputs[i]; },
      [&](std::size_t i, Tensor t) { writer.write(i, t); });
  const auto report = chain->shutdown();
  write_csv_to(a.csv, [&](std::ostream& out) {
    out << kCsvHeader << '\n';
    for (const auto& row : csv_rows(fs::path(a.model).filename().string(), report, cfg.codecs)) {
      write_csv_row(out, row);
    }
  });
  return 0;
}

struct ComputeArgs {
  ComputeOptions opt;
  std::size_t chunk_bytes = ChunkConfig::kDefaultChunkBytes;
  std::string log_metrics;
  bool announce = false;
};

int compute(ComputeArgs a) {
  a.opt.chunk = ChunkConfig::of(a.chunk_bytes);
  ComputeNode node(a.opt);
  if (a.announce) {
    std::cout << ProcessCluster::kReadyTag << ' ' << node.model_endpoint().port << ' '
              << node.weights_endpoint().port << ' ' << node.data_endpoint().port << std::endl;
  } else {
    std::cerr << "compute node listening: model " << node.model_endpoint().str() << ", weights "
              << node.weights_endpoint().str() << ", data " << node.data_endpoint().str() << '\n';
  }
  auto log = [&] {
    if (a.log_metrics.empty()) return;
    std::ofstream out(a.log_metrics, std::ios::trunc);
    out << to_json(node.metrics()).dump(2) << '\n';
  };
  try {
    node.run();
  } catch (...) {
    log();
    throw;
  }
  log();
  return 0;
}

int bench(const std::string& plan_path, const std::string& out, const std::string& mode) {
  auto plan = load_plan(plan_path);
  if (mode == "process") plan.mode = BenchMode::Process;
  if (mode == "in-process") plan.mode = BenchMode::InProcess;
  plan.compute_exe = fs::read_symlink("/proc/self/exe").string();
  const auto result = run_bench(plan);
  write_csv_to(out, [&](std::ostream& o) { result.write_csv(o); });
  result.write_summary(std::cerr);
  for (const auto& r : result.runs) {
    if (!r.accounting_exact()) return 2;
  }
  return 0;
}

int inspect(const std::string& model, std::size_t k, const std::string& csv) {
  const auto graph = load_model(model);
  const auto parts = partition_model(graph, auto_cuts(graph, k));
  for (const auto& p : parts) {
    std::cout << "partition " << p.index << '\n'
              << "  layers: " << p.layer_count() << '\n'
              << "  weight_bytes: " << p.graph.weight_bytes() << '\n'
              << "  input_shape: " << shape_string(p.input_shape) << '\n'
              << "  cut_shape: " << shape_string(p.output_shape) << '\n'
              << "  ids:";
    for (const auto& id : topo_order(p.graph)) {
      if (p.graph.at(id).kind != LayerKind::Input) std::cout << ' ' << id;
    }
    std::cout << '\n';
  }
  if (csv.empty()) return 0;
  write_csv_to(csv, [&](std::ostream& out) {
    out << "partition,layer_count,weight_bytes,input_shape,cut_shape,layer_ids\n";
    for (const auto& p : parts) {
      out << p.index << ',' << p.layer_count() << ',' << p.graph.weight_bytes() << ','
          << shape_cell(p.input_shape) << ',' << shape_cell(p.output_shape) << ',';
      bool first = true;
      for (const auto& id : topo_order(p.graph)) {
        if (p.graph.at(id).kind == LayerKind::Input) continue;
        out << (first ? "" : " ") << id;
        first = false;
      }
      out << '\n';
    }
  });
  return 0;
}

int gen_model(const ModelSpec& spec, const std::string& init, std::uint64_t seed,
              const std::string& out) {
  const auto w = init == "uniform" ? synthetic::WeightInit::Uniform : synthetic::WeightInit::Quantized;
  const auto g = spec.kind == ModelSpec::Kind::Chain
                     ? synthetic::chain(spec.layers, spec.width, spec.batch, seed, w)
                     : synthetic::resnet_like(spec.blocks, spec.channels, spec.hw, spec.batch,
                                              seed, w, spec.classes);
  save_model(out, g);
  std::cerr << "wrote " << spec.name() << " (" << layer_count(g) << " layers, "
            << g.weight_bytes() << " weight bytes) to " << out << '\n';
  return 0;
}

int gen_inputs(const std::string& model, std::size_t count, std::uint64_t seed,
               const std::string& out) {
  const auto g = load_model(model);
  TensorWriter writer(out);
  for (std::size_t i = 0; i < count; ++i) {
    writer.write(i, synthetic::random_tensor(g.input_shape(), seed + i));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGPIPE, SIG_IGN);
  CLI::App app{"Pipelined inference over a chain of compute nodes"};
  app.require_subcommand(1);

  DispatchArgs d;
  auto* dispatch_cmd = app.add_subcommand("dispatch", "Partition a model, configure nodes, stream inputs");
  dispatch_cmd->add_option("--model", d.model, "Model directory")->required();
  dispatch_cmd->add_option("--nodes", d.nodes, "host:mp:wp:dp,... in chain order")->required();
  dispatch_cmd->add_option("--inputs", d.inputs, "Directory, tensor stream file, or - for stdin");
  dispatch_cmd->add_option("--outputs", d.outputs, "Directory (trailing /), stream file, or -")
      ->required();
  dispatch_cmd->add_option("--csv", d.csv, "Metrics CSV destination, - for stdout");
  dispatch_cmd->add_option("--data-codec", d.data_codec, "text|bin32|bin24|bin16...[+lz]");
  dispatch_cmd->add_option("--weights-codec", d.weights_codec, "Codec for weights");
  dispatch_cmd->add_option("--arch-codec", d.arch_codec, "text or text+lz");
  dispatch_cmd->add_option("--chunk-bytes", d.chunk_bytes, "Frame chunk size (>= 4096)");
  dispatch_cmd->add_option("--window", d.window, "Max inputs in flight");
  dispatch_cmd->add_option("--latency-ms", d.latency_ms, "Shaping on the first hop");
  dispatch_cmd->add_option("--bandwidth-mbps", d.bandwidth_mbps, "Shaping on the first hop, 0 = unlimited");

  ComputeArgs c;
  auto* compute_cmd = app.add_subcommand("compute", "Run one compute node until Shutdown");
  compute_cmd->add_option("--host", c.opt.host, "Address to bind");
  compute_cmd->add_option("--model-port", c.opt.model_port, "0 picks a free port")->required();
  compute_cmd->add_option("--weights-port", c.opt.weights_port)->required();
  compute_cmd->add_option("--data-port", c.opt.data_port)->required();
  compute_cmd->add_option("--log-metrics", c.log_metrics, "Write this node's metrics JSON on exit");
  compute_cmd->add_option("--delay-per-layer-ms", c.opt.delay_per_layer_ms, "Injected compute time");
  compute_cmd->add_option("--jitter-ms", c.opt.jitter_ms, "Extra uniform random delay per message");
  compute_cmd->add_option("--seed", c.opt.seed, "Jitter seed");
  compute_cmd->add_option("--latency-ms", c.opt.link.latency_ms, "Shaping on the outgoing hop");
  compute_cmd->add_option("--bandwidth-mbps", c.opt.link.bandwidth_mbps, "0 = unlimited");
  compute_cmd->add_option("--chunk-bytes", c.chunk_bytes, "Frame chunk size (>= 4096)");
  compute_cmd->add_option("--queue", c.opt.queue_capacity, "Reader to inference queue capacity");
  compute_cmd->add_flag("--announce", c.announce, "Print the bound ports on stdout");

  std::string plan, bench_out = "-", mode;
  auto* bench_cmd = app.add_subcommand("bench", "Run a bench plan and write the results CSV");
  bench_cmd->add_option("--plan", plan, "Plan file (TOML)")->required();
  bench_cmd->add_option("--out", bench_out, "Results CSV, - for stdout");
  bench_cmd->add_option("--mode", mode, "Override the plan: in-process or process")
      ->check(CLI::IsMember({"in-process", "process"}));

  std::string inspect_model, inspect_csv;
  std::size_t inspect_k = 1;
  auto* inspect_cmd = app.add_subcommand("inspect-partitions", "Show the partitions for k nodes");
  inspect_cmd->add_option("--model", inspect_model, "Model directory")->required();
  inspect_cmd->add_option("--nodes", inspect_k, "Node count")->required()->check(CLI::PositiveNumber);
  inspect_cmd->add_option("--csv", inspect_csv, "Also write CSV here, - for stdout");

  ModelSpec spec;
  std::string kind = "chain", init = "quantized", model_out;
  std::uint64_t model_seed = 1;
  auto* gen_model_cmd = app.add_subcommand("gen-model", "Write a synthetic model directory");
  gen_model_cmd->add_option("--kind", kind)->check(CLI::IsMember({"chain", "resnet"}));
  gen_model_cmd->add_option("--layers", spec.layers, "Chain depth");
  gen_model_cmd->add_option("--width", spec.width, "Chain width");
  gen_model_cmd->add_option("--blocks", spec.blocks, "Residual blocks");
  gen_model_cmd->add_option("--channels", spec.channels);
  gen_model_cmd->add_option("--hw", spec.hw, "Input height and width");
  gen_model_cmd->add_option("--classes", spec.classes);
  gen_model_cmd->add_option("--batch", spec.batch);
  gen_model_cmd->add_option("--init", init)->check(CLI::IsMember({"quantized", "uniform"}));
  gen_model_cmd->add_option("--seed", model_seed);
  gen_model_cmd->add_option("--out", model_out, "Model directory")->required();

  std::string inputs_model, inputs_out;
  std::size_t inputs_count = 1;
  std::uint64_t inputs_seed = 1;
  auto* gen_inputs_cmd = app.add_subcommand("gen-inputs", "Write random input tensors for a model");
  gen_inputs_cmd->add_option("--model", inputs_model, "Model directory")->required();
  gen_inputs_cmd->add_option("--count", inputs_count);
  gen_inputs_cmd->add_option("--seed", inputs_seed);
  gen_inputs_cmd->add_option("--out", inputs_out, "Directory (trailing /), stream file, or -")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*dispatch_cmd) return dispatch(d);
    if (*compute_cmd) return compute(c);
    if (*bench_cmd) return bench(plan, bench_out, mode);
    if (*inspect_cmd) return inspect(inspect_model, inspect_k, inspect_csv);
    if (*gen_model_cmd) {
      spec.kind = kind == "chain" ? ModelSpec::Kind::Chain : ModelSpec::Kind::ResnetLike;
      return gen_model(spec, init, model_seed, model_out);
    }
    if (*gen_inputs_cmd) return gen_inputs(inputs_model, inputs_count, inputs_seed, inputs_out);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]";
    if (e.node()) std::cerr << " node " << *e.node();
    if (!e.subject().empty()) std::cerr << " at " << e.subject();
    std::cerr << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
