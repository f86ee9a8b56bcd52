#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "defer/codec.hpp"
#include "defer/graph.hpp"

namespace defer {

using json = nlohmann::json;

// ---- architecture (graph without weights) as JSON text ----

inline json layer_to_json(const LayerSpec& l) {
  json j;
  j["id"] = l.id;
  j["kind"] = std::string(to_string(l.kind));
  j["inputs"] = l.inputs;
  if (!l.weight_refs.empty()) j["weights"] = l.weight_refs;
  const auto& p = l.params;
  switch (l.kind) {
    case LayerKind::Input: j["shape"] = p.shape; break;
    case LayerKind::Dense: j["units"] = p.units; break;
    case LayerKind::Conv2D:
      j["filters"] = p.filters;
      j["kernel"] = p.kernel;
      j["stride"] = p.stride;
      break;
    case LayerKind::MaxPool2D:
      j["kernel"] = p.kernel;
      j["stride"] = p.stride;
      break;
    default: break;
  }
  return j;
}

inline LayerSpec layer_from_json(const json& j) {
  try {
    LayerSpec l;
    l.id = j.at("id").get<std::string>();
    auto kind = layer_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) fail(Errc::InvalidGraph, "unknown layer kind", l.id);
    l.kind = *kind;
    l.inputs = j.value("inputs", std::vector<std::string>{});
    l.weight_refs = j.value("weights", std::vector<std::string>{});
    l.params.units = j.value("units", std::size_t{0});
    l.params.filters = j.value("filters", std::size_t{0});
    l.params.kernel = j.value("kernel", std::size_t{0});
    l.params.stride = j.value("stride", std::size_t{0});
    l.params.shape = j.value("shape", Shape{});
    return l;
  } catch (const json::exception& e) {
    fail(Errc::InvalidGraph, std::string("bad layer record: ") + e.what());
  }
}

/// Layers are listed in topological order.
inline json graph_to_json(const ModelGraph& g) {
  json layers = json::array();
  for (const auto& id : topo_order(g)) layers.push_back(layer_to_json(g.at(id)));
  return json{{"entry", g.entry}, {"exit", g.exit}, {"layers", std::move(layers)}};
}

inline ModelGraph graph_from_json(const json& j) {
  try {
    ModelGraph g;
    g.entry = j.at("entry").get<std::string>();
    g.exit = j.at("exit").get<std::string>();
    for (const auto& l : j.at("layers")) g.layers.push_back(layer_from_json(l));
    return g;
  } catch (const json::exception& e) {
    fail(Errc::InvalidGraph, std::string("bad graph document: ") + e.what());
  }
}

// ---- weight sets: u32 count, then { u16 name_len, name, u64 blob_len, blob } ----

inline Bytes encode_weight_set(const WeightMap& weights, const CodecSpec& spec) {
  Bytes out;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [name, t] : weights) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    put_string(out, name);
    const Bytes blob = encode_bytes(spec, t);
    put_le<std::uint64_t>(out, blob.size());
    put_bytes(out, blob);
  }
  return out;
}

inline WeightMap decode_weight_set(ByteView b) {
  ByteReader r(b, Errc::MalformedBlob);
  WeightMap weights;
  const std::uint32_t count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = to_string(r.take(r.le<std::uint16_t>()));
    const std::uint64_t len = r.le<std::uint64_t>();
    if (len > r.remaining()) fail(Errc::MalformedBlob, "weight blob past end");
    weights.insert_or_assign(std::move(name), decode_bytes(r.take(static_cast<std::size_t>(len))));
  }
  if (!r.done()) fail(Errc::MalformedBlob, "trailing bytes after weight set");
  return weights;
}

// ---- tensor files: u64 rank, rank x u64 extents, float32 body ----

inline Bytes tensor_file_bytes(const Tensor& t) {
  Bytes out;
  put_le<std::uint64_t>(out, t.rank());
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), p, p + t.byte_size());
  return out;
}

inline Tensor parse_tensor_file(ByteView b) {
  ByteReader r(b, Errc::MalformedBlob);
  const std::uint64_t rank = r.le<std::uint64_t>();
  if (rank == 0 || rank > 16) fail(Errc::MalformedBlob, "bad tensor rank");
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>()));
  for (auto e : shape) {
    if (e == 0) fail(Errc::MalformedBlob, "zero extent in tensor file");
  }
  const std::size_t n = element_count(shape);
  if (r.remaining() != n * 4) fail(Errc::MalformedBlob, "tensor body length mismatch");
  std::vector<float> values(n);
  std::memcpy(values.data(), r.take(n * 4).data(), n * 4);
  return Tensor(std::move(shape), std::move(values));
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, ByteView data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  if (!out) fail(Errc::Io, "short write to " + path.string());
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, tensor_file_bytes(t));
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  return parse_tensor_file(read_file(path));
}

// ---- model directory: `graph` (JSON) plus one `<name>.weight` per weight ----

inline bool valid_weight_name(std::string_view name) {
  if (name.empty() || name.front() == '.') return false;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
    if (!ok) return false;
  }
  return true;
}

inline void save_model(const std::filesystem::path& dir, const ModelGraph& g) {
  validate(g);
  std::filesystem::create_directories(dir);
  const std::string text = graph_to_json(g).dump(2) + "\n";
  write_file(dir / "graph", as_bytes(text));
  for (const auto& [name, t] : g.weights) {
    if (!valid_weight_name(name)) {
      fail(Errc::InvalidArgument, "weight name '" + name + "' is not file-safe");
    }
    write_tensor_file(dir / (name + ".weight"), t);
  }
}

inline ModelGraph load_model(const std::filesystem::path& dir) {
  const Bytes text = read_file(dir / "graph");
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    fail(Errc::InvalidGraph, std::string("graph file: ") + e.what());
  }
  ModelGraph g = graph_from_json(j);
  for (const auto& l : g.layers) {
    for (const auto& w : l.weight_refs) {
      if (g.weights.contains(w)) continue;
      if (!valid_weight_name(w)) fail(Errc::InvalidGraph, "bad weight name '" + w + "'");
      const auto path = dir / (w + ".weight");
      if (!std::filesystem::exists(path)) {
        fail(Errc::MissingWeight, "missing weight file " + path.string(), l.id);
      }
      g.weights.emplace(w, read_tensor_file(path));
    }
  }
  validate(g);
  return g;
}

}  // namespace defer
