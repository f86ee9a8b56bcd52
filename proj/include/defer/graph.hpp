#pragma once

#include <map>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "defer/error.hpp"
#include "defer/tensor.hpp"

namespace defer {

enum class LayerKind {
  Input,
  Dense,
  Conv2D,
  ReLU,
  MaxPool2D,
  GlobalAvgPool,
  Add,
  Flatten,
};

inline constexpr std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "Input";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2D: return "MaxPool2D";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
    case LayerKind::Add: return "Add";
    case LayerKind::Flatten: return "Flatten";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::Input, LayerKind::Dense, LayerKind::Conv2D,
                 LayerKind::ReLU, LayerKind::MaxPool2D,
                 LayerKind::GlobalAvgPool, LayerKind::Add,
                 LayerKind::Flatten}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

inline constexpr std::size_t input_arity(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return 0;
    case LayerKind::Add: return 2;
    default: return 1;
  }
}

inline constexpr bool has_weights(LayerKind k) {
  return k == LayerKind::Dense || k == LayerKind::Conv2D;
}

/// Kind-specific integer parameters. Unused fields stay zero.
///   Dense:     units
///   Conv2D:    filters, kernel, stride   ("same" padding)
///   MaxPool2D: kernel (pool size), stride ("same" padding)
///   Input:     shape (declared input shape, batch first)
struct LayerParams {
  std::size_t units = 0;
  std::size_t filters = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;
  Shape shape;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::Input;
  LayerParams params;
  /// Dense and Conv2D: {kernel, bias}. Empty for every other kind.
  std::vector<std::string> weight_refs;
  std::vector<std::string> inputs;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using WeightMap = std::map<std::string, Tensor>;

struct ModelGraph {
  std::vector<LayerSpec> layers;
  WeightMap weights;
  std::string entry;
  std::string exit;

  const LayerSpec* find(std::string_view id) const {
    for (const auto& l : layers) {
      if (l.id == id) return &l;
    }
    return nullptr;
  }

  const LayerSpec& at(std::string_view id) const {
    if (const auto* l = find(id)) return *l;
    fail(Errc::InvalidGraph, "unknown layer '" + std::string(id) + "'",
         std::string(id));
  }

  const Shape& input_shape() const { return at(entry).params.shape; }

  std::size_t weight_bytes() const {
    std::size_t n = 0;
    for (const auto& [name, t] : weights) n += t.byte_size();
    return n;
  }
};

/// Topological order with ties broken by lexicographic layer id.
inline std::vector<std::string> topo_order(const ModelGraph& graph) {
  std::unordered_map<std::string, std::size_t> pending;
  std::unordered_map<std::string, std::vector<std::string>> consumers;
  for (const auto& l : graph.layers) {
    if (!pending.emplace(l.id, l.inputs.size()).second) {
      fail(Errc::InvalidGraph, "duplicate layer id '" + l.id + "'", l.id);
    }
  }
  for (const auto& l : graph.layers) {
    for (const auto& in : l.inputs) {
      if (!pending.contains(in)) {
        fail(Errc::InvalidGraph,
             "layer '" + l.id + "' consumes unknown layer '" + in + "'", l.id);
      }
      consumers[in].push_back(l.id);
    }
  }

  std::priority_queue<std::string, std::vector<std::string>, std::greater<>>
      ready;
  for (const auto& [id, n] : pending) {
    if (n == 0) ready.push(id);
  }
  std::vector<std::string> order;
  order.reserve(graph.layers.size());
  while (!ready.empty()) {
    std::string id = ready.top();
    ready.pop();
    for (const auto& c : consumers[id]) {
      if (--pending[c] == 0) ready.push(c);
    }
    order.push_back(std::move(id));
  }
  if (order.size() != graph.layers.size()) {
    fail(Errc::CycleDetected, "layer graph contains a cycle");
  }
  return order;
}

namespace detail {

inline std::size_t same_out(std::size_t in, std::size_t stride) {
  return (in + stride - 1) / stride;
}

/// Leading pad for "same" padding: total = max((out-1)*s + k - in, 0).
inline std::size_t same_pad_before(std::size_t in, std::size_t k,
                                   std::size_t stride) {
  const std::size_t out = same_out(in, stride);
  const std::size_t need = (out - 1) * stride + k;
  return need > in ? (need - in) / 2 : 0;
}

[[noreturn]] inline void shape_error(const LayerSpec& l, const std::string& m) {
  fail(Errc::ShapeMismatch, "layer '" + l.id + "': " + m, l.id);
}

inline void expect_weight_shape(const LayerSpec& l, const WeightMap& weights,
                                std::size_t slot, const Shape& expected) {
  if (l.weight_refs.size() <= slot) return;
  auto it = weights.find(l.weight_refs[slot]);
  if (it == weights.end()) return;
  if (it->second.shape() != expected) {
    shape_error(l, "weight '" + l.weight_refs[slot] + "' has shape " +
                       shape_string(it->second.shape()) + ", expected " +
                       shape_string(expected));
  }
}

}  // namespace detail

/// Output shape of a single layer given its input shapes. Checks any weights
/// present in `weights` against the shapes the layer implies.
inline Shape layer_output_shape(const LayerSpec& l,
                                const std::vector<Shape>& in,
                                const WeightMap& weights) {
  using detail::shape_error;
  if (in.size() != input_arity(l.kind)) {
    shape_error(l, "expected " + std::to_string(input_arity(l.kind)) +
                       " inputs, got " + std::to_string(in.size()));
  }
  switch (l.kind) {
    case LayerKind::Input:
      return l.params.shape;
    case LayerKind::ReLU:
      return in[0];
    case LayerKind::Dense: {
      if (in[0].size() != 2) shape_error(l, "Dense expects rank-2 input");
      if (l.params.units == 0) shape_error(l, "Dense units must be >= 1");
      detail::expect_weight_shape(l, weights, 0, {in[0][1], l.params.units});
      detail::expect_weight_shape(l, weights, 1, {l.params.units});
      return {in[0][0], l.params.units};
    }
    case LayerKind::Conv2D: {
      if (in[0].size() != 4) shape_error(l, "Conv2D expects NHWC input");
      const auto& p = l.params;
      if (p.filters == 0 || p.kernel == 0 || p.stride == 0) {
        shape_error(l, "Conv2D filters, kernel and stride must be >= 1");
      }
      detail::expect_weight_shape(l, weights, 0,
                                  {p.kernel, p.kernel, in[0][3], p.filters});
      detail::expect_weight_shape(l, weights, 1, {p.filters});
      return {in[0][0], detail::same_out(in[0][1], p.stride),
              detail::same_out(in[0][2], p.stride), p.filters};
    }
    case LayerKind::MaxPool2D: {
      if (in[0].size() != 4) shape_error(l, "MaxPool2D expects NHWC input");
      if (l.params.kernel == 0 || l.params.stride == 0) {
        shape_error(l, "MaxPool2D kernel and stride must be >= 1");
      }
      return {in[0][0], detail::same_out(in[0][1], l.params.stride),
              detail::same_out(in[0][2], l.params.stride), in[0][3]};
    }
    case LayerKind::GlobalAvgPool:
      if (in[0].size() != 4) shape_error(l, "GlobalAvgPool expects NHWC input");
      return {in[0][0], in[0][3]};
    case LayerKind::Add:
      if (in[0] != in[1]) {
        shape_error(l, "Add operands differ: " + shape_string(in[0]) + " vs " +
                           shape_string(in[1]));
      }
      return in[0];
    case LayerKind::Flatten: {
      if (in[0].size() < 2) shape_error(l, "Flatten expects rank >= 2");
      Shape rest(in[0].begin() + 1, in[0].end());
      return {in[0][0], element_count(rest)};
    }
  }
  shape_error(l, "unknown layer kind");
}

inline std::map<std::string, Shape> infer_shapes(const ModelGraph& graph,
                                                 const Shape& input_shape) {
  const auto& entry = graph.at(graph.entry);
  if (input_shape.size() != entry.params.shape.size()) {
    fail(Errc::ShapeMismatch,
         "input rank " + std::to_string(input_shape.size()) +
             " does not match declared rank " +
             std::to_string(entry.params.shape.size()),
         entry.id);
  }
  std::map<std::string, Shape> shapes;
  for (const auto& id : topo_order(graph)) {
    const auto& l = graph.at(id);
    if (l.kind == LayerKind::Input) {
      if (id != graph.entry) {
        fail(Errc::InvalidGraph, "stray Input layer '" + id + "'", id);
      }
      shapes[id] = input_shape;
      continue;
    }
    std::vector<Shape> in;
    for (const auto& src : l.inputs) in.push_back(shapes.at(src));
    shapes[id] = layer_output_shape(l, in, graph.weights);
  }
  return shapes;
}

/// Checks every ModelGraph invariant. Throws on the first violation.
inline void validate(const ModelGraph& graph) {
  std::size_t inputs = 0;
  for (const auto& l : graph.layers) {
    if (l.id.empty()) fail(Errc::InvalidGraph, "empty layer id");
    if (l.inputs.size() != input_arity(l.kind)) {
      fail(Errc::InvalidGraph,
           "layer '" + l.id + "' (" + std::string(to_string(l.kind)) +
               ") needs " + std::to_string(input_arity(l.kind)) + " inputs",
           l.id);
    }
    if (has_weights(l.kind) ? l.weight_refs.size() != 2
                            : !l.weight_refs.empty()) {
      fail(Errc::InvalidGraph, "layer '" + l.id + "' has wrong weight refs",
           l.id);
    }
    for (const auto& w : l.weight_refs) {
      if (!graph.weights.contains(w)) {
        fail(Errc::MissingWeight,
             "layer '" + l.id + "' references missing weight '" + w + "'",
             l.id);
      }
    }
    if (l.kind == LayerKind::Input) {
      ++inputs;
      if (l.id != graph.entry) {
        fail(Errc::InvalidGraph, "Input layer '" + l.id + "' is not the entry",
             l.id);
      }
      if (l.params.shape.empty()) {
        fail(Errc::InvalidGraph, "Input layer needs a declared shape", l.id);
      }
      for (auto e : l.params.shape) {
        if (e == 0) fail(Errc::InvalidGraph, "zero extent in input shape", l.id);
      }
    }
  }
  if (inputs != 1) {
    fail(Errc::InvalidGraph, "graph must have exactly one Input layer");
  }
  graph.at(graph.exit);

  const auto order = topo_order(graph);

  // Every layer must lie on an entry -> exit path.
  std::unordered_set<std::string> from_entry{graph.entry};
  for (const auto& id : order) {
    for (const auto& in : graph.at(id).inputs) {
      if (from_entry.contains(in)) {
        from_entry.insert(id);
        break;
      }
    }
  }
  std::unordered_set<std::string> to_exit{graph.exit};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!to_exit.contains(*it)) continue;
    for (const auto& in : graph.at(*it).inputs) to_exit.insert(in);
  }
  for (const auto& l : graph.layers) {
    if (!from_entry.contains(l.id) || !to_exit.contains(l.id)) {
      fail(Errc::InvalidGraph,
           "layer '" + l.id + "' is not on a path from entry to exit", l.id);
    }
  }

  infer_shapes(graph, graph.input_shape());
}

}  // namespace defer
