#pragma once

#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "defer/graph.hpp"

namespace defer {

namespace detail {

inline const Tensor& weight(const LayerSpec& l, const WeightMap& weights,
                            std::size_t slot) {
  if (l.weight_refs.size() <= slot) {
    fail(Errc::MissingWeight, "layer '" + l.id + "' has no weight slot " +
                                  std::to_string(slot),
         l.id);
  }
  auto it = weights.find(l.weight_refs[slot]);
  if (it == weights.end()) {
    fail(Errc::MissingWeight,
         "layer '" + l.id + "' missing weight '" + l.weight_refs[slot] + "'",
         l.id);
  }
  return it->second;
}

inline Tensor dense(const LayerSpec& l, const Tensor& x, const Tensor& kernel,
                    const Tensor& bias) {
  const std::size_t n = x.extent(0), in = x.extent(1), units = l.params.units;
  Tensor out({n, units});
  const float* xp = x.data();
  const float* kp = kernel.data();
  float* op = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t u = 0; u < units; ++u) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < in; ++i) acc += xp[b * in + i] * kp[i * units + u];
      op[b * units + u] = acc + bias[u];
    }
  }
  return out;
}

inline Tensor conv2d(const LayerSpec& l, const Tensor& x, const Tensor& kernel,
                     const Tensor& bias, const Shape& out_shape) {
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2),
                    c = x.extent(3);
  const std::size_t k = l.params.kernel, s = l.params.stride,
                    f = l.params.filters;
  const std::size_t oh = out_shape[1], ow = out_shape[2];
  const std::size_t pt = same_pad_before(h, k, s), pl = same_pad_before(w, k, s);
  Tensor out(out_shape);
  const float* xp = x.data();
  const float* kp = kernel.data();
  float* op = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t of = 0; of < f; ++of) {
          float acc = 0.0f;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ky) - std::ptrdiff_t(pt);
            if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kx) - std::ptrdiff_t(pl);
              if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
              const float* xrow = xp + ((b * h + iy) * w + ix) * c;
              const float* krow = kp + ((ky * k + kx) * c) * f + of;
              for (std::size_t ic = 0; ic < c; ++ic) acc += xrow[ic] * krow[ic * f];
            }
          }
          op[((b * oh + oy) * ow + ox) * f + of] = acc + bias[of];
        }
      }
    }
  }
  return out;
}

inline Tensor max_pool(const LayerSpec& l, const Tensor& x,
                       const Shape& out_shape) {
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2),
                    c = x.extent(3);
  const std::size_t k = l.params.kernel, s = l.params.stride;
  const std::size_t oh = out_shape[1], ow = out_shape[2];
  const std::size_t pt = same_pad_before(h, k, s), pl = same_pad_before(w, k, s);
  Tensor out(out_shape);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ky) - std::ptrdiff_t(pt);
            if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kx) - std::ptrdiff_t(pl);
              if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
              best = std::max(best, x[((b * h + iy) * w + ix) * c + ch]);
            }
          }
          out[((b * oh + oy) * ow + ox) * c + ch] = best;
        }
      }
    }
  }
  return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2),
                    c = x.extent(3);
  Tensor out({n, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < h * w; ++p) acc += x[(b * h * w + p) * c + ch];
      out[b * c + ch] = acc / float(h * w);
    }
  }
  return out;
}

}  // namespace detail

/// Evaluates one layer. Accumulations run innermost index ascending so the
/// result is bit-reproducible on a given platform.
inline Tensor forward(const LayerSpec& layer, std::span<const Tensor> inputs,
                      const WeightMap& weights) {
  std::vector<Shape> in_shapes;
  for (const auto& t : inputs) in_shapes.push_back(t.shape());
  if (has_weights(layer.kind)) {
    detail::weight(layer, weights, 0);
    detail::weight(layer, weights, 1);
  }
  const Shape out_shape = layer_output_shape(layer, in_shapes, weights);

  switch (layer.kind) {
    case LayerKind::Input:
      fail(Errc::InvalidGraph, "Input layers have no forward pass", layer.id);
    case LayerKind::Dense:
      return detail::dense(layer, inputs[0], detail::weight(layer, weights, 0),
                           detail::weight(layer, weights, 1));
    case LayerKind::Conv2D:
      return detail::conv2d(layer, inputs[0], detail::weight(layer, weights, 0),
                            detail::weight(layer, weights, 1), out_shape);
    case LayerKind::ReLU: {
      Tensor out = inputs[0];
      for (auto& v : out.values()) v = v > 0.0f ? v : 0.0f;
      return out;
    }
    case LayerKind::MaxPool2D:
      return detail::max_pool(layer, inputs[0], out_shape);
    case LayerKind::GlobalAvgPool:
      return detail::global_avg_pool(inputs[0]);
    case LayerKind::Add: {
      Tensor out = inputs[0];
      auto rhs = inputs[1].values();
      auto dst = out.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += rhs[i];
      return out;
    }
    case LayerKind::Flatten:
      return Tensor(out_shape,
                    std::vector<float>(inputs[0].values().begin(),
                                       inputs[0].values().end()));
  }
  fail(Errc::InvalidGraph, "unknown layer kind", layer.id);
}

/// Single-device evaluation: folds `forward` over `topo_order`.
inline Tensor run_model(const ModelGraph& graph, const Tensor& input) {
  const auto order = topo_order(graph);
  const auto& entry = graph.at(graph.entry);
  if (input.rank() != entry.params.shape.size()) {
    fail(Errc::ShapeMismatch,
         "input shape " + shape_string(input.shape()) +
             " does not match declared " + shape_string(entry.params.shape),
         entry.id);
  }

  std::unordered_map<std::string, std::size_t> remaining_uses;
  for (const auto& l : graph.layers) {
    for (const auto& in : l.inputs) ++remaining_uses[in];
  }

  std::unordered_map<std::string, Tensor> values;
  values.emplace(graph.entry, input);
  for (const auto& id : order) {
    if (id == graph.entry) continue;
    const auto& l = graph.at(id);
    std::vector<Tensor> args;
    args.reserve(l.inputs.size());
    for (const auto& in : l.inputs) {
      auto it = values.find(in);
      if (it == values.end()) {
        fail(Errc::InvalidGraph, "layer '" + id + "' input '" + in +
                                     "' was never produced",
             id);
      }
      if (--remaining_uses[in] == 0 && in != graph.exit) {
        args.push_back(std::move(it->second));
        values.erase(it);
      } else {
        args.push_back(it->second);
      }
    }
    values.insert_or_assign(id, forward(l, args, graph.weights));
  }
  auto it = values.find(graph.exit);
  if (it == values.end()) {
    fail(Errc::InvalidGraph, "exit layer '" + graph.exit + "' not produced");
  }
  return std::move(it->second);
}

}  // namespace defer
