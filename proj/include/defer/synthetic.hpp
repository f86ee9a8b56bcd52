#pragma once

// Seeded synthetic models, inputs and weight fixtures for tests and the
// benchmark harness.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <string>

#include "defer/graph.hpp"

namespace defer::synthetic {

/// How weight tensors are filled.
///   Uniform:   uniform in [-a, a], a = 1/sqrt(fan_in)
///   Quantized: 256 levels, q * 2^-7 / sqrt(fan_in) with q ~ N(0, 24) rounded
///              and clamped to [-128, 127]. Bounded entropy, so byte-level
///              compression has something realistic to find.
enum class WeightInit { Uniform, Quantized };

class Builder {
 public:
  Builder(std::uint64_t seed, WeightInit init) : rng_(seed), init_(init) {}

  std::string input(Shape shape) {
    LayerSpec l;
    l.id = "input";
    l.kind = LayerKind::Input;
    l.params.shape = std::move(shape);
    g_.entry = l.id;
    shapes_[l.id] = l.params.shape;
    return push(std::move(l));
  }

  std::string dense(const std::string& in, std::size_t units) {
    LayerSpec l = make(LayerKind::Dense, {in});
    l.params.units = units;
    const std::size_t fan_in = shapes_.at(in)[1];
    add_weights(l, {fan_in, units}, {units}, fan_in);
    return finish(std::move(l));
  }

  std::string conv(const std::string& in, std::size_t filters, std::size_t kernel,
                   std::size_t stride = 1) {
    LayerSpec l = make(LayerKind::Conv2D, {in});
    l.params.filters = filters;
    l.params.kernel = kernel;
    l.params.stride = stride;
    const std::size_t c = shapes_.at(in)[3];
    add_weights(l, {kernel, kernel, c, filters}, {filters}, kernel * kernel * c);
    return finish(std::move(l));
  }

  std::string relu(const std::string& in) { return finish(make(LayerKind::ReLU, {in})); }

  std::string max_pool(const std::string& in, std::size_t kernel, std::size_t stride) {
    LayerSpec l = make(LayerKind::MaxPool2D, {in});
    l.params.kernel = kernel;
    l.params.stride = stride;
    return finish(std::move(l));
  }

  std::string global_avg_pool(const std::string& in) {
    return finish(make(LayerKind::GlobalAvgPool, {in}));
  }
  std::string flatten(const std::string& in) { return finish(make(LayerKind::Flatten, {in})); }
  std::string add(const std::string& a, const std::string& b) {
    return finish(make(LayerKind::Add, {a, b}));
  }

  const Shape& shape(const std::string& id) const { return shapes_.at(id); }
  std::size_t layer_count() const { return g_.layers.size() - 1; }
  std::mt19937_64& rng() { return rng_; }

  ModelGraph build(const std::string& exit) {
    g_.exit = exit;
    validate(g_);
    return std::move(g_);
  }

 private:
  LayerSpec make(LayerKind kind, std::vector<std::string> inputs) {
    LayerSpec l;
    l.kind = kind;
    l.inputs = std::move(inputs);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "l%03zu_", next_++);
    l.id = std::string(buf) + std::string(to_string(kind));
    for (auto& c : l.id) c = char(std::tolower(static_cast<unsigned char>(c)));
    return l;
  }

  std::string finish(LayerSpec l) {
    std::vector<Shape> in;
    for (const auto& i : l.inputs) in.push_back(shapes_.at(i));
    shapes_[l.id] = layer_output_shape(l, in, g_.weights);
    return push(std::move(l));
  }

  std::string push(LayerSpec l) {
    std::string id = l.id;
    g_.layers.push_back(std::move(l));
    return id;
  }

  void add_weights(LayerSpec& l, Shape kernel, Shape bias, std::size_t fan_in) {
    l.weight_refs = {l.id + ".kernel", l.id + ".bias"};
    g_.weights.insert_or_assign(l.weight_refs[0], fill(std::move(kernel), fan_in));
    g_.weights.insert_or_assign(l.weight_refs[1], fill(std::move(bias), fan_in));
  }

  Tensor fill(Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const float a = 1.0f / std::sqrt(float(std::max<std::size_t>(fan_in, 1)));
    if (init_ == WeightInit::Uniform) {
      std::uniform_real_distribution<float> u(-a, a);
      for (auto& v : t.values()) v = u(rng_);
    } else {
      std::normal_distribution<float> n(0.0f, 24.0f);
      const float scale = a / 128.0f;
      for (auto& v : t.values()) {
        const float q = std::clamp(std::round(n(rng_)), -128.0f, 127.0f);
        v = q * scale;
      }
    }
    return t;
  }

  ModelGraph g_;
  std::map<std::string, Shape> shapes_;
  std::mt19937_64 rng_;
  WeightInit init_;
  std::size_t next_ = 1;
};

/// Input -> `layers` x Dense(width) (each optionally followed by ReLU,
/// counted as its own layer).
inline ModelGraph chain(std::size_t layers, std::size_t width, std::size_t batch,
                        std::uint64_t seed, WeightInit init = WeightInit::Uniform,
                        bool relu = false) {
  Builder b(seed, init);
  std::string x = b.input({batch, width});
  for (std::size_t i = 0; i < layers; ++i) {
    if (relu && i % 2 == 1) {
      x = b.relu(x);
    } else {
      x = b.dense(x, width);
    }
  }
  return b.build(x);
}

/// Conv stem, `blocks` residual diamonds (conv-relu-conv + skip add, relu),
/// global pooling and a dense head. 4 + 5 * blocks layers.
inline ModelGraph resnet_like(std::size_t blocks, std::size_t channels, std::size_t hw,
                              std::size_t batch, std::uint64_t seed,
                              WeightInit init = WeightInit::Uniform,
                              std::size_t classes = 10) {
  Builder b(seed, init);
  std::string x = b.input({batch, hw, hw, channels});
  x = b.relu(b.conv(x, channels, 3));
  for (std::size_t i = 0; i < blocks; ++i) {
    std::string y = b.conv(b.relu(b.conv(x, channels, 3)), channels, 3);
    x = b.relu(b.add(x, y));
  }
  x = b.dense(b.global_avg_pool(x), classes);
  return b.build(x);
}

/// Random small model with at most `max_layers` non-Input layers: either a
/// dense stack or a conv stack, mixing plain layers with residual diamonds.
inline ModelGraph random_model(std::uint64_t seed, std::size_t max_layers = 24) {
  Builder b(seed, WeightInit::Uniform);
  auto& rng = b.rng();
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  const std::size_t target = pick(1, max_layers);
  const bool conv = pick(0, 1) == 1;

  std::string x;
  if (conv) {
    x = b.input({pick(1, 2), pick(3, 8), pick(3, 8), pick(1, 4)});
  } else {
    x = b.input({pick(1, 3), pick(1, 12)});
  }
  // Leave room for a dense head on conv stacks.
  const std::size_t budget = conv && target >= 3 ? target - 2 : target;
  while (b.layer_count() < budget) {
    const std::size_t left = budget - b.layer_count();
    const std::size_t choice = pick(0, 9);
    if (left >= 4 && choice < 3) {
      std::string y;
      if (conv) {
        const std::size_t c = b.shape(x)[3];
        y = b.conv(b.relu(b.conv(x, c, pick(0, 1) ? 3 : 1)), c, pick(0, 1) ? 3 : 1);
      } else {
        const std::size_t w = b.shape(x)[1];
        y = b.dense(b.relu(b.dense(x, pick(1, 12))), w);
      }
      x = b.add(x, y);
    } else if (choice < 5) {
      x = b.relu(x);
    } else if (conv && choice == 5) {
      x = b.max_pool(x, pick(1, 3), pick(1, 2));
    } else if (conv) {
      x = b.conv(x, pick(1, 4), pick(1, 3), pick(0, 3) == 0 ? 2 : 1);
    } else {
      x = b.dense(x, pick(1, 12));
    }
  }
  if (conv && target >= 3) {
    x = pick(0, 1) ? b.global_avg_pool(x) : b.flatten(x);
    x = b.dense(x, pick(1, 8));
  }
  return b.build(x);
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, float lo = -1.0f,
                            float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Flat weights-style fixture of `count` values drawn as in WeightInit::Quantized.
inline Tensor quantized_weights(std::size_t count, std::uint64_t seed,
                                std::size_t fan_in = 256) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 24.0f);
  const float scale = 1.0f / std::sqrt(float(fan_in)) / 128.0f;
  Tensor t({count});
  for (auto& v : t.values()) v = std::clamp(std::round(n(rng)), -128.0f, 127.0f) * scale;
  return t;
}

}  // namespace defer::synthetic
