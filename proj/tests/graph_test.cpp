#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "defer/model_io.hpp"
#include "defer/ops.hpp"
#include "defer/partitioner.hpp"
#include "defer/synthetic.hpp"

using namespace defer;

namespace {

LayerSpec input_layer(const std::string& id, Shape shape) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Input;
  l.params.shape = std::move(shape);
  return l;
}

LayerSpec unary(const std::string& id, LayerKind kind, const std::string& in) {
  LayerSpec l;
  l.id = id;
  l.kind = kind;
  l.inputs = {in};
  return l;
}

LayerSpec dense_layer(const std::string& id, const std::string& in, std::size_t units) {
  LayerSpec l = unary(id, LayerKind::Dense, in);
  l.params.units = units;
  l.weight_refs = {id + ".k", id + ".b"};
  return l;
}

ModelGraph diamond() {
  ModelGraph g;
  g.layers.push_back(input_layer("A", {1, 4}));
  g.layers.push_back(unary("C", LayerKind::ReLU, "A"));
  g.layers.push_back(unary("B", LayerKind::ReLU, "A"));
  LayerSpec d;
  d.id = "D";
  d.kind = LayerKind::Add;
  d.inputs = {"B", "C"};
  g.layers.push_back(d);
  g.entry = "A";
  g.exit = "D";
  return g;
}

// Brute force: every permutation that respects the edges.
std::vector<std::vector<std::string>> all_topological_orders(const ModelGraph& g) {
  std::vector<std::string> ids;
  for (const auto& l : g.layers) ids.push_back(l.id);
  std::sort(ids.begin(), ids.end());
  std::vector<std::vector<std::string>> out;
  do {
    bool ok = true;
    for (std::size_t i = 0; i < ids.size() && ok; ++i) {
      for (const auto& in : g.at(ids[i]).inputs) {
        auto pos = std::find(ids.begin(), ids.end(), in) - ids.begin();
        if (std::size_t(pos) > i) ok = false;
      }
    }
    if (ok) out.push_back(ids);
  } while (std::next_permutation(ids.begin(), ids.end()));
  return out;
}

// Number of "same"-padded windows along one axis: starts o*stride that
// still begin inside the input.
std::size_t enumerate_same_windows(std::size_t in, std::size_t stride) {
  std::size_t count = 0;
  for (std::size_t o = 0; o * stride < in; ++o) ++count;
  return count;
}

}  // namespace

TEST(TopoOrder, SingletonGraph) {
  ModelGraph g;
  g.layers.push_back(input_layer("only", {1}));
  g.entry = g.exit = "only";
  EXPECT_EQ(topo_order(g), std::vector<std::string>{"only"});
}

TEST(TopoOrder, Chain) {
  ModelGraph g;
  g.layers.push_back(unary("C", LayerKind::ReLU, "B"));
  g.layers.push_back(input_layer("A", {1, 2}));
  g.layers.push_back(unary("B", LayerKind::ReLU, "A"));
  g.entry = "A";
  g.exit = "C";
  EXPECT_EQ(topo_order(g), (std::vector<std::string>{"A", "B", "C"}));
}

TEST(TopoOrder, DiamondMatchesBruteForceAndTieBreak) {
  const auto g = diamond();
  const auto order = topo_order(g);
  const auto valid = all_topological_orders(g);
  EXPECT_EQ(valid.size(), 2u);
  EXPECT_NE(std::find(valid.begin(), valid.end(), order), valid.end());
  EXPECT_EQ(order, *std::min_element(valid.begin(), valid.end()));
  EXPECT_EQ(order, (std::vector<std::string>{"A", "B", "C", "D"}));
}

TEST(TopoOrder, RandomGraphsAreLexicographicallySmallestValidOrder) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto g = synthetic::random_model(seed, 7);
    const auto valid = all_topological_orders(g);
    EXPECT_EQ(topo_order(g), *std::min_element(valid.begin(), valid.end())) << seed;
  }
}

TEST(TopoOrder, CycleDetected) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {1, 2}));
  g.layers.push_back(unary("a", LayerKind::ReLU, "b"));
  g.layers.push_back(unary("b", LayerKind::ReLU, "a"));
  g.entry = "in";
  g.exit = "b";
  try {
    topo_order(g);
    FAIL() << "expected CycleDetected";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CycleDetected);
  }
}

TEST(InferShapes, ReluAndDense) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {1, 8}));
  g.layers.push_back(unary("r", LayerKind::ReLU, "in"));
  g.layers.push_back(dense_layer("d", "r", 4));
  g.entry = "in";
  g.exit = "d";
  const auto shapes = infer_shapes(g, {1, 8});
  EXPECT_EQ(shapes.at("r"), (Shape{1, 8}));
  EXPECT_EQ(shapes.at("d"), (Shape{1, 4}));
}

TEST(InferShapes, ConvSamePaddingAgainstWindowEnumeration) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {1, 8, 8, 3}));
  LayerSpec c = unary("conv", LayerKind::Conv2D, "in");
  c.params = {0, 16, 3, 2, {}};
  g.layers.push_back(c);
  g.entry = "in";
  g.exit = "conv";
  const auto shapes = infer_shapes(g, {1, 8, 8, 3});
  const Shape expected{1, enumerate_same_windows(8, 2), enumerate_same_windows(8, 2), 16};
  EXPECT_EQ(expected, (Shape{1, 4, 4, 16}));
  EXPECT_EQ(shapes.at("conv"), expected);

  for (std::size_t in = 1; in <= 17; ++in) {
    for (std::size_t s = 1; s <= 4; ++s) {
      LayerSpec l = c;
      l.params.stride = s;
      EXPECT_EQ(layer_output_shape(l, {{1, in, in, 3}}, {})[1], enumerate_same_windows(in, s));
    }
  }
}

TEST(InferShapes, MismatchNamesTheLayer) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {1, 8}));
  g.layers.push_back(dense_layer("d", "in", 4));
  g.weights.emplace("d.k", Tensor({7, 4}));
  g.weights.emplace("d.b", Tensor({4}));
  g.entry = "in";
  g.exit = "d";
  try {
    infer_shapes(g, {1, 8});
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
    EXPECT_EQ(e.subject(), "d");
  }
  EXPECT_THROW(infer_shapes(g, {1, 8, 1}), Error);
}

TEST(Forward, Relu) {
  const Tensor x({2}, {-1.0f, 2.0f});
  const auto y = forward(unary("r", LayerKind::ReLU, "in"), std::vector{x}, {});
  EXPECT_EQ(y, Tensor({2}, {0.0f, 2.0f}));
}

TEST(Forward, DenseIdentity) {
  const auto layer = dense_layer("d", "in", 3);
  WeightMap w;
  w.emplace("d.k", Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  w.emplace("d.b", Tensor({3}));
  const Tensor x({2, 3}, {0.5f, -2.0f, 3.25f, 1e-3f, 7.0f, -0.0f});
  EXPECT_TRUE(forward(layer, std::vector{x}, w) == x);
}

TEST(Forward, DenseMatchesTripleLoop) {
  const auto layer = dense_layer("d", "in", 2);
  WeightMap w;
  w.emplace("d.k", Tensor({2, 2}, {1, 2, 3, 4}));
  w.emplace("d.b", Tensor({2}, {0, 0}));
  const Tensor x({1, 2}, {1, 1});
  // Naive oracle: out[u] = sum_i x[i] * k[i][u] + b[u].
  std::vector<float> oracle(2, 0.0f);
  for (std::size_t u = 0; u < 2; ++u) {
    for (std::size_t i = 0; i < 2; ++i) oracle[u] += x[i] * w.at("d.k")[i * 2 + u];
  }
  EXPECT_EQ(oracle, (std::vector<float>{4, 6}));
  EXPECT_EQ(forward(layer, std::vector{x}, w), Tensor({1, 2}, {4, 6}));
}

TEST(Forward, MissingWeight) {
  const auto layer = dense_layer("d", "in", 2);
  try {
    forward(layer, std::vector{Tensor({1, 2})}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingWeight);
  }
}

TEST(Forward, ConvMatchesIndexEnumerationOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t n = pick(1, 2), h = pick(1, 8), w = pick(1, 8), c = pick(1, 4);
    LayerSpec l = unary("c", LayerKind::Conv2D, "in");
    l.params.filters = pick(1, 4);
    l.params.kernel = pick(1, 4);
    l.params.stride = pick(1, 3);
    l.weight_refs = {"k", "b"};
    const std::size_t k = l.params.kernel, f = l.params.filters, s = l.params.stride;
    WeightMap wm;
    wm.emplace("k", synthetic::random_tensor({k, k, c, f}, rng()));
    wm.emplace("b", synthetic::random_tensor({f}, rng()));
    const Tensor x = synthetic::random_tensor({n, h, w, c}, rng());
    const Tensor y = forward(l, std::vector{x}, wm);

    // Oracle: scatter every (input element, kernel tap) pair onto the output
    // it contributes to, in double precision.
    const std::size_t oh = enumerate_same_windows(h, s), ow = enumerate_same_windows(w, s);
    const long pad_t = long(std::max<long>(long((oh - 1) * s + k) - long(h), 0) / 2);
    const long pad_l = long(std::max<long>(long((ow - 1) * s + k) - long(w), 0) / 2);
    std::vector<double> acc(n * oh * ow * f, 0.0), mag(n * oh * ow * f, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t iy = 0; iy < h; ++iy)
        for (std::size_t ix = 0; ix < w; ++ix)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ny = long(iy) + pad_t - long(ky), nx = long(ix) + pad_l - long(kx);
              if (ny < 0 || nx < 0 || ny % long(s) || nx % long(s)) continue;
              const std::size_t oy = std::size_t(ny) / s, ox = std::size_t(nx) / s;
              if (oy >= oh || ox >= ow) continue;
              for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t of = 0; of < f; ++of) {
                  const double term = double(x[((b * h + iy) * w + ix) * c + ic]) *
                                      double(wm.at("k")[((ky * k + kx) * c + ic) * f + of]);
                  const std::size_t o = ((b * oh + oy) * ow + ox) * f + of;
                  acc[o] += term;
                  mag[o] += std::abs(term);
                }
            }
    ASSERT_EQ(y.shape(), (Shape{n, oh, ow, f}));
    for (std::size_t o = 0; o < acc.size(); ++o) {
      const double expected = acc[o] + wm.at("b")[o % f];
      const double scale = mag[o] + std::abs(double(wm.at("b")[o % f]));
      EXPECT_LE(std::abs(double(y[o]) - expected), 1e-5 * std::max(scale, 1e-30)) << trial;
    }
  }
}

TEST(Forward, MaxPoolAndGlobalAvgPool) {
  const Tensor x({1, 2, 2, 1}, {1, -3, 4, 2});
  LayerSpec mp = unary("m", LayerKind::MaxPool2D, "in");
  mp.params.kernel = 2;
  mp.params.stride = 2;
  EXPECT_EQ(forward(mp, std::vector{x}, {}), Tensor({1, 1, 1, 1}, {4}));
  EXPECT_EQ(forward(unary("g", LayerKind::GlobalAvgPool, "in"), std::vector{x}, {}),
            Tensor({1, 1}, {1}));
  EXPECT_EQ(forward(unary("f", LayerKind::Flatten, "in"), std::vector{x}, {}).shape(),
            (Shape{1, 4}));
}

TEST(RunModel, InputThenRelu) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {2}));
  g.layers.push_back(unary("r", LayerKind::ReLU, "in"));
  g.entry = "in";
  g.exit = "r";
  EXPECT_EQ(run_model(g, Tensor({2}, {-1, 2})), Tensor({2}, {0, 2}));
}

TEST(RunModel, InputOnlyIsIdentity) {
  ModelGraph g;
  g.layers.push_back(input_layer("in", {3}));
  g.entry = g.exit = "in";
  const Tensor x({3}, {1.5f, -2.0f, 0.25f});
  EXPECT_TRUE(run_model(g, x).bit_equal(x));
}

TEST(RunModel, RandomChainEqualsManualFold) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto g = synthetic::chain(5, 6, 2, seed, synthetic::WeightInit::Uniform, true);
    const Tensor x = synthetic::random_tensor({2, 6}, seed * 7);
    // Independent fold over the known chain structure.
    std::vector<float> cur(x.values().begin(), x.values().end());
    for (const auto& id : topo_order(g)) {
      const auto& l = g.at(id);
      if (l.kind == LayerKind::ReLU) {
        for (auto& v : cur) v = std::max(v, 0.0f);
      } else if (l.kind == LayerKind::Dense) {
        const auto& k = g.weights.at(l.weight_refs[0]);
        const auto& b = g.weights.at(l.weight_refs[1]);
        std::vector<float> next(2 * 6);
        for (std::size_t r = 0; r < 2; ++r)
          for (std::size_t u = 0; u < 6; ++u) {
            float acc = 0;
            for (std::size_t i = 0; i < 6; ++i) acc += cur[r * 6 + i] * k[i * 6 + u];
            next[r * 6 + u] = acc + b[u];
          }
        cur = next;
      }
    }
    EXPECT_TRUE(run_model(g, x).bit_equal(Tensor({2, 6}, cur))) << seed;
  }
}

TEST(RunModel, DeterministicAcrossRuns) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto g = synthetic::random_model(seed);
    const Tensor x = synthetic::random_tensor(g.input_shape(), seed);
    EXPECT_TRUE(run_model(g, x).bit_equal(run_model(g, x)));
  }
}

TEST(RunModel, ShapeSoundnessOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 80; ++seed) {
    const auto g = synthetic::random_model(seed);
    const auto shapes = infer_shapes(g, g.input_shape());
    std::map<std::string, Tensor> values;
    values.emplace(g.entry, synthetic::random_tensor(g.input_shape(), seed));
    for (const auto& id : topo_order(g)) {
      if (id == g.entry) continue;
      const auto& l = g.at(id);
      std::vector<Tensor> args;
      for (const auto& in : l.inputs) args.push_back(values.at(in));
      values.emplace(id, forward(l, args, g.weights));
      EXPECT_EQ(values.at(id).shape(), shapes.at(id)) << "seed " << seed << " layer " << id;
    }
  }
}

TEST(RunModel, CompositionAcrossEverySingleEdgeCut) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto g = synthetic::random_model(seed);
    const Tensor x = synthetic::random_tensor(g.input_shape(), seed + 100);
    const Tensor whole = run_model(g, x);
    for (const auto& cut : find_bridges(g)) {
      if (cut.producer == g.entry) continue;
      const auto parts = partition_model(g, {cut});
      ASSERT_EQ(parts.size(), 2u);
      EXPECT_TRUE(run_model(parts[1].graph, run_model(parts[0].graph, x)).bit_equal(whole))
          << "seed " << seed << " cut " << cut.str();
    }
  }
}

TEST(Validate, RejectsBadGraphs) {
  auto g = diamond();
  EXPECT_NO_THROW(validate(g));
  g.layers.push_back(input_layer("X", {1, 4}));
  EXPECT_THROW(validate(g), Error);

  auto dangling = diamond();
  dangling.layers.push_back(unary("E", LayerKind::ReLU, "B"));
  EXPECT_THROW(validate(dangling), Error);

  auto bad_arity = diamond();
  bad_arity.layers[3].inputs = {"B"};
  EXPECT_THROW(validate(bad_arity), Error);
}

TEST(ModelIo, SaveLoadRoundTrip) {
  const auto g = synthetic::resnet_like(2, 3, 6, 1, 5);
  const auto dir = std::filesystem::temp_directory_path() / "defer_model_io_test";
  std::filesystem::remove_all(dir);
  save_model(dir, g);
  const auto loaded = load_model(dir);
  EXPECT_EQ(loaded.layers.size(), g.layers.size());
  EXPECT_EQ(loaded.entry, g.entry);
  EXPECT_EQ(loaded.exit, g.exit);
  for (const auto& [name, t] : g.weights) EXPECT_TRUE(loaded.weights.at(name).bit_equal(t));
  const Tensor x = synthetic::random_tensor(g.input_shape(), 3);
  EXPECT_TRUE(run_model(loaded, x).bit_equal(run_model(g, x)));
  std::filesystem::remove_all(dir);
}

TEST(ModelIo, TensorFileLayout) {
  const Tensor t({2, 1}, {1.0f, -2.0f});
  const Bytes b = tensor_file_bytes(t);
  ASSERT_EQ(b.size(), 8u + 16u + 8u);
  EXPECT_EQ(get_le<std::uint64_t>(b.data()), 2u);
  EXPECT_EQ(get_le<std::uint64_t>(b.data() + 8), 2u);
  EXPECT_EQ(get_le<std::uint64_t>(b.data() + 16), 1u);
  EXPECT_EQ(get_le<std::uint32_t>(b.data() + 24), 0x3f800000u);
  EXPECT_EQ(get_le<std::uint32_t>(b.data() + 28), 0xc0000000u);
  EXPECT_TRUE(parse_tensor_file(b).bit_equal(t));
  Bytes truncated(b.begin(), b.end() - 1);
  EXPECT_THROW(parse_tensor_file(truncated), Error);
}

TEST(ModelIo, ArchitectureJsonIsStableAndRoundTrips) {
  const auto g = synthetic::random_model(77);
  const std::string a = graph_to_json(g).dump();
  ModelGraph back = graph_from_json(json::parse(a));
  back.weights = g.weights;
  EXPECT_NO_THROW(validate(back));
  EXPECT_EQ(graph_to_json(back).dump(), a);
}
