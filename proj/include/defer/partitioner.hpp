#pragma once

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "defer/graph.hpp"
#include "defer/ops.hpp"

namespace defer {

/// A partition boundary: the edge producer -> consumer. Only bridges of the
/// layer DAG are legal, so exactly one tensor crosses each boundary.
struct CutPoint {
  std::string producer;
  std::string consumer;

  std::string str() const { return producer + ">" + consumer; }
  friend bool operator==(const CutPoint&, const CutPoint&) = default;
};

struct Partition {
  std::size_t index = 0;
  ModelGraph graph;
  Shape input_shape;
  Shape output_shape;

  std::size_t layer_count() const {
    return std::size_t(std::count_if(graph.layers.begin(), graph.layers.end(),
                                     [](const auto& l) { return l.kind != LayerKind::Input; }));
  }
};

inline std::size_t layer_count(const ModelGraph& g) {
  return std::size_t(std::count_if(g.layers.begin(), g.layers.end(),
                                   [](const auto& l) { return l.kind != LayerKind::Input; }));
}

namespace detail {

struct DagIndex {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::size_t> pos;
  std::vector<std::vector<std::size_t>> preds;  // with multiplicity
  std::vector<std::vector<std::size_t>> succs;  // with multiplicity

  explicit DagIndex(const ModelGraph& g) : order(topo_order(g)) {
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
    preds.resize(order.size());
    succs.resize(order.size());
    for (const auto& l : g.layers) {
      const std::size_t v = pos.at(l.id);
      for (const auto& in : l.inputs) {
        const std::size_t u = pos.at(in);
        preds[v].push_back(u);
        succs[u].push_back(v);
      }
    }
  }
};

/// Immediate dominators over a DAG in topological order (entry at 0).
inline std::vector<std::size_t> immediate_dominators(const DagIndex& dag) {
  const std::size_t n = dag.order.size();
  std::vector<std::size_t> idom(n, 0), depth(n, 0);
  for (std::size_t v = 1; v < n; ++v) {
    std::size_t d = dag.preds[v].front();
    for (std::size_t u : dag.preds[v]) {
      std::size_t a = d, b = u;
      while (a != b) {
        if (depth[a] < depth[b]) std::swap(a, b);
        a = idom[a];
      }
      d = a;
    }
    idom[v] = d;
    depth[v] = depth[d] + 1;
  }
  return idom;
}

}  // namespace detail

/// All bridge edges (removing one disconnects entry from exit), in chain
/// order. An edge u -> v is a bridge iff u has a single outgoing edge, v a
/// single incoming edge, and u dominates the exit.
inline std::vector<CutPoint> find_bridges(const ModelGraph& graph) {
  validate(graph);
  const detail::DagIndex dag(graph);
  if (dag.order.front() != graph.entry) {
    fail(Errc::InvalidGraph, "entry is not first in topological order");
  }
  const auto idom = detail::immediate_dominators(dag);
  std::vector<bool> dominates_exit(dag.order.size(), false);
  for (std::size_t v = dag.pos.at(graph.exit);; v = idom[v]) {
    dominates_exit[v] = true;
    if (v == 0) break;
  }
  std::vector<CutPoint> bridges;
  for (std::size_t u = 0; u < dag.order.size(); ++u) {
    if (!dominates_exit[u] || dag.succs[u].size() != 1) continue;
    const std::size_t v = dag.succs[u].front();
    if (dag.preds[v].size() != 1) continue;
    bridges.push_back({dag.order[u], dag.order[v]});
  }
  return bridges;
}

/// Splits `graph` at `cuts` (listed in chain order) into cuts.size() + 1
/// sequential sub-networks. Each sub-network after the first starts from a
/// synthetic Input shaped like the tensor crossing its cut.
inline std::vector<Partition> partition_model(const ModelGraph& graph,
                                              const std::vector<CutPoint>& cuts) {
  const auto bridges = find_bridges(graph);
  std::vector<std::size_t> rank;
  for (const auto& c : cuts) {
    auto it = std::find(bridges.begin(), bridges.end(), c);
    if (it == bridges.end()) {
      fail(Errc::InvalidCut, "edge " + c.str() + " is not a bridge", c.producer);
    }
    if (c.producer == graph.entry) {
      fail(Errc::InvalidCut, "cut " + c.str() + " would leave an empty partition",
           c.producer);
    }
    rank.push_back(std::size_t(it - bridges.begin()));
  }
  for (std::size_t i = 1; i < rank.size(); ++i) {
    if (rank[i] <= rank[i - 1]) {
      fail(Errc::CutOrderError, "cut " + cuts[i].str() +
                                    " is not strictly after " + cuts[i - 1].str());
    }
  }

  const auto shapes = infer_shapes(graph, graph.input_shape());
  std::unordered_map<std::string, std::vector<std::string>> consumers;
  for (const auto& l : graph.layers) {
    for (const auto& in : l.inputs) consumers[in].push_back(l.id);
  }
  std::set<std::pair<std::string, std::string>> cut_edges;
  for (const auto& c : cuts) cut_edges.emplace(c.producer, c.consumer);

  std::unordered_map<std::string, std::size_t> owner;
  auto flood = [&](const std::string& start, std::size_t index) {
    std::vector<std::string> stack{start};
    owner[start] = index;
    while (!stack.empty()) {
      const std::string u = stack.back();
      stack.pop_back();
      for (const auto& v : consumers[u]) {
        if (cut_edges.contains({u, v}) || owner.contains(v)) continue;
        owner[v] = index;
        stack.push_back(v);
      }
    }
  };
  flood(graph.entry, 0);
  for (std::size_t i = 0; i < cuts.size(); ++i) flood(cuts[i].consumer, i + 1);

  std::unordered_set<std::string> ids;
  for (const auto& l : graph.layers) ids.insert(l.id);

  std::vector<Partition> parts(cuts.size() + 1);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto& p = parts[i];
    p.index = i;
    if (i == 0) {
      p.graph.entry = graph.entry;
      p.input_shape = graph.input_shape();
    } else {
      std::string id = "partition" + std::to_string(i) + ".input";
      while (ids.contains(id)) id += "_";
      ids.insert(id);
      p.graph.entry = id;
      p.input_shape = shapes.at(cuts[i - 1].producer);
      LayerSpec input;
      input.id = id;
      input.kind = LayerKind::Input;
      input.params.shape = p.input_shape;
      p.graph.layers.push_back(std::move(input));
    }
    p.graph.exit = i < cuts.size() ? cuts[i].producer : graph.exit;
    p.output_shape = shapes.at(p.graph.exit);
  }
  for (const auto& l : graph.layers) {
    const std::size_t i = owner.at(l.id);
    LayerSpec copy = l;
    if (i > 0 && l.id == cuts[i - 1].consumer) {
      for (auto& in : copy.inputs) {
        if (in == cuts[i - 1].producer) in = parts[i].graph.entry;
      }
    }
    for (const auto& w : copy.weight_refs) {
      parts[i].graph.weights.insert_or_assign(w, graph.weights.at(w));
    }
    parts[i].graph.layers.push_back(std::move(copy));
  }
  for (const auto& p : parts) validate(p.graph);
  return parts;
}

/// Picks k - 1 bridge cuts minimising the largest deviation of partition
/// layer counts from the mean. Among equally balanced choices the earliest
/// partitions take the remainder (e.g. 7 layers, k = 3 gives 3, 2, 2).
inline std::vector<CutPoint> auto_cuts(const ModelGraph& graph, std::size_t k) {
  if (k == 0) fail(Errc::InvalidArgument, "k must be >= 1");
  if (k == 1) return {};

  const auto bridges = find_bridges(graph);
  const detail::DagIndex dag(graph);
  const long total = long(layer_count(graph));

  // Layers before a bridge = topological position of its producer (the
  // producer's ancestors precede it, everything after the cut follows it).
  std::vector<long> prefix;
  std::vector<CutPoint> usable;
  for (const auto& b : bridges) {
    if (b.producer == graph.entry) continue;
    prefix.push_back(long(dag.pos.at(b.producer)));
    usable.push_back(b);
  }
  const std::size_t m = usable.size();
  const std::size_t cuts_needed = k - 1;
  if (m < cuts_needed) {
    fail(Errc::Unpartitionable, "graph has " + std::to_string(m) +
                                    " usable bridges, need " + std::to_string(cuts_needed));
  }

  const long K = long(k);
  auto dev = [&](long size) { return std::labs(K * size - total); };
  constexpr long kInf = std::numeric_limits<long>::max();

  // best[j][i]: minimal max deviation of the first j partitions when the
  // j-th cut is usable[i].
  std::vector<std::vector<long>> best(cuts_needed + 1, std::vector<long>(m, kInf));
  for (std::size_t i = 0; i < m; ++i) best[1][i] = dev(prefix[i]);
  for (std::size_t j = 2; j <= cuts_needed; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t h = 0; h < i; ++h) {
        if (best[j - 1][h] == kInf) continue;
        best[j][i] = std::min(best[j][i], std::max(best[j - 1][h], dev(prefix[i] - prefix[h])));
      }
    }
  }
  long optimum = kInf;
  for (std::size_t i = 0; i < m; ++i) {
    if (best[cuts_needed][i] == kInf) continue;
    optimum = std::min(optimum, std::max(best[cuts_needed][i], dev(total - prefix[i])));
  }

  // feasible[r][i]: from cut usable[i], r more partitions can finish the
  // chain with every deviation <= optimum.
  std::vector<std::vector<bool>> feasible(cuts_needed + 1, std::vector<bool>(m, false));
  for (std::size_t i = 0; i < m; ++i) feasible[1][i] = dev(total - prefix[i]) <= optimum;
  for (std::size_t r = 2; r <= cuts_needed; ++r) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t h = i + 1; h < m && !feasible[r][i]; ++h) {
        feasible[r][i] = feasible[r - 1][h] && dev(prefix[h] - prefix[i]) <= optimum;
      }
    }
  }

  std::vector<CutPoint> chosen;
  long prev = 0;
  std::size_t start = 0;
  for (std::size_t t = 1; t <= cuts_needed; ++t) {
    const std::size_t remaining = k - t;
    std::optional<std::size_t> pick;
    for (std::size_t i = start; i < m; ++i) {
      if (dev(prefix[i] - prev) <= optimum && feasible[remaining][i]) pick = i;
    }
    chosen.push_back(usable[*pick]);
    prev = prefix[*pick];
    start = *pick + 1;
  }
  return chosen;
}

/// True iff running the partitions in sequence reproduces run_model on the
/// original graph bit for bit.
inline bool validate_chain(const ModelGraph& original,
                           const std::vector<Partition>& partitions,
                           const Tensor& probe) {
  try {
    const Tensor expected = run_model(original, probe);
    Tensor x = probe;
    for (const auto& p : partitions) x = run_model(p.graph, x);
    return x.bit_equal(expected);
  } catch (const Error&) {
    return false;
  }
}

}  // namespace defer
