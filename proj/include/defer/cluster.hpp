#pragma once

#include <thread>

#include "defer/compute_node.hpp"
#include "defer/dispatcher.hpp"

namespace defer {

/// k compute nodes running on threads of this process, on ephemeral
/// loopback ports. Same wire stack as separate processes.
class LocalCluster {
 public:
  /// Node i gets `base` with seed base.seed * 1000 + i.
  explicit LocalCluster(std::size_t k, ComputeOptions base = {}) {
    for (std::size_t i = 0; i < k; ++i) {
      ComputeOptions opt = base;
      opt.model_port = opt.weights_port = opt.data_port = 0;
      opt.seed = base.seed * 1000 + i;
      nodes_.push_back(std::make_unique<ComputeNode>(opt));
    }
    errors_.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      threads_.emplace_back([this, i] {
        try {
          nodes_[i]->run();
        } catch (...) {
          errors_[i] = std::current_exception();
        }
      });
    }
  }

  LocalCluster(const LocalCluster&) = delete;
  LocalCluster& operator=(const LocalCluster&) = delete;

  ~LocalCluster() {
    for (auto& n : nodes_) n->stop();
    join();
  }

  std::size_t size() const { return nodes_.size(); }
  ComputeNode& node(std::size_t i) { return *nodes_.at(i); }

  std::vector<NodeAddress> addresses() const {
    std::vector<NodeAddress> out;
    for (const auto& n : nodes_) {
      out.push_back({n->model_endpoint().host, n->model_endpoint().port,
                     n->weights_endpoint().port, n->data_endpoint().port});
    }
    return out;
  }

  /// Waits for every node thread to finish.
  void join() {
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
  }

  /// Exception raised by node i's run(), if any. Valid after join().
  std::exception_ptr error(std::size_t i) const { return errors_.at(i); }

 private:
  std::vector<std::unique_ptr<ComputeNode>> nodes_;
  std::vector<std::thread> threads_;
  std::vector<std::exception_ptr> errors_;
};

}  // namespace defer
