#pragma once

#include <atomic>
#include <mutex>
#include <random>
#include <thread>

#include "defer/bounded_queue.hpp"
#include "defer/channel.hpp"
#include "defer/protocol.hpp"

namespace defer {

struct ComputeOptions {
  std::string host = "127.0.0.1";
  std::uint16_t model_port = 0;
  std::uint16_t weights_port = 0;
  std::uint16_t data_port = 0;
  double delay_per_layer_ms = 0;  // injected compute time per hosted layer
  double jitter_ms = 0;           // extra uniform [0, jitter_ms] per message
  std::uint64_t seed = 0;
  LinkParams link;                // shaping on the outgoing data hop
  ChunkConfig chunk;
  std::size_t queue_capacity = 16;
  std::chrono::milliseconds connect_timeout{5000};
};

enum class Phase : int { AwaitingConfig, Ready, Running, Stopped };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::AwaitingConfig: return "AwaitingConfig";
    case Phase::Ready: return "Ready";
    case Phase::Running: return "Running";
    case Phase::Stopped: return "Stopped";
  }
  return "?";
}

/// One link of the inference chain. Lifecycle:
///
///   AwaitingConfig  accept model + weights connections, join Architecture,
///                   NextHop and Weights, build and check the partition,
///                   connect to the next hop, send Ack (or Reject)
///   Ready           wait for the upstream data connection
///   Running         reader thread -> bounded queue -> inference + send
///   Stopped         after forwarding Shutdown; nothing more is written
class ComputeNode {
 public:
  explicit ComputeNode(ComputeOptions opt)
      : opt_(std::move(opt)),
        model_listener_(net::Endpoint{opt_.host, opt_.model_port}),
        weights_listener_(net::Endpoint{opt_.host, opt_.weights_port}),
        data_listener_(net::Endpoint{opt_.host, opt_.data_port}),
        rng_(opt_.seed) {}

  ComputeNode(const ComputeNode&) = delete;
  ComputeNode& operator=(const ComputeNode&) = delete;

  const net::Endpoint& model_endpoint() const { return model_listener_.endpoint(); }
  const net::Endpoint& weights_endpoint() const { return weights_listener_.endpoint(); }
  const net::Endpoint& data_endpoint() const { return data_listener_.endpoint(); }

  Phase phase() const { return phase_.load(); }
  std::uint64_t received() const { return received_.load(); }
  std::uint64_t processed() const { return processed_.load(); }
  bool in_inference() const { return in_inference_.load(); }

  /// Valid once the phase is Ready or later.
  const Partition& partition() const { return partition_; }
  const ArchitectureDoc& architecture() const { return arch_; }

  /// Full lifecycle. Returns after a clean Shutdown (or after stop()); throws
  /// on configuration failure or when the chain is aborted.
  void run() {
    auto model_sock = accept_or_stop(model_listener_);
    auto weights_sock = accept_or_stop(weights_listener_);
    if (!model_sock || !weights_sock) return set_stopped();
    model_ = std::make_unique<Channel>(std::move(*model_sock), LinkParams{}, opt_.chunk, &ledger_);
    Channel weights(std::move(*weights_sock), LinkParams{}, opt_.chunk, &ledger_);
    try {
      receive_config(*model_, weights);
    } catch (...) {
      set_stopped();
      throw;
    }

    std::unique_ptr<Channel> upstream;
    while (!upstream) {
      const auto ready = net::wait_any({data_listener_.fd(), model_->socket().fd()}, kPoll);
      if (stop_) return set_stopped();
      if (!ready) continue;
      if (*ready == 0) {
        upstream = std::make_unique<Channel>(data_listener_.accept(), LinkParams{}, opt_.chunk);
      } else {
        // Dispatcher went away (or sent Shutdown) before streaming began.
        const auto m = model_->receive();
        if (!m || m->kind == MessageKind::Shutdown) return set_stopped();
      }
    }
    {
      std::lock_guard lock(mu_);
      upstream_ = upstream.get();
    }
    relay(*upstream);
    {
      std::lock_guard lock(mu_);
      upstream_ = nullptr;
    }
    if (aborted_) {
      throw Error(Errc::ChainBroken, abort_reason_, {}, arch_.index);
    }
  }

  /// Asks run() to return. Safe from any thread.
  void stop() {
    stop_ = true;
    std::lock_guard lock(mu_);
    if (upstream_) upstream_->shutdown();
  }

  /// This node's counters. Covers everything sent before the forwarded
  /// Shutdown, which carries them.
  NodeMetrics metrics() const {
    NodeMetrics m;
    m.index = int(arch_.index);
    m.layers = partition_.layer_count();
    m.messages = processed_.load();
    m.compute_seconds = double(compute_ns_.load()) * 1e-9;
    for (std::size_t c = 0; c < kMsgClassCount; ++c) {
      m.overhead_ns[c] = meter_.nanos(MsgClass(c));
      m.framed_bytes[c] = ledger_.get(MsgClass(c));
    }
    m.transport_bytes = (model_ ? model_->transport_bytes() : 0) +
                        (next_ ? next_->transport_bytes() : 0);
    return m;
  }

 private:
  static constexpr std::chrono::milliseconds kPoll{100};

  std::optional<net::Socket> accept_or_stop(net::Listener& l) {
    while (!stop_) {
      if (auto s = l.accept(kPoll)) return s;
    }
    return std::nullopt;
  }

  void set_stopped() {
    phase_ = Phase::Stopped;
    if (next_) next_->shutdown();
  }

  void receive_config(Channel& model, Channel& weights) {
    std::optional<Message> arch_msg, hop_msg, weights_msg;
    std::exception_ptr weights_error;
    std::thread weights_reader([&] {
      try {
        weights_msg = weights.receive();
      } catch (...) {
        weights_error = std::current_exception();
      }
    });
    std::exception_ptr model_error;
    try {
      while (!arch_msg || !hop_msg) {
        auto m = model.receive();
        if (!m) break;
        if (m->kind == MessageKind::Architecture) {
          arch_msg = std::move(m);
        } else if (m->kind == MessageKind::NextHop) {
          hop_msg = std::move(m);
        } else {
          fail(Errc::MalformedBlob, "unexpected " + std::string(to_string(m->kind)) +
                                        " on the model connection");
        }
      }
    } catch (...) {
      model_error = std::current_exception();
    }
    if (!arch_msg || !hop_msg) weights.shutdown();
    weights_reader.join();

    try {
      if (model_error) std::rethrow_exception(model_error);
      if (weights_error) std::rethrow_exception(weights_error);
      if (!arch_msg || !hop_msg || !weights_msg) {
        fail(Errc::ChainBroken, "configuration connection closed early");
      }
      if (weights_msg->kind != MessageKind::Weights) {
        fail(Errc::MalformedBlob, "expected Weights, got " +
                                      std::string(to_string(weights_msg->kind)));
      }
      arch_ = meter_.time(MsgClass::Architecture,
                          [&] { return decode_architecture(arch_msg->payload); });
      WeightMap w = meter_.time(MsgClass::Weights,
                                [&] { return decode_weight_set(weights_msg->payload); });
      ModelGraph g = std::move(arch_.graph);
      arch_.graph = {};
      g.weights = std::move(w);
      validate(g);
      const auto shapes = infer_shapes(g, g.input_shape());
      partition_.index = arch_.index;
      partition_.input_shape = g.input_shape();
      partition_.output_shape = shapes.at(g.exit);
      partition_.graph = std::move(g);
      last_hop_ = arch_.index + 1 == arch_.count;

      const auto hop = net::Endpoint::parse(to_string(hop_msg->payload));
      next_ = Channel::connect(hop, opt_.connect_timeout, opt_.link, opt_.chunk, &ledger_);
    } catch (const Error& e) {
      try {
        model.send({MessageKind::Reject, 0, reject_payload(e)});
        model.flush();
      } catch (const Error&) {
      }
      throw Error(Errc::ConfigRejected, e.what(), e.subject(), arch_.index);
    }
    phase_ = Phase::Ready;
    model.send({MessageKind::Ack, 0, {}});
    model.flush();
  }

  struct Item {
    Message msg;
    std::optional<std::string> abort;
  };

  void relay(Channel& upstream) {
    phase_ = Phase::Running;
    BoundedQueue<Item> queue(opt_.queue_capacity);
    std::thread reader([&] {
      try {
        while (true) {
          auto m = upstream.receive();
          if (!m) {
            queue.push({{}, "upstream connection closed"});
            break;
          }
          if (m->kind == MessageKind::InferenceData) {
            received_.fetch_add(1);
            if (!queue.push({std::move(*m), std::nullopt})) break;
          } else if (m->kind == MessageKind::Shutdown) {
            queue.push({std::move(*m), std::nullopt});
            break;
          } else {
            queue.push({{}, "unexpected " + std::string(to_string(m->kind)) + " on data path"});
            break;
          }
        }
      } catch (const std::exception& e) {
        queue.push({{}, e.what()});
      }
    });

    while (auto item = queue.pop()) {
      if (item->abort) {
        abort_chain(*item->abort);
        break;
      }
      if (item->msg.kind == MessageKind::Shutdown) {
        forward_shutdown(item->msg);
        break;
      }
      try {
        process(item->msg);
      } catch (const std::exception& e) {
        abort_chain(e.what());
        break;
      }
    }
    queue.close();
    upstream.shutdown();
    reader.join();
    set_stopped();
  }

  void process(const Message& m) {
    in_inference_ = true;
    const Tensor x = meter_.time(MsgClass::Data, [&] { return decode_bytes(m.payload); });
    const double c0 = thread_cpu_seconds();
    const Tensor y = run_model(partition_.graph, x);
    compute_ns_.fetch_add(std::int64_t((thread_cpu_seconds() - c0) * 1e9));
    double delay_ms = opt_.delay_per_layer_ms * double(partition_.layer_count());
    if (opt_.jitter_ms > 0) {
      delay_ms += std::uniform_real_distribution<double>(0.0, opt_.jitter_ms)(rng_);
    }
    if (delay_ms > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay_ms));
    }
    Bytes out = meter_.time(MsgClass::Data, [&] { return encode_bytes(arch_.data_codec, y); });
    in_inference_ = false;
    next_->send({last_hop_ ? MessageKind::Result : MessageKind::InferenceData, m.sequence,
                 std::move(out)});
    processed_.fetch_add(1);
  }

  void forward_shutdown(const Message& m) {
    ShutdownDoc doc;
    try {
      doc = ShutdownDoc::decode(m.payload);
    } catch (const Error& e) {
      doc.abort_node = arch_.index;
      doc.abort_reason = e.what();
    }
    if (doc.abort_node) {
      aborted_ = true;
      abort_reason_ = "chain aborted at node " + std::to_string(*doc.abort_node) + ": " +
                      doc.abort_reason;
    }
    next_->flush();
    doc.nodes.push_back(metrics());
    next_->send({MessageKind::Shutdown, m.sequence, doc.encode()});
    next_->flush();
  }

  void abort_chain(const std::string& reason) {
    aborted_ = true;
    abort_reason_ = reason;
    try {
      ShutdownDoc doc{{}, arch_.index, reason};
      next_->flush();
      doc.nodes.push_back(metrics());
      next_->send({MessageKind::Shutdown, 0, doc.encode()});
      next_->flush();
    } catch (const Error&) {
    }
  }

  ComputeOptions opt_;
  net::Listener model_listener_;
  net::Listener weights_listener_;
  net::Listener data_listener_;
  std::mt19937_64 rng_;

  std::atomic<Phase> phase_{Phase::AwaitingConfig};
  std::atomic<bool> stop_{false};
  std::atomic<std::uint64_t> received_{0};
  std::atomic<std::uint64_t> processed_{0};
  std::atomic<bool> in_inference_{false};
  std::atomic<std::int64_t> compute_ns_{0};

  ArchitectureDoc arch_;
  Partition partition_;
  bool last_hop_ = false;
  TrafficLedger ledger_;
  OverheadMeter meter_;
  std::unique_ptr<Channel> model_;
  std::unique_ptr<Channel> next_;

  std::mutex mu_;
  Channel* upstream_ = nullptr;
  bool aborted_ = false;
  std::string abort_reason_;
};

}  // namespace defer
