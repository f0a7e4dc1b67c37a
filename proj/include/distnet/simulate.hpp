#pragma once

#include <vector>

#include "distnet/exit_runtime.hpp"

namespace distnet {

inline constexpr std::size_t kBytesPerScalar = 4;

struct Message {
  std::size_t sample = 0;
  std::size_t node = 0;
  PayloadKind kind = PayloadKind::ClassVector;
  std::size_t scalars = 0;
  std::size_t bytes = 0;
};

/// Node-to-fusion-center traffic, in event order.
struct MessageLog {
  std::size_t samples = 0;
  std::size_t nodes = 0;
  std::size_t window_len = 0;
  std::vector<Message> messages;

  std::size_t count(PayloadKind kind) const;
  std::size_t scalars(PayloadKind kind) const;
  std::size_t total_scalars() const;
  std::size_t total_bytes() const;
  /// Mean scalars per node per sample divided by the window length.
  double relative_bandwidth() const;
};

struct SimulationResult {
  std::vector<int> predictions;
  InferenceTrace trace;
  MessageLog log;
};

/// Per sample: every node sends its class vector; the fusion center runs
/// ClassFuse and, when the entropy is above the threshold, asks every node
/// for its compressed frame and runs the full network. The fusion center
/// only computes on what it received.
SimulationResult simulate_run(DistributedModel& model, const EpochedDataset& data, const ExitPolicy& policy,
                              std::size_t batch_size = 256);

}  // namespace distnet
