#pragma once

#include <string>
#include <vector>

#include "distnet/ops.hpp"
#include "distnet/tensor.hpp"

namespace distnet {

/// Named trainable parameters plus non-trainable buffers (running stats).
struct StateDict {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;

  void append(const StateDict& other, const std::string& prefix = "");
  std::vector<NamedTensor> all() const;
  std::size_t param_count() const;
};

/// Value copy of every tensor in a StateDict, in order.
using Snapshot = std::vector<std::vector<float>>;

Snapshot take_snapshot(const StateDict& state);
void restore_snapshot(const StateDict& state, const Snapshot& snapshot);

/// Copies values by name; every destination tensor must have a same-shaped
/// source. Raises ErrorKind::Shape listing all offending names otherwise.
void copy_state(const StateDict& from, const StateDict& to);

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  ops::BatchNormStats stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels);

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  StateDict state(const std::string& prefix) const;
};

/// dense(in -> hidden) + ReLU + dense(hidden -> out) + LogSoftmax.
struct FusionMlp {
  Tensor w1, b1, w2, b2;

  FusionMlp() = default;
  FusionMlp(std::size_t inputs, std::size_t hidden, std::size_t outputs, Rng& rng);

  Tensor forward(const Tensor& x) const;
  StateDict state(const std::string& prefix) const;
  std::size_t inputs() const { return w1.dim(0); }
};

}  // namespace distnet
