#pragma once

#include <array>
#include <cstddef>

#include "distnet/module.hpp"

namespace distnet {

/// Multiscale parallel filter-bank CNN. `window_len` is the time length T of
/// one input window and must be divisible by the pooling stride (15).
struct MsfbcnnConfig {
  std::size_t channels = 1;
  std::size_t window_len = 1125;
  std::size_t temporal_filters = 10;
  std::size_t spatial_filters = 10;
  std::size_t num_classes = 4;
  float dropout_rate = 0.5f;

  void validate() const;
};

inline constexpr std::array<std::size_t, 4> kTimeKernels{64, 40, 26, 16};
inline constexpr std::size_t kPoolKernel = 75;
inline constexpr std::size_t kPoolStride = 15;

/// Trainable parameter count of the architecture. The post-concatenation
/// batch norm contributes 8*F_T (gamma and beta for each of the 4*F_T
/// concatenated channels).
std::size_t count_params(const MsfbcnnConfig& config);

class Msfbcnn {
 public:
  Msfbcnn(const MsfbcnnConfig& config, Rng& rng);

  /// x: [B, C, T, 1] -> log-probabilities [B, N_C].
  Tensor forward(const Tensor& x, const ForwardContext& ctx);

  const MsfbcnnConfig& config() const { return config_; }
  StateDict state(const std::string& prefix = "") const;
  std::size_t param_count() const { return state().param_count(); }

  Tensor& dense_weight() { return dense_weight_; }

 private:
  MsfbcnnConfig config_;
  std::array<Tensor, 4> time_kernels_;
  BatchNorm bn_time_;
  Tensor spatial_kernel_;
  BatchNorm bn_spatial_;
  Tensor dense_weight_;
};

}  // namespace distnet
