#pragma once

#include <span>
#include <utility>
#include <vector>

#include "distnet/rng.hpp"
#include "distnet/tensor.hpp"

namespace distnet {

enum class Mode { Train, Eval };

/// Per-call state for layers whose behaviour depends on the phase.
struct ForwardContext {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;  // required by dropout in Train mode

  bool training() const { return mode == Mode::Train; }
};

enum class Padding { Same, Valid };

struct Stride2 {
  std::size_t h = 1;
  std::size_t w = 1;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_params(const Shape& shape, std::size_t fan_in, Rng& rng);

namespace ops {

// Elementwise and structural ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// General axis permutation; output axis i is input axis perm[i].
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

/// Forward emits `hard`; the gradient flows unchanged into `soft`.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

// Convolution --------------------------------------------------------------

/// Output length along one axis. Same: ceil(n / stride). Valid: floor((n - k) / stride) + 1.
std::size_t conv_out_len(std::size_t n, std::size_t k, std::size_t stride, Padding padding);

/// Leading zero-padding along one axis for Same mode; the extra zero of an
/// odd total goes to the trailing edge.
std::size_t same_pad_before(std::size_t n, std::size_t k, std::size_t stride);

/// input [B, Cin, H, W], kernel [Cout, Cin, Kh, Kw] -> [B, Cout, H', W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, Stride2 stride, Padding padding);

/// Adjoint of conv2d(., kernel, stride, Same) on an input whose height is
/// `output_len`. The width axis is treated as in conv2d with stride.w.
Tensor conv2d_transposed(const Tensor& input, const Tensor& kernel, Stride2 stride,
                         std::size_t output_len);

/// Adds bias[c] to channel c of a [B, C, H, W] tensor.
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);

// Normalization, pooling, regularization -----------------------------------

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

/// Per-channel normalization over batch and spatial dims of [B, C, H, W].
/// Train mode normalizes with batch moments and updates `stats`.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                 BatchNormStats& stats);

/// Average pooling along H of [B, C, H, W] (window width 1). Divisor is
/// always the window size, so padded zeros count.
Tensor avgpool2d(const Tensor& input, std::size_t kernel, std::size_t stride, bool pad_to_table);
std::pair<std::size_t, std::size_t> avgpool_table_padding(std::size_t len, std::size_t kernel,
                                                           std::size_t stride);

Tensor dropout(const Tensor& input, float rate, const ForwardContext& ctx);

// Activations ----------------------------------------------------------------

inline constexpr float kSafeLogFloor = 1e-6f;

Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
/// log(max(x, 1e-6)); the gradient is zero where the clamp is active.
Tensor safe_log(const Tensor& a);
Tensor exp(const Tensor& a);
/// Along the last axis of a 2-D tensor.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

enum class Activation { ReLU, Square, SafeLog, Softmax, LogSoftmax };
Tensor activation(Activation kind, const Tensor& a);

// Dense and losses -------------------------------------------------------------

/// input [B, F] x weight [F, O] (+ bias [O]).
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor* bias = nullptr);

/// Mean over the batch of -logprobs[i, labels[i]].
Tensor cross_entropy(const Tensor& logprobs, std::span<const int> labels);
Tensor mse(const Tensor& prediction, const Tensor& target);

enum class LossKind { CrossEntropy, MSE };

}  // namespace ops

}  // namespace distnet
