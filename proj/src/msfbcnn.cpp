#include "distnet/msfbcnn.hpp"

#include <string>

#include "distnet/error.hpp"

namespace distnet {

void MsfbcnnConfig::validate() const {
  if (channels < 1 || temporal_filters < 1 || spatial_filters < 1 || num_classes < 1 ||
      window_len < 1) {
    fail(ErrorKind::Config, "msfbcnn: all counts must be >= 1");
  }
  if (window_len % kPoolStride != 0) {
    fail(ErrorKind::Config, "msfbcnn: window_len " + std::to_string(window_len) +
                                " is not divisible by " + std::to_string(kPoolStride));
  }
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) {
    fail(ErrorKind::Config, "msfbcnn: dropout_rate must be in [0, 1)");
  }
}

std::size_t count_params(const MsfbcnnConfig& c) {
  c.validate();
  std::size_t time = 0;
  for (auto k : kTimeKernels) time += k * c.temporal_filters;
  const std::size_t bn_time = 2 * kTimeKernels.size() * c.temporal_filters;
  const std::size_t spatial = kTimeKernels.size() * c.channels * c.temporal_filters * c.spatial_filters;
  const std::size_t bn_spatial = 2 * c.spatial_filters;
  const std::size_t dense = c.spatial_filters * (c.window_len / kPoolStride) * c.num_classes;
  return time + bn_time + spatial + bn_spatial + dense;
}

Msfbcnn::Msfbcnn(const MsfbcnnConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t ft = config_.temporal_filters;
  for (std::size_t i = 0; i < kTimeKernels.size(); ++i) {
    time_kernels_[i] = init_params({ft, 1, kTimeKernels[i], 1}, kTimeKernels[i], rng);
  }
  bn_time_ = BatchNorm(4 * ft);
  spatial_kernel_ = init_params({config_.spatial_filters, 4 * ft, 1, config_.channels},
                                4 * ft * config_.channels, rng);
  bn_spatial_ = BatchNorm(config_.spatial_filters);
  const std::size_t features = config_.spatial_filters * (config_.window_len / kPoolStride);
  dense_weight_ = init_params({features, config_.num_classes}, features, rng);
}

Tensor Msfbcnn::forward(const Tensor& x, const ForwardContext& ctx) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.window_len || s[3] != 1) {
    fail(ErrorKind::Shape, "msfbcnn input layer: expected [B," + std::to_string(config_.channels) +
                               "," + std::to_string(config_.window_len) + ",1], got " + shape_str(s));
  }
  const std::size_t batch = s[0];

  const std::size_t channels = config_.channels;
  const std::size_t len = config_.window_len;
  const std::size_t ft4 = 4 * config_.temporal_filters;

  // Time convolutions see every electrode as its own single-channel row, which
  // matches kernels of shape (k, 1) sliding over a (T, C) image.
  Tensor h = ops::reshape(x, {batch * channels, 1, len, 1});
  std::vector<Tensor> branches;
  for (const auto& k : time_kernels_) {
    branches.push_back(ops::conv2d(h, k, {1, 1}, Padding::Same));
  }
  h = ops::concat(branches, 1);  // [B*C, 4F_T, T, 1]
  h = bn_time_.forward(h, ctx);

  // The (1, C) spatial kernel contracts (filter, electrode) pairs at each time
  // step, i.e. a 1x1 convolution over the flattened electrode-major channels.
  h = ops::reshape(h, {batch, channels * ft4, len, 1});
  Tensor mix = ops::permute(spatial_kernel_, {0, 3, 1, 2});  // [F_S, C, 4F_T, 1]
  mix = ops::reshape(mix, {config_.spatial_filters, channels * ft4, 1, 1});
  h = ops::conv2d(h, mix, {1, 1}, Padding::Valid);  // [B, F_S, T, 1]
  h = bn_spatial_.forward(h, ctx);
  h = ops::square(h);
  h = ops::avgpool2d(h, kPoolKernel, kPoolStride, true);
  h = ops::safe_log(h);
  h = ops::dropout(h, config_.dropout_rate, ctx);
  h = ops::reshape(h, {batch, h.numel() / batch});
  return ops::log_softmax(ops::dense(h, dense_weight_));
}

StateDict Msfbcnn::state(const std::string& prefix) const {
  StateDict s;
  for (std::size_t i = 0; i < time_kernels_.size(); ++i) {
    s.params.push_back({prefix + "timeconv" + std::to_string(i + 1) + ".weight", time_kernels_[i]});
  }
  s.append(bn_time_.state("bn_time."), prefix);
  s.params.push_back({prefix + "spatialconv.weight", spatial_kernel_});
  s.append(bn_spatial_.state("bn_spatial."), prefix);
  s.params.push_back({prefix + "dense.weight", dense_weight_});
  return s;
}

}  // namespace distnet
