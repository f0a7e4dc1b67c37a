#include "distnet/distributed.hpp"

#include <cmath>
#include <string>

#include "distnet/error.hpp"

namespace distnet {

std::pair<std::size_t, std::size_t> decompose_factor(std::int64_t factor) {
  if (factor <= 0) fail(ErrorKind::Config, "compression factor must be >= 1, got " + std::to_string(factor));
  const auto d = static_cast<std::size_t>(factor);
  auto a = static_cast<std::size_t>(std::sqrt(static_cast<double>(d)));
  while (a * a > d) --a;
  while ((a + 1) * (a + 1) <= d) ++a;
  for (; a >= 1; --a) {
    if (d % a == 0) return {a, d / a};
  }
  return {1, d};
}

CompressorConfig CompressorConfig::for_factor(std::int64_t factor) {
  auto [s1, s2] = decompose_factor(factor);
  return CompressorConfig{static_cast<std::size_t>(factor), s1, s2, 2 * s1 + 1, 2 * s2 + 1};
}

void CompressorConfig::validate() const {
  if (stride1 < 1 || stride2 < 1 || stride1 * stride2 != factor) {
    fail(ErrorKind::Config, "compressor strides " + std::to_string(stride1) + "x" +
                                std::to_string(stride2) + " do not multiply to " + std::to_string(factor));
  }
  if (kernel1 < stride1 || kernel2 < stride2) {
    fail(ErrorKind::Config, "compressor kernels must be at least as long as their strides");
  }
}

std::size_t CompressorConfig::intermediate_len(std::size_t window_len) const {
  return (window_len + stride1 - 1) / stride1;
}

std::size_t CompressorConfig::compressed_len(std::size_t window_len) const {
  return (intermediate_len(window_len) + stride2 - 1) / stride2;
}

void DistributedConfig::validate() const {
  central.validate();
  compressor.validate();
  if (fusion_hidden < 1) fail(ErrorKind::Config, "fusion MLP hidden size must be >= 1");
}

namespace {

NodeCodec make_codec(const CompressorConfig& c, Rng& rng) {
  return NodeCodec{init_params({1, 1, c.kernel1, 1}, c.kernel1, rng), Tensor::zeros({1}, true),
                   init_params({1, 1, c.kernel2, 1}, c.kernel2, rng), Tensor::zeros({1}, true)};
}

StateDict codec_state(const NodeCodec& codec, const std::string& prefix, const char* layer) {
  return {{{prefix + layer + "1.weight", codec.kernel1},
           {prefix + layer + "1.bias", codec.bias1},
           {prefix + layer + "2.weight", codec.kernel2},
           {prefix + layer + "2.bias", codec.bias2}},
          {}};
}

}  // namespace

DistributedModel::DistributedModel(const DistributedConfig& config, Rng& rng)
    : config_(config), central_((config.validate(), config.central), rng) {
  const std::size_t m = nodes();
  const std::size_t k = num_classes();
  const MsfbcnnConfig local = config_.local();
  for (std::size_t i = 0; i < m; ++i) locals_.emplace_back(local, rng);
  classfuse_mlp_ = FusionMlp(m * k, config_.fusion_hidden, k, rng);
  for (std::size_t i = 0; i < m; ++i) {
    compressors_.push_back(make_codec(config_.compressor, rng));
    reconstructors_.push_back(make_codec(config_.compressor, rng));
  }
  fullfuse_mlp_ = FusionMlp(2 * k, config_.fusion_hidden, k, rng);
}

void DistributedModel::check_input(const Tensor& x) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != nodes() || s[2] != window_len() || s[3] != 1) {
    fail(ErrorKind::Shape, "distributed model input: expected [B," + std::to_string(nodes()) + "," +
                               std::to_string(window_len()) + ",1], got " + shape_str(s));
  }
}

Tensor DistributedModel::node_classify(std::size_t node, const Tensor& x_node,
                                       const ForwardContext& ctx) {
  return locals_.at(node).forward(x_node, ctx);
}

Tensor DistributedModel::compress_node(std::size_t node, const Tensor& x_node) {
  const auto& c = config_.compressor;
  const NodeCodec& codec = compressors_.at(node);
  Tensor h = ops::add_channel_bias(
      ops::conv2d(x_node, codec.kernel1, {c.stride1, 1}, Padding::Same), codec.bias1);
  return ops::add_channel_bias(ops::conv2d(h, codec.kernel2, {c.stride2, 1}, Padding::Same),
                               codec.bias2);
}

Tensor DistributedModel::reconstruct_node(std::size_t node, const Tensor& frame) {
  const auto& c = config_.compressor;
  const NodeCodec& codec = reconstructors_.at(node);
  // mirrored: undo the second stride first
  Tensor h = ops::add_channel_bias(
      ops::conv2d_transposed(frame, codec.kernel2, {c.stride2, 1}, c.intermediate_len(window_len())),
      codec.bias2);
  return ops::add_channel_bias(
      ops::conv2d_transposed(h, codec.kernel1, {c.stride1, 1}, window_len()), codec.bias1);
}

Tensor DistributedModel::fuse_classes(const std::vector<Tensor>& class_vectors) {
  if (class_vectors.size() != nodes()) {
    fail(ErrorKind::Shape, "classfuse expects " + std::to_string(nodes()) + " class vectors");
  }
  return classfuse_mlp_.forward(ops::concat(class_vectors, 1));
}

std::pair<Tensor, Tensor> DistributedModel::classify_frames(const std::vector<Tensor>& frames,
                                                            const ForwardContext& ctx) {
  if (frames.size() != nodes()) {
    fail(ErrorKind::Shape, "compressfuse expects " + std::to_string(nodes()) + " frames");
  }
  std::vector<Tensor> channels;
  for (std::size_t i = 0; i < frames.size(); ++i) channels.push_back(reconstruct_node(i, frames[i]));
  Tensor recon = ops::concat(channels, 1);
  central_invocations_ += recon.dim(0);
  return {central_.forward(recon, ctx), recon};
}

Tensor DistributedModel::fuse_branches(const Tensor& classfuse, const Tensor& compressfuse) {
  return fullfuse_mlp_.forward(ops::concat({classfuse, compressfuse}, 1));
}

Tensor DistributedModel::classfuse_forward(const Tensor& x, const ForwardContext& ctx,
                                           BoundaryLog* log) {
  check_input(x);
  std::vector<Tensor> vectors;
  for (std::size_t i = 0; i < nodes(); ++i) {
    vectors.push_back(node_classify(i, ops::slice(x, 1, i, 1), ctx));
    if (log) log->records.push_back({PayloadKind::ClassVector, i, vectors.back().shape()});
  }
  return fuse_classes(vectors);
}

std::pair<Tensor, Tensor> DistributedModel::compressfuse_forward(const Tensor& x,
                                                                 const ForwardContext& ctx,
                                                                 BoundaryLog* log) {
  check_input(x);
  std::vector<Tensor> frames;
  for (std::size_t i = 0; i < nodes(); ++i) {
    frames.push_back(compress_node(i, ops::slice(x, 1, i, 1)));
    if (log) log->records.push_back({PayloadKind::CompressedFrame, i, frames.back().shape()});
  }
  return classify_frames(frames, ctx);
}

BranchOutput DistributedModel::fullfuse_forward(const Tensor& x, const ForwardContext& ctx,
                                                BoundaryLog* log) {
  BranchOutput out;
  out.classfuse = classfuse_forward(x, ctx, log);
  std::tie(out.compressfuse, out.reconstruction) = compressfuse_forward(x, ctx, log);
  out.fullfuse = fuse_branches(out.classfuse, out.compressfuse);
  return out;
}

StateDict DistributedModel::local_state(std::size_t node) const {
  return locals_.at(node).state("local." + std::to_string(node) + ".");
}

StateDict DistributedModel::classfuse_mlp_state() const { return classfuse_mlp_.state("classfuse."); }

StateDict DistributedModel::compressor_state(std::size_t node) const {
  return codec_state(compressors_.at(node), "compress." + std::to_string(node) + ".", "conv");
}

StateDict DistributedModel::reconstructor_state(std::size_t node) const {
  return codec_state(reconstructors_.at(node), "recon." + std::to_string(node) + ".", "deconv");
}

StateDict DistributedModel::central_state() const { return central_.state("central."); }

StateDict DistributedModel::fullfuse_mlp_state() const { return fullfuse_mlp_.state("fullfuse."); }

StateDict DistributedModel::state() const {
  StateDict s;
  for (std::size_t i = 0; i < nodes(); ++i) s.append(local_state(i));
  s.append(classfuse_mlp_state());
  for (std::size_t i = 0; i < nodes(); ++i) {
    s.append(compressor_state(i));
    s.append(reconstructor_state(i));
  }
  s.append(central_state());
  s.append(fullfuse_mlp_state());
  return s;
}

DistributedModel DistributedModel::clone() const {
  Rng scratch(0);
  DistributedModel copy(config_, scratch);
  copy_state(state(), copy.state());
  return copy;
}

}  // namespace distnet
