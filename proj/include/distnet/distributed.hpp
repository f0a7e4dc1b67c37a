#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "distnet/module.hpp"
#include "distnet/msfbcnn.hpp"

namespace distnet {

/// Factor pair (s1, s2), s1 <= s2, s1 * s2 = D, with s2 - s1 minimal.
/// Perfect squares give (sqrt D, sqrt D); primes give (1, D).
std::pair<std::size_t, std::size_t> decompose_factor(std::int64_t factor);

/// Two strided single-kernel conv layers on each node. Kernel lengths default
/// to 2 * stride + 1.
struct CompressorConfig {
  std::size_t factor = 1;
  std::size_t stride1 = 1;
  std::size_t stride2 = 1;
  std::size_t kernel1 = 3;
  std::size_t kernel2 = 3;

  static CompressorConfig for_factor(std::int64_t factor);
  void validate() const;
  std::size_t intermediate_len(std::size_t window_len) const;
  /// ceil(ceil(L / s1) / s2)
  std::size_t compressed_len(std::size_t window_len) const;
};

struct DistributedConfig {
  MsfbcnnConfig central;  // channels == number of nodes M
  CompressorConfig compressor;
  std::size_t fusion_hidden = 50;

  std::size_t nodes() const { return central.channels; }
  MsfbcnnConfig local() const {
    MsfbcnnConfig c = central;
    c.channels = 1;
    return c;
  }
  void validate() const;
};

enum class PayloadKind { ClassVector, CompressedFrame };

/// What crossed the node -> fusion-center boundary during a forward pass.
struct BoundaryRecord {
  PayloadKind kind;
  std::size_t node;
  Shape shape;
};

struct BoundaryLog {
  std::vector<BoundaryRecord> records;
};

struct BranchOutput {
  Tensor classfuse;
  Tensor compressfuse;
  Tensor fullfuse;
  Tensor reconstruction;
};

struct NodeCodec {
  Tensor kernel1, bias1, kernel2, bias2;
};

class DistributedModel {
 public:
  DistributedModel(const DistributedConfig& config, Rng& rng);

  const DistributedConfig& config() const { return config_; }
  std::size_t nodes() const { return config_.nodes(); }
  std::size_t num_classes() const { return config_.central.num_classes; }
  std::size_t window_len() const { return config_.central.window_len; }
  std::size_t compressed_len() const { return config_.compressor.compressed_len(window_len()); }

  // Node side. x_node is one node's window [B, 1, L, 1].
  Tensor node_classify(std::size_t node, const Tensor& x_node, const ForwardContext& ctx);
  Tensor compress_node(std::size_t node, const Tensor& x_node);

  // Fusion-center side.
  Tensor reconstruct_node(std::size_t node, const Tensor& frame);
  /// Node class vectors in ascending node order -> fused log-probabilities.
  Tensor fuse_classes(const std::vector<Tensor>& class_vectors);
  /// Compressed frames in node order -> (log-probabilities, reconstruction [B, M, L, 1]).
  std::pair<Tensor, Tensor> classify_frames(const std::vector<Tensor>& frames,
                                            const ForwardContext& ctx);
  Tensor fuse_branches(const Tensor& classfuse, const Tensor& compressfuse);

  // Whole-network forwards on x [B, M, L, 1].
  Tensor classfuse_forward(const Tensor& x, const ForwardContext& ctx, BoundaryLog* log = nullptr);
  std::pair<Tensor, Tensor> compressfuse_forward(const Tensor& x, const ForwardContext& ctx,
                                                 BoundaryLog* log = nullptr);
  BranchOutput fullfuse_forward(const Tensor& x, const ForwardContext& ctx,
                                BoundaryLog* log = nullptr);

  Msfbcnn& local_classifier(std::size_t node) { return locals_.at(node); }
  Msfbcnn& central_classifier() { return central_; }
  FusionMlp& classfuse_mlp() { return classfuse_mlp_; }
  FusionMlp& fullfuse_mlp() { return fullfuse_mlp_; }
  NodeCodec& compressor(std::size_t node) { return compressors_.at(node); }
  NodeCodec& reconstructor(std::size_t node) { return reconstructors_.at(node); }

  StateDict local_state(std::size_t node) const;
  StateDict classfuse_mlp_state() const;
  StateDict compressor_state(std::size_t node) const;
  StateDict reconstructor_state(std::size_t node) const;
  StateDict central_state() const;
  StateDict fullfuse_mlp_state() const;
  /// Everything, in a fixed order.
  StateDict state() const;

  /// Samples that have passed through the central classifier so far.
  std::size_t central_invocations() const { return central_invocations_; }

  /// Deep copy with identical values.
  DistributedModel clone() const;

 private:
  void check_input(const Tensor& x) const;

  DistributedConfig config_;
  std::vector<Msfbcnn> locals_;
  FusionMlp classfuse_mlp_;
  std::vector<NodeCodec> compressors_;
  std::vector<NodeCodec> reconstructors_;
  Msfbcnn central_;
  FusionMlp fullfuse_mlp_;
  std::size_t central_invocations_ = 0;
};

}  // namespace distnet
