#pragma once

#include <span>
#include <vector>

#include "distnet/dataset.hpp"
#include "distnet/distributed.hpp"

namespace distnet {

/// A sample leaves after the ClassFuse branch when its entropy is <= the threshold.
struct ExitPolicy {
  double exit_threshold = 0.5;

  void validate() const;
  bool exits(double entropy) const { return entropy <= exit_threshold; }
};

struct TraceEntry {
  double entropy = 0.0;
  bool exited = false;
  int prediction = -1;
  int label = -1;  // -1 when no labels were supplied
};

struct InferenceTrace {
  std::vector<TraceEntry> samples;

  std::size_t exited_count() const;
  double lambda() const;
  double accuracy() const;
};

struct SweepPoint {
  double threshold = 0.0;
  double lambda = 0.0;
  double bandwidth = 0.0;
  double accuracy = 0.0;
};

/// Entropy of p divided by log|p|. p is renormalized; 0 log 0 = 0.
double normalized_entropy(std::span<const float> p);
/// Same, from one row of log-probabilities.
double normalized_entropy_logprobs(std::span<const float> logprobs);

struct ExitResult {
  std::vector<int> predictions;
  InferenceTrace trace;
};

/// Eval-mode inference on x [B, M, L, 1]. The compressed branch runs only on
/// the samples that did not exit. `labels` may be empty.
ExitResult infer_with_exit(DistributedModel& model, const Tensor& x, const ExitPolicy& policy,
                           std::span<const int> labels = {});
ExitResult infer_with_exit(DistributedModel& model, const EpochedDataset& data,
                           const ExitPolicy& policy, std::size_t batch_size = 256);

/// Transmitted scalars per node per sample, relative to the window length:
/// (num_classes + (1 - lambda) * L / D) / L.
double relative_bandwidth(std::size_t window_len, std::size_t num_classes, std::size_t factor,
                          double lambda);

/// Everything a threshold sweep needs per sample, computed once.
struct ExitScores {
  std::vector<double> entropy;
  std::vector<int> classfuse_prediction;
  std::vector<int> fullfuse_prediction;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

ExitScores score_exits(DistributedModel& model, const EpochedDataset& data,
                       std::size_t batch_size = 256);

/// Thresholds k/n for k = 0..n with n = round(1/step). When `calibration`
/// is given, lambda (and so the bandwidth) comes from its entropies while
/// the accuracy still comes from `scores`.
std::vector<SweepPoint> sweep_from_scores(const ExitScores& scores, std::size_t window_len,
                                          std::size_t num_classes, std::size_t factor,
                                          double step = 0.01,
                                          const ExitScores* calibration = nullptr);

std::vector<SweepPoint> sweep_thresholds(DistributedModel& model, const EpochedDataset& data,
                                         double step = 0.01,
                                         const EpochedDataset* calibration = nullptr);

/// Points not dominated in (lower bandwidth, higher accuracy), by bandwidth ascending.
std::vector<SweepPoint> pareto_front(std::span<const SweepPoint> points);

}  // namespace distnet
