#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "distnet/dataset.hpp"
#include "distnet/distributed.hpp"
#include "distnet/optim.hpp"

namespace distnet {

struct TrainConfig {
  float lr_fresh = 1e-3f;
  float lr_finetune = 1e-4f;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;

  void validate() const;
};

/// Patience counter over validation losses. A loss counts as an improvement
/// only when strictly lower than the best so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records one epoch; returns true if it is the new best.
  bool update(double val_loss);
  bool should_stop() const { return bad_epochs_ >= patience_; }

  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t epochs_ = 0;
  std::size_t bad_epochs_ = 0;
};

struct LrGroupSummary {
  std::string name;
  float lr = 0.0f;
  std::vector<std::string> params;
};

struct StageReport {
  std::string stage;
  std::size_t epochs_run = 0;
  double best_val_loss = 0.0;
  std::vector<double> val_losses;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
  std::vector<LrGroupSummary> lr_groups;
  std::vector<std::string> frozen;
  std::vector<StageReport> parts;  // per-node sub-stages of stage 1
};

struct DataSplit {
  EpochedDataset train;
  EpochedDataset val;
};

/// Holds out the last `fraction` of each subject's trials (in dataset order)
/// for validation; at least one trial per subject when it has two or more.
DataSplit split_train_val(const EpochedDataset& dataset, double fraction);

/// What a stage optimizes: the forward maps a batch [B, M, L, 1] either to
/// log-probabilities (CrossEntropy) or to a reconstruction of the batch (MSE).
struct Objective {
  ops::LossKind loss = ops::LossKind::CrossEntropy;
  std::function<Tensor(const Tensor& x, const ForwardContext& ctx)> forward;
};

/// Adam over `groups` with early stopping on validation loss. Every parameter
/// of `scope` not in a group is frozen for the duration; on exit the whole
/// scope (parameters and buffers) is restored to the best-validation epoch.
StageReport train_loop(const std::string& stage, std::vector<ParamGroup> groups,
                       const StateDict& scope, const Objective& objective, const DataSplit& data,
                       const EpochedDataset* test, const TrainConfig& config);

/// Mean loss of `objective` in Eval mode.
double evaluate_loss(const Objective& objective, const EpochedDataset& data,
                     std::size_t batch_size = 256);
std::vector<int> predict(const Objective& objective, const EpochedDataset& data,
                         std::size_t batch_size = 256);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

struct PipelineOptions {
  bool ae_pretrain = false;
  /// When set, the central classifier starts from these weights in stage 3.
  const Msfbcnn* central_warm_start = nullptr;
};

/// The staged schedule: (optional AE) -> 1 local classifiers -> 2 ClassFuse
/// -> 3 CompressFuse -> 4 full network. Stages must run in order.
class TrainingPipeline {
 public:
  TrainingPipeline(DistributedModel& model, const EpochedDataset& train,
                   const EpochedDataset* test, TrainConfig config, PipelineOptions options = {});

  StageReport pretrain_autoencoder();
  StageReport train_local_classifiers();
  StageReport train_classfuse();
  StageReport train_compressfuse();
  StageReport train_full_network();

  std::vector<StageReport> run();
  int completed_stage() const { return completed_; }

  /// Called after each stage with its 1-based index (0 for the AE stage).
  std::function<void(int, const StageReport&)> on_stage;

 private:
  void require_stage(int expected);
  void finish(int stage, const StageReport& report);

  DistributedModel& model_;
  DataSplit data_;
  const EpochedDataset* test_;
  TrainConfig config_;
  PipelineOptions options_;
  int completed_ = 0;
  bool ae_done_ = false;
};

std::vector<StageReport> run_pipeline(DistributedModel& model, const EpochedDataset& train,
                                      const EpochedDataset* test, const TrainConfig& config,
                                      PipelineOptions options = {});

StageReport pretrain_autoencoder(DistributedModel& model, const EpochedDataset& train,
                                 const TrainConfig& config);

/// One end-to-end stage on the FullFuse loss, every parameter at lr_fresh.
StageReport train_from_scratch(DistributedModel& model, const EpochedDataset& train,
                               const EpochedDataset* test, const TrainConfig& config);

/// End-to-end fine-tune of a copy of `model` on one subject's trials at
/// lr_finetune. The original model is left untouched.
std::pair<DistributedModel, StageReport> fine_tune_subject(const DistributedModel& model,
                                                          const EpochedDataset& dataset,
                                                          int subject, const TrainConfig& config,
                                                          const EpochedDataset* test = nullptr);

/// Trains a standalone classifier on all channels of the dataset.
StageReport train_centralized(Msfbcnn& model, const EpochedDataset& train,
                              const EpochedDataset* test, const TrainConfig& config);

Objective classfuse_objective(DistributedModel& model);
Objective compressfuse_objective(DistributedModel& model);
Objective fullfuse_objective(DistributedModel& model);

}  // namespace distnet
