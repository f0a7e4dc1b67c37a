#pragma once

#include <filesystem>
#include <vector>

#include "distnet/exit_runtime.hpp"
#include "distnet/run_config.hpp"

namespace distnet {

struct ExperimentData {
  EpochedDataset train;
  EpochedDataset test;
  std::size_t num_classes = 0;
};

/// Synthetic runs emulate one node per class source and standardize every
/// epoch; file runs load node signals as stored. Without `test_data` the last
/// `test_fraction` of the trials becomes the test set.
ExperimentData prepare_data(const RunConfig& config);

DistributedConfig model_config(const RunConfig& config, const ExperimentData& data);

struct BranchAccuracy {
  double classfuse = 0.0;
  double compressfuse = 0.0;
  double fullfuse = 0.0;
};

BranchAccuracy branch_accuracy(DistributedModel& model, const EpochedDataset& data);

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<StageReport> stages;
  std::vector<SweepPoint> sweep;
  BranchAccuracy test;
  std::filesystem::path directory;
};

/// Trains (pipeline or from scratch, optionally fine-tuned on one subject),
/// writes stage checkpoints and the report into <output>/seed<seed>/.
SeedResult run_seed(const RunConfig& config, const ExperimentData& data, std::uint64_t seed);

/// All seeds, spread over `config.workers` threads. Results are in seed-list order.
std::vector<SeedResult> run_experiment(const RunConfig& config);

}  // namespace distnet
