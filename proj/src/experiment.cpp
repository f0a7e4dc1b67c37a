#include "distnet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <numeric>
#include <thread>

#include "distnet/error.hpp"
#include "distnet/preprocess.hpp"
#include "distnet/report.hpp"
#include "distnet/weights.hpp"

namespace distnet {

namespace {

std::pair<EpochedDataset, EpochedDataset> split_tail(const EpochedDataset& all, double fraction) {
  const auto n_test = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(all.size())));
  if (n_test == 0 || n_test >= all.size()) fail(ErrorKind::Config, "test split leaves an empty side");
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t cut = all.size() - n_test;
  return {all.subset(std::span(idx).first(cut)), all.subset(std::span(idx).subspan(cut))};
}

std::size_t infer_classes(const EpochedDataset& d) {
  int top = 1;
  for (int y : d.labels) top = std::max(top, y);
  return static_cast<std::size_t>(top) + 1;
}

}  // namespace

ExperimentData prepare_data(const RunConfig& config) {
  config.validate();
  ExperimentData out;
  if (config.data == "synthetic") {
    SyntheticData syn = generate_synthetic(config.synthetic);
    auto candidates = enumerate_candidate_nodes(syn.layout);
    auto picked = pick_nodes_for_sources(syn, candidates, config.nodes, config.synthetic.source_depth_cm);
    EpochedDataset nodes = emulate_node_signals(syn.cap, picked);
    standardize_epochs(nodes);
    std::tie(out.train, out.test) = split_tail(nodes, config.test_fraction);
    out.num_classes = config.synthetic.num_classes;
  } else {
    EpochedDataset all = load_dataset(config.data);
    if (config.test_data.empty()) {
      std::tie(out.train, out.test) = split_tail(all, config.test_fraction);
    } else {
      out.train = std::move(all);
      out.test = load_dataset(config.test_data);
    }
    out.num_classes = std::max(infer_classes(out.train), infer_classes(out.test));
  }
  if (out.train.channels != config.nodes) {
    fail(ErrorKind::Config, "data has " + std::to_string(out.train.channels) + " node channels but nodes = " +
                                std::to_string(config.nodes));
  }
  if (out.test.channels != out.train.channels || out.test.window_len != out.train.window_len) {
    fail(ErrorKind::Shape, "train and test data differ in channels or window length");
  }
  out.train.validate(out.num_classes);
  out.test.validate(out.num_classes);
  return out;
}

DistributedConfig model_config(const RunConfig& config, const ExperimentData& data) {
  DistributedConfig c;
  c.central.channels = config.nodes;
  c.central.window_len = data.train.window_len;
  c.central.temporal_filters = config.temporal_filters;
  c.central.spatial_filters = config.spatial_filters;
  c.central.num_classes = data.num_classes;
  c.compressor = CompressorConfig::for_factor(config.compression);
  c.fusion_hidden = config.fusion_hidden;
  c.validate();
  return c;
}

BranchAccuracy branch_accuracy(DistributedModel& model, const EpochedDataset& data) {
  ExitScores s = score_exits(model, data);
  NoGradGuard no_grad;
  std::vector<int> cp_pred;
  Objective cp = compressfuse_objective(model);
  cp_pred = predict(cp, data);
  BranchAccuracy acc;
  acc.classfuse = accuracy(s.classfuse_prediction, data.labels);
  acc.compressfuse = accuracy(cp_pred, data.labels);
  acc.fullfuse = accuracy(s.fullfuse_prediction, data.labels);
  return acc;
}

SeedResult run_seed(const RunConfig& config, const ExperimentData& data, std::uint64_t seed) {
  SeedResult result;
  result.seed = seed;
  result.directory = std::filesystem::path(config.output) / ("seed" + std::to_string(seed));
  std::error_code ec;
  std::filesystem::create_directories(result.directory, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + result.directory.string() + ": " + ec.message());

  Rng rng(seed);
  DistributedModel model(model_config(config, data), rng);
  TrainConfig train = config.train;
  train.seed = seed;

  if (config.from_scratch) {
    result.stages.push_back(train_from_scratch(model, data.train, &data.test, train));
    save_weights(model, result.directory / "scratch.bnw");
  } else {
    TrainingPipeline pipeline(model, data.train, &data.test, train, {config.ae_pretrain, nullptr});
    pipeline.on_stage = [&](int stage, const StageReport&) {
      save_weights(model, result.directory / (stage == 0 ? std::string("ae.bnw") : stage_checkpoint_name(stage)));
    };
    result.stages = pipeline.run();
  }

  const EpochedDataset* eval = &data.test;
  EpochedDataset subject_test;
  if (config.subject_finetune >= 0) {
    subject_test = data.test.subject(config.subject_finetune);
    auto [tuned, report] = fine_tune_subject(model, data.train, config.subject_finetune, train, &subject_test);
    result.stages.push_back(std::move(report));
    save_weights(tuned, result.directory / "finetune.bnw");
    model = std::move(tuned);
    eval = &subject_test;
  }

  result.sweep = sweep_thresholds(model, *eval, config.sweep_step);
  result.test = branch_accuracy(model, *eval);
  emit_report(result.sweep, result.stages, result.directory);
  return result;
}

std::vector<SeedResult> run_experiment(const RunConfig& config) {
  ExperimentData data = prepare_data(config);
  std::filesystem::create_directories(config.output);
  {
    std::ofstream cfg(std::filesystem::path(config.output) / "run.cfg");
    cfg << to_text(config);
  }
  std::vector<SeedResult> results(config.seeds.size());
  std::vector<std::exception_ptr> errors(config.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
      try {
        results[i] = run_seed(config, data, config.seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(config.workers, config.seeds.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace distnet
