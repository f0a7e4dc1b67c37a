#include "distnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "distnet/error.hpp"

namespace distnet {

void TrainConfig::validate() const {
  if (!(lr_fresh > 0.0f) || !(lr_finetune > 0.0f) || !(lr_finetune < lr_fresh)) {
    fail(ErrorKind::Config, "train config: need 0 < lr_finetune < lr_fresh");
  }
  if (batch_size < 1 || max_epochs < 1) fail(ErrorKind::Config, "train config: batch_size and max_epochs must be >= 1");
  if (patience >= max_epochs) fail(ErrorKind::Config, "train config: patience must be < max_epochs");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    fail(ErrorKind::Config, "train config: validation_fraction must be in (0, 1)");
  }
}

bool EarlyStopping::update(double val_loss) {
  ++epochs_;
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epochs_;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

DataSplit split_train_val(const EpochedDataset& dataset, double fraction) {
  if (dataset.empty()) fail(ErrorKind::Config, "cannot split an empty dataset");
  std::set<int> tags(dataset.subjects.begin(), dataset.subjects.end());
  std::vector<std::size_t> train_idx, val_idx;
  for (int tag : tags) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (dataset.subjects[i] == tag) idx.push_back(i);
    }
    std::size_t n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    else n_val = 0;
    train_idx.insert(train_idx.end(), idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
    val_idx.insert(val_idx.end(), idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  if (val_idx.empty()) fail(ErrorKind::Config, "dataset too small for a validation split");
  return {dataset.subset(train_idx), dataset.subset(val_idx)};
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor objective_loss(const Objective& objective, const Tensor& x, std::span<const int> y,
                      const ForwardContext& ctx) {
  Tensor out = objective.forward(x, ctx);
  if (objective.loss == ops::LossKind::CrossEntropy) return ops::cross_entropy(out, y);
  return ops::mse(out, x);
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

// Restores requires_grad flags of frozen parameters on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<NamedTensor> frozen) : frozen_(std::move(frozen)) {
    for (auto& p : frozen_) {
      flags_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(false);
      p.tensor.zero_grad();
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < frozen_.size(); ++i) frozen_[i].tensor.set_requires_grad(flags_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<NamedTensor> frozen_;
  std::vector<bool> flags_;
};

std::vector<ParamGroup> make_groups(std::initializer_list<std::pair<const char*, float>> spec,
                                    std::initializer_list<StateDict> states) {
  std::vector<ParamGroup> groups;
  auto it = states.begin();
  for (const auto& [name, lr] : spec) {
    groups.push_back({name, lr, it->params});
    ++it;
  }
  return groups;
}

}  // namespace

double evaluate_loss(const Objective& objective, const EpochedDataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  ForwardContext ctx{Mode::Eval, nullptr};
  double total = 0.0;
  auto idx = iota_indices(data.size());
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    std::span<const std::size_t> chunk(idx.data() + start, n);
    Tensor x = data.batch(chunk);
    auto y = data.batch_labels(chunk);
    total += static_cast<double>(objective_loss(objective, x, y, ctx).item()) * static_cast<double>(n);
  }
  return total / static_cast<double>(data.size());
}

std::vector<int> predict(const Objective& objective, const EpochedDataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  ForwardContext ctx{Mode::Eval, nullptr};
  std::vector<int> preds;
  preds.reserve(data.size());
  auto idx = iota_indices(data.size());
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    Tensor lp = objective.forward(data.batch(std::span<const std::size_t>(idx.data() + start, n)), ctx);
    const std::size_t k = lp.dim(1);
    auto v = lp.data();
    for (std::size_t b = 0; b < n; ++b) {
      auto row = v.subspan(b * k, k);
      preds.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return preds;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    fail(ErrorKind::Shape, "accuracy: prediction/label count mismatch");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

StageReport train_loop(const std::string& stage, std::vector<ParamGroup> groups,
                       const StateDict& scope, const Objective& objective, const DataSplit& data,
                       const EpochedDataset* test, const TrainConfig& config) {
  config.validate();
  if (data.train.empty() || data.val.empty()) fail(ErrorKind::Config, stage + ": empty training or validation set");
  if (groups.empty()) fail(ErrorKind::Config, stage + ": no parameter groups to train");

  std::set<std::string> trainable;
  StageReport report;
  report.stage = stage;
  for (const auto& g : groups) {
    if (g.params.empty()) fail(ErrorKind::Config, stage + ": parameter group '" + g.name + "' is empty");
    LrGroupSummary summary{g.name, g.lr, {}};
    for (const auto& p : g.params) {
      if (!trainable.insert(p.name).second) {
        fail(ErrorKind::Config, stage + ": parameter '" + p.name + "' appears in two groups");
      }
      summary.params.push_back(p.name);
    }
    report.lr_groups.push_back(std::move(summary));
  }
  std::vector<NamedTensor> frozen;
  for (const auto& p : scope.params) {
    if (!trainable.count(p.name)) {
      frozen.push_back(p);
      report.frozen.push_back(p.name);
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  FreezeGuard freeze(frozen);
  Adam optimizer(std::move(groups));
  Rng rng(config.seed ^ fnv1a(stage));
  ForwardContext train_ctx{Mode::Train, &rng};
  EarlyStopping stopper(config.patience);
  Snapshot best = take_snapshot(scope);

  auto order = iota_indices(data.train.size());
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::span<const std::size_t> chunk(order.data() + start, n);
      Tensor x = data.train.batch(chunk);
      auto y = data.train.batch_labels(chunk);
      optimizer.zero_grad();
      Tensor loss = objective_loss(objective, x, y, train_ctx);
      if (!std::isfinite(loss.item())) fail(ErrorKind::Numeric, stage + ": non-finite training loss");
      loss.backward();
      optimizer.step();
    }
    const double val_loss = evaluate_loss(objective, data.val);
    if (!std::isfinite(val_loss)) fail(ErrorKind::Numeric, stage + ": non-finite validation loss");
    report.val_losses.push_back(val_loss);
    if (stopper.update(val_loss)) best = take_snapshot(scope);
    if (stopper.should_stop()) break;
  }
  restore_snapshot(scope, best);

  report.epochs_run = stopper.epochs();
  report.best_val_loss = stopper.best();
  if (objective.loss == ops::LossKind::CrossEntropy) {
    report.train_accuracy = accuracy(predict(objective, data.train), data.train.labels);
    report.val_accuracy = accuracy(predict(objective, data.val), data.val.labels);
    if (test && !test->empty()) report.test_accuracy = accuracy(predict(objective, *test), test->labels);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Objective classfuse_objective(DistributedModel& model) {
  return {ops::LossKind::CrossEntropy,
          [&model](const Tensor& x, const ForwardContext& ctx) { return model.classfuse_forward(x, ctx); }};
}

Objective compressfuse_objective(DistributedModel& model) {
  return {ops::LossKind::CrossEntropy, [&model](const Tensor& x, const ForwardContext& ctx) {
            return model.compressfuse_forward(x, ctx).first;
          }};
}

Objective fullfuse_objective(DistributedModel& model) {
  return {ops::LossKind::CrossEntropy, [&model](const Tensor& x, const ForwardContext& ctx) {
            return model.fullfuse_forward(x, ctx).fullfuse;
          }};
}

namespace {

Objective autoencoder_objective(DistributedModel& model) {
  return {ops::LossKind::MSE, [&model](const Tensor& x, const ForwardContext&) {
            std::vector<Tensor> channels;
            for (std::size_t i = 0; i < model.nodes(); ++i) {
              channels.push_back(model.reconstruct_node(i, model.compress_node(i, ops::slice(x, 1, i, 1))));
            }
            return ops::concat(channels, 1);
          }};
}

StateDict codec_states(const DistributedModel& model) {
  StateDict s;
  for (std::size_t i = 0; i < model.nodes(); ++i) {
    s.append(model.compressor_state(i));
    s.append(model.reconstructor_state(i));
  }
  return s;
}

StateDict compressfuse_states(const DistributedModel& model) {
  StateDict s = codec_states(model);
  s.append(model.central_state());
  return s;
}

StateDict local_states(const DistributedModel& model) {
  StateDict s;
  for (std::size_t i = 0; i < model.nodes(); ++i) s.append(model.local_state(i));
  return s;
}

}  // namespace

TrainingPipeline::TrainingPipeline(DistributedModel& model, const EpochedDataset& train,
                                   const EpochedDataset* test, TrainConfig config,
                                   PipelineOptions options)
    : model_(model),
      data_((train.validate(model.num_classes()), split_train_val(train, config.validation_fraction))),
      test_(test),
      config_(config),
      options_(options) {
  config_.validate();
  if (train.channels != model.nodes() || train.window_len != model.window_len()) {
    fail(ErrorKind::Shape, "training data has " + std::to_string(train.channels) + " channels of length " +
                               std::to_string(train.window_len) + ", model expects " +
                               std::to_string(model.nodes()) + " of length " +
                               std::to_string(model.window_len()));
  }
}

void TrainingPipeline::require_stage(int expected) {
  if (completed_ != expected - 1) {
    fail(ErrorKind::State, "stage " + std::to_string(expected) + " requested but stage " +
                               std::to_string(completed_) + " is the last completed one");
  }
}

void TrainingPipeline::finish(int stage, const StageReport& report) {
  if (stage > 0) completed_ = stage;
  if (on_stage) on_stage(stage, report);
}

StageReport TrainingPipeline::pretrain_autoencoder() {
  if (completed_ >= 3 || ae_done_) {
    fail(ErrorKind::State, "autoencoder pre-training must run once, before stage 3");
  }
  StageReport r = train_loop("AE", make_groups({{"codec", config_.lr_fresh}}, {codec_states(model_)}),
                             model_.state(), autoencoder_objective(model_), data_, nullptr, config_);
  ae_done_ = true;
  finish(0, r);
  return r;
}

StageReport TrainingPipeline::train_local_classifiers() {
  require_stage(1);
  StageReport combined;
  combined.stage = "stage1";
  double best_sum = 0.0, train_acc = 0.0, val_acc = 0.0, test_acc = 0.0;
  for (std::size_t i = 0; i < model_.nodes(); ++i) {
    Objective obj{ops::LossKind::CrossEntropy, [this, i](const Tensor& x, const ForwardContext& ctx) {
                    return model_.node_classify(i, ops::slice(x, 1, i, 1), ctx);
                  }};
    StageReport part = train_loop("stage1.node" + std::to_string(i),
                                  make_groups({{"local", config_.lr_fresh}}, {model_.local_state(i)}),
                                  model_.state(), obj, data_, test_, config_);
    combined.epochs_run = std::max(combined.epochs_run, part.epochs_run);
    best_sum += part.best_val_loss;
    train_acc += part.train_accuracy;
    val_acc += part.val_accuracy;
    test_acc += part.test_accuracy;
    combined.wall_seconds += part.wall_seconds;
    combined.lr_groups.push_back({"local." + std::to_string(i), config_.lr_fresh, part.lr_groups[0].params});
    combined.parts.push_back(std::move(part));
  }
  const double m = static_cast<double>(model_.nodes());
  combined.best_val_loss = best_sum / m;
  combined.train_accuracy = train_acc / m;
  combined.val_accuracy = val_acc / m;
  combined.test_accuracy = test_acc / m;
  std::set<std::string> trained;
  for (const auto& g : combined.lr_groups) trained.insert(g.params.begin(), g.params.end());
  for (const auto& p : model_.state().params) {
    if (!trained.count(p.name)) combined.frozen.push_back(p.name);
  }
  finish(1, combined);
  return combined;
}

StageReport TrainingPipeline::train_classfuse() {
  require_stage(2);
  StageReport r = train_loop("stage2",
                             make_groups({{"classfuse_mlp", config_.lr_fresh}, {"local_classifiers", config_.lr_finetune}},
                                         {model_.classfuse_mlp_state(), local_states(model_)}),
                             model_.state(), classfuse_objective(model_), data_, test_, config_);
  finish(2, r);
  return r;
}

StageReport TrainingPipeline::train_compressfuse() {
  require_stage(3);
  if (options_.central_warm_start) {
    copy_state(options_.central_warm_start->state("central."), model_.central_state());
  }
  std::vector<ParamGroup> groups;
  if (ae_done_) {
    // codec layers were already trained once, so they only fine-tune here
    groups = make_groups({{"central", config_.lr_fresh}, {"codec", config_.lr_finetune}},
                         {model_.central_state(), codec_states(model_)});
  } else {
    groups = make_groups({{"compressfuse", config_.lr_fresh}}, {compressfuse_states(model_)});
  }
  if (options_.central_warm_start) groups[0].lr = config_.lr_finetune;
  StageReport r = train_loop("stage3", std::move(groups), model_.state(), compressfuse_objective(model_),
                             data_, test_, config_);
  finish(3, r);
  return r;
}

StageReport TrainingPipeline::train_full_network() {
  require_stage(4);
  StateDict pretrained = local_states(model_);
  pretrained.append(model_.classfuse_mlp_state());
  pretrained.append(compressfuse_states(model_));
  StageReport r = train_loop("stage4",
                             make_groups({{"fullfuse_mlp", config_.lr_fresh}, {"pretrained", config_.lr_finetune}},
                                         {model_.fullfuse_mlp_state(), pretrained}),
                             model_.state(), fullfuse_objective(model_), data_, test_, config_);
  finish(4, r);
  return r;
}

std::vector<StageReport> TrainingPipeline::run() {
  std::vector<StageReport> reports;
  reports.push_back(train_local_classifiers());
  reports.push_back(train_classfuse());
  if (options_.ae_pretrain) reports.push_back(pretrain_autoencoder());
  reports.push_back(train_compressfuse());
  reports.push_back(train_full_network());
  return reports;
}

std::vector<StageReport> run_pipeline(DistributedModel& model, const EpochedDataset& train,
                                      const EpochedDataset* test, const TrainConfig& config,
                                      PipelineOptions options) {
  TrainingPipeline pipeline(model, train, test, config, options);
  return pipeline.run();
}

StageReport pretrain_autoencoder(DistributedModel& model, const EpochedDataset& train,
                                 const TrainConfig& config) {
  DataSplit data = split_train_val(train, config.validation_fraction);
  return train_loop("AE", make_groups({{"codec", config.lr_fresh}}, {codec_states(model)}), model.state(),
                    autoencoder_objective(model), data, nullptr, config);
}

StageReport train_from_scratch(DistributedModel& model, const EpochedDataset& train,
                               const EpochedDataset* test, const TrainConfig& config) {
  train.validate(model.num_classes());
  DataSplit data = split_train_val(train, config.validation_fraction);
  return train_loop("scratch", make_groups({{"all", config.lr_fresh}}, {model.state()}), model.state(),
                    fullfuse_objective(model), data, test, config);
}

std::pair<DistributedModel, StageReport> fine_tune_subject(const DistributedModel& model,
                                                          const EpochedDataset& dataset, int subject,
                                                          const TrainConfig& config,
                                                          const EpochedDataset* test) {
  EpochedDataset own = dataset.subject(subject);
  DistributedModel copy = model.clone();
  DataSplit data = split_train_val(own, config.validation_fraction);
  StageReport r = train_loop("finetune.subject" + std::to_string(subject),
                             make_groups({{"all", config.lr_finetune}}, {copy.state()}), copy.state(),
                             fullfuse_objective(copy), data, test, config);
  return {std::move(copy), std::move(r)};
}

StageReport train_centralized(Msfbcnn& model, const EpochedDataset& train, const EpochedDataset* test,
                              const TrainConfig& config) {
  train.validate(model.config().num_classes);
  DataSplit data = split_train_val(train, config.validation_fraction);
  Objective obj{ops::LossKind::CrossEntropy,
                [&model](const Tensor& x, const ForwardContext& ctx) { return model.forward(x, ctx); }};
  return train_loop("centralized", make_groups({{"central", config.lr_fresh}}, {model.state()}), model.state(),
                    obj, data, test, config);
}

}  // namespace distnet
