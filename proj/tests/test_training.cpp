#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "distnet/error.hpp"
#include "distnet/training.hpp"
#include "support.hpp"

using namespace distnet;
using testing_support::planted_candidates;
using testing_support::random_tensor;

namespace {

EpochedDataset random_dataset(std::size_t n, std::size_t channels, std::size_t len, Rng& rng,
                              int label = 0) {
  EpochedDataset d;
  d.channels = channels;
  d.window_len = len;
  for (std::size_t i = 0; i < n * channels * len; ++i) d.samples.push_back(static_cast<float>(rng.normal()));
  d.labels.assign(n, label);
  d.subjects.assign(n, 0);
  return d;
}

// Validation loss follows `script` (two classes, every label 0); training
// still moves `p` through a real gradient.
struct ScriptedObjective {
  Tensor p;
  std::vector<double> script;
  std::vector<std::vector<float>> p_at_eval;

  Objective objective() {
    return {ops::LossKind::CrossEntropy, [this](const Tensor& x, const ForwardContext& ctx) {
              if (ctx.mode == Mode::Train) return ops::log_softmax(ops::dense(ops::reshape(x, {x.dim(0), 4}), p));
              const std::size_t k = p_at_eval.size();
              p_at_eval.emplace_back(p.data().begin(), p.data().end());
              const double loss = k < script.size() ? script[k] : 1.0;
              const float q = static_cast<float>(std::exp(-loss));
              std::vector<float> rows;
              for (std::size_t b = 0; b < x.dim(0); ++b) {
                rows.push_back(std::log(q));
                rows.push_back(std::log(1.0f - q));
              }
              return Tensor::from_data({x.dim(0), 2}, rows);
            }};
  }
};

TrainConfig small_config(std::size_t epochs = 3, std::size_t patience = 2) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.patience = patience;
  c.batch_size = 32;
  return c;
}

DistributedConfig tiny_model(std::size_t M, std::size_t L, std::int64_t D) {
  DistributedConfig c;
  c.central.channels = M;
  c.central.window_len = L;
  c.central.temporal_filters = 2;
  c.central.spatial_filters = 2;
  c.central.num_classes = 4;
  c.compressor = CompressorConfig::for_factor(D);
  c.fusion_hidden = 8;
  return c;
}

// Checks the lr audit: every parameter in exactly one group or frozen.
void expect_partition(const StageReport& r, const DistributedModel& m) {
  std::set<std::string> seen;
  std::size_t listed = 0;
  for (const auto& g : r.lr_groups) {
    for (const auto& n : g.params) {
      seen.insert(n);
      ++listed;
    }
  }
  for (const auto& n : r.frozen) {
    seen.insert(n);
    ++listed;
  }
  EXPECT_EQ(listed, seen.size()) << r.stage;
  EXPECT_EQ(seen.size(), m.state().params.size()) << r.stage;
}

const LrGroupSummary* group(const StageReport& r, const std::string& name) {
  for (const auto& g : r.lr_groups) {
    if (g.name == name) return &g;
  }
  return nullptr;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr_finetune = c.lr_fresh;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.patience = c.max_epochs;
  EXPECT_THROW(c.validate(), Error);
}

TEST(EarlyStopping, PlateauTrace) {
  EarlyStopping s(5);
  const double trace[] = {1.0, 1.1, 1.1, 1.1, 1.1, 1.1};
  for (std::size_t e = 0; e < 6; ++e) {
    EXPECT_FALSE(s.should_stop()) << e;
    s.update(trace[e]);
  }
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 1u);
  EXPECT_EQ(s.best(), 1.0);
}

TEST(EarlyStopping, EqualLossIsNotAnImprovement) {
  EarlyStopping s(2);
  EXPECT_TRUE(s.update(1.0));
  EXPECT_FALSE(s.update(1.0));
  EXPECT_FALSE(s.update(1.0));
  EXPECT_TRUE(s.should_stop());
}

TEST(SplitTrainVal, LastFractionPerSubject) {
  Rng rng(1);
  EpochedDataset d = random_dataset(30, 1, 15, rng);
  for (std::size_t i = 0; i < 30; ++i) {
    d.subjects[i] = static_cast<int>(i % 2);
    d.labels[i] = static_cast<int>(i);
  }
  DataSplit s = split_train_val(d, 0.1);
  // each subject has 15 trials: ceil-or-round gives at least 1 held out
  ASSERT_EQ(s.val.size() + s.train.size(), 30u);
  std::set<int> val_labels(s.val.labels.begin(), s.val.labels.end());
  for (int subject : {0, 1}) {
    int last = -1;
    for (std::size_t i = 0; i < 30; ++i) {
      if (d.subjects[i] == subject) last = d.labels[i];
    }
    EXPECT_TRUE(val_labels.count(last)) << "subject " << subject;
  }
  for (int l : s.train.labels) {
    for (int v : s.val.labels) {
      if (d.subjects[static_cast<std::size_t>(l)] == d.subjects[static_cast<std::size_t>(v)]) {
        EXPECT_LT(l, v);
      }
    }
  }
}

TEST(TrainLoop, StopsAfterPlateauAndRestoresFirstEpoch) {
  Rng rng(2);
  ScriptedObjective s{random_tensor({4, 2}, rng, -0.1, 0.1, true), {1.0, 1.1, 1.1, 1.1, 1.1, 1.1}, {}};
  DataSplit data{random_dataset(16, 1, 4, rng), random_dataset(8, 1, 4, rng)};
  TrainConfig cfg;
  StateDict scope{{{"p", s.p}}, {}};
  StageReport r = train_loop("scripted", {{"p", 1e-2f, {{"p", s.p}}}}, scope, s.objective(), data, nullptr, cfg);
  EXPECT_EQ(r.epochs_run, 6u);
  ASSERT_EQ(r.val_losses.size(), 6u);
  EXPECT_NEAR(r.best_val_loss, 1.0, 1e-6);
  ASSERT_GE(s.p_at_eval.size(), 6u);
  EXPECT_NE(s.p_at_eval[5], s.p_at_eval[0]);
  std::vector<float> now(s.p.data().begin(), s.p.data().end());
  EXPECT_EQ(now, s.p_at_eval[0]);
}

TEST(TrainLoop, StrictlyDecreasingRunsAllEpochs) {
  Rng rng(3);
  std::vector<double> script;
  for (int e = 0; e < 50; ++e) script.push_back(1.0 / (e + 1.0));
  ScriptedObjective s{random_tensor({4, 2}, rng, -0.1, 0.1, true), script, {}};
  DataSplit data{random_dataset(16, 1, 4, rng), random_dataset(8, 1, 4, rng)};
  TrainConfig cfg;
  StateDict scope{{{"p", s.p}}, {}};
  StageReport r = train_loop("scripted", {{"p", 1e-2f, {{"p", s.p}}}}, scope, s.objective(), data, nullptr, cfg);
  EXPECT_EQ(r.epochs_run, 50u);
}

TEST(TrainLoop, RejectsEmptyInputsAndOverlappingGroups) {
  Rng rng(4);
  Tensor p = random_tensor({4, 2}, rng, -0.1, 0.1, true);
  ScriptedObjective s{p, {}, {}};
  DataSplit data{random_dataset(16, 1, 4, rng), random_dataset(8, 1, 4, rng)};
  StateDict scope{{{"p", p}}, {}};
  auto kind = [&](std::vector<ParamGroup> groups, const DataSplit& d) {
    try {
      train_loop("x", std::move(groups), scope, s.objective(), d, nullptr, small_config());
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind({}, data), ErrorKind::Config);
  EXPECT_EQ(kind({{"a", 1e-3f, {{"p", p}}}, {"b", 1e-3f, {{"p", p}}}}, data), ErrorKind::Config);
  DataSplit empty{EpochedDataset{}, data.val};
  EXPECT_EQ(kind({{"a", 1e-3f, {{"p", p}}}}, empty), ErrorKind::Config);
}

TEST(TrainLoop, FrozenParametersStayPut) {
  Rng rng(5);
  Tensor a = random_tensor({4, 2}, rng, -0.1, 0.1, true);
  Tensor b = random_tensor({4, 2}, rng, -0.1, 0.1, true);
  Objective obj{ops::LossKind::CrossEntropy, [&](const Tensor& x, const ForwardContext&) {
                  Tensor f = ops::reshape(x, {x.dim(0), 4});
                  return ops::log_softmax(ops::add(ops::dense(f, a), ops::dense(f, b)));
                }};
  DataSplit data{random_dataset(16, 1, 4, rng), random_dataset(8, 1, 4, rng)};
  std::vector<float> b0(b.data().begin(), b.data().end()), a0(a.data().begin(), a.data().end());
  StateDict scope{{{"a", a}, {"b", b}}, {}};
  StageReport r = train_loop("freeze", {{"a", 1e-2f, {{"a", a}}}}, scope, obj, data, nullptr, small_config());
  EXPECT_EQ(std::vector<float>(b.data().begin(), b.data().end()), b0);
  EXPECT_NE(std::vector<float>(a.data().begin(), a.data().end()), a0);
  EXPECT_EQ(r.frozen, std::vector<std::string>{"b"});
  EXPECT_TRUE(b.requires_grad());
}

TEST(Stage1, SeparableSingleChannelAbove90) {
  EpochedDataset train = planted_candidates(11, 1, 0, 400, 150, 4, 2.0);
  EpochedDataset test = planted_candidates(12, 1, 0, 120, 150, 4, 2.0);
  Rng rng(1);
  DistributedConfig mc = tiny_model(1, 150, 1);
  mc.central.temporal_filters = 6;
  mc.central.spatial_filters = 6;
  DistributedModel m(mc, rng);
  TrainConfig cfg;
  cfg.max_epochs = 30;
  cfg.batch_size = 32;
  TrainingPipeline p(m, train, &test, cfg);
  StageReport r = p.train_local_classifiers();
  EXPECT_GT(r.test_accuracy, 0.9) << "epochs " << r.epochs_run << " train " << r.train_accuracy;
  // the returned weights reproduce the best recorded validation loss
  ASSERT_EQ(r.parts.size(), 1u);
  const auto& vl = r.parts[0].val_losses;
  DataSplit split = split_train_val(train, cfg.validation_fraction);
  Objective obj{ops::LossKind::CrossEntropy,
                [&](const Tensor& x, const ForwardContext& ctx) { return m.node_classify(0, x, ctx); }};
  EXPECT_EQ(evaluate_loss(obj, split.val), *std::min_element(vl.begin(), vl.end()));
}

class PipelineTest : public ::testing::Test {
 protected:
  EpochedDataset train = planted_candidates(21, 2, 1, 96, 75, 4, 1.5);
  EpochedDataset test = planted_candidates(22, 2, 1, 32, 75, 4, 1.5);
  TrainConfig cfg = small_config();
};

TEST_F(PipelineTest, FourReportsInOrderWithLrAudit) {
  Rng rng(3);
  DistributedModel m(tiny_model(2, 75, 4), rng);
  std::vector<int> seen;
  TrainingPipeline p(m, train, &test, cfg);
  p.on_stage = [&](int k, const StageReport&) { seen.push_back(k); };
  auto reports = p.run();
  ASSERT_EQ(reports.size(), 4u);
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(reports[0].stage, "stage1");
  EXPECT_EQ(reports[3].stage, "stage4");
  for (const auto& r : reports) {
    expect_partition(r, m);
    EXPECT_LE(r.epochs_run, cfg.max_epochs);
  }
  for (const auto& g : reports[0].lr_groups) EXPECT_EQ(g.lr, cfg.lr_fresh);
  ASSERT_TRUE(group(reports[1], "classfuse_mlp"));
  EXPECT_EQ(group(reports[1], "classfuse_mlp")->lr, cfg.lr_fresh);
  EXPECT_EQ(group(reports[1], "local_classifiers")->lr, cfg.lr_finetune);
  for (const auto& g : reports[2].lr_groups) EXPECT_EQ(g.lr, cfg.lr_fresh);
  ASSERT_EQ(reports[3].lr_groups.size(), 2u);
  EXPECT_EQ(group(reports[3], "fullfuse_mlp")->lr, cfg.lr_fresh);
  EXPECT_EQ(group(reports[3], "pretrained")->lr, cfg.lr_finetune);
  EXPECT_TRUE(reports[3].frozen.empty());
  EXPECT_EQ(group(reports[3], "fullfuse_mlp")->params.size(), m.fullfuse_mlp_state().params.size());
}

TEST_F(PipelineTest, StagesOutOfOrderAreRejected) {
  Rng rng(3);
  DistributedModel m(tiny_model(2, 75, 4), rng);
  TrainingPipeline p(m, train, nullptr, cfg);
  try {
    p.train_compressfuse();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::State);
  }
  p.train_local_classifiers();
  EXPECT_THROW(p.train_local_classifiers(), Error);
  EXPECT_THROW(p.train_full_network(), Error);
}

TEST_F(PipelineTest, AutoencoderBeforeStage3Only) {
  Rng rng(3);
  DistributedModel m(tiny_model(2, 75, 4), rng);
  std::vector<int> seen;
  PipelineOptions opt;
  opt.ae_pretrain = true;
  TrainingPipeline p(m, train, nullptr, cfg, opt);
  p.on_stage = [&](int k, const StageReport& r) {
    seen.push_back(k);
    if (k == 0) {
      EXPECT_EQ(r.stage, "AE");
    }
  };
  auto reports = p.run();
  ASSERT_EQ(reports.size(), 5u);
  std::vector<std::string> names;
  for (const auto& r : reports) names.push_back(r.stage);
  const auto ae = std::find(names.begin(), names.end(), "AE");
  const auto s3 = std::find(names.begin(), names.end(), "stage3");
  ASSERT_NE(ae, names.end());
  EXPECT_EQ(ae + 1, s3);
  EXPECT_EQ(std::count(seen.begin(), seen.end(), 0), 1);
  EXPECT_THROW(p.pretrain_autoencoder(), Error);
}

TEST_F(PipelineTest, AutoencoderFlagOffMatchesPlainRun) {
  auto run = [&](bool explicit_off) {
    Rng rng(5);
    DistributedModel m(tiny_model(2, 75, 4), rng);
    PipelineOptions opt;
    opt.ae_pretrain = false;
    if (explicit_off) {
      run_pipeline(m, train, nullptr, cfg, opt);
    } else {
      run_pipeline(m, train, nullptr, cfg);
    }
    return take_snapshot(m.state());
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(Autoencoder, IdentityReachableAtFactorOne) {
  // smooth signals: a few low-frequency sinusoids per trial
  Rng rng(8);
  EpochedDataset d;
  d.channels = 1;
  d.window_len = 75;
  for (int n = 0; n < 96; ++n) {
    const double f = rng.uniform(1.0, 4.0), ph = rng.uniform(0.0, 6.28);
    for (int t = 0; t < 75; ++t) d.samples.push_back(static_cast<float>(std::sin(2 * 3.14159265 * f * t / 250.0 + ph)));
    d.labels.push_back(n % 4);
    d.subjects.push_back(0);
  }
  DistributedModel m(tiny_model(1, 75, 1), rng);
  TrainConfig cfg;
  cfg.lr_fresh = 1e-2f;
  cfg.lr_finetune = 1e-3f;
  cfg.max_epochs = 150;
  cfg.patience = 10;
  cfg.batch_size = 8;
  StageReport r = pretrain_autoencoder(m, d, cfg);
  EXPECT_LT(r.best_val_loss, 1e-3) << "epochs " << r.epochs_run << " first " << r.val_losses.front() << " last " << r.val_losses.back();
  EXPECT_TRUE(std::isnan(r.train_accuracy));
}

TEST_F(PipelineTest, FromScratchSingleReportDeterministic) {
  auto run = [&] {
    Rng rng(6);
    DistributedModel m(tiny_model(2, 75, 4), rng);
    StageReport r = train_from_scratch(m, train, &test, cfg);
    return std::make_pair(r, take_snapshot(m.state()));
  };
  auto [r1, w1] = run();
  auto [r2, w2] = run();
  EXPECT_EQ(r1.stage, "scratch");
  ASSERT_EQ(r1.lr_groups.size(), 1u);
  EXPECT_EQ(r1.lr_groups[0].lr, cfg.lr_fresh);
  EXPECT_TRUE(r1.frozen.empty());
  EXPECT_EQ(w1, w2);
  EXPECT_EQ(r1.val_losses, r2.val_losses);
}

TEST_F(PipelineTest, ReportsReproducible) {
  auto run = [&] {
    Rng rng(7);
    DistributedModel m(tiny_model(2, 75, 4), rng);
    std::vector<std::vector<double>> losses;
    for (const auto& r : run_pipeline(m, train, &test, cfg)) losses.push_back(r.val_losses);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST_F(PipelineTest, SubjectFineTune) {
  for (std::size_t i = 0; i < train.size(); ++i) train.subjects[i] = static_cast<int>(i % 2);
  Rng rng(8);
  DistributedModel m(tiny_model(2, 75, 4), rng);
  run_pipeline(m, train, nullptr, cfg);
  const Snapshot base = take_snapshot(m.state());
  auto [tuned, report] = fine_tune_subject(m, train, 1, cfg);
  EXPECT_EQ(take_snapshot(m.state()), base);
  EXPECT_NE(take_snapshot(tuned.state()), base);
  EXPECT_EQ(report.lr_groups.size(), 1u);
  EXPECT_EQ(report.lr_groups[0].lr, cfg.lr_finetune);
  EXPECT_THROW(fine_tune_subject(m, train, 7, cfg), Error);
}
