#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "distnet/error.hpp"
#include "distnet/experiment.hpp"
#include "distnet/report.hpp"
#include "distnet/run_config.hpp"
#include "distnet/simulate.hpp"
#include "distnet/weights.hpp"
#include "support.hpp"

using namespace distnet;
using testing_support::planted_candidates;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::path(::testing::TempDir()) / ("distnet_sim_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DistributedConfig small_model(std::size_t M, std::int64_t D, std::size_t L = 75) {
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

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

class SimTest : public ::testing::Test {
 protected:
  Rng rng{2};
  DistributedModel model{small_model(3, 5), rng};
  EpochedDataset data = planted_candidates(3, 3, 1, 30, 75);
};

TEST_F(SimTest, ThresholdOneSendsOnlyClassVectors) {
  SimulationResult r = simulate_run(model, data, ExitPolicy{1.0});
  EXPECT_EQ(r.log.count(PayloadKind::ClassVector), 90u);
  EXPECT_EQ(r.log.count(PayloadKind::CompressedFrame), 0u);
  for (const auto& m : r.log.messages) {
    EXPECT_EQ(m.scalars, 4u);
    EXPECT_EQ(m.bytes, 16u);
  }
}

TEST_F(SimTest, ThresholdZeroEscalatesEverySample) {
  const std::size_t before = model.central_invocations();
  SimulationResult r = simulate_run(model, data, ExitPolicy{0.0});
  EXPECT_EQ(r.log.count(PayloadKind::CompressedFrame), 30u * 3u);
  EXPECT_EQ(model.central_invocations() - before, 30u);
  for (const auto& m : r.log.messages) {
    if (m.kind == PayloadKind::CompressedFrame) {
      EXPECT_EQ(m.scalars, 15u);
    }
  }
}

TEST_F(SimTest, EventOrderAndConservation) {
  ExitScores s = score_exits(model, data);
  std::vector<double> h = s.entropy;
  std::sort(h.begin(), h.end());
  const double threshold = h[h.size() / 2];
  SimulationResult r = simulate_run(model, data, ExitPolicy{threshold});
  std::size_t k = 0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t i = 0; i < 3; ++i, ++k) {
      ASSERT_LT(k, r.log.messages.size());
      EXPECT_EQ(r.log.messages[k].sample, n);
      EXPECT_EQ(r.log.messages[k].node, i);
      EXPECT_EQ(r.log.messages[k].kind, PayloadKind::ClassVector);
    }
    if (!r.trace.samples[n].exited) {
      for (std::size_t i = 0; i < 3; ++i, ++k) {
        EXPECT_EQ(r.log.messages[k].sample, n);
        EXPECT_EQ(r.log.messages[k].kind, PayloadKind::CompressedFrame);
      }
    }
  }
  EXPECT_EQ(k, r.log.messages.size());
  EXPECT_EQ(r.log.count(PayloadKind::CompressedFrame), 3 * (data.size() - r.trace.exited_count()));
  EXPECT_EQ(r.log.total_bytes(), kBytesPerScalar * r.log.total_scalars());
  // same decisions as the batched exit runtime
  ExitResult e = infer_with_exit(model, data, ExitPolicy{threshold});
  EXPECT_EQ(r.predictions, e.predictions);
}

TEST_F(SimTest, LogBandwidthEqualsFormulaWhenDDividesL) {
  for (double t : {0.0, 0.5, 0.9, 0.97, 1.0}) {
    SimulationResult r = simulate_run(model, data, ExitPolicy{t});
    const double lambda = r.trace.lambda();
    // recomputed from log totals by hand
    const double per_node = static_cast<double>(r.log.total_scalars()) / (30.0 * 3.0);
    EXPECT_NEAR(per_node / 75.0, relative_bandwidth(75, 4, 5, lambda), 1e-9) << t;
    EXPECT_NEAR(r.log.relative_bandwidth(), relative_bandwidth(75, 4, 5, lambda), 1e-9) << t;
  }
}

TEST(Sim, RoundedFrameLengthWhenDDoesNotDivideL) {
  Rng rng(4);
  DistributedModel m(small_model(2, 4), rng);
  EpochedDataset data = planted_candidates(4, 2, 0, 20, 75);
  SimulationResult r = simulate_run(m, data, ExitPolicy{0.0});
  const std::size_t Lp = m.compressed_len();
  EXPECT_EQ(Lp, 19u);
  const double lambda = r.trace.lambda();
  EXPECT_NEAR(r.log.relative_bandwidth(), (4.0 + (1.0 - lambda) * Lp) / 75.0, 1e-12);
}

TEST(Weights, RoundTripIsBitExact) {
  Rng rng(5);
  fs::path dir = scratch_dir("weights");
  DistributedModel m(small_model(2, 4), rng);
  // move the running stats off their defaults
  ForwardContext train{Mode::Train, &rng};
  m.fullfuse_forward(testing_support::random_tensor({4, 2, 75, 1}, rng), train);
  save_weights(m, dir / "m.bnw");
  DistributedModel back = load_weights(dir / "m.bnw");
  EXPECT_EQ(take_snapshot(back.state()), take_snapshot(m.state()));
  auto a = m.state().all(), b = back.state().all();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].name, b[i].name);
  Tensor probe = testing_support::random_tensor({3, 2, 75, 1}, rng);
  ForwardContext eval{Mode::Eval, nullptr};
  Tensor ya = m.fullfuse_forward(probe, eval).fullfuse, yb = back.fullfuse_forward(probe, eval).fullfuse;
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya.data()[i], yb.data()[i]);
  save_weights(back, dir / "again.bnw");
  EXPECT_EQ(slurp(dir / "m.bnw"), slurp(dir / "again.bnw"));
}

TEST(Weights, MismatchedNodeCountIsDescriptive) {
  Rng rng(6);
  fs::path dir = scratch_dir("mismatch");
  DistributedModel three(small_model(3, 4), rng);
  save_weights(three, dir / stage_checkpoint_name(2));
  DistributedModel two(small_model(2, 4), rng);
  try {
    load_weights_into(two, dir / "stage2.bnw");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("M=3"), std::string::npos);
    EXPECT_NE(msg.find("M=2"), std::string::npos);
    EXPECT_NE(msg.find("local.2."), std::string::npos);
    EXPECT_NE(msg.find("central.spatialconv.weight"), std::string::npos);
  }
}

TEST(Weights, CorruptFilesAreFormatErrors) {
  Rng rng(7);
  fs::path dir = scratch_dir("corrupt");
  DistributedModel m(small_model(1, 1), rng);
  save_weights(m, dir / "m.bnw");
  std::string bytes = slurp(dir / "m.bnw");
  auto kind_of = [&](const std::string& content) {
    std::ofstream(dir / "x.bnw", std::ios::binary) << content;
    try {
      load_weights(dir / "x.bnw");
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of(bad_magic), ErrorKind::Format);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 3)), ErrorKind::Format);
  EXPECT_EQ(kind_of(bytes + "z"), ErrorKind::Format);
  std::string bad_version = bytes;
  bad_version[4] = 7;
  EXPECT_EQ(kind_of(bad_version), ErrorKind::Format);
  EXPECT_THROW(load_weights(dir / "missing.bnw"), Error);
  EXPECT_EQ(stage_checkpoint_name(4), "stage4.bnw");
  EXPECT_THROW(stage_checkpoint_name(5), Error);
}

TEST(Report, FilesAndDeterminism) {
  Rng rng(8);
  DistributedModel model(small_model(2, 5), rng);
  EpochedDataset data = planted_candidates(8, 2, 0, 24, 75);
  auto points = sweep_thresholds(model, data, 0.01);
  StageReport st;
  st.stage = "stage1";
  st.epochs_run = 3;
  st.best_val_loss = 1.25;
  st.val_losses = {1.5, 1.25, 1.3};
  st.lr_groups = {{"local", 1e-3f, {"local.0.dense.weight"}}};
  fs::path a = scratch_dir("report_a"), b = scratch_dir("report_b");
  emit_report(points, {st}, a);
  emit_report(points, {st}, b);
  for (const char* f : {"sweep.csv", "pareto.csv", "stages.json"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  auto sweep = lines(a / "sweep.csv");
  ASSERT_EQ(sweep.size(), 102u);
  EXPECT_EQ(sweep[0], "threshold,lambda,bandwidth,accuracy");
  auto pareto = lines(a / "pareto.csv");
  EXPECT_EQ(pareto[0], sweep[0]);
  std::set<std::string> rows(sweep.begin() + 1, sweep.end());
  for (std::size_t i = 1; i < pareto.size(); ++i) EXPECT_TRUE(rows.count(pareto[i])) << pareto[i];

  auto back = read_sweep_csv(a / "sweep.csv");
  ASSERT_EQ(back.size(), points.size());
  for (std::size_t i = 0; i < points.size(); ++i) EXPECT_NEAR(back[i].bandwidth, points[i].bandwidth, 1e-9);
  auto stages = read_stage_reports(a / "stages.json");
  ASSERT_EQ(stages.size(), 1u);
  EXPECT_EQ(stages[0].stage, "stage1");
  EXPECT_EQ(stages[0].val_losses, st.val_losses);
  EXPECT_TRUE(std::isnan(stages[0].test_accuracy));

  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333333");
  EXPECT_THROW(emit_report({}, {st}, a), Error);
}

TEST(RunConfig, ParseAndRoundTrip) {
  std::istringstream in(R"(# comment
nodes = 4
compression = 9   # trailing comment
seeds = 1, 2,3
train.max_epochs = 30
synthetic.snr_db = -7.5
ae_pretrain = yes
output = out dir
)");
  RunConfig c = parse_run_config(in);
  EXPECT_EQ(c.nodes, 4u);
  EXPECT_EQ(c.compression, 9);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.train.max_epochs, 30u);
  EXPECT_EQ(c.synthetic.snr_db, -7.5);
  EXPECT_TRUE(c.ae_pretrain);
  EXPECT_EQ(c.output, "out dir");
  c.train.lr_fresh = 0.1f + 0.2f;
  c.sweep_step = 0.1 + 0.2;
  std::istringstream again(to_text(c));
  RunConfig d = parse_run_config(again);
  EXPECT_EQ(to_text(d), to_text(c));
  EXPECT_EQ(d.train.lr_fresh, c.train.lr_fresh);
  EXPECT_EQ(d.sweep_step, c.sweep_step);
}

TEST(RunConfig, ErrorsCarryLineNumbers) {
  std::istringstream unknown("nodes = 2\nbogus = 1\n");
  try {
    parse_run_config(unknown, "cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
    EXPECT_NE(std::string(e.what()).find("cfg:2"), std::string::npos);
  }
  std::istringstream bad("nodes = two\n");
  EXPECT_THROW(parse_run_config(bad), Error);
  RunConfig c;
  c.seeds.clear();
  EXPECT_THROW(c.validate(), Error);
  c = RunConfig{};
  c.data = "/nonexistent/file.bnds";
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Experiment, SeedDirectoryLayout) {
  RunConfig c;
  c.synthetic.trials_per_class = 12;
  c.synthetic.window_len = 75;
  c.nodes = 2;
  c.temporal_filters = 2;
  c.spatial_filters = 2;
  c.fusion_hidden = 8;
  c.train.max_epochs = 2;
  c.train.patience = 1;
  c.sweep_step = 0.25;
  c.seeds = {3};
  c.output = scratch_dir("experiment").string();
  auto results = run_experiment(c);
  ASSERT_EQ(results.size(), 1u);
  const fs::path dir = results[0].directory;
  for (const char* f : {"stage1.bnw", "stage2.bnw", "stage3.bnw", "stage4.bnw", "sweep.csv", "pareto.csv",
                        "stages.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(fs::path(c.output) / "run.cfg"));
  EXPECT_EQ(lines(dir / "sweep.csv").size(), 6u);
  DistributedModel final_model = load_weights(dir / "stage4.bnw");
  EXPECT_EQ(final_model.nodes(), 2u);
}
