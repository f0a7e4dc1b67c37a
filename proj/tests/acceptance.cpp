// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "distnet/error.hpp"
#include "distnet/experiment.hpp"
#include "distnet/report.hpp"
#include "distnet/sensor.hpp"
#include "distnet/simulate.hpp"
#include "distnet/weights.hpp"
#include "support.hpp"

using namespace distnet;
using testing_support::grad_check;
using testing_support::random_tensor;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int criterion, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", criterion, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void guarded(int criterion, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(criterion, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "distnet_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void criterion1() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(101);
  ForwardContext eval{Mode::Eval, nullptr};
  std::vector<std::pair<std::string, double>> errs;
  {
    Tensor x = random_tensor({2, 2, 9, 1}, rng, -1, 1, true), k = random_tensor({3, 2, 5, 1}, rng, -1, 1, true);
    errs.emplace_back("conv2d", grad_check([&] { return ops::conv2d(x, k, {2, 1}, Padding::Same); }, {x, k}));
  }
  {
    Tensor y = random_tensor({2, 1, 4, 1}, rng, -1, 1, true), k = random_tensor({1, 1, 5, 1}, rng, -1, 1, true);
    errs.emplace_back("conv_transposed",
                      grad_check([&] { return ops::conv2d_transposed(y, k, {2, 1}, 8); }, {y, k}));
  }
  {
    Tensor x = random_tensor({3, 2, 6, 1}, rng, -2, 2, true);
    Tensor g = random_tensor({2}, rng, 0.5, 1.5, true), b = random_tensor({2}, rng, -1, 1, true);
    ops::BatchNormStats stats{Tensor::zeros({2}), Tensor::full({2}, 1.0f)};
    errs.emplace_back("batchnorm",
                      grad_check([&] { return ops::batchnorm(x, g, b, Mode::Train, stats); }, {x, g, b}));
  }
  {
    Tensor x = random_tensor({4, 6}, rng, -2, 2, true);
    errs.emplace_back("square", grad_check([&] { return ops::square(x); }, {x}));
  }
  {
    Tensor x = random_tensor({4, 6}, rng, 0.2, 3.0, true);
    errs.emplace_back("safe_log", grad_check([&] { return ops::safe_log(x); }, {x}));
  }
  {
    Tensor x = random_tensor({2, 2, 20, 1}, rng, -1, 1, true);
    errs.emplace_back("avgpool", grad_check([&] { return ops::avgpool2d(x, 7, 3, true); }, {x}));
  }
  {
    Tensor x = random_tensor({4, 5}, rng, -1, 1, true);
    errs.emplace_back("dropout_off", grad_check([&] { return ops::dropout(x, 0.5f, eval); }, {x}));
  }
  {
    Tensor x = random_tensor({3, 5}, rng, -1, 1, true), w = random_tensor({5, 4}, rng, -1, 1, true);
    errs.emplace_back("dense", grad_check([&] { return ops::dense(x, w); }, {x, w}));
  }
  {
    Tensor x = random_tensor({3, 4}, rng, -2, 2, true);
    std::vector<int> labels{1, 3, 0};
    errs.emplace_back("softmax", grad_check([&] { return ops::softmax(x); }, {x}));
    errs.emplace_back("cross_entropy",
                      grad_check([&] { return ops::cross_entropy(ops::log_softmax(x), labels); }, {x}));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  double worst = 0.0;
  std::string worst_name;
  for (auto& [name, e] : errs) {
    if (!(e <= worst)) {
      worst = e;
      worst_name = name;
    }
  }
  report(1, worst < 1e-3 && secs < 60.0,
         std::to_string(errs.size()) + " layer checks, worst " + worst_name + fmt(" rel err %.2e", worst) +
             fmt(", %.2f s", secs));
}

void criterion2() {
  auto make = [](std::size_t C, std::size_t T, std::size_t FT, std::size_t FS, std::size_t NC) {
    MsfbcnnConfig c;
    c.channels = C;
    c.window_len = T;
    c.temporal_filters = FT;
    c.spatial_filters = FS;
    c.num_classes = NC;
    return c;
  };
  auto table = [](std::size_t C, std::size_t T, std::size_t FT, std::size_t FS, std::size_t NC) {
    return 146 * FT + 8 * FT + 4 * C * FT * FS + 2 * FS + FS * (T / 15) * NC;
  };
  bool ok = count_params(make(1, 1125, 10, 10, 4)) == 4960 && count_params(make(6, 1125, 10, 10, 4)) == 6960;
  Rng rng(202);
  ForwardContext eval{Mode::Eval, nullptr};
  for (int i = 0; i < 10; ++i) {
    const std::size_t C = 1 + rng.below(8), T = 15 * (1 + rng.below(12)), FT = 1 + rng.below(6),
                      FS = 1 + rng.below(6);
    MsfbcnnConfig c = make(C, T, FT, FS, 4);
    Msfbcnn m(c, rng);
    ok = ok && count_params(c) == table(C, T, FT, FS, 4) && m.param_count() == count_params(c);
    ok = ok && m.forward(random_tensor({3, C, T, 1}, rng), eval).shape() == Shape{3, 4};
  }
  for (std::size_t C : {1u, 6u}) {
    Msfbcnn m(make(C, 1125, 10, 10, 4), rng);
    ok = ok && m.forward(random_tensor({2, C, 1125, 1}, rng), eval).shape() == Shape{2, 4};
  }
  report(2, ok, "C=1/C=6 at T=1125: 4960/6960, and 10 random configs, outputs [B,4]");
}

void criterion3() {
  const std::vector<float> uniform{0.25f, 0.25f, 0.25f, 0.25f}, onehot{0, 0, 1, 0}, half{0.5f, 0.5f, 0, 0};
  const double a = normalized_entropy(uniform), b = normalized_entropy(onehot), c = normalized_entropy(half);
  report(3, std::abs(a - 1.0) < 1e-9 && std::abs(b) < 1e-9 && std::abs(c - 0.5) < 1e-9,
         fmt("H = %.12f", a) + fmt(", %.12f", b) + fmt(", %.12f", c));
}

void criterion4() {
  const double b1 = relative_bandwidth(1125, 4, 9, 0.0), b2 = relative_bandwidth(1125, 4, 9, 1.0),
               b3 = relative_bandwidth(1125, 4, 16, 0.0);
  const bool ok = std::abs(b1 - 129.0 / 1125.0) < 1e-12 && std::abs(b2 - 4.0 / 1125.0) < 1e-12 &&
                  std::abs(b3 - (4.0 + 1125.0 / 16.0) / 1125.0) < 1e-12 && std::abs(b3 - 0.0661) < 5e-5 &&
                  std::round(b1 * 100) == 11 && std::floor(b3 * 100) == 6;
  report(4, ok, fmt("B = %.6f", b1) + fmt(" (~11%%), %.6f", b2) + fmt(", %.6f (~6%%)", b3));
}

struct SeedRun {
  double centralized = 0.0;
  BranchAccuracy pipeline;
  double scratch = 0.0;
  fs::path directory;
};

RunConfig synthetic_config(std::uint64_t seed, const fs::path& out) {
  RunConfig c;
  c.synthetic.trials_per_class = 200;
  c.synthetic.window_len = 150;
  c.synthetic.snr_db = -7.0;
  c.synthetic.seed = seed;
  c.nodes = 3;
  c.compression = 4;
  c.train.max_epochs = 30;
  c.seeds = {seed};
  c.output = out.string();
  return c;
}

std::vector<SeedRun> criterion7(const std::vector<std::uint64_t>& seeds) {
  std::vector<SeedRun> runs;
  const auto start = std::chrono::steady_clock::now();
  const fs::path out = work_dir("seed_runs");
  for (std::uint64_t seed : seeds) {
    RunConfig cfg = synthetic_config(seed, out / ("pipeline" + std::to_string(seed)));
    ExperimentData data = prepare_data(cfg);
    SeedRun r;
    {
      Rng rng(seed);
      MsfbcnnConfig mc = model_config(cfg, data).central;
      Msfbcnn central(mc, rng);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      r.centralized = train_centralized(central, data.train, &data.test, tc).test_accuracy;
    }
    SeedResult pipe = run_seed(cfg, data, seed);
    r.pipeline = pipe.test;
    r.directory = pipe.directory;
    RunConfig scratch_cfg = cfg;
    scratch_cfg.from_scratch = true;
    scratch_cfg.output = (out / ("scratch" + std::to_string(seed))).string();
    r.scratch = run_seed(scratch_cfg, data, seed).test.fullfuse;
    std::printf("  seed %llu: train %zu test %zu | centralized %.3f classfuse %.3f compressfuse %.3f "
                "fullfuse %.3f scratch %.3f\n",
                static_cast<unsigned long long>(seed), data.train.size(), data.test.size(), r.centralized,
                r.pipeline.classfuse, r.pipeline.compressfuse, r.pipeline.fullfuse, r.scratch);
    std::fflush(stdout);
    runs.push_back(r);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::vector<double> central, full, branch, scratch, gap;
  for (const auto& r : runs) {
    central.push_back(r.centralized);
    full.push_back(r.pipeline.fullfuse);
    branch.push_back(std::max(r.pipeline.classfuse, r.pipeline.compressfuse));
    scratch.push_back(r.scratch);
    gap.push_back(r.centralized - r.pipeline.fullfuse);
  }
  const double mc = median(central), mf = median(full), mb = median(branch), ms = median(scratch);
  const double worst_central = *std::min_element(central.begin(), central.end());
  const double worst_gap = *std::max_element(gap.begin(), gap.end());
  const bool a = worst_central > 0.85, b = worst_gap <= 0.07, c = mf >= mb - 0.01, d = mf >= ms, t = secs < 15 * 60;
  report(7, a && b && c && d && t,
         fmt("(a) lowest centralized %.3f > 0.85", worst_central) + fmt("; (b) largest gap %.3f <= 0.07", worst_gap) +
             fmt("; (c) median fullfuse %.3f", mf) + fmt(" >= median best branch %.3f - 0.01", mb) +
             fmt("; (d) pipeline %.3f", mf) + fmt(" >= scratch %.3f", ms) + fmt("; median centralized %.3f", mc) +
             fmt("; %.0f s", secs));
  return runs;
}

void criterion5(const SeedRun& trained, std::uint64_t seed) {
  // D = 5 divides L = 150, so every frame is exactly L/D scalars
  const fs::path out = work_dir("divisible");
  RunConfig cfg = synthetic_config(seed, out);
  cfg.compression = 5;
  cfg.train.max_epochs = 10;
  ExperimentData data = prepare_data(cfg);
  SeedResult res = run_seed(cfg, data, seed);
  DistributedModel model = load_weights(res.directory / stage_checkpoint_name(4));

  double worst = 0.0;
  bool monotone = true, sweep_agrees = true;
  double prev_lambda = -1.0, prev_b = 2.0;
  for (const SweepPoint& p : res.sweep) {
    SimulationResult sim = simulate_run(model, data.test, ExitPolicy{p.threshold});
    const double lambda = sim.trace.lambda();
    const double per_node = static_cast<double>(sim.log.total_scalars()) /
                            static_cast<double>(sim.log.samples * sim.log.nodes);
    worst = std::max(worst, std::abs(per_node / 150.0 - relative_bandwidth(150, 4, 5, lambda)));
    sweep_agrees = sweep_agrees && lambda == p.lambda && std::abs(per_node / 150.0 - p.bandwidth) < 1e-9;
    monotone = monotone && lambda >= prev_lambda && sim.log.relative_bandwidth() <= prev_b;
    prev_lambda = lambda;
    prev_b = sim.log.relative_bandwidth();
  }

  // D = 4 does not divide 150: frames carry ceil(ceil(150/2)/2) = 38 scalars
  DistributedModel d4 = load_weights(trained.directory / stage_checkpoint_name(4));
  double worst_wire = 0.0, formula_gap = 0.0;
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    SimulationResult sim = simulate_run(d4, data.test, ExitPolicy{t});
    const double lambda = sim.trace.lambda();
    worst_wire = std::max(worst_wire,
                          std::abs(sim.log.relative_bandwidth() - (4.0 + (1.0 - lambda) * 38.0) / 150.0));
    formula_gap = std::max(formula_gap, std::abs(sim.log.relative_bandwidth() - relative_bandwidth(150, 4, 4, lambda)));
  }
  report(5, worst < 1e-9 && monotone && sweep_agrees && worst_wire < 1e-12,
         std::to_string(res.sweep.size()) + fmt(" points at D=5, max |B_log - B_formula| = %.1e", worst) +
             (monotone ? ", lambda up / B down" : ", NOT monotone") +
             (sweep_agrees ? ", sweep.csv agrees" : ", sweep.csv disagrees") +
             fmt("; D=4 wire-length formula err %.1e", worst_wire) +
             fmt(" (L/D formula off by %.4f)", formula_gap));
}

void criterion6() {
  Rng rng(606);
  bool ok = true;
  std::size_t cases = 0;
  for (std::size_t L : {15u, 150u, 1125u}) {
    for (std::int64_t D = 1; D <= 20; ++D) {
      DistributedConfig c;
      c.central.channels = 1;
      c.central.window_len = L;
      c.central.temporal_filters = 1;
      c.central.spatial_filters = 1;
      c.central.num_classes = 4;
      c.compressor = CompressorConfig::for_factor(D);
      c.fusion_hidden = 4;
      DistributedModel m(c, rng);
      Tensor x = random_tensor({2, 1, L, 1}, rng);
      Tensor z = m.compress_node(0, x);
      ok = ok && m.reconstruct_node(0, z).shape() == x.shape();
      ++cases;
    }
  }
  const std::pair<std::int64_t, std::size_t> used[] = {
      {4, ceil_div(ceil_div(1125, 2), 2)}, {6, ceil_div(ceil_div(1125, 3), 2)},
      {9, ceil_div(ceil_div(1125, 3), 3)}, {16, ceil_div(ceil_div(1125, 4), 4)}};
  for (auto [D, len] : used) {
    auto [s1, s2] = decompose_factor(D);
    ok = ok && static_cast<std::int64_t>(s1 * s2) == D && CompressorConfig::for_factor(D).compressed_len(1125) == len;
  }
  report(6, ok, std::to_string(cases) + " (L, D) round-trips; D=4,6,9,16 give 282/188/125/71 scalars at L=1125");
}

void criterion8(const SeedRun& trained, const ExperimentData& data) {
  DistributedModel model = load_weights(trained.directory / stage_checkpoint_name(4));
  ExitScores s = score_exits(model, data.test);
  ExitResult at0 = infer_with_exit(model, data.test, ExitPolicy{0.0});
  ExitResult at1 = infer_with_exit(model, data.test, ExitPolicy{1.0});
  std::size_t compared = 0, mismatches = 0, zero_entropy = 0;
  for (std::size_t n = 0; n < s.size(); ++n) {
    if (s.entropy[n] == 0.0) {
      ++zero_entropy;
    } else {
      ++compared;
      mismatches += at0.predictions[n] != s.fullfuse_prediction[n];
    }
    mismatches += at1.predictions[n] != s.classfuse_prediction[n];
  }
  auto sweep = sweep_from_scores(s, model.window_len(), model.num_classes(), 4);
  const double full = accuracy(s.fullfuse_prediction, s.labels), cf = accuracy(s.classfuse_prediction, s.labels);
  const bool ends = sweep.back().accuracy == cf && (zero_entropy > 0 || sweep.front().accuracy == full);
  report(8, mismatches == 0 && ends,
         std::to_string(compared) + " samples at T=0 match FullFuse, " + std::to_string(s.size()) +
             " at T=1 match ClassFuse" + fmt(" (acc %.3f", sweep.front().accuracy) +
             fmt(" / %.3f)", sweep.back().accuracy) + ", zero-entropy excluded: " + std::to_string(zero_entropy));
}

void criterion9() {
  ElectrodeLayout grid = ElectrodeLayout::grid(4, 4, 2.0);
  const auto cands = enumerate_candidate_nodes(grid, 3.0);

  SyntheticConfig sc;
  sc.trials_per_class = 5;
  sc.seed = 9;
  SyntheticData syn = generate_synthetic(sc);
  EpochedDataset shifted = syn.cap;
  Rng rng(909);
  const std::size_t L = shifted.window_len, C = shifted.channels;
  for (std::size_t n = 0; n < shifted.size(); ++n) {
    std::vector<float> drift(L);
    for (auto& v : drift) v = static_cast<float>(1000.0 * rng.normal());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < L; ++t) shifted.samples[(n * C + c) * L + t] += drift[t];
  }
  EpochedDataset clean = emulate_node_signals(syn.cap, cands), dirty = emulate_node_signals(shifted, cands);
  bool exact = clean.samples.size() == dirty.samples.size();
  constexpr double eps = std::numeric_limits<float>::epsilon();
  double worst = 0.0;
  for (std::size_t n = 0; exact && n < clean.size(); ++n) {
    for (std::size_t k = 0; k < cands.size(); ++k) {
      for (std::size_t t = 0; t < L; ++t) {
        const float a = shifted.samples[(n * C + cands[k].i) * L + t];
        const float b = shifted.samples[(n * C + cands[k].j) * L + t];
        const std::size_t idx = (n * cands.size() + k) * L + t;
        // both inputs were rounded once when the drift was added, then one subtraction
        const double bound = eps * (std::abs(a) + std::abs(b));
        const double err = std::abs(static_cast<double>(dirty.samples[idx]) - clean.samples[idx]);
        worst = std::max(worst, err / bound);
        exact = exact && err <= bound;
      }
    }
  }
  report(9, cands.size() == 42 && exact,
         std::to_string(cands.size()) + fmt(" candidate pairs; reference residual <= %.2f of float rounding bound", worst));
}

void criterion10() {
  const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
  int hits = 0;
  std::string picks;
  double min_weight = 1.0;
  for (std::uint64_t seed : seeds) {
    const std::size_t informative = (seed * 7) % 10;
    EpochedDataset data = testing_support::planted_candidates(1000 + seed, 10, informative, 400, 150);
    MsfbcnnConfig cls;
    cls.window_len = 150;
    cls.temporal_filters = 4;
    cls.spatial_filters = 4;
    cls.num_classes = 4;
    SelectionConfig sc;
    sc.batch_size = 32;
    sc.seed = seed;
    SelectionResult r = gumbel_select_nodes(data, cls, 1, sc);
    const bool hit = r.nodes.at(0) == informative;
    hits += hit;
    min_weight = std::min(min_weight, r.weights.at(0).at(informative));
    picks += (picks.empty() ? "" : " ") + std::to_string(r.nodes[0]) + "/" + std::to_string(informative);
  }
  report(10, hits >= 4,
         std::to_string(hits) + "/5 seeds chose the informative candidate (chosen/planted: " + picks + ")" +
             fmt(", min final weight %.3f", min_weight));
}

void criterion11(const SeedRun& trained) {
  const fs::path dir = work_dir("persistence");
  const fs::path src = trained.directory / stage_checkpoint_name(4);
  DistributedModel model = load_weights(src);
  save_weights(model, dir / "copy.bnw");
  DistributedModel again = load_weights(dir / "copy.bnw");
  const bool bits = take_snapshot(model.state()) == take_snapshot(again.state()) &&
                    slurp(src) == slurp(dir / "copy.bnw");

  auto tiny = [&](const std::string& name) {
    RunConfig c;
    c.synthetic.trials_per_class = 20;
    c.synthetic.window_len = 150;
    c.nodes = 3;
    c.temporal_filters = 3;
    c.spatial_filters = 3;
    c.fusion_hidden = 10;
    c.train.max_epochs = 3;
    c.train.patience = 2;
    c.seeds = {42};
    c.output = (dir / name).string();
    return run_experiment(c).at(0).directory;
  };
  const fs::path a = tiny("run_a"), b = tiny("run_b");
  const std::string sa = slurp(a / "sweep.csv"), sb = slurp(b / "sweep.csv");
  const bool same = !sa.empty() && sa == sb && slurp(a / "stage4.bnw") == slurp(b / "stage4.bnw");
  report(11, bits && same,
         std::string(bits ? "weights round-trip bit-exact" : "weights differ after round-trip") +
             (same ? "; repeated run gives byte-identical sweep.csv (" + std::to_string(sa.size()) + " bytes)"
                   : "; repeated run differs"));
}

}  // namespace

int main() {
  guarded(1, criterion1);
  guarded(2, criterion2);
  guarded(3, criterion3);
  guarded(4, criterion4);
  guarded(6, criterion6);
  guarded(9, criterion9);
  guarded(10, criterion10);

  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<SeedRun> runs;
  guarded(7, [&] { runs = criterion7(seeds); });
  if (runs.empty()) {
    report(5, false, "no trained model");
    report(8, false, "no trained model");
    report(11, false, "no trained model");
  } else {
    guarded(5, [&] { criterion5(runs[0], seeds[0]); });
    guarded(8, [&] {
      ExperimentData data = prepare_data(synthetic_config(seeds[0], work_dir("unused")));
      criterion8(runs[0], data);
    });
    guarded(11, [&] { criterion11(runs[0]); });
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
