#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "distnet/error.hpp"
#include "distnet/experiment.hpp"
#include "distnet/report.hpp"
#include "distnet/sensor.hpp"
#include "distnet/simulate.hpp"
#include "distnet/weights.hpp"

using namespace distnet;
namespace fs = std::filesystem;

namespace {

// 1 is left for unexpected failures, CLI11 parse errors map to Config
int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Shape: return 3;
    case ErrorKind::Numeric: return 4;
    case ErrorKind::State: return 5;
    case ErrorKind::Format: return 6;
    case ErrorKind::Io: return 7;
  }
  return 1;
}

struct ConfigArgs {
  std::string file;
  std::vector<std::string> settings;
  std::map<std::string, std::string> flags;  // dedicated options, applied after --set
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.file, "run configuration file (key = value lines)");
  cmd->add_option("--set", args.settings, "override one setting, key=value (repeatable)");
}

RunConfig resolve(const ConfigArgs& args) {
  RunConfig c = args.file.empty() ? RunConfig{} : load_run_config(args.file);
  for (const auto& kv : args.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, "--set expects key=value, got '" + kv + "'");
    apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : args.flags) apply_setting(c, k, v);
  return c;
}

// Eval data for sweep/simulate: an explicit BNDS file, else the configured test split.
EpochedDataset eval_data(const std::string& path, const ConfigArgs& args) {
  if (!path.empty()) return load_dataset(path);
  return prepare_data(resolve(args)).test;
}

void print_accuracy(const char* name, double acc) { std::printf("%-13s %.4f\n", name, acc); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributed EEG classification with early exit"};
  app.require_subcommand(1);

  // synth-data
  ConfigArgs synth_cfg;
  std::string synth_out, synth_layout;
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic cap recording (BNDS) and its electrode layout");
  add_config_options(synth, synth_cfg);
  synth->add_option("--out", synth_out, "cap dataset path")->required();
  synth->add_option("--layout", synth_layout, "electrode layout CSV path")->required();

  // emulate-nodes
  std::string emu_cap, emu_layout, emu_out;
  double emu_threshold = 3.0;
  std::vector<std::size_t> emu_pick;
  auto* emulate = app.add_subcommand("emulate-nodes", "turn cap channels into short-distance node channels");
  emulate->add_option("--cap", emu_cap, "cap dataset (BNDS)")->required();
  emulate->add_option("--layout", emu_layout, "electrode layout CSV")->required();
  emulate->add_option("--threshold", emu_threshold, "max electrode distance in cm")->capture_default_str();
  emulate->add_option("--pick", emu_pick, "keep only these candidate indices");
  emulate->add_option("--out", emu_out, "node dataset path")->required();

  // select-nodes
  std::string sel_in, sel_out;
  std::size_t sel_nodes = 3, sel_epochs = 30, sel_filters = 4, sel_batch = 32;
  std::uint64_t sel_seed = 0;
  auto* select = app.add_subcommand("select-nodes", "Gumbel-softmax selection of M node channels");
  select->add_option("--candidates", sel_in, "candidate node dataset (BNDS)")->required();
  select->add_option("--nodes", sel_nodes, "number of nodes M")->capture_default_str();
  select->add_option("--epochs", sel_epochs)->capture_default_str();
  select->add_option("--filters", sel_filters, "F_T = F_S of the selection classifier")->capture_default_str();
  select->add_option("--batch", sel_batch)->capture_default_str();
  select->add_option("--seed", sel_seed)->capture_default_str();
  select->add_option("--out", sel_out, "write the selected channels here (BNDS)");

  // train
  ConfigArgs train_cfg;
  std::string nodes, compression, seed, subject, output, data;
  bool from_scratch = false, ae_pretrain = false;
  auto* train = app.add_subcommand("train", "staged training, checkpoints, sweep and report per seed");
  add_config_options(train, train_cfg);
  train->add_option("--data", data, "node dataset (BNDS) or 'synthetic'");
  train->add_option("--nodes", nodes, "M");
  train->add_option("--compression", compression, "D");
  train->add_option("--seed", seed, "seed list, e.g. 1,2,3");
  train->add_option("--subject-finetune", subject, "fine-tune on this subject id");
  train->add_option("--output", output, "output directory");
  train->add_flag("--from-scratch", from_scratch, "single end-to-end stage");
  train->add_flag("--ae-pretrain", ae_pretrain, "pretrain the codecs as autoencoders");

  // sweep
  ConfigArgs sweep_cfg;
  std::string sweep_weights, sweep_data, sweep_out, sweep_calib;
  double sweep_step = 0.01;
  auto* sweep = app.add_subcommand("sweep", "accuracy and bandwidth over exit thresholds");
  add_config_options(sweep, sweep_cfg);
  sweep->add_option("--weights", sweep_weights, "model checkpoint")->required();
  sweep->add_option("--data", sweep_data, "eval dataset (BNDS); default: configured test split");
  sweep->add_option("--calibration", sweep_calib, "dataset that sets lambda (BNDS)");
  sweep->add_option("--step", sweep_step)->capture_default_str();
  sweep->add_option("--out", sweep_out, "directory for sweep.csv and pareto.csv")->required();

  // simulate
  ConfigArgs sim_cfg;
  std::string sim_weights, sim_data, sim_log;
  double sim_threshold = 0.5;
  auto* simulate = app.add_subcommand("simulate", "message-level run at one exit threshold");
  add_config_options(simulate, sim_cfg);
  simulate->add_option("--weights", sim_weights, "model checkpoint")->required();
  simulate->add_option("--data", sim_data, "eval dataset (BNDS); default: configured test split");
  simulate->add_option("--threshold", sim_threshold)->capture_default_str();
  simulate->add_option("--log", sim_log, "write every message as CSV");

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "summarize a seed directory");
  report->add_option("dir", report_dir, "directory holding sweep.csv / stages.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorKind::Config);
  }

  try {
    if (*synth) {
      RunConfig c = resolve(synth_cfg);
      c.synthetic.validate();
      SyntheticData s = generate_synthetic(c.synthetic);
      save_dataset(s.cap, synth_out);
      save_layout(s.layout, synth_layout);
      std::printf("%zu trials, %zu electrodes, %zu samples each\n", s.cap.size(), s.cap.channels,
                  s.cap.window_len);
    } else if (*emulate) {
      EpochedDataset cap = load_dataset(emu_cap);
      ElectrodeLayout layout = load_layout(emu_layout);
      if (layout.size() != cap.channels) {
        fail(ErrorKind::Shape, "layout has " + std::to_string(layout.size()) + " electrodes, data has " +
                                   std::to_string(cap.channels) + " channels");
      }
      auto cands = enumerate_candidate_nodes(layout, emu_threshold);
      if (!emu_pick.empty()) {
        std::vector<CandidateNode> kept;
        for (std::size_t k : emu_pick) {
          if (k >= cands.size()) fail(ErrorKind::Config, "candidate " + std::to_string(k) + " out of range");
          kept.push_back(cands[k]);
        }
        cands = std::move(kept);
      }
      save_dataset(emulate_node_signals(cap, cands), emu_out);
      for (std::size_t k = 0; k < cands.size(); ++k) {
        std::printf("%zu %s-%s %.3f cm\n", k, layout.labels[cands[k].i].c_str(), layout.labels[cands[k].j].c_str(),
                    cands[k].distance_cm);
      }
    } else if (*select) {
      EpochedDataset cands = load_dataset(sel_in);
      MsfbcnnConfig cls;
      cls.window_len = cands.window_len;
      cls.temporal_filters = sel_filters;
      cls.spatial_filters = sel_filters;
      int top = 0;
      for (int y : cands.labels) top = std::max(top, y);
      cls.num_classes = static_cast<std::size_t>(top) + 1;
      SelectionConfig sc;
      sc.epochs = sel_epochs;
      sc.batch_size = sel_batch;
      sc.seed = sel_seed;
      SelectionResult r = gumbel_select_nodes(cands, cls, sel_nodes, sc);
      for (std::size_t m = 0; m < r.nodes.size(); ++m) {
        std::printf("slot %zu: candidate %zu (weight %.3f)\n", m, r.nodes[m], r.weights[m][r.nodes[m]]);
      }
      if (!sel_out.empty()) save_dataset(cands.select_channels(r.nodes), sel_out);
    } else if (*train) {
      auto& f = train_cfg.flags;
      if (!data.empty()) f["data"] = data;
      if (!nodes.empty()) f["nodes"] = nodes;
      if (!compression.empty()) f["compression"] = compression;
      if (!seed.empty()) f["seeds"] = seed;
      if (!subject.empty()) f["subject_finetune"] = subject;
      if (!output.empty()) f["output"] = output;
      if (from_scratch) f["from_scratch"] = "true";
      if (ae_pretrain) f["ae_pretrain"] = "true";
      RunConfig c = resolve(train_cfg);
      for (const SeedResult& r : run_experiment(c)) {
        std::printf("seed %llu -> %s\n", static_cast<unsigned long long>(r.seed), r.directory.string().c_str());
        for (const auto& st : r.stages) {
          std::printf("  %-12s epochs %3zu  best val loss %.4f\n", st.stage.c_str(), st.epochs_run, st.best_val_loss);
        }
        print_accuracy("  classfuse", r.test.classfuse);
        print_accuracy("  compressfuse", r.test.compressfuse);
        print_accuracy("  fullfuse", r.test.fullfuse);
      }
    } else if (*sweep) {
      DistributedModel model = load_weights(sweep_weights);
      EpochedDataset eval = eval_data(sweep_data, sweep_cfg);
      EpochedDataset calib;
      if (!sweep_calib.empty()) calib = load_dataset(sweep_calib);
      auto points = sweep_thresholds(model, eval, sweep_step, sweep_calib.empty() ? nullptr : &calib);
      fs::create_directories(sweep_out);
      write_sweep_csv(points, fs::path(sweep_out) / "sweep.csv");
      write_sweep_csv(pareto_front(points), fs::path(sweep_out) / "pareto.csv");
      std::printf("%zu thresholds, B from %.4f to %.4f\n", points.size(), points.front().bandwidth,
                  points.back().bandwidth);
    } else if (*simulate) {
      DistributedModel model = load_weights(sim_weights);
      EpochedDataset eval = eval_data(sim_data, sim_cfg);
      SimulationResult r = simulate_run(model, eval, ExitPolicy{sim_threshold});
      std::printf("samples %zu, nodes %zu, exited %zu (lambda %.4f)\n", r.log.samples, r.log.nodes,
                  r.trace.exited_count(), r.trace.lambda());
      std::printf("class vectors %zu, compressed frames %zu, %zu scalars, %zu bytes\n",
                  r.log.count(PayloadKind::ClassVector), r.log.count(PayloadKind::CompressedFrame),
                  r.log.total_scalars(), r.log.total_bytes());
      std::printf("relative bandwidth %.6f\n", r.log.relative_bandwidth());
      print_accuracy("accuracy", r.trace.accuracy());
      if (!sim_log.empty()) {
        std::ofstream out(sim_log);
        if (!out) fail(ErrorKind::Io, "cannot write " + sim_log);
        out << "sample,node,kind,scalars,bytes\n";
        for (const auto& m : r.log.messages) {
          out << m.sample << ',' << m.node << ','
              << (m.kind == PayloadKind::ClassVector ? "class_vector" : "compressed_frame") << ',' << m.scalars << ','
              << m.bytes << '\n';
        }
      }
    } else if (*report) {
      const fs::path dir(report_dir);
      if (fs::exists(dir / "stages.json")) {
        for (const auto& st : read_stage_reports(dir / "stages.json")) {
          std::printf("%-12s epochs %3zu  best val loss %.4f  test acc %s\n", st.stage.c_str(), st.epochs_run,
                      st.best_val_loss, format_number(st.test_accuracy).c_str());
        }
      }
      auto points = read_sweep_csv(dir / "sweep.csv");
      std::printf("pareto front (%zu of %zu thresholds):\n", pareto_front(points).size(), points.size());
      std::printf("  threshold  lambda  bandwidth  accuracy\n");
      for (const auto& p : pareto_front(points)) {
        std::printf("  %9.2f  %6.3f  %9.5f  %8.4f\n", p.threshold, p.lambda, p.bandwidth, p.accuracy);
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
