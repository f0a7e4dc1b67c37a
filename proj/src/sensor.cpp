#include "distnet/sensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "distnet/error.hpp"
#include "distnet/optim.hpp"

namespace distnet {

void ElectrodeLayout::validate() const {
  if (positions.size() != labels.size()) fail(ErrorKind::Shape, "layout has " + std::to_string(positions.size()) + " positions but " + std::to_string(labels.size()) + " labels");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (double v : positions[i]) {
      if (!std::isfinite(v)) fail(ErrorKind::Config, "electrode '" + labels[i] + "' has a non-finite coordinate");
    }
    if (!seen.insert(labels[i]).second) fail(ErrorKind::Config, "duplicate electrode label '" + labels[i] + "'");
  }
}

double ElectrodeLayout::distance(std::size_t i, std::size_t j) const {
  const auto& a = positions.at(i);
  const auto& b = positions.at(j);
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

ElectrodeLayout ElectrodeLayout::grid(std::size_t rows, std::size_t cols, double spacing_cm) {
  ElectrodeLayout layout;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      layout.positions.push_back({static_cast<double>(c) * spacing_cm, static_cast<double>(r) * spacing_cm, 0.0});
      layout.labels.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
    }
  }
  return layout;
}

void save_layout(const ElectrodeLayout& layout, const std::filesystem::path& path) {
  layout.validate();
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out.precision(17);
  out << "label,x,y,z\n";
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& p = layout.positions[i];
    out << layout.labels[i] << ',' << p[0] << ',' << p[1] << ',' << p[2] << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

ElectrodeLayout load_layout(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("label,x,y,z", 0) != 0) {
    fail(ErrorKind::Format, path.string() + ": expected header 'label,x,y,z'");
  }
  ElectrodeLayout layout;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream row(line);
    std::string label, field;
    std::array<double, 3> p{};
    std::getline(row, label, ',');
    for (int k = 0; k < 3; ++k) {
      if (!std::getline(row, field, ',')) fail(ErrorKind::Format, path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
      try {
        p[k] = std::stod(field);
      } catch (const std::exception&) {
        fail(ErrorKind::Format, path.string() + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
      }
    }
    layout.labels.push_back(label);
    layout.positions.push_back(p);
  }
  layout.validate();
  return layout;
}

std::vector<CandidateNode> enumerate_candidate_nodes(const ElectrodeLayout& layout, double threshold_cm) {
  layout.validate();
  if (layout.size() < 2) fail(ErrorKind::Config, "need at least 2 electrodes to form a node");
  std::vector<CandidateNode> nodes;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    for (std::size_t j = i + 1; j < layout.size(); ++j) {
      const double d = layout.distance(i, j);
      if (d <= threshold_cm) nodes.push_back({i, j, d});
    }
  }
  return nodes;
}

EpochedDataset emulate_node_signals(const EpochedDataset& cap, const std::vector<CandidateNode>& nodes) {
  if (nodes.empty()) fail(ErrorKind::Config, "no nodes to emulate");
  for (const auto& n : nodes) {
    if (n.i >= cap.channels || n.j >= cap.channels) {
      fail(ErrorKind::Shape, "node (" + std::to_string(n.i) + ", " + std::to_string(n.j) + ") references an electrode beyond " + std::to_string(cap.channels));
    }
    if (n.i == n.j) fail(ErrorKind::Config, "node pairs an electrode with itself");
  }
  EpochedDataset out;
  out.channels = nodes.size();
  out.window_len = cap.window_len;
  out.sample_rate = cap.sample_rate;
  out.labels = cap.labels;
  out.subjects = cap.subjects;
  out.samples.resize(cap.size() * out.trial_stride());
  const std::size_t L = cap.window_len;
  for (std::size_t t = 0; t < cap.size(); ++t) {
    auto src = cap.trial(t);
    float* dst = out.samples.data() + t * out.trial_stride();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const float* a = src.data() + nodes[k].i * L;
      const float* b = src.data() + nodes[k].j * L;
      for (std::size_t s = 0; s < L; ++s) dst[k * L + s] = a[s] - b[s];
    }
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (grid_rows * grid_cols < 2) fail(ErrorKind::Config, "synthetic layout needs at least 2 electrodes");
  if (!(spacing_cm > 0.0)) fail(ErrorKind::Config, "electrode spacing must be positive");
  if (num_classes < 2) fail(ErrorKind::Config, "need at least 2 classes");
  if (trials_per_class < 1 || window_len < 1 || subjects < 1) {
    fail(ErrorKind::Config, "trials_per_class, window_len and subjects must be >= 1");
  }
  if (!(sample_rate > 0.0)) fail(ErrorKind::Config, "sample rate must be positive");
  if (8.0 + 5.0 * static_cast<double>(num_classes) >= sample_rate / 2.0) {
    fail(ErrorKind::Config, "class frequencies would exceed the Nyquist rate");
  }
  if (std::isnan(snr_db)) fail(ErrorKind::Config, "snr_db is NaN");
}

namespace {

struct SubjectShift {
  std::vector<std::array<double, 3>> positions;
  std::vector<double> frequencies;
};

double gain(const std::array<double, 3>& src, const std::array<double, 3>& elec, double depth) {
  const double dx = src[0] - elec[0], dy = src[1] - elec[1], dz = src[2] - elec[2];
  return 1.0 / std::sqrt(dx * dx + dy * dy + dz * dz + depth * depth);
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  SyntheticData data;
  data.layout = ElectrodeLayout::grid(config.grid_rows, config.grid_cols, config.spacing_cm);
  const std::size_t E = data.layout.size();
  const std::size_t K = config.num_classes;
  const std::size_t L = config.window_len;

  // sources on a ring around the middle of the grid
  const double cx = static_cast<double>(config.grid_cols - 1) * config.spacing_cm / 2.0;
  const double cy = static_cast<double>(config.grid_rows - 1) * config.spacing_cm / 2.0;
  const double radius = 0.6 * std::max(std::min(cx, cy), config.spacing_cm / 2.0);
  for (std::size_t c = 0; c < K; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(K) + std::numbers::pi / 4.0;
    data.sources.push_back({{cx + radius * std::cos(angle), cy + radius * std::sin(angle), 0.0},
                            8.0 + 5.0 * static_cast<double>(c)});
  }

  Rng master(config.seed);
  std::vector<SubjectShift> subjects(config.subjects);
  for (auto& s : subjects) {
    for (const auto& src : data.sources) {
      s.positions.push_back({src.position[0] + master.uniform(-0.5, 0.5), src.position[1] + master.uniform(-0.5, 0.5), 0.0});
      s.frequencies.push_back(src.frequency_hz + master.uniform(-0.5, 0.5));
    }
  }

  double mean_sq_gain = 0.0;
  for (const auto& src : data.sources) {
    for (const auto& e : data.layout.positions) {
      const double g = gain(src.position, e, config.source_depth_cm);
      mean_sq_gain += g * g;
    }
  }
  mean_sq_gain /= static_cast<double>(K * E);
  const double signal_power = 0.5 * mean_sq_gain;
  const double noise_std =
      std::isinf(config.snr_db) && config.snr_db > 0 ? 0.0 : std::sqrt(signal_power / std::pow(10.0, config.snr_db / 10.0));

  const std::size_t N = K * config.trials_per_class;
  std::vector<std::pair<int, int>> plan;  // (label, subject)
  for (std::size_t c = 0; c < K; ++c) {
    for (std::size_t k = 0; k < config.trials_per_class; ++k) {
      plan.emplace_back(static_cast<int>(c), static_cast<int>(k % config.subjects));
    }
  }
  for (std::size_t i = N; i > 1; --i) std::swap(plan[i - 1], plan[master.below(i)]);

  EpochedDataset& cap = data.cap;
  cap.channels = E;
  cap.window_len = L;
  cap.sample_rate = static_cast<float>(config.sample_rate);
  cap.samples.assign(N * E * L, 0.0f);
  std::vector<double> wave(L), drift(L);
  const double dt = 1.0 / config.sample_rate;
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t n = 0; n < N; ++n) {
    const auto [label, subj] = plan[n];
    cap.labels.push_back(label);
    cap.subjects.push_back(subj);
    Rng rng = master.fork(n);
    std::vector<double> trial(E * L, 0.0);

    for (std::size_t s = 0; s < K; ++s) {
      const bool active = static_cast<int>(s) == label;
      const double amp = active ? rng.uniform(0.8, 1.2) : config.background_gain * rng.uniform(0.5, 1.5);
      const double f = subjects[subj].frequencies[s] + rng.uniform(-1.0, 1.0);
      const double phase = rng.uniform(0.0, two_pi);
      const double fm = rng.uniform(0.5, 2.0);
      const double pm = rng.uniform(0.0, two_pi);
      for (std::size_t t = 0; t < L; ++t) {
        const double time = static_cast<double>(t) * dt;
        wave[t] = amp * (1.0 + 0.3 * std::sin(two_pi * fm * time + pm)) * std::sin(two_pi * f * time + phase);
      }
      for (std::size_t e = 0; e < E; ++e) {
        const double g = gain(subjects[subj].positions[s], data.layout.positions[e], config.source_depth_cm);
        for (std::size_t t = 0; t < L; ++t) trial[e * L + t] += g * wave[t];
      }
    }

    const double f1 = rng.uniform(0.2, 1.0), f2 = rng.uniform(1.0, 3.0);
    const double p1 = rng.uniform(0.0, two_pi), p2 = rng.uniform(0.0, two_pi);
    const double offset = rng.uniform(-1.0, 1.0);
    for (std::size_t t = 0; t < L; ++t) {
      const double time = static_cast<double>(t) * dt;
      drift[t] = config.reference_gain * (offset + std::sin(two_pi * f1 * time + p1) + 0.5 * std::sin(two_pi * f2 * time + p2));
    }
    float* dst = cap.samples.data() + n * E * L;
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t t = 0; t < L; ++t) {
        dst[e * L + t] = static_cast<float>(trial[e * L + t] + drift[t] + noise_std * rng.normal());
      }
    }
  }
  return data;
}

double AnnealSchedule::at(std::size_t epoch, std::size_t epochs) const {
  if (epochs <= 1) return t_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return t_start * std::pow(t_end / t_start, frac);
}

SelectionResult gumbel_select_nodes(const EpochedDataset& candidates, const MsfbcnnConfig& classifier,
                                    std::size_t M, const SelectionConfig& config) {
  const std::size_t K = candidates.channels;
  if (M < 1) fail(ErrorKind::Config, "must select at least one node");
  if (M > K) {
    fail(ErrorKind::Config, "cannot select " + std::to_string(M) + " nodes from " + std::to_string(K) + " candidates");
  }
  if (candidates.empty()) fail(ErrorKind::Config, "selection needs a non-empty dataset");
  if (!(config.anneal.t_start > 0.0 && config.anneal.t_end > 0.0)) fail(ErrorKind::Config, "temperatures must be positive");
  if (config.epochs < 1 || config.batch_size < 1) fail(ErrorKind::Config, "epochs and batch size must be >= 1");
  if (!(config.relaxed_fraction >= 0.0 && config.relaxed_fraction <= 1.0)) {
    fail(ErrorKind::Config, "relaxed_fraction must be in [0, 1]");
  }
  MsfbcnnConfig cfg = classifier;
  cfg.channels = M;
  cfg.window_len = candidates.window_len;
  candidates.validate(cfg.num_classes);

  Rng rng(config.seed);
  Msfbcnn model(cfg, rng);
  std::vector<float> init(M * K);
  for (auto& v : init) v = static_cast<float>(rng.uniform(-0.01, 0.01));
  Tensor logits = Tensor::from_data({M, K}, std::move(init), true);

  Adam optimizer({{"selection", config.logit_lr, {{"selection.logits", logits}}},
                  {"classifier", config.network_lr, model.state().params}});
  ForwardContext ctx{Mode::Train, &rng};
  SelectionResult result;
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double tau = config.anneal.at(epoch, config.epochs);
    // the classifier squares its input, so a one-hot point gives no first-order
    // signal for mixing in another channel; early epochs train on the relaxed mixture
    const bool relaxed = static_cast<double>(epoch) < config.relaxed_fraction * static_cast<double>(config.epochs);
    result.temperatures.push_back(tau);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::span<const std::size_t> chunk(order.data() + start, n);

      // one Gumbel draw per trial, so every batch mixes trials routed to different candidates
      std::vector<float> noise(n * M * K);
      for (auto& g : noise) g = static_cast<float>(-std::log(-std::log(rng.uniform_open())));
      Tensor tiled = ops::concat(std::vector<Tensor>(n, logits), 0);  // [n*M, K]
      Tensor soft = ops::softmax(ops::scale(ops::add(tiled, Tensor::from_data({n * M, K}, std::move(noise))),
                                            static_cast<float>(1.0 / tau)));
      std::vector<float> hard(n * M * K, 0.0f);
      for (std::size_t r = 0; r < n * M; ++r) {
        auto row = soft.data().subspan(r * K, K);
        hard[r * K + static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())] = 1.0f;
      }
      Tensor weights = relaxed ? soft : ops::straight_through(Tensor::from_data({n * M, K}, std::move(hard)), soft);
      Tensor x = candidates.batch(chunk);
      std::vector<Tensor> parts;
      parts.reserve(n);
      for (std::size_t b = 0; b < n; ++b) {
        parts.push_back(ops::conv2d(ops::slice(x, 0, b, 1), ops::reshape(ops::slice(weights, 0, b * M, M), {M, K, 1, 1}),
                                    {1, 1}, Padding::Valid));
      }
      Tensor mixed = ops::concat(parts, 0);

      optimizer.zero_grad();
      Tensor loss = ops::cross_entropy(model.forward(mixed, ctx), candidates.batch_labels(chunk));
      loss.backward();
      optimizer.step();
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    }
    result.train_losses.push_back(loss_sum / static_cast<double>(candidates.size()));
  }

  auto lv = logits.data();
  std::vector<bool> used(K, false);
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<std::size_t> rank(K);
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return lv[m * K + a] > lv[m * K + b]; });
    for (std::size_t k : rank) {
      if (!used[k]) {
        used[k] = true;
        result.nodes.push_back(k);
        break;
      }
    }
    std::vector<double> w(K);
    const double peak = lv[m * K + rank[0]];
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += w[k] = std::exp((lv[m * K + k] - peak) / config.anneal.t_end);
    for (auto& v : w) v /= z;
    result.weights.push_back(std::move(w));
  }
  return result;
}

}  // namespace distnet

namespace distnet {

std::vector<CandidateNode> pick_nodes_for_sources(const SyntheticData& data,
                                                  const std::vector<CandidateNode>& candidates,
                                                  std::size_t M, double source_depth_cm) {
  if (M > candidates.size()) fail(ErrorKind::Config, "more nodes requested than candidates");
  if (data.sources.empty()) fail(ErrorKind::Config, "no synthetic sources");
  std::vector<bool> used(candidates.size(), false);
  std::vector<CandidateNode> picked;
  for (std::size_t m = 0; m < M; ++m) {
    const auto& src = data.sources[m % data.sources.size()].position;
    std::size_t best = candidates.size();
    double best_score = -1.0;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (used[k]) continue;
      const double score = std::abs(gain(src, data.layout.positions[candidates[k].i], source_depth_cm) -
                                    gain(src, data.layout.positions[candidates[k].j], source_depth_cm));
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    used[best] = true;
    picked.push_back(candidates[best]);
  }
  return picked;
}

}  // namespace distnet
