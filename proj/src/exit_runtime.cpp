#include "distnet/exit_runtime.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "distnet/error.hpp"

namespace distnet {

void ExitPolicy::validate() const {
  if (!(exit_threshold >= 0.0 && exit_threshold <= 1.0)) {
    fail(ErrorKind::Config, "exit threshold must be in [0, 1], got " + std::to_string(exit_threshold));
  }
}

std::size_t InferenceTrace::exited_count() const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const TraceEntry& e) { return e.exited; }));
}

double InferenceTrace::lambda() const {
  if (samples.empty()) return 0.0;
  return static_cast<double>(exited_count()) / static_cast<double>(samples.size());
}

double InferenceTrace::accuracy() const {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& e : samples) hits += e.prediction == e.label;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double normalized_entropy(std::span<const float> p) {
  if (p.size() < 2) fail(ErrorKind::Config, "normalized entropy needs at least 2 classes");
  double total = 0.0;
  for (float v : p) {
    if (!(v >= 0.0f) || !std::isfinite(v)) fail(ErrorKind::Numeric, "probability vector has a negative or non-finite entry");
    total += v;
  }
  if (!(total > 0.0)) fail(ErrorKind::Numeric, "probability vector sums to zero");
  double h = 0.0;
  for (float v : p) {
    if (v == 0.0f) continue;
    const double q = v / total;
    h -= q * std::log(q);
  }
  return std::clamp(h / std::log(static_cast<double>(p.size())), 0.0, 1.0);
}

double normalized_entropy_logprobs(std::span<const float> logprobs) {
  std::vector<float> p(logprobs.size());
  std::transform(logprobs.begin(), logprobs.end(), p.begin(), [](float v) { return std::exp(v); });
  return normalized_entropy(p);
}

namespace {

int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<float> out;
  out.reserve(rows.size() * stride);
  auto src = t.data();
  for (auto r : rows) out.insert(out.end(), src.begin() + r * stride, src.begin() + (r + 1) * stride);
  return Tensor::from_data(std::move(shape), std::move(out));
}

}  // namespace

ExitResult infer_with_exit(DistributedModel& model, const Tensor& x, const ExitPolicy& policy,
                           std::span<const int> labels) {
  policy.validate();
  const std::size_t batch = x.dim(0);
  if (!labels.empty() && labels.size() != batch) {
    fail(ErrorKind::Shape, "infer_with_exit: " + std::to_string(labels.size()) + " labels for a batch of " +
                               std::to_string(batch));
  }
  NoGradGuard no_grad;
  ForwardContext ctx{Mode::Eval, nullptr};
  Tensor cf = model.classfuse_forward(x, ctx);
  const std::size_t k = cf.dim(1);

  ExitResult result;
  result.predictions.resize(batch);
  result.trace.samples.resize(batch);
  std::vector<std::size_t> pending;
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = cf.data().subspan(b * k, k);
    TraceEntry& e = result.trace.samples[b];
    e.entropy = normalized_entropy_logprobs(row);
    e.exited = policy.exits(e.entropy);
    e.label = labels.empty() ? -1 : labels[b];
    if (e.exited) {
      e.prediction = argmax_row(row);
    } else {
      pending.push_back(b);
    }
  }
  if (!pending.empty()) {
    auto [cp, recon] = model.compressfuse_forward(select_rows(x, pending), ctx);
    Tensor full = model.fuse_branches(select_rows(cf, pending), cp);
    for (std::size_t j = 0; j < pending.size(); ++j) {
      result.trace.samples[pending[j]].prediction = argmax_row(full.data().subspan(j * k, k));
    }
  }
  for (std::size_t b = 0; b < batch; ++b) result.predictions[b] = result.trace.samples[b].prediction;
  return result;
}

ExitResult infer_with_exit(DistributedModel& model, const EpochedDataset& data, const ExitPolicy& policy,
                           std::size_t batch_size) {
  if (data.empty()) fail(ErrorKind::Config, "infer_with_exit: empty dataset");
  ExitResult all;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::span<const std::size_t> chunk(idx.data() + start, std::min(batch_size, idx.size() - start));
    auto labels = data.batch_labels(chunk);
    ExitResult part = infer_with_exit(model, data.batch(chunk), policy, labels);
    all.predictions.insert(all.predictions.end(), part.predictions.begin(), part.predictions.end());
    all.trace.samples.insert(all.trace.samples.end(), part.trace.samples.begin(), part.trace.samples.end());
  }
  return all;
}

double relative_bandwidth(std::size_t window_len, std::size_t num_classes, std::size_t factor, double lambda) {
  if (factor == 0) fail(ErrorKind::Config, "compression factor must be >= 1");
  if (window_len == 0) fail(ErrorKind::Config, "window length must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorKind::Config, "lambda must be in [0, 1]");
  const double L = static_cast<double>(window_len);
  return (static_cast<double>(num_classes) + (1.0 - lambda) * L / static_cast<double>(factor)) / L;
}

ExitScores score_exits(DistributedModel& model, const EpochedDataset& data, std::size_t batch_size) {
  if (data.empty()) fail(ErrorKind::Config, "threshold sweep over an empty dataset");
  NoGradGuard no_grad;
  ForwardContext ctx{Mode::Eval, nullptr};
  ExitScores s;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    std::span<const std::size_t> chunk(idx.data() + start, n);
    BranchOutput out = model.fullfuse_forward(data.batch(chunk), ctx);
    const std::size_t k = out.classfuse.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      auto cf = out.classfuse.data().subspan(b * k, k);
      s.entropy.push_back(normalized_entropy_logprobs(cf));
      s.classfuse_prediction.push_back(argmax_row(cf));
      s.fullfuse_prediction.push_back(argmax_row(out.fullfuse.data().subspan(b * k, k)));
    }
  }
  s.labels = data.labels;
  return s;
}

std::vector<SweepPoint> sweep_from_scores(const ExitScores& scores, std::size_t window_len,
                                          std::size_t num_classes, std::size_t factor, double step,
                                          const ExitScores* calibration) {
  if (scores.size() == 0) fail(ErrorKind::Config, "threshold sweep over an empty dataset");
  if (calibration && calibration->size() == 0) fail(ErrorKind::Config, "empty calibration set");
  if (!(step > 0.0 && step <= 1.0)) fail(ErrorKind::Config, "sweep step must be in (0, 1]");
  const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
  const ExitScores& lam_src = calibration ? *calibration : scores;

  std::vector<SweepPoint> points;
  points.reserve(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    ExitPolicy policy{static_cast<double>(k) / static_cast<double>(n)};
    std::size_t exited = 0;
    for (double h : lam_src.entropy) exited += policy.exits(h);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const int pred = policy.exits(scores.entropy[i]) ? scores.classfuse_prediction[i]
                                                       : scores.fullfuse_prediction[i];
      hits += pred == scores.labels[i];
    }
    SweepPoint p;
    p.threshold = policy.exit_threshold;
    p.lambda = static_cast<double>(exited) / static_cast<double>(lam_src.size());
    p.bandwidth = relative_bandwidth(window_len, num_classes, factor, p.lambda);
    p.accuracy = static_cast<double>(hits) / static_cast<double>(scores.size());
    points.push_back(p);
  }
  return points;
}

std::vector<SweepPoint> sweep_thresholds(DistributedModel& model, const EpochedDataset& data, double step,
                                         const EpochedDataset* calibration) {
  ExitScores scores = score_exits(model, data);
  const auto& cfg = model.config();
  if (calibration) {
    ExitScores cal = score_exits(model, *calibration);
    return sweep_from_scores(scores, model.window_len(), model.num_classes(), cfg.compressor.factor, step, &cal);
  }
  return sweep_from_scores(scores, model.window_len(), model.num_classes(), cfg.compressor.factor, step);
}

std::vector<SweepPoint> pareto_front(std::span<const SweepPoint> points) {
  std::vector<SweepPoint> front;
  for (const auto& p : points) {
    bool dominated = false;
    for (const auto& q : points) {
      if (q.bandwidth <= p.bandwidth && q.accuracy >= p.accuracy &&
          (q.bandwidth < p.bandwidth || q.accuracy > p.accuracy)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) front.push_back(p);
  }
  std::stable_sort(front.begin(), front.end(),
                   [](const SweepPoint& a, const SweepPoint& b) { return a.bandwidth < b.bandwidth; });
  return front;
}

}  // namespace distnet
