#include "distnet/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "distnet/error.hpp"

namespace distnet {

namespace {

std::vector<double> kaiser_lowpass(std::size_t half_len, double cutoff, double beta) {
  const std::size_t n = 2 * half_len + 1;
  std::vector<double> h(n);
  const double i0_beta = std::cyl_bessel_i(0.0, beta);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = static_cast<double>(i) - static_cast<double>(half_len);
    const double arg = std::numbers::pi * cutoff * m;
    const double sinc = m == 0.0 ? 1.0 : std::sin(arg) / arg;
    const double r = 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0;
    const double w = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    h[i] = cutoff * sinc * w;
  }
  const double dc = std::accumulate(h.begin(), h.end(), 0.0);
  for (auto& v : h) v /= dc;
  return h;
}

}  // namespace

std::vector<float> resample_poly(std::span<const float> x, std::size_t up, std::size_t down) {
  if (up == 0 || down == 0) fail(ErrorKind::Config, "resample factors must be >= 1");
  const std::size_t g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == 1 && down == 1) return {x.begin(), x.end()};
  if (x.empty()) return {};

  const std::size_t max_rate = std::max(up, down);
  const std::size_t half_len = 10 * max_rate;
  std::vector<double> h = kaiser_lowpass(half_len, 1.0 / static_cast<double>(max_rate), 5.0);
  for (auto& v : h) v *= static_cast<double>(up);

  const std::size_t n_up = x.size() * up;
  const std::size_t n_out = (x.size() * up + down - 1) / down;
  std::vector<float> y(n_out);
  for (std::size_t m = 0; m < n_out; ++m) {
    // y[m] = sum_k h[k] * xu[m * down + half_len - k], xu the zero-stuffed input
    const std::size_t j0 = m * down + half_len;
    double acc = 0.0;
    for (std::size_t k = j0 % up; k < h.size() && k <= j0; k += up) {
      const std::size_t j = j0 - k;
      if (j < n_up) acc += h[k] * x[j / up];
    }
    y[m] = static_cast<float>(acc);
  }
  return y;
}

std::array<Biquad, 2> butterworth_highpass4(double cutoff_hz, double sample_rate) {
  if (!(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0)) {
    fail(ErrorKind::Config, "high-pass cutoff must lie in (0, fs/2)");
  }
  // pole pairs of a 4th-order Butterworth prototype
  const double qs[2] = {1.0 / (2.0 * std::cos(std::numbers::pi / 8.0)),
                        1.0 / (2.0 * std::cos(3.0 * std::numbers::pi / 8.0))};
  const double w0 = 2.0 * std::numbers::pi * cutoff_hz / sample_rate;
  std::array<Biquad, 2> out{};
  for (int s = 0; s < 2; ++s) {
    const double alpha = std::sin(w0) / (2.0 * qs[s]);
    const double c = std::cos(w0);
    const double a0 = 1.0 + alpha;
    out[s] = {(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0, -2.0 * c / a0,
              (1.0 - alpha) / a0};
  }
  return out;
}

namespace {

// One pass through the cascade, each section starting in its steady state for
// a constant input equal to the first sample.
void run_cascade(std::span<const Biquad> sections, std::vector<double>& x) {
  double level = x.empty() ? 0.0 : x[0];
  for (const Biquad& q : sections) {
    const double dc = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    double s1 = level * (dc - q.b0);
    double s2 = level * (q.b2 - q.a2 * dc);
    level *= dc;
    for (double& v : x) {
      const double in = v;
      const double y = q.b0 * in + s1;
      s1 = q.b1 * in - q.a1 * y + s2;
      s2 = q.b2 * in - q.a2 * y;
      v = y;
    }
  }
}

}  // namespace

std::vector<float> filtfilt(std::span<const Biquad> sections, std::span<const float> x) {
  const std::size_t n = x.size();
  if (n < 2) return {x.begin(), x.end()};
  const std::size_t pad = std::min<std::size_t>(n - 1, 96 * sections.size());
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  run_cascade(sections, ext);
  std::reverse(ext.begin(), ext.end());
  run_cascade(sections, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

void standardize_epochs(EpochedDataset& dataset) {
  const std::size_t L = dataset.window_len;
  for (std::size_t r = 0; r < dataset.size() * dataset.channels; ++r) {
    float* row = dataset.samples.data() + r * L;
    double mean = 0.0;
    for (std::size_t t = 0; t < L; ++t) mean += row[t];
    mean /= static_cast<double>(L);
    double var = 0.0;
    for (std::size_t t = 0; t < L; ++t) var += (row[t] - mean) * (row[t] - mean);
    var /= static_cast<double>(L);
    const double inv = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
    for (std::size_t t = 0; t < L; ++t) row[t] = static_cast<float>((row[t] - mean) * inv);
  }
}

PreprocessResult preprocess(const Recording& recording, const PreprocessConfig& config) {
  if (recording.channels == 0 || recording.samples.size() % recording.channels != 0) {
    fail(ErrorKind::Shape, "recording samples do not divide into channels");
  }
  if (recording.sample_rate < config.target_rate) {
    fail(ErrorKind::Config, "source rate below the target rate");
  }
  const auto src = static_cast<long long>(std::llround(recording.sample_rate));
  const auto dst = static_cast<long long>(std::llround(config.target_rate));
  if (std::abs(recording.sample_rate - static_cast<double>(src)) > 1e-9 ||
      std::abs(config.target_rate - static_cast<double>(dst)) > 1e-9) {
    fail(ErrorKind::Config, "sample rates must be whole numbers of Hz");
  }
  const auto g = std::gcd(src, dst);
  const auto up = static_cast<std::size_t>(dst / g);
  const auto down = static_cast<std::size_t>(src / g);
  const auto sections = butterworth_highpass4(config.highpass_hz, config.target_rate);

  const std::size_t T = recording.length();
  std::vector<std::vector<float>> filtered(recording.channels);
  for (std::size_t c = 0; c < recording.channels; ++c) {
    std::span<const float> ch(recording.samples.data() + c * T, T);
    filtered[c] = filtfilt(sections, resample_poly(ch, up, down));
  }
  const std::size_t T_out = filtered.empty() ? 0 : filtered[0].size();

  const auto before = static_cast<std::size_t>(std::llround(config.before_cue_s * config.target_rate));
  const auto window = static_cast<std::size_t>(
      std::llround((config.before_cue_s + config.after_cue_s) * config.target_rate));
  PreprocessResult out;
  out.dataset.channels = recording.channels;
  out.dataset.window_len = window;
  out.dataset.sample_rate = static_cast<float>(config.target_rate);
  for (const Cue& cue : recording.cues) {
    const auto at = static_cast<std::size_t>(std::llround(static_cast<double>(cue.sample) * static_cast<double>(up) /
                                                          static_cast<double>(down)));
    if (at < before || at - before + window > T_out) {
      ++out.skipped;
      continue;
    }
    for (std::size_t c = 0; c < recording.channels; ++c) {
      auto first = filtered[c].begin() + static_cast<std::ptrdiff_t>(at - before);
      out.dataset.samples.insert(out.dataset.samples.end(), first, first + static_cast<std::ptrdiff_t>(window));
    }
    out.dataset.labels.push_back(cue.label);
    out.dataset.subjects.push_back(cue.subject);
  }
  if (config.standardize) standardize_epochs(out.dataset);
  return out;
}

}  // namespace distnet
