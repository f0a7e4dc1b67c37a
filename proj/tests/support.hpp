#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "distnet/dataset.hpp"
#include "distnet/msfbcnn.hpp"
#include "distnet/ops.hpp"

namespace testing_support {

using namespace distnet;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

/// Central-difference check of d/dleaf sum(weights * f()). The weighted sum is
/// taken in double outside the graph. Returns ||analytic - numeric|| /
/// max(||analytic||, ||numeric||).
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, std::uint64_t seed = 7,
                         double h = 1e-3) {
  Rng rng(seed);
  Tensor probe = f();
  std::vector<float> w(probe.numel());
  for (auto& x : w) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto weighted = [&] {
    NoGradGuard ng;
    Tensor out = f();
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(w[i]) * out.data()[i];
    return s;
  };

  for (auto& l : leaves) l.zero_grad();
  Tensor out = f();
  Tensor loss = ops::sum(ops::mul(out, Tensor::from_data(out.shape(), w)));
  loss.backward();

  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto& l : leaves) {
    std::vector<float> analytic(l.numel(), 0.0f);
    if (l.has_grad()) analytic.assign(l.grad().begin(), l.grad().end());
    for (std::size_t i = 0; i < l.numel(); ++i) {
      const float orig = l.data()[i];
      l.data()[i] = static_cast<float>(orig + h);
      const double fp = weighted();
      l.data()[i] = static_cast<float>(orig - h);
      const double fm = weighted();
      l.data()[i] = orig;
      const double num = (fp - fm) / (2.0 * h);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += static_cast<double>(analytic[i]) * analytic[i];
      nn += num * num;
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / denom;
}

/// Straightforward double-precision evaluation of the classifier in Eval mode,
/// written against the textbook layout (time-convs per channel, spatial conv
/// across channels) rather than the library's internal reshapes.
inline std::vector<double> reference_msfbcnn(Msfbcnn& model, const Tensor& x) {
  const MsfbcnnConfig& c = model.config();
  const std::size_t B = x.dim(0), C = c.channels, T = c.window_len, FT = c.temporal_filters,
                    FS = c.spatial_filters, NC = c.num_classes;
  StateDict s = model.state();
  auto param = [&](const std::string& name) -> Tensor {
    for (auto& p : s.params) if (p.name == name) return p.tensor;
    for (auto& p : s.buffers) if (p.name == name) return p.tensor;
    throw std::runtime_error("no tensor " + name);
  };
  auto xv = [&](std::size_t b, std::size_t ch, long t) -> double {
    if (t < 0 || t >= static_cast<long>(T)) return 0.0;
    return x.data()[(b * C + ch) * T + static_cast<std::size_t>(t)];
  };
  const double eps = 1e-5;

  std::vector<double> out(B * NC);
  for (std::size_t b = 0; b < B; ++b) {
    // time convolutions, Same padding with the odd pad at the end
    std::vector<double> h1(4 * FT * T * C);  // [4F_T, T, C]
    for (std::size_t i = 0; i < 4; ++i) {
      Tensor k = param("timeconv" + std::to_string(i + 1) + ".weight");
      const std::size_t K = kTimeKernels[i];
      const long before = static_cast<long>((K - 1) / 2);
      for (std::size_t f = 0; f < FT; ++f) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t ch = 0; ch < C; ++ch) {
            double acc = 0.0;
            for (std::size_t j = 0; j < K; ++j) acc += k.data()[f * K + j] * xv(b, ch, static_cast<long>(t + j) - before);
            h1[((i * FT + f) * T + t) * C + ch] = acc;
          }
        }
      }
    }
    Tensor g1 = param("bn_time.gamma"), b1 = param("bn_time.beta");
    Tensor m1 = param("bn_time.running_mean"), v1 = param("bn_time.running_var");
    for (std::size_t f = 0; f < 4 * FT; ++f) {
      for (std::size_t r = 0; r < T * C; ++r) {
        double& v = h1[f * T * C + r];
        v = (v - m1.data()[f]) / std::sqrt(v1.data()[f] + eps) * g1.data()[f] + b1.data()[f];
      }
    }
    // spatial conv: kernel [F_S, 4F_T, 1, C]
    Tensor ks = param("spatialconv.weight");
    std::vector<double> h2(FS * T);
    for (std::size_t o = 0; o < FS; ++o) {
      for (std::size_t t = 0; t < T; ++t) {
        double acc = 0.0;
        for (std::size_t f = 0; f < 4 * FT; ++f)
          for (std::size_t ch = 0; ch < C; ++ch) acc += ks.data()[(o * 4 * FT + f) * C + ch] * h1[(f * T + t) * C + ch];
        h2[o * T + t] = acc;
      }
    }
    Tensor g2 = param("bn_spatial.gamma"), b2 = param("bn_spatial.beta");
    Tensor m2 = param("bn_spatial.running_mean"), v2 = param("bn_spatial.running_var");
    const std::size_t P = T / 15;
    const long pad = static_cast<long>(((P - 1) * 15 + 75 - T) / 2);
    std::vector<double> feat(FS * P);
    for (std::size_t o = 0; o < FS; ++o) {
      std::vector<double> sq(T);
      for (std::size_t t = 0; t < T; ++t) {
        const double v = (h2[o * T + t] - m2.data()[o]) / std::sqrt(v2.data()[o] + eps) * g2.data()[o] + b2.data()[o];
        sq[t] = v * v;
      }
      for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (long j = 0; j < 75; ++j) {
          const long t = static_cast<long>(p * 15) + j - pad;
          if (t >= 0 && t < static_cast<long>(T)) acc += sq[static_cast<std::size_t>(t)];
        }
        feat[o * P + p] = std::log(std::max(acc / 75.0, 1e-6));
      }
    }
    Tensor wd = param("dense.weight");
    std::vector<double> logits(NC, 0.0);
    for (std::size_t n = 0; n < NC; ++n)
      for (std::size_t i = 0; i < FS * P; ++i) logits[n] += feat[i] * wd.data()[i * NC + n];
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (std::size_t n = 0; n < NC; ++n) out[b * NC + n] = logits[n] - mx - std::log(z);
  }
  return out;
}

/// `candidates` channels of pure noise except `informative`, which carries a
/// class-dependent oscillation. Labels are balanced and shuffled.
inline EpochedDataset planted_candidates(std::uint64_t seed, std::size_t candidates, std::size_t informative,
                                         std::size_t trials, std::size_t window_len = 150,
                                         std::size_t classes = 4, double amplitude = 1.0) {
  Rng rng(seed);
  EpochedDataset d;
  d.channels = candidates;
  d.window_len = window_len;
  d.sample_rate = 250.0f;
  for (std::size_t n = 0; n < trials; ++n) {
    const int label = static_cast<int>(n % classes);
    d.labels.push_back(label);
    d.subjects.push_back(0);
    const double f = 8.0 + 5.0 * label + rng.uniform(-1.0, 1.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t k = 0; k < candidates; ++k) {
      for (std::size_t t = 0; t < window_len; ++t) {
        double v = rng.normal();
        if (k == informative) v += amplitude * std::sqrt(2.0) * std::sin(2.0 * std::numbers::pi * f * t / 250.0 + phase);
        d.samples.push_back(static_cast<float>(v));
      }
    }
  }
  std::vector<std::size_t> order(trials);
  for (std::size_t i = 0; i < trials; ++i) order[i] = i;
  for (std::size_t i = trials; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return d.subset(order);
}

}  // namespace testing_support
