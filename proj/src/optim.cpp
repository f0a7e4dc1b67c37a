#include "distnet/optim.hpp"

#include <cmath>

#include "distnet/error.hpp"

namespace distnet {

void adam_update(std::span<float> param, std::span<const float> grad, AdamMoments& moments,
                 long step, float lr, const AdamHyper& hyper) {
  if (moments.m.size() != param.size()) {
    moments.m.assign(param.size(), 0.0f);
    moments.v.assign(param.size(), 0.0f);
  }
  const double c1 = 1.0 - std::pow(static_cast<double>(hyper.beta1), static_cast<double>(step));
  const double c2 = 1.0 - std::pow(static_cast<double>(hyper.beta2), static_cast<double>(step));
  const float step_size = static_cast<float>(lr / c1);
  const float root_c2 = static_cast<float>(std::sqrt(c2));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    float& m = moments.m[i];
    float& v = moments.v[i];
    m = hyper.beta1 * m + (1.0f - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0f - hyper.beta2) * g * g;
    param[i] -= step_size * m / (std::sqrt(v) / root_c2 + hyper.eps);
  }
}

Adam::Adam(std::vector<ParamGroup> groups, AdamHyper hyper)
    : groups_(std::move(groups)), hyper_(hyper) {
  for (const auto& g : groups_) moments_.emplace_back(g.params.size());
}

void Adam::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.tensor.zero_grad();
}

void Adam::step() {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      if (!p.tensor.has_grad()) continue;
      for (float v : p.tensor.grad()) {
        if (!std::isfinite(v)) {
          fail(ErrorKind::Numeric, "non-finite gradient in parameter '" + p.name + "'");
        }
      }
    }
  }
  ++step_;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& g = groups_[gi];
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Tensor& t = g.params[pi].tensor;
      if (!t.has_grad()) continue;
      adam_update(t.data(), t.grad(), moments_[gi][pi], step_, g.lr, hyper_);
    }
  }
}

}  // namespace distnet
