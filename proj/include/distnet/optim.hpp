#pragma once

#include <string>
#include <vector>

#include "distnet/tensor.hpp"

namespace distnet {

struct AdamHyper {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First and second moments for one parameter tensor.
struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
};

/// One bias-corrected Adam update of `param` in place. `step` is the 1-based
/// step count after incrementing.
void adam_update(std::span<float> param, std::span<const float> grad, AdamMoments& moments,
                 long step, float lr, const AdamHyper& hyper = {});

struct ParamGroup {
  std::string name;
  float lr = 1e-3f;
  std::vector<NamedTensor> params;
};

/// Adam over several parameter groups with their own learning rates. The step
/// counter is shared by all groups; parameters that received no gradient in a
/// step are left untouched.
class Adam {
 public:
  explicit Adam(std::vector<ParamGroup> groups, AdamHyper hyper = {});

  void zero_grad();
  /// Raises ErrorKind::Numeric naming the parameter if any gradient is NaN/Inf.
  void step();

  long steps() const { return step_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  const AdamMoments& moments(std::size_t group, std::size_t index) const {
    return moments_[group][index];
  }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<AdamMoments>> moments_;
  AdamHyper hyper_;
  long step_ = 0;
};

}  // namespace distnet
