#include "distnet/module.hpp"

#include <algorithm>
#include <map>

#include "distnet/error.hpp"

namespace distnet {

void StateDict::append(const StateDict& other, const std::string& prefix) {
  for (const auto& p : other.params) params.push_back({prefix + p.name, p.tensor});
  for (const auto& b : other.buffers) buffers.push_back({prefix + b.name, b.tensor});
}

std::vector<NamedTensor> StateDict::all() const {
  std::vector<NamedTensor> out = params;
  out.insert(out.end(), buffers.begin(), buffers.end());
  return out;
}

std::size_t StateDict::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Snapshot take_snapshot(const StateDict& state) {
  Snapshot snap;
  for (const auto& t : state.all()) snap.emplace_back(t.tensor.data().begin(), t.tensor.data().end());
  return snap;
}

void restore_snapshot(const StateDict& state, const Snapshot& snapshot) {
  auto tensors = state.all();
  if (tensors.size() != snapshot.size()) fail(ErrorKind::State, "snapshot does not match model");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto dst = tensors[i].tensor.data();
    if (dst.size() != snapshot[i].size()) fail(ErrorKind::State, "snapshot does not match model");
    std::copy(snapshot[i].begin(), snapshot[i].end(), dst.begin());
  }
}

void copy_state(const StateDict& from, const StateDict& to) {
  std::map<std::string, Tensor> source;
  for (const auto& t : from.all()) source.emplace(t.name, t.tensor);
  std::vector<std::string> bad;
  for (const auto& t : to.all()) {
    auto it = source.find(t.name);
    if (it == source.end() || it->second.shape() != t.tensor.shape()) bad.push_back(t.name);
  }
  if (!bad.empty()) {
    std::string msg = "state mismatch for:";
    for (const auto& n : bad) msg += " " + n;
    fail(ErrorKind::Shape, msg);
  }
  for (const auto& t : to.all()) {
    auto src = source.at(t.name).data();
    Tensor dst = t.tensor;
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
}

BatchNorm::BatchNorm(std::size_t channels)
    : gamma(Tensor::full({channels}, 1.0f, true)),
      beta(Tensor::zeros({channels}, true)),
      stats{Tensor::zeros({channels}), Tensor::full({channels}, 1.0f)} {}

Tensor BatchNorm::forward(const Tensor& x, const ForwardContext& ctx) {
  return ops::batchnorm(x, gamma, beta, ctx.mode, stats);
}

StateDict BatchNorm::state(const std::string& prefix) const {
  return {{{prefix + "gamma", gamma}, {prefix + "beta", beta}},
          {{prefix + "running_mean", stats.running_mean}, {prefix + "running_var", stats.running_var}}};
}

FusionMlp::FusionMlp(std::size_t inputs, std::size_t hidden, std::size_t outputs, Rng& rng)
    : w1(init_params({inputs, hidden}, inputs, rng)),
      b1(Tensor::zeros({hidden}, true)),
      w2(init_params({hidden, outputs}, hidden, rng)),
      b2(Tensor::zeros({outputs}, true)) {}

Tensor FusionMlp::forward(const Tensor& x) const {
  Tensor h = ops::relu(ops::dense(x, w1, &b1));
  return ops::log_softmax(ops::dense(h, w2, &b2));
}

StateDict FusionMlp::state(const std::string& prefix) const {
  return {{{prefix + "fc1.weight", w1},
           {prefix + "fc1.bias", b1},
           {prefix + "fc2.weight", w2},
           {prefix + "fc2.bias", b2}},
          {}};
}

}  // namespace distnet
