#include "distnet/simulate.hpp"

#include <algorithm>
#include <numeric>

#include "distnet/error.hpp"

namespace distnet {

std::size_t MessageLog::count(PayloadKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(messages.begin(), messages.end(), [kind](const Message& m) { return m.kind == kind; }));
}

std::size_t MessageLog::scalars(PayloadKind kind) const {
  std::size_t n = 0;
  for (const auto& m : messages) n += m.kind == kind ? m.scalars : 0;
  return n;
}

std::size_t MessageLog::total_scalars() const {
  return scalars(PayloadKind::ClassVector) + scalars(PayloadKind::CompressedFrame);
}

std::size_t MessageLog::total_bytes() const {
  std::size_t n = 0;
  for (const auto& m : messages) n += m.bytes;
  return n;
}

double MessageLog::relative_bandwidth() const {
  if (samples == 0 || nodes == 0 || window_len == 0) fail(ErrorKind::State, "empty message log");
  return static_cast<double>(total_scalars()) /
         (static_cast<double>(samples) * static_cast<double>(nodes) * static_cast<double>(window_len));
}

namespace {

Tensor rows_of(const Tensor& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<float> out;
  out.reserve(rows.size() * stride);
  for (auto r : rows) out.insert(out.end(), t.data().begin() + r * stride, t.data().begin() + (r + 1) * stride);
  return Tensor::from_data(std::move(shape), std::move(out));
}

std::size_t per_sample_scalars(const Tensor& payload) { return payload.numel() / payload.dim(0); }

int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

SimulationResult simulate_run(DistributedModel& model, const EpochedDataset& data, const ExitPolicy& policy,
                              std::size_t batch_size) {
  policy.validate();
  if (data.empty()) fail(ErrorKind::Config, "simulation over an empty dataset");
  if (data.channels != model.nodes() || data.window_len != model.window_len()) {
    fail(ErrorKind::Shape, "dataset does not match the model's node count or window length");
  }
  NoGradGuard no_grad;
  ForwardContext ctx{Mode::Eval, nullptr};
  const std::size_t M = model.nodes();

  SimulationResult sim;
  sim.log.samples = data.size();
  sim.log.nodes = M;
  sim.log.window_len = data.window_len;
  sim.predictions.resize(data.size());
  sim.trace.samples.resize(data.size());

  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    std::span<const std::size_t> chunk(idx.data() + start, n);
    Tensor x = data.batch(chunk);

    // nodes: local classification, always transmitted
    std::vector<Tensor> vectors;
    for (std::size_t i = 0; i < M; ++i) vectors.push_back(model.node_classify(i, ops::slice(x, 1, i, 1), ctx));
    // fusion center: ClassFuse and the exit decision
    Tensor cf = model.fuse_classes(vectors);
    const std::size_t k = cf.dim(1);
    std::vector<std::size_t> escalate;
    for (std::size_t b = 0; b < n; ++b) {
      auto row = cf.data().subspan(b * k, k);
      TraceEntry& e = sim.trace.samples[start + b];
      e.entropy = normalized_entropy_logprobs(row);
      e.exited = policy.exits(e.entropy);
      e.label = data.labels[start + b];
      e.prediction = argmax_row(row);
      if (!e.exited) escalate.push_back(b);
    }
    // requested nodes: compress and transmit the buffered window
    std::vector<Tensor> frames;
    if (!escalate.empty()) {
      Tensor xs = rows_of(x, escalate);
      for (std::size_t i = 0; i < M; ++i) frames.push_back(model.compress_node(i, ops::slice(xs, 1, i, 1)));
      Tensor cp = model.classify_frames(frames, ctx).first;
      Tensor full = model.fuse_branches(rows_of(cf, escalate), cp);
      for (std::size_t j = 0; j < escalate.size(); ++j) {
        sim.trace.samples[start + escalate[j]].prediction = argmax_row(full.data().subspan(j * k, k));
      }
    }

    std::size_t next = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t s = start + b;
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t c = per_sample_scalars(vectors[i]);
        sim.log.messages.push_back({s, i, PayloadKind::ClassVector, c, c * kBytesPerScalar});
      }
      if (next < escalate.size() && escalate[next] == b) {
        for (std::size_t i = 0; i < M; ++i) {
          const std::size_t c = per_sample_scalars(frames[i]);
          sim.log.messages.push_back({s, i, PayloadKind::CompressedFrame, c, c * kBytesPerScalar});
        }
        ++next;
      }
      sim.predictions[s] = sim.trace.samples[s].prediction;
    }
  }
  return sim;
}

}  // namespace distnet
