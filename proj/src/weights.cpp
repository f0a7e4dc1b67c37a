#include "distnet/weights.hpp"

#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "distnet/error.hpp"

namespace distnet {

namespace {

struct StoredTensor {
  std::string name;
  bool buffer = false;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  DistributedConfig config;
  std::vector<StoredTensor> tensors;
};

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  io::Reader r(in, path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kWeightsMagic)) {
    fail(ErrorKind::Format, path.string() + ": bad magic at byte offset 0, not a BNWT weight file");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWeightsVersion) {
    fail(ErrorKind::Format, path.string() + ": unsupported weight file version " + std::to_string(version) +
                                " (this build reads version " + std::to_string(kWeightsVersion) + ")");
  }
  Checkpoint ck;
  auto u32 = [&](const char* field) { return static_cast<std::size_t>(r.get<std::uint32_t>(field)); };
  ck.config.central.channels = u32("nodes");
  ck.config.central.window_len = u32("window_len");
  ck.config.central.temporal_filters = u32("temporal_filters");
  ck.config.central.spatial_filters = u32("spatial_filters");
  ck.config.central.num_classes = u32("num_classes");
  ck.config.compressor.factor = u32("factor");
  ck.config.compressor.stride1 = u32("stride1");
  ck.config.compressor.stride2 = u32("stride2");
  ck.config.compressor.kernel1 = u32("kernel1");
  ck.config.compressor.kernel2 = u32("kernel2");
  ck.config.fusion_hidden = u32("fusion_hidden");
  ck.config.central.dropout_rate = r.get<float>("dropout_rate");
  const std::size_t header_end = r.offset();
  try {
    ck.config.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Format, path.string() + ": invalid architecture in header (bytes 6-" +
                                std::to_string(header_end) + "): " + e.what());
  }

  const std::size_t count = u32("tensor count");
  for (std::size_t t = 0; t < count; ++t) {
    StoredTensor st;
    const auto len = r.get<std::uint16_t>("name length");
    st.name.resize(len);
    r.read(st.name.data(), len, "name");
    const auto kind_offset = r.offset();
    const auto kind = r.get<std::uint8_t>("tensor kind");
    if (kind > 1) {
      fail(ErrorKind::Format, path.string() + ": bad tensor kind " + std::to_string(kind) + " at byte offset " +
                                  std::to_string(kind_offset));
    }
    st.buffer = kind == 1;
    const std::size_t rank = u32("rank");
    if (rank == 0 || rank > 8) {
      fail(ErrorKind::Format, path.string() + ": tensor '" + st.name + "' has rank " + std::to_string(rank));
    }
    for (std::size_t k = 0; k < rank; ++k) st.shape.push_back(u32("dim"));
    const std::size_t numel = shape_numel(st.shape);
    if (numel == 0 || numel > (std::size_t{1} << 28)) {
      fail(ErrorKind::Format, path.string() + ": tensor '" + st.name + "' has implausible shape " + shape_str(st.shape));
    }
    st.values.resize(numel);
    r.read(reinterpret_cast<char*>(st.values.data()), numel * sizeof(float), "tensor values");
    ck.tensors.push_back(std::move(st));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorKind::Format, path.string() + ": trailing bytes at byte offset " + std::to_string(r.offset()));
  }
  return ck;
}

std::string describe(const DistributedConfig& c) {
  return "M=" + std::to_string(c.nodes()) + " L=" + std::to_string(c.central.window_len) +
         " D=" + std::to_string(c.compressor.factor) + " classes=" + std::to_string(c.central.num_classes);
}

void assign(DistributedModel& model, const Checkpoint& ck, const std::filesystem::path& path) {
  StateDict state = model.state();
  std::map<std::string, std::pair<Tensor, bool>> targets;
  for (const auto& p : state.params) targets.emplace(p.name, std::make_pair(p.tensor, false));
  for (const auto& b : state.buffers) targets.emplace(b.name, std::make_pair(b.tensor, true));

  std::vector<std::string> problems;
  std::map<std::string, const StoredTensor*> found;
  for (const auto& st : ck.tensors) {
    auto it = targets.find(st.name);
    if (it == targets.end()) {
      problems.push_back("unknown '" + st.name + "'");
    } else if (it->second.first.shape() != st.shape) {
      problems.push_back("'" + st.name + "' is " + shape_str(st.shape) + " in the file but " +
                         shape_str(it->second.first.shape()) + " in the model");
    } else if (it->second.second != st.buffer) {
      problems.push_back("'" + st.name + "' stored as the wrong kind");
    } else {
      found[st.name] = &st;
    }
  }
  for (const auto& [name, t] : targets) {
    bool present = false;
    for (const auto& st : ck.tensors) present = present || st.name == name;
    if (!present) problems.push_back("missing '" + name + "'");
  }
  if (!problems.empty()) {
    std::string msg = path.string() + " (" + describe(ck.config) + ") does not fit the model (" +
                      describe(model.config()) + "):";
    for (const auto& p : problems) msg += "\n  " + p;
    fail(ErrorKind::Shape, msg);
  }
  for (auto& [name, st] : found) {
    auto dst = targets.at(name).first.data();
    std::copy(st->values.begin(), st->values.end(), dst.begin());
  }
}

}  // namespace

void save_weights(const DistributedModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  const DistributedConfig& c = model.config();
  out.write(kWeightsMagic, 4);
  io::put<std::uint16_t>(out, kWeightsVersion);
  for (std::size_t v : {c.central.channels, c.central.window_len, c.central.temporal_filters,
                        c.central.spatial_filters, c.central.num_classes, c.compressor.factor,
                        c.compressor.stride1, c.compressor.stride2, c.compressor.kernel1, c.compressor.kernel2,
                        c.fusion_hidden}) {
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  io::put<float>(out, c.central.dropout_rate);

  const StateDict state = model.state();
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(state.params.size() + state.buffers.size()));
  auto write_tensor = [&](const NamedTensor& nt, std::uint8_t kind) {
    io::put<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    io::put<std::uint8_t>(out, kind);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) io::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    auto v = nt.tensor.data();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  };
  for (const auto& p : state.params) write_tensor(p, 0);
  for (const auto& b : state.buffers) write_tensor(b, 1);
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

DistributedModel load_weights(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  Rng rng(0);
  DistributedModel model(ck.config, rng);
  assign(model, ck, path);
  return model;
}

void load_weights_into(DistributedModel& model, const std::filesystem::path& path) {
  assign(model, read_checkpoint(path), path);
}

std::string stage_checkpoint_name(int stage) {
  if (stage < 1 || stage > 4) fail(ErrorKind::Config, "pipeline stages are numbered 1 to 4");
  return "stage" + std::to_string(stage) + ".bnw";
}

}  // namespace distnet
