#include "distnet/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "binary_io.hpp"
#include "distnet/error.hpp"

namespace distnet {

Tensor EpochedDataset::batch(std::span<const std::size_t> indices) const {
  std::vector<float> values(indices.size() * trial_stride());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto src = trial(indices[b]);
    std::copy(src.begin(), src.end(), values.begin() + b * trial_stride());
  }
  return Tensor::from_data({indices.size(), channels, window_len, 1}, std::move(values));
}

std::vector<int> EpochedDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

EpochedDataset EpochedDataset::subset(std::span<const std::size_t> indices) const {
  EpochedDataset out;
  out.channels = channels;
  out.window_len = window_len;
  out.sample_rate = sample_rate;
  out.samples.reserve(indices.size() * trial_stride());
  for (auto i : indices) {
    if (i >= size()) fail(ErrorKind::Shape, "subset index out of range");
    auto src = trial(i);
    out.samples.insert(out.samples.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
    out.subjects.push_back(subjects[i]);
  }
  return out;
}

EpochedDataset EpochedDataset::select_channels(std::span<const std::size_t> channel_indices) const {
  for (auto c : channel_indices) {
    if (c >= channels) {
      fail(ErrorKind::Shape, "channel " + std::to_string(c) + " out of range for " +
                                 std::to_string(channels) + " channels");
    }
  }
  EpochedDataset out = *this;
  out.channels = channel_indices.size();
  out.samples.assign(size() * out.trial_stride(), 0.0f);
  for (std::size_t n = 0; n < size(); ++n) {
    for (std::size_t k = 0; k < channel_indices.size(); ++k) {
      const float* src = samples.data() + n * trial_stride() + channel_indices[k] * window_len;
      std::copy_n(src, window_len, out.samples.begin() + (n * out.channels + k) * window_len);
    }
  }
  return out;
}

EpochedDataset EpochedDataset::subject(int tag) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i) {
    if (subjects[i] == tag) idx.push_back(i);
  }
  if (idx.empty()) fail(ErrorKind::Config, "no trials for subject " + std::to_string(tag));
  return subset(idx);
}

Tensor EpochedDataset::all() const {
  return Tensor::from_data({size(), channels, window_len, 1}, samples);
}

void EpochedDataset::validate(std::size_t num_classes) const {
  if (samples.size() != size() * trial_stride() || subjects.size() != size()) {
    fail(ErrorKind::Shape, "dataset arrays have inconsistent lengths");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      fail(ErrorKind::Config, "label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

void save_dataset(const EpochedDataset& d, const std::filesystem::path& path) {
  d.validate(65536);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(kDatasetMagic, 4);
  io::put<std::uint16_t>(out, kDatasetVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.size()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.channels));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.window_len));
  io::put<float>(out, d.sample_rate);
  for (int y : d.labels) io::put<std::uint16_t>(out, static_cast<std::uint16_t>(y));
  for (int s : d.subjects) io::put<std::uint16_t>(out, static_cast<std::uint16_t>(s));
  out.write(reinterpret_cast<const char*>(d.samples.data()),
            static_cast<std::streamsize>(d.samples.size() * sizeof(float)));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

EpochedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  io::Reader r(in, path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    fail(ErrorKind::Format, path.string() + ": bad magic at byte offset 0, not a BNDS dataset");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kDatasetVersion) {
    fail(ErrorKind::Format, path.string() + ": unsupported dataset version " +
                                std::to_string(version) + " (expected " +
                                std::to_string(kDatasetVersion) + ")");
  }
  EpochedDataset d;
  const auto n = r.get<std::uint32_t>("N");
  d.channels = r.get<std::uint32_t>("C");
  d.window_len = r.get<std::uint32_t>("L");
  d.sample_rate = r.get<float>("rate");
  if (n == 0 || d.channels == 0 || d.window_len == 0) {
    fail(ErrorKind::Format, path.string() + ": zero dimension in header at byte offset 6");
  }
  d.labels.resize(n);
  d.subjects.resize(n);
  for (auto& y : d.labels) y = r.get<std::uint16_t>("labels");
  for (auto& s : d.subjects) s = r.get<std::uint16_t>("subjects");
  d.samples.resize(static_cast<std::size_t>(n) * d.channels * d.window_len);
  r.read(reinterpret_cast<char*>(d.samples.data()), d.samples.size() * sizeof(float), "payload");
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorKind::Format, path.string() + ": trailing bytes after payload at byte offset " +
                                std::to_string(r.offset()));
  }
  return d;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    cells.push_back(cell);
  }
  return cells;
}

struct TrialCsv {
  std::size_t channels = 0;
  std::vector<double> t;
  std::vector<std::vector<float>> rows;
};

TrialCsv read_trial_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open trial file " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Format, path.string() + ": empty file");
  auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "t") {
    fail(ErrorKind::Format, path.string() + ": header must start with t,ch0,...");
  }
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c] != "ch" + std::to_string(c - 1)) {
      fail(ErrorKind::Format, path.string() + ": unexpected column '" + header[c] + "'");
    }
  }
  TrialCsv trial;
  trial.channels = header.size() - 1;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      fail(ErrorKind::Format, path.string() + ": row " + std::to_string(row_no) + " has " +
                                  std::to_string(cells.size()) + " cells");
    }
    try {
      trial.t.push_back(std::stod(cells[0]));
      std::vector<float> row;
      for (std::size_t c = 1; c < cells.size(); ++c) row.push_back(std::stof(cells[c]));
      trial.rows.push_back(std::move(row));
    } catch (const std::exception&) {
      fail(ErrorKind::Format, path.string() + ": non-numeric value on row " + std::to_string(row_no));
    }
  }
  if (trial.rows.size() < 2) fail(ErrorKind::Format, path.string() + ": needs at least 2 samples");
  return trial;
}

}  // namespace

EpochedDataset load_csv_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) fail(ErrorKind::Io, "cannot open manifest " + manifest.string());
  std::string line;
  if (!std::getline(in, line) || split_csv(line) != std::vector<std::string>{"path", "label", "subject"}) {
    fail(ErrorKind::Format, manifest.string() + ": header must be path,label,subject");
  }
  EpochedDataset d;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != 3) fail(ErrorKind::Format, manifest.string() + ": malformed row '" + line + "'");
    std::filesystem::path trial_path = cells[0];
    if (trial_path.is_relative()) trial_path = manifest.parent_path() / trial_path;
    TrialCsv trial = read_trial_csv(trial_path);
    if (first) {
      d.channels = trial.channels;
      d.window_len = trial.rows.size();
      d.sample_rate = static_cast<float>(1.0 / (trial.t[1] - trial.t[0]));
      first = false;
    } else if (trial.channels != d.channels || trial.rows.size() != d.window_len) {
      fail(ErrorKind::Shape, trial_path.string() + ": trial shape differs from the first trial");
    }
    const std::size_t base = d.samples.size();
    d.samples.resize(base + d.trial_stride());
    for (std::size_t t = 0; t < d.window_len; ++t)
      for (std::size_t c = 0; c < d.channels; ++c) d.samples[base + c * d.window_len + t] = trial.rows[t][c];
    try {
      d.labels.push_back(std::stoi(cells[1]));
      d.subjects.push_back(std::stoi(cells[2]));
    } catch (const std::exception&) {
      fail(ErrorKind::Format, manifest.string() + ": non-integer label or subject in '" + line + "'");
    }
  }
  if (d.empty()) fail(ErrorKind::Format, manifest.string() + ": no trials listed");
  return d;
}

}  // namespace distnet
