#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "distnet/tensor.hpp"

namespace distnet {

/// Labeled windows X[N, C, L] with class labels and subject tags.
struct EpochedDataset {
  std::size_t channels = 0;
  std::size_t window_len = 0;
  float sample_rate = 250.0f;
  std::vector<float> samples;  // row-major [N, C, L]
  std::vector<int> labels;
  std::vector<int> subjects;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t trial_stride() const { return channels * window_len; }

  std::span<const float> trial(std::size_t i) const {
    return std::span<const float>(samples).subspan(i * trial_stride(), trial_stride());
  }

  /// [indices.size(), C, L, 1]
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  EpochedDataset subset(std::span<const std::size_t> indices) const;
  EpochedDataset select_channels(std::span<const std::size_t> channel_indices) const;
  EpochedDataset subject(int tag) const;
  /// Every trial as a single tensor [N, C, L, 1].
  Tensor all() const;

  /// Raises ErrorKind::Shape / Config when sizes or labels are inconsistent.
  void validate(std::size_t num_classes) const;
};

inline constexpr char kDatasetMagic[4] = {'B', 'N', 'D', 'S'};
inline constexpr std::uint16_t kDatasetVersion = 1;

/// Binary container: magic "BNDS", u16 version, u32 N, C, L, f32 rate,
/// u16 labels[N], u16 subjects[N], f32 payload[N*C*L]; all little-endian.
void save_dataset(const EpochedDataset& dataset, const std::filesystem::path& path);
EpochedDataset load_dataset(const std::filesystem::path& path);

/// CSV ingestion. The manifest lists `path,label,subject` (header row
/// required; relative paths resolve against the manifest's directory). Each
/// trial file has a header `t,ch0,ch1,...` and one row per sample; the sample
/// rate is taken from the spacing of the `t` column.
EpochedDataset load_csv_manifest(const std::filesystem::path& manifest);

}  // namespace distnet
