#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "distnet/dataset.hpp"
#include "distnet/msfbcnn.hpp"
#include "distnet/training.hpp"

namespace distnet {

/// Electrode positions in centimeters.
struct ElectrodeLayout {
  std::vector<std::array<double, 3>> positions;
  std::vector<std::string> labels;

  std::size_t size() const { return positions.size(); }
  void validate() const;
  double distance(std::size_t i, std::size_t j) const;

  /// rows x cols grid in the z = 0 plane, labelled r<row>c<col>.
  static ElectrodeLayout grid(std::size_t rows, std::size_t cols, double spacing_cm);
};

/// CSV with header `label,x,y,z`.
void save_layout(const ElectrodeLayout& layout, const std::filesystem::path& path);
ElectrodeLayout load_layout(const std::filesystem::path& path);

struct CandidateNode {
  std::size_t i = 0;
  std::size_t j = 0;
  double distance_cm = 0.0;
};

/// All pairs i < j within the threshold, sorted by (i, j).
std::vector<CandidateNode> enumerate_candidate_nodes(const ElectrodeLayout& layout,
                                                     double threshold_cm = 3.0);

/// Node k carries electrode i_k minus electrode j_k.
EpochedDataset emulate_node_signals(const EpochedDataset& cap, const std::vector<CandidateNode>& nodes);

struct SyntheticConfig {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  double spacing_cm = 2.0;
  std::size_t num_classes = 4;
  std::size_t trials_per_class = 50;
  std::size_t window_len = 150;
  double sample_rate = 250.0;
  double snr_db = 0.0;           // class source power vs white noise power, per electrode on average
  double background_gain = 0.3;  // amplitude of the non-class sources
  double reference_gain = 5.0;   // amplitude of the shared reference drift
  double source_depth_cm = 1.0;
  std::size_t subjects = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticSource {
  std::array<double, 3> position;
  double frequency_hz;
};

struct SyntheticData {
  ElectrodeLayout layout;
  std::vector<SyntheticSource> sources;  // one per class
  EpochedDataset cap;                    // channels = electrodes
};

/// Each class drives its own oscillating source; every source is mixed onto
/// the electrodes with inverse-distance gains. Trials come out shuffled with
/// balanced labels and are fully determined by the seed.
SyntheticData generate_synthetic(const SyntheticConfig& config);

struct AnnealSchedule {
  double t_start = 2.0;
  double t_end = 0.1;

  /// Geometric interpolation; epoch in [0, epochs).
  double at(std::size_t epoch, std::size_t epochs) const;
};

struct SelectionConfig {
  AnnealSchedule anneal;
  float logit_lr = 0.05f;
  float network_lr = 1e-3f;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  /// Leading share of the epochs that feed the soft Gumbel-softmax mixture
  /// forward; the rest use straight-through hard samples.
  double relaxed_fraction = 0.5;
  std::uint64_t seed = 0;
};

struct SelectionResult {
  std::vector<std::size_t> nodes;
  std::vector<double> temperatures;          // one per epoch
  std::vector<double> train_losses;          // mean per epoch
  std::vector<std::vector<double>> weights;  // softmax(logits / t_end), one row per selected slot
};

/// Trains M Gumbel-softmax selection rows jointly with a classifier over the
/// selected channels (one draw per trial; relaxed, then straight-through hard
/// samples), then takes each row's argmax. A duplicate falls back to that row's best unused candidate.
SelectionResult gumbel_select_nodes(const EpochedDataset& candidates, const MsfbcnnConfig& classifier,
                                    std::size_t M, const SelectionConfig& config);

}  // namespace distnet

namespace distnet {

/// For synthetic data only: one candidate per source (sources 0..M-1, then
/// wrapping), maximizing the gain difference across the pair. Used when the
/// generating geometry is known and a learned selection is not wanted.
std::vector<CandidateNode> pick_nodes_for_sources(const SyntheticData& data,
                                                  const std::vector<CandidateNode>& candidates,
                                                  std::size_t M, double source_depth_cm);

}  // namespace distnet
