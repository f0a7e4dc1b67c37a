#pragma once

#include <filesystem>
#include <istream>
#include <string>
#include <vector>

#include "distnet/sensor.hpp"
#include "distnet/training.hpp"

namespace distnet {

/// Everything one experiment needs. The text form is one `key = value` per
/// line; `#` starts a comment. Keys are the field names below, with
/// `synthetic.` and `train.` prefixes for the nested settings, e.g.
///
///   data = synthetic
///   nodes = 3
///   compression = 4
///   seeds = 1, 2, 3
///   train.max_epochs = 30
///   synthetic.snr_db = -5
struct RunConfig {
  std::string data = "synthetic";  // "synthetic" or a BNDS path of node signals
  std::string test_data;           // optional BNDS path; otherwise a split of `data`
  double test_fraction = 0.25;     // last fraction of trials held out when test_data is empty
  SyntheticConfig synthetic;
  std::size_t nodes = 3;
  std::int64_t compression = 4;
  std::size_t temporal_filters = 10;
  std::size_t spatial_filters = 10;
  std::size_t fusion_hidden = 50;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  double sweep_step = 0.01;
  bool ae_pretrain = false;
  bool from_scratch = false;
  int subject_finetune = -1;
  std::size_t workers = 1;
  std::string output = "runs";

  /// Raises ErrorKind::Config (bad values) or ErrorKind::Io (missing files).
  void validate() const;
};

/// Applies one setting; unknown keys and unparsable values raise ErrorKind::Config.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical text form; parse_run_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

}  // namespace distnet
