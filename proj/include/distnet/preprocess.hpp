#pragma once

#include <array>
#include <span>
#include <vector>

#include "distnet/dataset.hpp"

namespace distnet {

/// Polyphase rational resampling by up/down with a Kaiser-windowed (beta 5)
/// low-pass FIR. Output length is ceil(n * up / down).
std::vector<float> resample_poly(std::span<const float> x, std::size_t up, std::size_t down);

/// Transposed direct-form II second-order section, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

/// 4th-order Butterworth high-pass as two cascaded sections.
std::array<Biquad, 2> butterworth_highpass4(double cutoff_hz, double sample_rate);

/// Forward-backward filtering with odd-reflection padding at both ends.
std::vector<float> filtfilt(std::span<const Biquad> sections, std::span<const float> x);

/// Zero mean, unit (population) variance for every channel of every trial.
/// Constant channels become all zeros.
void standardize_epochs(EpochedDataset& dataset);

struct Cue {
  std::size_t sample = 0;  // at the recording's rate
  int label = 0;
  int subject = 0;
};

/// Continuous multi-channel signal, channel-major [C, T].
struct Recording {
  std::size_t channels = 0;
  double sample_rate = 0.0;
  std::vector<float> samples;
  std::vector<Cue> cues;

  std::size_t length() const { return channels ? samples.size() / channels : 0; }
};

struct PreprocessConfig {
  double target_rate = 250.0;
  double highpass_hz = 4.0;
  double before_cue_s = 0.5;
  double after_cue_s = 4.0;
  bool standardize = true;
};

struct PreprocessResult {
  EpochedDataset dataset;
  std::size_t skipped = 0;  // cues whose window ran past either end of the recording
};

/// Resample, zero-phase high-pass, cut windows around each cue, standardize.
PreprocessResult preprocess(const Recording& recording, const PreprocessConfig& config = {});

}  // namespace distnet
