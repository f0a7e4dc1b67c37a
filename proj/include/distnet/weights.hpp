#pragma once

#include <filesystem>

#include "distnet/distributed.hpp"

namespace distnet {

inline constexpr char kWeightsMagic[4] = {'B', 'N', 'W', 'T'};
inline constexpr std::uint16_t kWeightsVersion = 1;

/// Binary container: magic "BNWT", u16 version, the architecture as u32
/// fields (M, L, F_T, F_S, N_C, D, s1, s2, k1, k2, hidden) plus f32 dropout,
/// u32 tensor count, then per tensor: u16 name length, name, u8 kind
/// (0 parameter, 1 buffer), u32 rank, u32 dims, f32 values.
void save_weights(const DistributedModel& model, const std::filesystem::path& path);

/// Builds a model with the stored architecture and loads every tensor.
DistributedModel load_weights(const std::filesystem::path& path);

/// Loads into an existing model. Raises ErrorKind::Shape naming every tensor
/// that is missing, unknown or of the wrong shape.
void load_weights_into(DistributedModel& model, const std::filesystem::path& path);

/// Checkpoint file name for a pipeline stage: stage{1..4}.bnw.
std::string stage_checkpoint_name(int stage);

}  // namespace distnet
