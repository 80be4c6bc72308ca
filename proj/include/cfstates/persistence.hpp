#pragma once

// Binary file formats (little-endian, versioned, trailing CRC32) for
// checkpoints, rollout datasets and replays, plus PNG export. Byte layouts
// are documented in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "cfstates/dataset.hpp"
#include "cfstates/env.hpp"

namespace cfstates::persistence {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kReplayVersion = 1;

using TensorTable = std::vector<std::pair<std::string, torch::Tensor>>;

std::vector<std::uint8_t> encode_checkpoint(const TensorTable& tensors);
TensorTable decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const TensorTable& tensors);
TensorTable load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of `module`, names prefixed with `prefix`.
TensorTable module_state(const torch::nn::Module& module, const std::string& prefix = "");
/// Copies matching entries into `module`; every parameter and buffer must be present.
void load_module_state(torch::nn::Module& module, const TensorTable& table, const std::string& prefix = "");
const torch::Tensor& find_tensor(const TensorTable& table, const std::string& name);

void write_dataset(const std::filesystem::path& path, const RolloutDataset& data);
RolloutDataset read_dataset(const std::filesystem::path& path);

void write_replay(const std::filesystem::path& path, const Replay& replay);
Replay read_replay(const std::filesystem::path& path);

/// 8-bit RGB PNG, value = round(255 v).
std::vector<std::uint8_t> export_png(const env::Frame& frame);
void write_png(const std::filesystem::path& path, const env::Frame& frame);

/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0);

}  // namespace cfstates::persistence
