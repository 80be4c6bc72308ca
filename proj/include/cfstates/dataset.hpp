#pragma once

// In-memory forms of the rollout dataset and of recorded replays. Pixels are
// kept as 8-bit levels; the renderer only emits values that are exact levels.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "cfstates/env.hpp"
#include "cfstates/types.hpp"

namespace cfstates {

using PolicyVector = std::array<float, kNumActions>;

std::uint8_t quantize(float v);
inline float dequantize(std::uint8_t q) { return static_cast<float>(q) / 255.0F; }

std::vector<std::uint8_t> quantize(std::span<const float> values);

struct DatasetRecord {
    std::vector<std::uint8_t> observation;  // C x H x W levels
    PolicyVector pi{};
    std::uint8_t action = 0;
    std::uint32_t episode = 0;
    std::uint32_t step = 0;
};

struct RolloutDataset {
    int height = 64;
    int width = 64;
    int channels = kObservationChannels;
    std::vector<DatasetRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    std::size_t observation_size() const { return static_cast<std::size_t>(channels) * height * width; }

    /// Dequantized observations [N, C, H, W] for the given record indices.
    torch::Tensor observations(std::span<const std::int64_t> indices) const;
    /// Stored policy vectors [N, |A|].
    torch::Tensor policies(std::span<const std::int64_t> indices) const;
    /// Executed actions [N] (int64).
    torch::Tensor actions(std::span<const std::int64_t> indices) const;
    env::Observation observation(std::size_t i) const;
};

/// A greedy episode captured for the replay explorer. All per-step arrays have
/// the same length; frames[t] is the newest frame of the observation at t.
struct Replay {
    std::uint64_t seed = 0;
    int height = 64;
    int width = 64;
    std::vector<std::vector<std::uint8_t>> frames;  // H x W x 3 levels
    std::vector<std::uint8_t> actions;
    std::vector<PolicyVector> policies;
    std::vector<float> entropies;
    int score = 0;

    std::size_t length() const { return actions.size(); }
    env::Frame frame(std::size_t t) const;
    /// The stacked observation at step t, rebuilt from frames t-3..t (clamped at 0).
    env::Observation observation(std::size_t t) const;
    void validate() const;
};

}  // namespace cfstates
