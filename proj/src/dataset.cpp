#include "cfstates/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace cfstates {

std::uint8_t quantize(float v) {
    const float clamped = std::clamp(v, 0.0F, 1.0F);
    return static_cast<std::uint8_t>(std::lround(clamped * 255.0F));
}

std::vector<std::uint8_t> quantize(std::span<const float> values) {
    std::vector<std::uint8_t> out(values.size());
    std::transform(values.begin(), values.end(), out.begin(), [](float v) { return quantize(v); });
    return out;
}

torch::Tensor RolloutDataset::observations(std::span<const std::int64_t> indices) const {
    const auto n = static_cast<std::int64_t>(indices.size());
    auto bytes = torch::empty({n, channels, height, width}, torch::kUInt8);
    auto* dst = bytes.data_ptr<std::uint8_t>();
    const std::size_t len = observation_size();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& rec = records.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]));
        std::copy(rec.observation.begin(), rec.observation.end(), dst + static_cast<std::size_t>(i) * len);
    }
    return bytes.to(torch::kFloat32).div_(255.0);
}

torch::Tensor RolloutDataset::policies(std::span<const std::int64_t> indices) const {
    auto out = torch::empty({static_cast<std::int64_t>(indices.size()), kNumActions});
    auto acc = out.accessor<float, 2>();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& pi = records.at(static_cast<std::size_t>(indices[i])).pi;
        for (int a = 0; a < kNumActions; ++a) acc[static_cast<std::int64_t>(i)][a] = pi[static_cast<std::size_t>(a)];
    }
    return out;
}

torch::Tensor RolloutDataset::actions(std::span<const std::int64_t> indices) const {
    auto out = torch::empty({static_cast<std::int64_t>(indices.size())}, torch::kInt64);
    auto acc = out.accessor<std::int64_t, 1>();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        acc[static_cast<std::int64_t>(i)] = records.at(static_cast<std::size_t>(indices[i])).action;
    }
    return out;
}

env::Observation RolloutDataset::observation(std::size_t i) const {
    env::Observation obs(height, width);
    const auto& rec = records.at(i);
    std::transform(rec.observation.begin(), rec.observation.end(), obs.channels.begin(), dequantize);
    return obs;
}

env::Frame Replay::frame(std::size_t t) const {
    env::Frame f(height, width);
    const auto& src = frames.at(t);
    std::transform(src.begin(), src.end(), f.pixels.begin(), dequantize);
    return f;
}

env::Observation Replay::observation(std::size_t t) const {
    if (t >= frames.size()) throw Error("replay index out of range");
    std::vector<env::Frame> window;
    for (int k = kFramesPerObservation - 1; k >= 0; --k) {
        const auto idx = t >= static_cast<std::size_t>(k) ? t - static_cast<std::size_t>(k) : 0;
        window.push_back(frame(idx));
    }
    return env::stack(window);
}

void Replay::validate() const {
    const auto n = actions.size();
    if (frames.size() != n || policies.size() != n || entropies.size() != n) {
        throw Error("replay arrays have unequal lengths");
    }
    const auto frame_len = static_cast<std::size_t>(height) * width * 3;
    for (const auto& f : frames) {
        if (f.size() != frame_len) throw Error("replay frame has wrong size");
    }
}

}  // namespace cfstates
