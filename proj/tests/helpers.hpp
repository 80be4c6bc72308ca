#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "cfstates/dataset.hpp"

namespace testing_support {

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("cfstates_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline cfstates::PolicyVector random_policy(std::mt19937_64& rng) {
    std::gamma_distribution<float> g(1.0F, 1.0F);
    cfstates::PolicyVector pi{};
    float sum = 0.0F;
    for (auto& p : pi) sum += (p = g(rng) + 1e-3F);
    for (auto& p : pi) p /= sum;
    return pi;
}

/// Random records; `episodes` episode ids cycle through the records.
inline cfstates::RolloutDataset random_dataset(std::size_t n, int height, int width, std::uint64_t seed,
                                               std::uint32_t episodes = 10) {
    std::mt19937_64 rng(seed);
    cfstates::RolloutDataset data;
    data.height = height;
    data.width = width;
    for (std::size_t i = 0; i < n; ++i) {
        cfstates::DatasetRecord r;
        r.observation.resize(data.observation_size());
        for (auto& b : r.observation) b = static_cast<std::uint8_t>(rng() & 0xFF);
        r.pi = random_policy(rng);
        r.action = static_cast<std::uint8_t>(rng() % cfstates::kNumActions);
        r.episode = static_cast<std::uint32_t>(i % episodes);
        r.step = static_cast<std::uint32_t>(i / episodes);
        data.records.push_back(std::move(r));
    }
    return data;
}

}  // namespace testing_support
