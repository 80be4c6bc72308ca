#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cfstates {

inline constexpr int kNumActions = 6;
inline constexpr int kFramesPerObservation = 4;
inline constexpr int kChannelsPerFrame = 3;
inline constexpr int kObservationChannels = kFramesPerObservation * kChannelsPerFrame;
inline constexpr int kAgentLatentDim = 256;
inline constexpr int kEncodedDim = 16;
inline constexpr int kWassersteinDim = 128;

enum class Action : std::uint8_t { NoOp = 0, Left, Right, Fire, LeftFire, RightFire };

inline constexpr std::array<std::string_view, kNumActions> kActionNames = {
    "NoOp", "Left", "Right", "Fire", "LeftFire", "RightFire"};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline int action_id(Action a) { return static_cast<int>(a); }

inline Action action_from_id(int id) {
    if (id < 0 || id >= kNumActions) {
        throw Error("invalid action id " + std::to_string(id));
    }
    return static_cast<Action>(id);
}

inline std::string_view action_name(Action a) { return kActionNames[static_cast<std::size_t>(a)]; }

/// Accepts a numeric id or a case-insensitive action name.
inline Action parse_action(std::string_view text) {
    for (int i = 0; i < kNumActions; ++i) {
        const auto name = kActionNames[static_cast<std::size_t>(i)];
        if (name.size() == text.size() &&
            std::equal(name.begin(), name.end(), text.begin(), [](char a, char b) {
                return std::tolower(static_cast<unsigned char>(a)) == std::tolower(static_cast<unsigned char>(b));
            })) {
            return static_cast<Action>(i);
        }
    }
    if (!text.empty() && std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; }) &&
        text.size() < 4) {
        return action_from_id(std::stoi(std::string(text)));
    }
    throw Error("unknown action '" + std::string(text) + "'");
}

inline bool action_moves_left(Action a) { return a == Action::Left || a == Action::LeftFire; }
inline bool action_moves_right(Action a) { return a == Action::Right || a == Action::RightFire; }
inline bool action_fires(Action a) {
    return a == Action::Fire || a == Action::LeftFire || a == Action::RightFire;
}

}  // namespace cfstates
