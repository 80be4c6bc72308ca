#pragma once

// MiniInvaders: a small deterministic Space-Invaders-like arcade game with
// pixel observations. Every state is a value; stepping returns a new value.

#include <cstdint>
#include <span>
#include <vector>

#include "cfstates/types.hpp"

namespace cfstates::env {

struct EnvConfig {
    int grid_cols = 12;
    int grid_rows = 14;
    int height = 64;
    int width = 64;
    int cell_w = 5;
    int cell_h = 4;
    int lives = 3;
    int enemy_rows = 3;
    int enemy_cols = 5;
    int enemy_row_spacing = 1;
    double enemy_fire_prob = 0.05;  // per tick
    int formation_period = 4;       // ticks between formation moves
    int player_move_period = 2;     // ticks between player moves
    int enemy_shot_period = 1;      // ticks between enemy shot moves
    int player_shot_period = 1;     // ticks between player shot moves
    int invasion_row = 12;          // formation reaching this row ends the game
    int barrier_row = 11;
    int max_ticks = 4000;           // truncation guard
    int frame_skip = 4;
};

struct Cell {
    int col = 0;
    int row = 0;
    bool operator==(const Cell&) const = default;
};

struct Enemy {
    int col = 0;
    int row = 0;
    bool alive = true;
    bool operator==(const Enemy&) const = default;
};

struct Barrier {
    int col = 0;
    int row = 0;
    int hp = 3;
    bool operator==(const Barrier&) const = default;
};

struct GameState {
    int player_x = 0;
    std::vector<Enemy> enemies;
    int enemy_dir = 1;
    std::vector<Cell> player_shots;
    std::vector<Cell> enemy_shots;
    std::vector<Barrier> barriers;
    int lives = 0;
    std::int64_t tick = 0;
    std::uint64_t rng_state = 0;
    int score = 0;  // cumulative reward

    int enemies_alive() const;
    bool terminal(const EnvConfig& cfg) const;
    bool operator==(const GameState&) const = default;
};

/// One RGB frame, row-major H x W x 3, values in [0,1].
struct Frame {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Frame() = default;
    Frame(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0F) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    bool operator==(const Frame&) const = default;
};

/// Channel-major 12 x H x W stack of the four most recent frames, oldest first.
struct Observation {
    int height = 0;
    int width = 0;
    std::vector<float> channels;

    Observation() = default;
    Observation(int h, int w)
        : height(h), width(w), channels(static_cast<std::size_t>(kObservationChannels) * h * w, 0.0F) {}

    std::size_t size() const { return channels.size(); }
    float at(int c, int y, int x) const {
        return channels[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    /// The newest frame of the stack.
    Frame current_frame() const;
    bool operator==(const Observation&) const = default;
};

/// Game state plus the frame history needed to emit stacked observations.
struct EnvState {
    GameState game;
    std::vector<Frame> history;  // exactly 4, oldest first
    bool operator==(const EnvState&) const = default;
};

struct ResetResult {
    EnvState state;
    Observation observation;
};

struct StepResult {
    EnvState state;
    Observation observation;
    float reward = 0.0F;
    bool done = false;
};

ResetResult reset(std::uint64_t seed, const EnvConfig& cfg = {});

/// Applies `action` for `frame_skip` ticks (fewer if the episode ends).
/// Throws Error("episode finished") when called on a terminal state.
StepResult step(const EnvState& state, Action action, int frame_skip, const EnvConfig& cfg = {});

Frame render(const GameState& state, const EnvConfig& cfg = {});

Observation stack(std::span<const Frame> frames);

/// Advance the game by a single tick; returns the reward earned in the tick.
float tick(GameState& state, Action action, const EnvConfig& cfg);

}  // namespace cfstates::env
