#include "cfstates/env.hpp"

#include <algorithm>

namespace cfstates::env {
namespace {

// splitmix64; keeps the generator state a plain value inside GameState.
std::uint64_t next_u64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double next_unit(std::uint64_t& s) { return static_cast<double>(next_u64(s) >> 11) * 0x1.0p-53; }

int next_below(std::uint64_t& s, int n) { return static_cast<int>(next_u64(s) % static_cast<std::uint64_t>(n)); }

// Colors are 8-bit levels so every rendered value survives 8-bit storage exactly.
struct Rgb {
    int r, g, b;
};

constexpr Rgb kPlayerColor{0, 255, 0};
constexpr Rgb kEnemyColor{255, 255, 255};
constexpr Rgb kShotColor{255, 255, 0};
constexpr Rgb kBarrierColor{255, 141, 0};  // scaled by hp/3, stays integral

void fill(Frame& f, int x0, int y0, int w, int h, Rgb c, int num = 1, int den = 1) {
    const float r = static_cast<float>(c.r * num / den) / 255.0F;
    const float g = static_cast<float>(c.g * num / den) / 255.0F;
    const float b = static_cast<float>(c.b * num / den) / 255.0F;
    for (int y = std::max(0, y0); y < std::min(f.height, y0 + h); ++y) {
        for (int x = std::max(0, x0); x < std::min(f.width, x0 + w); ++x) {
            f.at(y, x, 0) = r;
            f.at(y, x, 1) = g;
            f.at(y, x, 2) = b;
        }
    }
}

int player_row(const EnvConfig& cfg) { return cfg.grid_rows - 1; }

void lose_life(GameState& s, const EnvConfig& cfg) {
    s.lives = std::max(0, s.lives - 1);
    s.enemy_shots.clear();
    s.player_x = cfg.grid_cols / 2;
}

// Resolves player shots against barriers and enemies; returns kills.
int resolve_player_shots(GameState& s) {
    int kills = 0;
    std::erase_if(s.player_shots, [&](const Cell& shot) {
        for (auto& b : s.barriers) {
            if (b.hp > 0 && b.col == shot.col && b.row == shot.row) {
                --b.hp;
                return true;
            }
        }
        for (auto& e : s.enemies) {
            if (e.alive && e.col == shot.col && e.row == shot.row) {
                e.alive = false;
                ++kills;
                return true;
            }
        }
        return shot.row < 0;
    });
    return kills;
}

// Resolves enemy shots against barriers and the player; returns true on a hit.
bool resolve_enemy_shots(GameState& s, const EnvConfig& cfg) {
    bool hit = false;
    std::erase_if(s.enemy_shots, [&](const Cell& shot) {
        for (auto& b : s.barriers) {
            if (b.hp > 0 && b.col == shot.col && b.row == shot.row) {
                --b.hp;
                return true;
            }
        }
        if (shot.row == player_row(cfg) && shot.col == s.player_x) {
            hit = true;
            return true;
        }
        return shot.row >= cfg.grid_rows;
    });
    return hit;
}

void move_formation(GameState& s, const EnvConfig& cfg) {
    int min_col = cfg.grid_cols;
    int max_col = -1;
    int max_row = -1;
    for (const auto& e : s.enemies) {
        if (!e.alive) continue;
        min_col = std::min(min_col, e.col);
        max_col = std::max(max_col, e.col);
        max_row = std::max(max_row, e.row);
    }
    if (max_col < 0) return;
    const bool blocked = (s.enemy_dir > 0 && max_col + 1 >= cfg.grid_cols) || (s.enemy_dir < 0 && min_col - 1 < 0);
    if (blocked) {
        s.enemy_dir = -s.enemy_dir;
        for (auto& e : s.enemies) e.row += e.alive ? 1 : 0;
    } else {
        // Dead enemies stay put so they never leave the grid.
        for (auto& e : s.enemies) e.col += e.alive ? s.enemy_dir : 0;
    }
}

int formation_bottom(const GameState& s) {
    int row = -1;
    for (const auto& e : s.enemies) {
        if (e.alive) row = std::max(row, e.row);
    }
    return row;
}

void enemy_fire(GameState& s, const EnvConfig& cfg) {
    if (next_unit(s.rng_state) >= cfg.enemy_fire_prob) return;
    std::vector<int> columns;
    for (const auto& e : s.enemies) {
        if (e.alive && std::find(columns.begin(), columns.end(), e.col) == columns.end()) columns.push_back(e.col);
    }
    if (columns.empty()) return;
    std::sort(columns.begin(), columns.end());
    const int col = columns[static_cast<std::size_t>(next_below(s.rng_state, static_cast<int>(columns.size())))];
    int row = -1;
    for (const auto& e : s.enemies) {
        if (e.alive && e.col == col) row = std::max(row, e.row);
    }
    s.enemy_shots.push_back({col, row + 1});
}

}  // namespace

int GameState::enemies_alive() const {
    return static_cast<int>(std::count_if(enemies.begin(), enemies.end(), [](const Enemy& e) { return e.alive; }));
}

bool GameState::terminal(const EnvConfig& cfg) const {
    return lives <= 0 || enemies_alive() == 0 || tick >= cfg.max_ticks;
}

Frame Observation::current_frame() const {
    Frame f(height, width);
    const int base = kObservationChannels - kChannelsPerFrame;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < kChannelsPerFrame; ++c) f.at(y, x, c) = at(base + c, y, x);
        }
    }
    return f;
}

float tick(GameState& s, Action action, const EnvConfig& cfg) {
    float reward = 0.0F;

    if (s.tick % cfg.player_move_period == 0) {
        if (action_moves_left(action)) s.player_x = std::max(0, s.player_x - 1);
        if (action_moves_right(action)) s.player_x = std::min(cfg.grid_cols - 1, s.player_x + 1);
    }
    if (action_fires(action) && s.player_shots.empty()) {
        s.player_shots.push_back({s.player_x, player_row(cfg) - 1});
        reward += static_cast<float>(resolve_player_shots(s));
    }

    if (s.tick % cfg.player_shot_period == 0) {
        for (auto& shot : s.player_shots) --shot.row;
        reward += static_cast<float>(resolve_player_shots(s));
    }

    if (s.tick % cfg.enemy_shot_period == 0) {
        for (auto& shot : s.enemy_shots) ++shot.row;
    }
    if (resolve_enemy_shots(s, cfg)) {
        lose_life(s, cfg);
        reward -= 1.0F;
    }

    if (s.tick % cfg.formation_period == cfg.formation_period - 1) {
        move_formation(s, cfg);
        reward += static_cast<float>(resolve_player_shots(s));
        if (formation_bottom(s) >= cfg.invasion_row && s.lives > 0) {
            // an invasion costs every remaining life
            reward -= static_cast<float>(s.lives);
            s.lives = 0;
        }
    }

    enemy_fire(s, cfg);
    if (resolve_enemy_shots(s, cfg)) {
        lose_life(s, cfg);
        reward -= 1.0F;
    }

    ++s.tick;
    s.score += static_cast<int>(reward);
    return reward;
}

Frame render(const GameState& s, const EnvConfig& cfg) {
    Frame f(cfg.height, cfg.width);
    const int ox = (cfg.width - cfg.grid_cols * cfg.cell_w) / 2;
    const int oy = (cfg.height - cfg.grid_rows * cfg.cell_h) / 2;
    auto cx = [&](int col) { return ox + col * cfg.cell_w; };
    auto cy = [&](int row) { return oy + row * cfg.cell_h; };

    for (int i = 0; i < s.lives; ++i) fill(f, 1 + 4 * i, 1, 2, 2, kPlayerColor);
    for (const auto& b : s.barriers) {
        if (b.hp > 0) fill(f, cx(b.col), cy(b.row), cfg.cell_w, cfg.cell_h, kBarrierColor, b.hp, 3);
    }
    for (const auto& e : s.enemies) {
        if (!e.alive) continue;
        fill(f, cx(e.col) + 1, cy(e.row), 3, 3, kEnemyColor);
    }
    const int prow = player_row(cfg);
    fill(f, cx(s.player_x), cy(prow) + 1, cfg.cell_w, 3, kPlayerColor);
    fill(f, cx(s.player_x) + 2, cy(prow), 1, 1, kPlayerColor);
    for (const auto& shot : s.player_shots) fill(f, cx(shot.col) + 2, cy(shot.row), 1, 3, kShotColor);
    for (const auto& shot : s.enemy_shots) fill(f, cx(shot.col) + 2, cy(shot.row) + 1, 1, 3, kShotColor);
    return f;
}

Observation stack(std::span<const Frame> frames) {
    if (frames.size() != static_cast<std::size_t>(kFramesPerObservation)) {
        throw Error("stack requires exactly 4 frames, got " + std::to_string(frames.size()));
    }
    const int h = frames[0].height;
    const int w = frames[0].width;
    for (const auto& f : frames) {
        if (f.height != h || f.width != w || f.pixels.size() != static_cast<std::size_t>(h) * w * 3) {
            throw Error("stack: mismatched frame shapes");
        }
    }
    Observation obs(h, w);
    for (int k = 0; k < kFramesPerObservation; ++k) {
        const auto& f = frames[static_cast<std::size_t>(k)];
        for (int c = 0; c < kChannelsPerFrame; ++c) {
            float* dst = obs.channels.data() + static_cast<std::size_t>(k * kChannelsPerFrame + c) * h * w;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) dst[y * w + x] = f.at(y, x, c);
            }
        }
    }
    return obs;
}

ResetResult reset(std::uint64_t seed, const EnvConfig& cfg) {
    GameState s;
    s.rng_state = seed;
    next_u64(s.rng_state);
    const int span = (cfg.enemy_cols - 1) * 2 + 1;
    const int col_offset = next_below(s.rng_state, cfg.grid_cols - span + 1);
    const int row_offset = 1 + next_below(s.rng_state, 2);
    s.enemy_dir = next_below(s.rng_state, 2) == 0 ? -1 : 1;
    for (int r = 0; r < cfg.enemy_rows; ++r) {
        for (int c = 0; c < cfg.enemy_cols; ++c) s.enemies.push_back({col_offset + 2 * c, row_offset + cfg.enemy_row_spacing * r, true});
    }
    for (int col : {2, 6, 9}) {
        if (col < cfg.grid_cols) s.barriers.push_back({col, cfg.barrier_row, 3});
    }
    s.player_x = cfg.grid_cols / 2;
    s.lives = cfg.lives;

    const Frame first = render(s, cfg);
    EnvState state{std::move(s), std::vector<Frame>(kFramesPerObservation, first)};
    Observation obs = stack(state.history);
    return {std::move(state), std::move(obs)};
}

StepResult step(const EnvState& state, Action action, int frame_skip, const EnvConfig& cfg) {
    if (state.game.terminal(cfg)) throw Error("episode finished");
    if (frame_skip < 1) throw Error("frame_skip must be >= 1");
    StepResult out{state, {}, 0.0F, false};
    for (int i = 0; i < frame_skip && !out.state.game.terminal(cfg); ++i) {
        out.reward += tick(out.state.game, action, cfg);
    }
    auto& hist = out.state.history;
    hist.erase(hist.begin());
    hist.push_back(render(out.state.game, cfg));
    out.observation = stack(hist);
    out.done = out.state.game.terminal(cfg);
    return out;
}

}  // namespace cfstates::env
