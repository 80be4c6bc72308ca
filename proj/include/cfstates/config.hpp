#pragma once

// JSON (de)serialization for every tunable config, and strict overrides.

#include <nlohmann/json.hpp>

#include "cfstates/agent.hpp"
#include "cfstates/baselines.hpp"
#include "cfstates/counterfactual.hpp"
#include "cfstates/env.hpp"
#include "cfstates/training.hpp"
#include "cfstates/types.hpp"

namespace cfstates::env {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EnvConfig, grid_cols, grid_rows, height, width, cell_w, cell_h, lives, enemy_rows,
                                   enemy_cols, enemy_row_spacing, enemy_fire_prob, formation_period,
                                   player_move_period, enemy_shot_period, player_shot_period, invasion_row,
                                   barrier_row, max_ticks, frame_skip)
}

namespace cfstates::agent {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AgentTrainConfig, learning_rate, gamma, gae_lambda, entropy_coef, value_coef,
                                   max_grad_norm, rollout_length, num_envs, total_steps, seed)
}

namespace cfstates::training {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GenTrainConfig, lambda, learning_rate, beta1, beta2, wae_learning_rate, batch_size,
                                   epochs, mmd_scale, seed, wae_separate, wae_epochs, discriminator_kl, holdout_every,
                                   checkpoint_every, eval_records, probe_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ProbeConfig, hidden, epochs, batch_size, learning_rate, train_fraction, max_records,
                                   seed)
}

namespace cfstates::counterfactual {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CfConfig, step_size, max_steps, renormalize, low_entropy_key_frames)
}

namespace cfstates::baselines {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AblationTrainConfig, epochs, batch_size, learning_rate, beta1, beta2, lambda, seed,
                                   holdout_every)
}

namespace cfstates {

/// Applies the keys of `overrides` on top of `cfg`. Unknown keys and type
/// mismatches throw Error naming the key.
template <typename T>
void apply_overrides(T& cfg, const nlohmann::json& overrides) {
    if (overrides.is_null()) return;
    if (!overrides.is_object()) throw Error("config overrides must be a JSON object");
    nlohmann::json merged = cfg;
    for (const auto& [key, value] : overrides.items()) {
        if (!merged.contains(key)) throw Error("unknown config key: " + key);
        if (merged[key].type() != value.type() && !(merged[key].is_number() && value.is_number())) {
            throw Error("config key '" + key + "' has the wrong type");
        }
        merged[key] = value;
    }
    try {
        cfg = merged.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("invalid config: ") + e.what());
    }
}

}  // namespace cfstates
