#pragma once

// The pixel-input actor-critic agent, split as z = A(s) and pi(z), plus the
// synchronous advantage actor-critic trainer and rollout utilities.

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "cfstates/dataset.hpp"
#include "cfstates/env.hpp"
#include "cfstates/types.hpp"

namespace cfstates::agent {

class AgentNetImpl : public torch::nn::Module {
public:
    explicit AgentNetImpl(int height = 64, int width = 64);

    /// A(s): [N, 12, H, W] -> [N, 256].
    torch::Tensor latent(const torch::Tensor& obs);
    torch::Tensor policy_logits(const torch::Tensor& z);
    /// pi(z): softmax over the policy head.
    torch::Tensor policy(const torch::Tensor& z);
    torch::Tensor value_from_latent(const torch::Tensor& z);

    struct Output {
        torch::Tensor logits;
        torch::Tensor value;
    };
    /// Single undecomposed pass.
    Output forward(const torch::Tensor& obs);

    int height() const { return height_; }
    int width() const { return width_; }

private:
    int height_;
    int width_;
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr}, conv4_{nullptr};
    torch::nn::Linear fc_{nullptr}, policy_head_{nullptr}, value_head_{nullptr};
};
TORCH_MODULE(AgentNet);

torch::Tensor observation_tensor(const env::Observation& obs);

/// z = A(s) for a single observation, shape [256].
torch::Tensor a_of_s(AgentNet& net, const env::Observation& obs);
/// pi(z) for a single latent.
PolicyVector pi_of_z(AgentNet& net, const torch::Tensor& z);
float value_of(AgentNet& net, const env::Observation& obs);

struct AgentTrainConfig {
    double learning_rate = 1e-4;
    double gamma = 0.99;
    double gae_lambda = 1.0;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double max_grad_norm = 40.0;
    int rollout_length = 5;
    int num_envs = 8;
    std::int64_t total_steps = 300000;
    std::uint64_t seed = 1;

    void validate() const;
};

struct AdvantageEstimate {
    torch::Tensor advantages;  // [T, E]
    torch::Tensor returns;     // [T, E]
};

/// Generalized advantage estimation over a [T, E] rollout. `values` is
/// [T+1, E] (bootstrap row last); dones[t] cuts the recursion after step t.
AdvantageEstimate compute_gae(const torch::Tensor& rewards, const torch::Tensor& values, const torch::Tensor& dones,
                              double gamma, double lambda);

struct ActorCriticLoss {
    torch::Tensor total;
    torch::Tensor policy;
    torch::Tensor value;
    torch::Tensor entropy;
};

ActorCriticLoss actor_critic_loss(const torch::Tensor& logits, const torch::Tensor& values,
                                  const torch::Tensor& actions, const torch::Tensor& advantages,
                                  const torch::Tensor& returns, double entropy_coef, double value_coef);

struct TrainProgress {
    std::int64_t steps = 0;
    int episodes = 0;
    double recent_mean_score = 0.0;
    double loss = 0.0;
};

AgentNet train_agent(const env::EnvConfig& env_cfg, const AgentTrainConfig& cfg,
                     const std::function<void(const TrainProgress&)>& on_progress = {});

using PolicyFn = std::function<int(const env::Observation&)>;

PolicyFn greedy_policy(AgentNet& net);
PolicyFn uniform_random_policy(std::uint64_t seed);

struct ScoreStats {
    std::vector<double> scores;
    double mean = 0.0;
    double stddev = 0.0;
};

ScoreStats summarize(std::vector<double> scores);

/// Runs `episodes` episodes with seeds seed_base, seed_base+1, ...
ScoreStats evaluate_policy(const env::EnvConfig& env_cfg, const PolicyFn& policy, int episodes,
                           std::uint64_t seed_base);

/// epsilon-greedy rollouts; stores (s, pi(A(s)), executed action, episode, t).
RolloutDataset collect_dataset(AgentNet& net, const env::EnvConfig& env_cfg, double epsilon, std::size_t count,
                               std::uint64_t seed);

Replay record_replay(AgentNet& net, const env::EnvConfig& env_cfg, std::uint64_t seed);

}  // namespace cfstates::agent
