#include "cfstates/agent.hpp"

#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <sstream>

#include "cfstates/distribution.hpp"

namespace cfstates::agent {
namespace {

torch::nn::Conv2dOptions conv_opts(int in) { return torch::nn::Conv2dOptions(in, 32, 3).stride(2).padding(1); }

int downsampled(int size, int times) {
    for (int i = 0; i < times; ++i) size = (size + 2 - 3) / 2 + 1;
    return size;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

PolicyVector to_policy_vector(const torch::Tensor& p) {
    auto flat = p.reshape({-1}).to(torch::kFloat32).contiguous();
    PolicyVector out{};
    std::copy(flat.data_ptr<float>(), flat.data_ptr<float>() + kNumActions, out.begin());
    return out;
}

}  // namespace

AgentNetImpl::AgentNetImpl(int height, int width) : height_(height), width_(width) {
    conv1_ = register_module("conv1", torch::nn::Conv2d(conv_opts(kObservationChannels)));
    conv2_ = register_module("conv2", torch::nn::Conv2d(conv_opts(32)));
    conv3_ = register_module("conv3", torch::nn::Conv2d(conv_opts(32)));
    conv4_ = register_module("conv4", torch::nn::Conv2d(conv_opts(32)));
    const int flat = 32 * downsampled(height, 4) * downsampled(width, 4);
    fc_ = register_module("fc", torch::nn::Linear(flat, kAgentLatentDim));
    policy_head_ = register_module("policy", torch::nn::Linear(kAgentLatentDim, kNumActions));
    value_head_ = register_module("value", torch::nn::Linear(kAgentLatentDim, 1));
}

torch::Tensor AgentNetImpl::latent(const torch::Tensor& obs) {
    if (obs.dim() != 4 || obs.size(1) != kObservationChannels || obs.size(2) != height_ || obs.size(3) != width_) {
        std::ostringstream msg;
        msg << "agent input shape mismatch: got " << obs.sizes() << ", expected [N, " << kObservationChannels << ", "
            << height_ << ", " << width_ << "]";
        throw Error(msg.str());
    }
    auto x = torch::relu(conv1_->forward(obs));
    x = torch::relu(conv2_->forward(x));
    x = torch::relu(conv3_->forward(x));
    x = torch::relu(conv4_->forward(x));
    return torch::relu(fc_->forward(x.flatten(1)));
}

torch::Tensor AgentNetImpl::policy_logits(const torch::Tensor& z) {
    if (z.size(-1) != kAgentLatentDim) throw Error("agent latent must be 256-dimensional");
    return policy_head_->forward(z);
}

torch::Tensor AgentNetImpl::policy(const torch::Tensor& z) { return torch::softmax(policy_logits(z), -1); }

torch::Tensor AgentNetImpl::value_from_latent(const torch::Tensor& z) { return value_head_->forward(z).squeeze(-1); }

AgentNetImpl::Output AgentNetImpl::forward(const torch::Tensor& obs) {
    auto z = latent(obs);
    return {policy_logits(z), value_from_latent(z)};
}

torch::Tensor observation_tensor(const env::Observation& obs) {
    return torch::from_blob(const_cast<float*>(obs.channels.data()),
                            {1, kObservationChannels, obs.height, obs.width}, torch::kFloat32)
        .clone();
}

torch::Tensor a_of_s(AgentNet& net, const env::Observation& obs) {
    torch::NoGradGuard guard;
    return net->latent(observation_tensor(obs)).squeeze(0);
}

PolicyVector pi_of_z(AgentNet& net, const torch::Tensor& z) {
    torch::NoGradGuard guard;
    return to_policy_vector(net->policy(z.reshape({1, -1})));
}

float value_of(AgentNet& net, const env::Observation& obs) {
    torch::NoGradGuard guard;
    return net->forward(observation_tensor(obs)).value.item<float>();
}

void AgentTrainConfig::validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error("gamma must be in (0, 1]");
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw Error("gae_lambda must be in [0, 1]");
    if (rollout_length < 1 || num_envs < 1) throw Error("rollout_length and num_envs must be >= 1");
    if (total_steps < 0) throw Error("total_steps must be >= 0");
}

AdvantageEstimate compute_gae(const torch::Tensor& rewards, const torch::Tensor& values, const torch::Tensor& dones,
                              double gamma, double lambda) {
    const auto steps = rewards.size(0);
    const auto envs = rewards.size(1);
    auto r = rewards.to(torch::kFloat64).contiguous();
    auto v = values.to(torch::kFloat64).contiguous();
    auto d = dones.to(torch::kFloat64).contiguous();
    auto adv = torch::zeros({steps, envs}, torch::kFloat64);
    auto ra = r.accessor<double, 2>();
    auto va = v.accessor<double, 2>();
    auto da = d.accessor<double, 2>();
    auto aa = adv.accessor<double, 2>();
    for (std::int64_t e = 0; e < envs; ++e) {
        double running = 0.0;
        for (auto t = steps - 1; t >= 0; --t) {
            const double live = 1.0 - da[t][e];
            const double delta = ra[t][e] + gamma * va[t + 1][e] * live - va[t][e];
            running = delta + gamma * lambda * live * running;
            aa[t][e] = running;
        }
    }
    auto ret = adv + v.slice(0, 0, steps);
    return {adv.to(rewards.scalar_type()), ret.to(rewards.scalar_type())};
}

ActorCriticLoss actor_critic_loss(const torch::Tensor& logits, const torch::Tensor& values,
                                  const torch::Tensor& actions, const torch::Tensor& advantages,
                                  const torch::Tensor& returns, double entropy_coef, double value_coef) {
    auto log_probs = torch::log_softmax(logits, -1);
    auto chosen = log_probs.gather(1, actions.reshape({-1, 1})).squeeze(1);
    auto policy = -(chosen * advantages.detach()).mean();
    auto value = 0.5 * (returns.detach() - values).pow(2).mean();
    auto ent = -(log_probs.exp() * log_probs).sum(-1).mean();
    auto total = policy + value_coef * value - entropy_coef * ent;
    return {total, policy, value, ent};
}

AgentNet train_agent(const env::EnvConfig& env_cfg, const AgentTrainConfig& cfg,
                     const std::function<void(const TrainProgress&)>& on_progress) {
    cfg.validate();
    torch::manual_seed(cfg.seed);
    AgentNet net(env_cfg.height, env_cfg.width);
    if (cfg.total_steps == 0) return net;

    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    const int n_envs = cfg.num_envs;
    std::uint64_t episode_counter = 0;
    auto next_seed = [&] { return mix_seed(cfg.seed, episode_counter++); };

    std::vector<env::EnvState> states;
    std::vector<torch::Tensor> obs_rows;
    for (int e = 0; e < n_envs; ++e) {
        auto r = env::reset(next_seed(), env_cfg);
        states.push_back(std::move(r.state));
        obs_rows.push_back(observation_tensor(r.observation));
    }
    auto obs = torch::cat(obs_rows, 0);

    std::deque<double> recent_scores;
    std::vector<double> running_score(static_cast<std::size_t>(n_envs), 0.0);
    TrainProgress progress;
    std::int64_t next_report = 10000;

    while (progress.steps < cfg.total_steps) {
        std::vector<torch::Tensor> logits_seq, values_seq, actions_seq;
        auto rewards = torch::zeros({cfg.rollout_length, n_envs});
        auto dones = torch::zeros({cfg.rollout_length, n_envs});
        for (int t = 0; t < cfg.rollout_length; ++t) {
            auto out = net->forward(obs);
            auto actions = torch::multinomial(torch::softmax(out.logits, -1).detach(), 1).squeeze(1);
            logits_seq.push_back(out.logits);
            values_seq.push_back(out.value);
            actions_seq.push_back(actions);
            auto act = actions.accessor<std::int64_t, 1>();
            for (int e = 0; e < n_envs; ++e) {
                auto& st = states[static_cast<std::size_t>(e)];
                auto res = env::step(st, action_from_id(static_cast<int>(act[e])), env_cfg.frame_skip, env_cfg);
                rewards[t][e] = res.reward;
                running_score[static_cast<std::size_t>(e)] += res.reward;
                if (res.done) {
                    dones[t][e] = 1.0;
                    recent_scores.push_back(running_score[static_cast<std::size_t>(e)]);
                    if (recent_scores.size() > 100) recent_scores.pop_front();
                    running_score[static_cast<std::size_t>(e)] = 0.0;
                    ++progress.episodes;
                    auto r = env::reset(next_seed(), env_cfg);
                    st = std::move(r.state);
                    obs_rows[static_cast<std::size_t>(e)] = observation_tensor(r.observation);
                } else {
                    st = std::move(res.state);
                    obs_rows[static_cast<std::size_t>(e)] = observation_tensor(res.observation);
                }
            }
            obs = torch::cat(obs_rows, 0);
            progress.steps += n_envs;
        }

        torch::Tensor bootstrap;
        {
            torch::NoGradGuard guard;
            bootstrap = net->forward(obs).value;
        }
        auto values = torch::stack(values_seq, 0);
        auto all_values = torch::cat({values.detach(), bootstrap.unsqueeze(0)}, 0);
        auto gae = compute_gae(rewards, all_values, dones, cfg.gamma, cfg.gae_lambda);

        auto loss = actor_critic_loss(torch::cat(logits_seq, 0), values.reshape({-1}), torch::cat(actions_seq, 0),
                                      gae.advantages.reshape({-1}), gae.returns.reshape({-1}), cfg.entropy_coef,
                                      cfg.value_coef);
        const double loss_value = loss.total.item<double>();
        if (!std::isfinite(loss_value)) {
            std::ostringstream msg;
            msg << "non-finite actor-critic loss at step " << progress.steps << " (policy "
                << loss.policy.item<double>() << ", value " << loss.value.item<double>() << ", entropy "
                << loss.entropy.item<double>() << ")";
            throw Error(msg.str());
        }
        optimizer.zero_grad();
        loss.total.backward();
        torch::nn::utils::clip_grad_norm_(net->parameters(), cfg.max_grad_norm);
        optimizer.step();

        progress.loss = loss_value;
        if (!recent_scores.empty()) {
            progress.recent_mean_score =
                std::accumulate(recent_scores.begin(), recent_scores.end(), 0.0) / static_cast<double>(recent_scores.size());
        }
        if (on_progress && progress.steps >= next_report) {
            on_progress(progress);
            next_report += 10000;
        }
    }
    net->eval();
    return net;
}

PolicyFn greedy_policy(AgentNet& net) {
    return [net](const env::Observation& obs) mutable {
        torch::NoGradGuard guard;
        return static_cast<int>(net->forward(observation_tensor(obs)).logits.argmax(-1).item<std::int64_t>());
    };
}

PolicyFn uniform_random_policy(std::uint64_t seed) {
    auto rng = std::make_shared<std::mt19937_64>(seed);
    return [rng](const env::Observation&) {
        return static_cast<int>(std::uniform_int_distribution<int>(0, kNumActions - 1)(*rng));
    };
}

ScoreStats summarize(std::vector<double> scores) {
    ScoreStats stats;
    stats.scores = std::move(scores);
    if (stats.scores.empty()) return stats;
    const double n = static_cast<double>(stats.scores.size());
    stats.mean = std::accumulate(stats.scores.begin(), stats.scores.end(), 0.0) / n;
    double sq = 0.0;
    for (double s : stats.scores) sq += (s - stats.mean) * (s - stats.mean);
    stats.stddev = std::sqrt(sq / n);
    return stats;
}

ScoreStats evaluate_policy(const env::EnvConfig& env_cfg, const PolicyFn& policy, int episodes,
                           std::uint64_t seed_base) {
    std::vector<double> scores;
    for (int i = 0; i < episodes; ++i) {
        auto r = env::reset(seed_base + static_cast<std::uint64_t>(i), env_cfg);
        auto state = std::move(r.state);
        auto obs = std::move(r.observation);
        double score = 0.0;
        for (bool done = false; !done;) {
            auto res = env::step(state, action_from_id(policy(obs)), env_cfg.frame_skip, env_cfg);
            score += res.reward;
            done = res.done;
            state = std::move(res.state);
            obs = std::move(res.observation);
        }
        scores.push_back(score);
    }
    return summarize(std::move(scores));
}

RolloutDataset collect_dataset(AgentNet& net, const env::EnvConfig& env_cfg, double epsilon, std::size_t count,
                               std::uint64_t seed) {
    if (epsilon < 0.0 || epsilon > 1.0) throw Error("epsilon must be in [0, 1]");
    torch::NoGradGuard guard;
    RolloutDataset data;
    data.height = env_cfg.height;
    data.width = env_cfg.width;
    data.records.reserve(count);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> any_action(0, kNumActions - 1);

    std::uint32_t episode = 0;
    while (data.records.size() < count) {
        auto r = env::reset(mix_seed(seed, episode), env_cfg);
        auto state = std::move(r.state);
        auto obs = std::move(r.observation);
        for (std::uint32_t t = 0; data.records.size() < count; ++t) {
            auto pi = to_policy_vector(net->policy(net->latent(observation_tensor(obs))));
            const int greedy = static_cast<int>(argmax(pi));
            const int action = coin(rng) < epsilon ? any_action(rng) : greedy;
            data.records.push_back({quantize(obs.channels), pi, static_cast<std::uint8_t>(action), episode, t});
            auto res = env::step(state, action_from_id(action), env_cfg.frame_skip, env_cfg);
            if (res.done) break;
            state = std::move(res.state);
            obs = std::move(res.observation);
        }
        ++episode;
    }
    return data;
}

Replay record_replay(AgentNet& net, const env::EnvConfig& env_cfg, std::uint64_t seed) {
    torch::NoGradGuard guard;
    Replay replay;
    replay.seed = seed;
    replay.height = env_cfg.height;
    replay.width = env_cfg.width;
    auto r = env::reset(seed, env_cfg);
    auto state = std::move(r.state);
    auto obs = std::move(r.observation);
    double score = 0.0;
    for (bool done = false; !done;) {
        auto pi = to_policy_vector(net->policy(net->latent(observation_tensor(obs))));
        const int action = static_cast<int>(argmax(pi));
        replay.frames.push_back(quantize(obs.current_frame().pixels));
        replay.actions.push_back(static_cast<std::uint8_t>(action));
        replay.policies.push_back(pi);
        replay.entropies.push_back(static_cast<float>(entropy(std::span<const float>(pi))));
        auto res = env::step(state, action_from_id(action), env_cfg.frame_skip, env_cfg);
        score += res.reward;
        done = res.done;
        state = std::move(res.state);
        obs = std::move(res.observation);
    }
    replay.score = static_cast<int>(score);
    return replay;
}

}  // namespace cfstates::agent
