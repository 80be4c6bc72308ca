#include "cfstates/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cfstates/distribution.hpp"
#include "cfstates/training.hpp"

namespace cfstates::baselines {
namespace {

PolicyVector to_policy(const torch::Tensor& pi) {
    auto flat = pi.detach().to(torch::kFloat32).contiguous().view({-1});
    PolicyVector out{};
    std::copy_n(flat.data_ptr<float>(), kNumActions, out.begin());
    return out;
}

torch::Tensor policy_row(const PolicyVector& pi) {
    return torch::tensor(std::vector<float>(pi.begin(), pi.end())).view({1, kNumActions});
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x2545F4914F6CDD1DULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

int AblationConfig::code_dim() const {
    return (include_e ? kEncodedDim : 0) + (include_z_w ? kWassersteinDim : 0) + (include_z ? kAgentLatentDim : 0) +
           (include_pi ? kNumActions : 0);
}

const std::array<AblationConfig, 10>& ablation_table() {
    //                                          id  E      z_w    z      pi
    static const std::array<AblationConfig, 10> table{{{1, false, false, false, true},
                                                       {2, false, false, true, false},
                                                       {3, false, false, true, true},
                                                       {4, false, true, false, false},
                                                       {5, false, true, false, true},
                                                       {6, true, false, false, true},
                                                       {7, true, false, true, false},
                                                       {8, true, false, true, true},
                                                       {9, true, true, false, false},
                                                       {10, true, true, false, true}}};
    return table;
}

const AblationConfig& ablation_config(int id) {
    if (id < 1 || id > 10) throw Error("ablation config id must be in 1..10, got " + std::to_string(id));
    return ablation_table()[static_cast<std::size_t>(id - 1)];
}

PolicyVector perturb_policy_hand(const PolicyVector& pi, int current, int target) {
    action_from_id(current);
    action_from_id(target);
    if (current == target) throw Error("degenerate perturbation");
    PolicyVector out = pi;
    out[static_cast<std::size_t>(target)] = pi[static_cast<std::size_t>(current)] * 1.01F;
    double sum = 0.0;
    for (float v : out) sum += v;
    for (auto& v : out) v = static_cast<float>(v / sum);
    return out;
}

AblationModelImpl::AblationModelImpl(const AblationConfig& cfg, const genmodel::GenModelConfig& shape) : cfg_(cfg) {
    if (cfg.code_dim() == 0) throw Error("ablation config has no generator inputs");
    if (cfg.include_e) {
        encoder = register_module("encoder", genmodel::Encoder(shape));
        discriminator = register_module("discriminator", genmodel::Discriminator());
    }
    generator = register_module("generator", genmodel::Generator(cfg.code_dim(), cfg.include_pi, shape));
}

torch::Tensor AblationModelImpl::generate(const Inputs& in) {
    std::vector<torch::Tensor> parts;
    auto need = [](const torch::Tensor& t, const char* name) {
        if (!t.defined()) throw Error(std::string("ablation generator input missing: ") + name);
        return t;
    };
    if (cfg_.include_e) parts.push_back(need(in.encoded, "E(s)"));
    if (cfg_.include_z_w) parts.push_back(need(in.z_w, "z_w"));
    if (cfg_.include_z) parts.push_back(need(in.z, "z"));
    if (cfg_.include_pi) parts.push_back(need(in.pi, "pi"));
    return generator->forward(torch::cat(parts, 1), cfg_.include_pi ? in.pi : torch::Tensor());
}

AblationModel train_ablation(const AblationConfig& cfg, const RolloutDataset& data, counterfactual::ModelSet& base,
                             const AblationTrainConfig& train_cfg, const std::function<void(int, double)>& on_epoch) {
    if (data.empty()) throw Error("train_ablation: dataset is empty");
    if (train_cfg.batch_size < 2) throw Error("batch_size must be >= 2");
    torch::manual_seed(train_cfg.seed);
    AblationModel model(cfg, genmodel::GenModelConfig{data.height, data.width});
    const auto adam = torch::optim::AdamOptions(train_cfg.learning_rate).betas({train_cfg.beta1, train_cfg.beta2});
    std::vector<torch::Tensor> eg_params = model->generator->parameters();
    std::optional<torch::optim::Adam> opt_d;
    if (cfg.include_e) {
        auto enc = model->encoder->parameters();
        eg_params.insert(eg_params.end(), enc.begin(), enc.end());
        opt_d.emplace(model->discriminator->parameters(), adam);
    }
    torch::optim::Adam opt_eg(eg_params, adam);

    const auto split = training::split_by_episode(data, train_cfg.holdout_every);
    const auto bs = static_cast<std::size_t>(train_cfg.batch_size);
    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        const auto seed = mix_seed(train_cfg.seed, static_cast<std::uint64_t>(epoch));
        torch::manual_seed(seed);
        std::mt19937_64 rng(seed);
        auto order = split.train;
        std::shuffle(order.begin(), order.end(), rng);
        model->train();
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 2 <= order.size(); start += bs) {
            const std::span<const std::int64_t> idx(order.data() + start, std::min(bs, order.size() - start));
            auto obs = data.observations(idx);
            AblationModelImpl::Inputs in;
            in.pi = data.policies(idx);
            {
                torch::NoGradGuard guard;
                in.z = training::agent_latents(base.agent, obs);
                if (cfg.include_z_w) in.z_w = base.gen->wae_encoder->forward(in.z);
            }
            if (cfg.include_e) {
                torch::Tensor encoded_detached;
                {
                    torch::NoGradGuard guard;
                    encoded_detached = model->encoder->forward(obs);
                }
                opt_d->zero_grad();
                auto ld = genmodel::discriminator_loss(model->discriminator->forward(encoded_detached), in.pi);
                ld.backward();
                opt_d->step();
            }
            opt_eg.zero_grad();
            torch::Tensor loss;
            if (cfg.include_e) {
                in.encoded = model->encoder->forward(obs);
                genmodel::FrozenParameters frozen(*model->discriminator);
                loss = genmodel::autoencoder_loss(model->generate(in), obs) +
                       genmodel::adversarial_loss(model->discriminator->forward(in.encoded), train_cfg.lambda);
            } else {
                loss = genmodel::autoencoder_loss(model->generate(in), obs);
            }
            loss.backward();
            opt_eg.step();
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw Error("non-finite loss training ablation " + std::to_string(cfg.id) + " in epoch " +
                            std::to_string(epoch + 1));
            }
            total += value;
            ++batches;
        }
        if (on_epoch) on_epoch(epoch + 1, batches ? total / static_cast<double>(batches) : 0.0);
    }
    model->eval();
    return model;
}

counterfactual::CfTrace optimize_agent_latent(agent::AgentNet& net, const torch::Tensor& z0, int target,
                                              const counterfactual::CfConfig& cfg) {
    cfg.validate();
    action_from_id(target);
    const auto anchor = z0.detach().reshape({1, -1}).to(torch::kFloat32);
    counterfactual::CfTrace trace;
    auto z = anchor.clone();
    for (;;) {
        {
            torch::NoGradGuard guard;
            if (net->policy(z).argmax(1).item<std::int64_t>() == target) {
                trace.success = true;
                break;
            }
        }
        if (trace.steps >= cfg.max_steps) break;
        auto var = z.clone().requires_grad_(true);
        auto p = net->policy(var).select(1, target).to(torch::kFloat64).clamp_max(1.0 - 1e-7);
        auto objective = (var - anchor).pow(2).sum() + torch::log1p(-p).sum();
        auto grad = torch::autograd::grad({objective}, {var})[0];
        if (!torch::isfinite(grad).all().item<bool>()) {
            throw Error("non-finite gradient at step " + std::to_string(trace.steps));
        }
        trace.objectives.push_back(objective.item<double>());
        z = z - cfg.step_size * grad;
        ++trace.steps;
    }
    trace.z_w = z.squeeze(0);
    return trace;
}

AblationOutput ablation_generate(AblationModel& model, counterfactual::ModelSet& base, const env::Observation& obs,
                                 int target, const counterfactual::CfConfig& cf_cfg, CfMethod method) {
    const auto& cfg = model->config();
    action_from_id(target);
    if (method == CfMethod::Auto) method = cfg.has_latent() ? CfMethod::GradientDescent : CfMethod::HandPerturbation;
    if (method == CfMethod::GradientDescent && !cfg.has_latent()) {
        throw Error("ablation config " + std::to_string(cfg.id) + " has no latent to optimize");
    }

    AblationOutput out;
    out.config_id = cfg.id;
    auto batch = genmodel::observation_batch(obs);
    AblationModelImpl::Inputs before, after;
    {
        torch::NoGradGuard guard;
        model->eval();
        before.z = base.agent->latent(batch);
        before.pi = base.agent->policy(before.z);
        if (cfg.include_e) before.encoded = model->encoder->forward(batch);
        if (cfg.include_z_w) {
            before.z_w = base.gen->wae_encoder->forward(before.z);
            before.pi = base.agent->policy(base.gen->wae_decoder->forward(before.z_w));
        }
    }
    after = before;
    if (method == CfMethod::HandPerturbation) {
        const auto pi = to_policy(before.pi);
        const int current = static_cast<int>(argmax(pi));
        out.pi_after = current == target ? pi : perturb_policy_hand(pi, current, target);
        out.success = true;
        after.pi = policy_row(out.pi_after);
    } else if (cfg.include_z_w) {
        auto trace = counterfactual::cf_optimize(base, before.z_w.squeeze(0), target, cf_cfg);
        out.steps = trace.steps;
        out.success = trace.success;
        after.z_w = trace.z_w.view({1, -1});
        out.pi_after = counterfactual::policy_at(base, trace.z_w);
        after.pi = policy_row(out.pi_after);
    } else {
        auto trace = optimize_agent_latent(base.agent, before.z, target, cf_cfg);
        out.steps = trace.steps;
        out.success = trace.success;
        after.z = trace.z_w.view({1, -1});
        torch::NoGradGuard guard;
        after.pi = base.agent->policy(after.z);
        out.pi_after = to_policy(after.pi);
    }

    torch::NoGradGuard guard;
    out.reconstruction = genmodel::to_observation(model->generate(before)[0]);
    out.counterfactual = genmodel::to_observation(model->generate(after)[0]);
    return out;
}

NnIndex build_nn_index(const RolloutDataset& data, agent::AgentNet& net, std::size_t max_records) {
    NnIndex index;
    const auto n = std::min(max_records, data.size());
    std::vector<torch::Tensor> parts;
    for (std::size_t start = 0; start < n; start += 64) {
        std::vector<std::int64_t> idx(std::min<std::size_t>(64, n - start));
        std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(start));
        parts.push_back(training::agent_latents(net, data.observations(idx)));
        for (auto i : idx) {
            index.records.push_back(i);
            index.actions.push_back(static_cast<int>(argmax(data.records[static_cast<std::size_t>(i)].pi)));
        }
    }
    index.latents = parts.empty() ? torch::empty({0, kAgentLatentDim}) : torch::cat(parts, 0);
    return index;
}

NnMatch nn_counterfactual(const NnIndex& index, const torch::Tensor& z, int target) {
    action_from_id(target);
    auto query = z.detach().reshape({1, -1}).to(torch::kFloat64);
    auto dists = (index.latents.to(torch::kFloat64) - query).pow(2).sum(1).sqrt();
    auto acc = dists.accessor<double, 1>();
    std::optional<NnMatch> best;
    for (std::size_t row = 0; row < index.actions.size(); ++row) {
        if (index.actions[row] != target) continue;
        const double d = acc[static_cast<std::int64_t>(row)];
        if (!best || d < best->distance) best = NnMatch{row, index.records[row], d};
    }
    if (!best) throw Error("no indexed record with action " + std::string(action_name(action_from_id(target))));
    return *best;
}

NnMatch nn_counterfactual(const NnIndex& index, agent::AgentNet& net, const env::Observation& obs, int target) {
    return nn_counterfactual(index, agent::a_of_s(net, obs), target);
}

std::vector<double> realism_distances(std::span<const env::Observation> observations, const RolloutDataset& data,
                                      std::span<const std::int64_t> candidates) {
    if (candidates.empty()) throw Error("realism proxy needs at least one candidate state");
    if (observations.empty()) return {};
    std::vector<torch::Tensor> rows;
    for (const auto& obs : observations) rows.push_back(genmodel::observation_batch(obs).flatten(1));
    auto queries = torch::cat(rows, 0).to(torch::kFloat64);
    auto best = torch::full({queries.size(0)}, std::numeric_limits<double>::infinity(), torch::kFloat64);
    for (std::size_t start = 0; start < candidates.size(); start += 128) {
        const auto chunk = candidates.subspan(start, std::min<std::size_t>(128, candidates.size() - start));
        auto real = data.observations(chunk).flatten(1).to(torch::kFloat64);
        best = torch::minimum(best, std::get<0>(torch::cdist(queries, real, 2.0, /*donot_use_mm_for_euclid_dist*/ 2).min(1)));
    }
    std::vector<double> out(static_cast<std::size_t>(best.size(0)));
    auto acc = best.accessor<double, 1>();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = acc[static_cast<std::int64_t>(i)];
    return out;
}

double realism_distance(const env::Observation& obs, const RolloutDataset& data,
                        std::span<const std::int64_t> candidates) {
    return realism_distances(std::span<const env::Observation>(&obs, 1), data, candidates).front();
}

}  // namespace cfstates::baselines
