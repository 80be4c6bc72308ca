#include "cfstates/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cfstates/distribution.hpp"
#include "cfstates/persistence.hpp"

namespace cfstates::counterfactual {
namespace {

constexpr double kMaxProbability = 1.0 - 1e-7;

PolicyVector to_policy(const torch::Tensor& pi) {
    auto flat = pi.detach().to(torch::kFloat32).contiguous().view({-1});
    PolicyVector out{};
    std::copy_n(flat.data_ptr<float>(), kNumActions, out.begin());
    return out;
}

torch::Tensor as_row(const torch::Tensor& t) { return t.dim() == 1 ? t.unsqueeze(0) : t; }

torch::Tensor policy_tensor(ModelSet& models, const torch::Tensor& z_w) {
    return models.agent->policy(models.gen->wae_decoder->forward(as_row(z_w)));
}

torch::Tensor policy_row(const PolicyVector& pi) {
    return torch::tensor(std::vector<float>(pi.begin(), pi.end())).view({1, kNumActions});
}

}  // namespace

void CfConfig::validate() const {
    if (!(step_size > 0.0)) throw Error("step size must be > 0");
    if (max_steps < 1) throw Error("max steps must be >= 1");
}

ModelSet::ModelSet(agent::AgentNet a, genmodel::GenModel g) : agent(std::move(a)), gen(std::move(g)) {
    agent->eval();
    gen->eval();
}

agent::PolicyFn wae_policy(ModelSet& models) {
    return [&models](const env::Observation& obs) {
        return static_cast<int>(argmax(policy_at(models, wasserstein_latent(models, obs))));
    };
}

ModelSet load_models(const std::filesystem::path& agent_checkpoint, const std::filesystem::path& gen_checkpoint,
                     int height, int width) {
    agent::AgentNet net(height, width);
    persistence::load_module_state(*net, persistence::load_checkpoint(agent_checkpoint));
    genmodel::GenModel gen(genmodel::GenModelConfig{height, width});
    persistence::load_module_state(*gen, persistence::load_checkpoint(gen_checkpoint));
    return ModelSet(net, gen);
}

torch::Tensor cf_objective(const torch::Tensor& z_w, const torch::Tensor& z_w0, int target, ModelSet& models) {
    action_from_id(target);
    // Clamp in double: 1 - 1e-7 is not representable in float.
    auto p = policy_tensor(models, z_w).select(1, target).to(torch::kFloat64).clamp_max(kMaxProbability);
    auto proximity = (as_row(z_w) - as_row(z_w0).detach()).pow(2).sum();
    return proximity + torch::log1p(-p).sum();
}

PolicyVector policy_at(ModelSet& models, const torch::Tensor& z_w) {
    torch::NoGradGuard guard;
    return to_policy(policy_tensor(models, z_w));
}

torch::Tensor wasserstein_latent(ModelSet& models, const env::Observation& obs) {
    torch::NoGradGuard guard;
    auto z = models.agent->latent(agent::observation_tensor(obs));
    return models.gen->wae_encoder->forward(z).squeeze(0);
}

CfTrace cf_optimize(ModelSet& models, const torch::Tensor& z_w0, int target, const CfConfig& cfg) {
    cfg.validate();
    action_from_id(target);
    const auto anchor = z_w0.detach().reshape({-1}).to(torch::kFloat32);
    CfTrace trace;
    auto z = anchor.clone();
    for (;;) {
        const auto pi = policy_at(models, z);
        if (static_cast<int>(argmax(pi)) == target) {
            trace.success = true;
            break;
        }
        if (trace.steps >= cfg.max_steps) break;

        auto var = z.clone().requires_grad_(true);
        auto objective = cf_objective(var, anchor, target, models);
        // autograd::grad leaves parameter .grad untouched, so shared models stay immutable.
        auto grad = torch::autograd::grad({objective}, {var})[0];
        if (!torch::isfinite(grad).all().item<bool>()) {
            std::ostringstream msg;
            msg << "non-finite gradient at step " << trace.steps << " (objective " << objective.item<double>() << ")";
            throw Error(msg.str());
        }
        trace.objectives.push_back(objective.item<double>());
        z = z - cfg.step_size * grad;
        if (cfg.renormalize) z = z / z.norm().clamp_min(1e-12);
        ++trace.steps;
    }
    trace.z_w = z;
    return trace;
}

CfTrace cf_optimize(ModelSet& models, const env::Observation& obs, int target, const CfConfig& cfg) {
    return cf_optimize(models, wasserstein_latent(models, obs), target, cfg);
}

Highlight highlight_mask(const env::Frame& reconstruction, const env::Frame& cf, const env::Frame& original,
                         const HighlightParams& params) {
    if (reconstruction.height != cf.height || reconstruction.width != cf.width ||
        original.height != cf.height || original.width != cf.width) {
        throw Error("highlight_mask: frame shape mismatch");
    }
    const int h = cf.height;
    const int w = cf.width;
    std::vector<double> diff(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double m = 0.0;
            for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(double(reconstruction.at(y, x, c)) - cf.at(y, x, c)));
            diff[static_cast<std::size_t>(y) * w + x] = m;
        }
    }

    // Separable Gaussian, zero outside the frame.
    const int radius = static_cast<int>(std::ceil(3.0 * params.sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (params.sigma * params.sigma));
    }
    const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (auto& k : kernel) k /= norm;

    std::vector<double> tmp(diff.size(), 0.0), blurred(diff.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = x + i;
                if (xx >= 0 && xx < w) acc += kernel[static_cast<std::size_t>(i + radius)] * diff[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = y + i;
                if (yy >= 0 && yy < h) acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            blurred[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }

    Highlight out;
    out.mask.resize(diff.size());
    out.overlay = original;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        const double m = blurred[i] >= params.threshold ? std::clamp(blurred[i], 0.0, 1.0) : 0.0;
        out.mask[i] = static_cast<float>(m);
        if (m == 0.0) continue;
        const double alpha = params.max_alpha * m;
        const float red[3] = {1.0F, 0.0F, 0.0F};
        for (int c = 0; c < 3; ++c) {
            auto& px = out.overlay.pixels[i * 3 + static_cast<std::size_t>(c)];
            px = static_cast<float>((1.0 - alpha) * px + alpha * red[c]);
        }
    }
    return out;
}

CounterfactualResult generate_counterfactual(ModelSet& models, const env::Observation& obs, int target,
                                             const CfConfig& cfg) {
    CounterfactualResult r;
    r.query = obs;
    r.target = target;
    {
        torch::NoGradGuard guard;
        auto z = models.agent->latent(agent::observation_tensor(obs));
        r.pi_agent = to_policy(models.agent->policy(z));
        r.z_w0 = models.gen->wae_encoder->forward(z).squeeze(0);
    }
    r.pi_before = policy_at(models, r.z_w0);
    r.action = static_cast<int>(argmax(r.pi_before));

    auto trace = cf_optimize(models, r.z_w0, target, cfg);
    r.z_w_star = trace.z_w;
    r.steps = trace.steps;
    r.success = trace.success;
    r.objectives = std::move(trace.objectives);
    r.pi_after = policy_at(models, r.z_w_star);
    r.latent_distance = (r.z_w_star - r.z_w0).norm().item<double>();

    torch::NoGradGuard guard;
    auto encoded = models.gen->encoder->forward(genmodel::observation_batch(obs));
    r.reconstruction = genmodel::to_observation(models.gen->reconstruct(encoded, policy_row(r.pi_before))[0]);
    r.counterfactual = trace.steps == 0
                           ? r.reconstruction
                           : genmodel::to_observation(models.gen->reconstruct(encoded, policy_row(r.pi_after))[0]);
    r.highlight = highlight_mask(r.reconstruction.current_frame(), r.counterfactual.current_frame(),
                                 obs.current_frame());
    return r;
}

std::vector<std::size_t> select_key_frames(std::span<const float> entropies, std::size_t n, bool low_first) {
    std::vector<std::size_t> order(entropies.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return low_first ? entropies[a] < entropies[b] : entropies[a] > entropies[b];
    });
    std::vector<std::size_t> picked;
    for (auto i : order) {
        if (picked.size() >= n) break;
        const bool clear = std::all_of(picked.begin(), picked.end(), [&](std::size_t j) {
            return (i > j ? i - j : j - i) >= 3;
        });
        if (clear) picked.push_back(i);
    }
    return picked;
}

std::vector<std::size_t> select_key_frames(const Replay& replay, std::size_t n, bool low_first) {
    return select_key_frames(std::span<const float>(replay.entropies), n, low_first);
}

int choose_cf_action(const std::map<int, ActionRun>& table) {
    int best = -1;
    double best_distance = -1.0;
    for (const auto& [action, run] : table) {  // ascending id, so strict > keeps the lower id on ties
        if (run.success && run.distance > best_distance) {
            best = action;
            best_distance = run.distance;
        }
    }
    if (best < 0) throw Error("no counterfactual found");
    return best;
}

CfActionChoice select_cf_action(ModelSet& models, const env::Observation& obs, const CfConfig& cfg) {
    const auto z_w0 = wasserstein_latent(models, obs);
    const int current = static_cast<int>(argmax(policy_at(models, z_w0)));
    CfActionChoice choice;
    for (int a = 0; a < kNumActions; ++a) {
        if (a == action_id(Action::NoOp) || a == current) continue;
        const auto trace = cf_optimize(models, z_w0, a, cfg);
        choice.table[a] = ActionRun{trace.success, (trace.z_w - z_w0).norm().item<double>(), trace.steps};
    }
    choice.action = choose_cf_action(choice.table);
    return choice;
}

}  // namespace cfstates::counterfactual
