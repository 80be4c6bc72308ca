#pragma once

// Counterfactual states: gradient descent in the Wasserstein latent space until
// the agent prefers a′, then decoding through G with the unchanged E(s).

#include <filesystem>
#include <map>
#include <vector>

#include <torch/torch.h>

#include "cfstates/agent.hpp"
#include "cfstates/dataset.hpp"
#include "cfstates/env.hpp"
#include "cfstates/genmodel.hpp"

namespace cfstates::counterfactual {

struct CfConfig {
    double step_size = 0.05;
    int max_steps = 500;
    bool renormalize = true;  // project z_w back onto the unit sphere after each step
    bool low_entropy_key_frames = true;

    void validate() const;
};

/// Agent plus trained generative stack. Both are put in eval mode on
/// construction and must not be trained while shared.
struct ModelSet {
    agent::AgentNet agent{nullptr};
    genmodel::GenModel gen{nullptr};

    ModelSet() = default;
    ModelSet(agent::AgentNet a, genmodel::GenModel g);
};

/// Acts by argmax π(D_w(E_w(A(s)))).
agent::PolicyFn wae_policy(ModelSet& models);

ModelSet load_models(const std::filesystem::path& agent_checkpoint, const std::filesystem::path& gen_checkpoint,
                     int height = 64, int width = 64);

/// ‖z_w − z_w0‖² + log(1 − π(D_w(z_w), a′)), differentiable in z_w ([128] or [1,128]).
torch::Tensor cf_objective(const torch::Tensor& z_w, const torch::Tensor& z_w0, int target, ModelSet& models);

/// π(D_w(z_w)) for a single latent.
PolicyVector policy_at(ModelSet& models, const torch::Tensor& z_w);

/// z_w0 = E_w(A(s)), shape [128].
torch::Tensor wasserstein_latent(ModelSet& models, const env::Observation& obs);

struct CfTrace {
    torch::Tensor z_w;               // z_w*
    std::vector<double> objectives;  // objective before each gradient step
    int steps = 0;
    bool success = false;
};

/// Throws Error on a non-finite gradient.
CfTrace cf_optimize(ModelSet& models, const torch::Tensor& z_w0, int target, const CfConfig& cfg);
CfTrace cf_optimize(ModelSet& models, const env::Observation& obs, int target, const CfConfig& cfg);

struct HighlightParams {
    double sigma = 1.5;
    double threshold = 0.05;
    double max_alpha = 0.7;
};

struct Highlight {
    std::vector<float> mask;  // H x W, values in [0, 1]
    env::Frame overlay;
};

/// Per-pixel max-over-RGB |reconstruction − cf|, Gaussian-blurred and
/// thresholded, composited in red over `original`.
Highlight highlight_mask(const env::Frame& reconstruction, const env::Frame& cf, const env::Frame& original,
                         const HighlightParams& params = {});

struct CounterfactualResult {
    env::Observation query;
    env::Observation reconstruction;  // G(E(s), π(D_w(z_w0)))
    env::Observation counterfactual;  // G(E(s), π(D_w(z_w*)))
    int action = 0;                   // argmax π(D_w(z_w0))
    int target = 0;
    torch::Tensor z_w0;
    torch::Tensor z_w_star;
    PolicyVector pi_agent{};  // π(A(s)), for reference
    PolicyVector pi_before{};
    PolicyVector pi_after{};
    int steps = 0;
    bool success = false;
    double latent_distance = 0.0;
    std::vector<double> objectives;
    Highlight highlight;
};

CounterfactualResult generate_counterfactual(ModelSet& models, const env::Observation& obs, int target,
                                             const CfConfig& cfg);

/// Up to n indices in ascending (or descending) entropy order with pairwise gap >= 3;
/// ties go to the earlier index.
std::vector<std::size_t> select_key_frames(std::span<const float> entropies, std::size_t n, bool low_first = true);
std::vector<std::size_t> select_key_frames(const Replay& replay, std::size_t n, bool low_first = true);

struct ActionRun {
    bool success = false;
    double distance = 0.0;
    int steps = 0;
};

/// Largest-distance successful action; ties go to the lower id. Throws
/// Error("no counterfactual found") when nothing succeeded.
int choose_cf_action(const std::map<int, ActionRun>& table);

struct CfActionChoice {
    int action = 0;
    std::map<int, ActionRun> table;  // never contains NoOp or the current argmax
};

CfActionChoice select_cf_action(ModelSet& models, const env::Observation& obs, const CfConfig& cfg);

}  // namespace cfstates::counterfactual
