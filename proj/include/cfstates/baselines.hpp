#pragma once

// Ablated generator configurations, hand-perturbed policies, the
// nearest-neighbour baseline and the pixel-space realism proxy.

#include <array>
#include <functional>
#include <string>

#include <torch/torch.h>

#include "cfstates/counterfactual.hpp"
#include "cfstates/dataset.hpp"
#include "cfstates/genmodel.hpp"

namespace cfstates::baselines {

struct AblationConfig {
    int id = 0;
    bool include_e = false;
    bool include_z_w = false;
    bool include_z = false;
    bool include_pi = false;

    int code_dim() const;
    bool has_latent() const { return include_z || include_z_w; }
    bool operator==(const AblationConfig&) const = default;
};

const std::array<AblationConfig, 10>& ablation_table();
const AblationConfig& ablation_config(int id);

/// π(a′) ← π(a)·1.01, then renormalize. Throws Error("degenerate perturbation") if a′ = a.
PolicyVector perturb_policy_hand(const PolicyVector& pi, int current, int target);

class AblationModelImpl : public torch::nn::Module {
public:
    AblationModelImpl(const AblationConfig& cfg, const genmodel::GenModelConfig& shape = {});

    struct Inputs {
        torch::Tensor encoded;  // [N, 16]
        torch::Tensor z_w;      // [N, 128]
        torch::Tensor z;        // [N, 256]
        torch::Tensor pi;       // [N, 6]
    };
    /// G on the inputs this configuration declares; others are ignored.
    torch::Tensor generate(const Inputs& in);

    const AblationConfig& config() const { return cfg_; }

    genmodel::Encoder encoder{nullptr};              // only with E(s)
    genmodel::Discriminator discriminator{nullptr};  // only with E(s)
    genmodel::Generator generator{nullptr};

private:
    AblationConfig cfg_;
};
TORCH_MODULE(AblationModel);

struct AblationTrainConfig {
    int epochs = 30;
    int batch_size = 64;
    double learning_rate = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double lambda = 20.0;  // adversarial weight for configurations that keep E and D
    std::uint64_t seed = 1;
    int holdout_every = 10;
};

/// Trains one configuration. `base` supplies the frozen agent and, for z_w
/// configurations, the trained Wasserstein autoencoder.
AblationModel train_ablation(const AblationConfig& cfg, const RolloutDataset& data, counterfactual::ModelSet& base,
                             const AblationTrainConfig& train_cfg,
                             const std::function<void(int, double)>& on_epoch = {});

enum class CfMethod { Auto, GradientDescent, HandPerturbation };

struct AblationOutput {
    int config_id = 0;
    env::Observation reconstruction;
    env::Observation counterfactual;
    PolicyVector pi_after{};
    int steps = 0;
    bool success = false;
};

/// Counterfactual for one ablation: gradient descent on z or z_w when the
/// configuration has one, hand-perturbed π for configurations 1 and 6.
/// Requesting gradient descent without an optimizable latent throws.
AblationOutput ablation_generate(AblationModel& model, counterfactual::ModelSet& base, const env::Observation& obs,
                                 int target, const counterfactual::CfConfig& cf_cfg, CfMethod method = CfMethod::Auto);

/// Gradient descent on z with the objective ‖z − z0‖² + log(1 − π(z, a′)).
counterfactual::CfTrace optimize_agent_latent(agent::AgentNet& net, const torch::Tensor& z0, int target,
                                              const counterfactual::CfConfig& cfg);

struct NnIndex {
    std::vector<std::int64_t> records;  // row -> dataset record
    torch::Tensor latents;              // [M, 256]
    std::vector<int> actions;           // argmax of the stored π
};

NnIndex build_nn_index(const RolloutDataset& data, agent::AgentNet& net, std::size_t max_records = 100000);

struct NnMatch {
    std::size_t row = 0;  // position in the index
    std::int64_t record = 0;
    double distance = 0.0;
};

/// argmin over rows with action a′ of ‖z − z_i‖₂; ties go to the lowest row.
NnMatch nn_counterfactual(const NnIndex& index, const torch::Tensor& z, int target);
NnMatch nn_counterfactual(const NnIndex& index, agent::AgentNet& net, const env::Observation& obs, int target);

/// Pixel-space L2 distance from each observation to its nearest dataset
/// observation among `candidates` (lower = more realistic).
std::vector<double> realism_distances(std::span<const env::Observation> observations, const RolloutDataset& data,
                                      std::span<const std::int64_t> candidates);
double realism_distance(const env::Observation& obs, const RolloutDataset& data,
                        std::span<const std::int64_t> candidates);

}  // namespace cfstates::baselines
