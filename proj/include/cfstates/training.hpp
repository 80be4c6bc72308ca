#pragma once

// Joint training of D, (E, G) and the Wasserstein autoencoder on a rollout
// dataset, plus the evaluation probes used to judge the trained stack.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cfstates/agent.hpp"
#include "cfstates/dataset.hpp"
#include "cfstates/genmodel.hpp"

namespace cfstates::training {

struct GenTrainConfig {
    double lambda = 20.0;
    double learning_rate = 1e-4;  // E, G, D
    double beta1 = 0.0;
    double beta2 = 0.9;
    double wae_learning_rate = 1e-4;  // default Adam betas
    int batch_size = 64;
    int epochs = 30;
    double mmd_scale = 256.0;  // 2 * d * sigma^2 with d = 128, sigma = 1
    std::uint64_t seed = 1;
    bool wae_separate = false;
    int wae_epochs = 30;  // only with wae_separate
    bool discriminator_kl = false;
    int holdout_every = 10;  // episodes with id % holdout_every == 0 are held out
    int checkpoint_every = 1;
    std::size_t eval_records = 2000;
    int probe_every = 0;  // 0: probe only after the final epoch

    void validate() const;
    std::string hash() const;
};

struct EpochReport {
    int epoch = 0;
    double loss_autoencoder = 0.0;
    double loss_discriminator = 0.0;
    double loss_adversarial = 0.0;
    double loss_wae = 0.0;
    double reconstruction_mse = 0.0;
    std::optional<double> probe_accuracy;
    double wall_seconds = 0.0;
};

struct TrainReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<EpochReport> epochs;
    std::vector<double> loss_trace;  // per batch: D, E/G, WAE losses in update order

    nlohmann::json to_json() const;
};

struct TrainOptions {
    std::optional<std::filesystem::path> checkpoint_dir;
    std::optional<std::filesystem::path> resume_from;
    /// Stop after this many epochs in this call (for interrupted runs).
    std::optional<int> stop_after_epoch;
    std::function<void(const EpochReport&)> on_epoch;
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    genmodel::GenModel model{nullptr};
    TrainReport report;
};

struct DataSplit {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> test;
};

DataSplit split_by_episode(const RolloutDataset& data, int holdout_every);

/// z = A(s) for a batch, agent frozen.
torch::Tensor agent_latents(agent::AgentNet& net, const torch::Tensor& observations);

/// Owns the three optimizers; each step touches only its own parameter group.
class GenTrainer {
public:
    GenTrainer(genmodel::GenModel model, const GenTrainConfig& cfg);

    double step_discriminator(const genmodel::LossBatch& batch);
    /// Returns {autoencoder, adversarial}.
    std::pair<double, double> step_encoder_generator(const genmodel::LossBatch& batch);
    double step_wae(const genmodel::LossBatch& batch);

    genmodel::GenModel& model() { return model_; }
    void save(const std::filesystem::path& path, int epoch);
    /// Restores model and optimizer state; returns the stored epoch.
    int load(const std::filesystem::path& path);

private:
    genmodel::GenModel model_;
    GenTrainConfig cfg_;
    torch::optim::Adam opt_d_;
    torch::optim::Adam opt_eg_;
    torch::optim::Adam opt_w_;
};

TrainResult train_models(const RolloutDataset& data, agent::AgentNet& net, const GenTrainConfig& cfg,
                         const TrainOptions& options = {});

/// Evaluation-mode encodings E(s) [N, 16].
torch::Tensor encode_records(genmodel::GenModel& model, const RolloutDataset& data,
                             std::span<const std::int64_t> indices);

/// Held-out per-pixel reconstruction MSE: the autoencoder loss divided by the tensor size.
double eval_reconstruction(genmodel::GenModel& model, const RolloutDataset& data,
                           std::span<const std::int64_t> indices);

/// Mean |G(E(s), pi) - G(E(s), onehot(b))| over actions b other than argmax pi.
double conditioning_change(genmodel::GenModel& model, const RolloutDataset& data,
                           std::span<const std::int64_t> indices);

struct ProbeConfig {
    int hidden = 64;
    int epochs = 40;
    int batch_size = 128;
    double learning_rate = 1e-3;
    double train_fraction = 0.8;
    std::size_t max_records = 8000;
    std::uint64_t seed = 7;
};

struct ProbeResult {
    double accuracy = 0.0;
    double chance = 0.0;  // majority-class frequency on the test split
    std::size_t train_size = 0;
    std::size_t test_size = 0;
};

/// Trains a fresh 2-layer probe on explicit train/test splits of features.
/// Throws Error("insufficient class coverage") if a test label is absent from train.
ProbeResult probe_split(const torch::Tensor& features, std::span<const int> labels,
                        std::span<const std::int64_t> train, std::span<const std::int64_t> test,
                        const ProbeConfig& cfg);

/// Stratified split by label, then probe_split.
ProbeResult probe_features(const torch::Tensor& features, std::span<const int> labels, const ProbeConfig& cfg);

/// Probe on frozen E(s) predicting argmax pi(A(s)).
ProbeResult probe_invariance(genmodel::GenModel& model, const RolloutDataset& data, const ProbeConfig& cfg = {});

}  // namespace cfstates::training
