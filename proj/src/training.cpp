#include "cfstates/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "cfstates/config.hpp"
#include "cfstates/persistence.hpp"

namespace cfstates::training {
namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x2545F4914F6CDD1DULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::int64_t kEvalChunk = 64;

template <typename Fn>
void for_chunks(std::span<const std::int64_t> indices, std::int64_t chunk, Fn&& fn) {
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(chunk)) {
        const auto len = std::min(indices.size() - start, static_cast<std::size_t>(chunk));
        fn(indices.subspan(start, len));
    }
}

std::vector<torch::Tensor> params_of(std::initializer_list<torch::nn::Module*> modules) {
    std::vector<torch::Tensor> out;
    for (auto* m : modules) {
        auto p = m->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

void append_optimizer_state(persistence::TensorTable& table, torch::optim::Adam& opt, const std::string& prefix) {
    auto& state = opt.state();
    std::size_t i = 0;
    for (auto& group : opt.param_groups()) {
        for (auto& p : group.params()) {
            const auto key = prefix + std::to_string(i++);
            auto it = state.find(p.unsafeGetTensorImpl());
            if (it == state.end()) continue;
            auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
            table.emplace_back(key + ".step", torch::tensor({static_cast<float>(s.step())}));
            table.emplace_back(key + ".exp_avg", s.exp_avg().detach().clone());
            table.emplace_back(key + ".exp_avg_sq", s.exp_avg_sq().detach().clone());
        }
    }
}

void restore_optimizer_state(const persistence::TensorTable& table, torch::optim::Adam& opt, const std::string& prefix) {
    std::map<std::string, const torch::Tensor*> lookup;
    for (const auto& [name, t] : table) lookup[name] = &t;
    auto& state = opt.state();
    std::size_t i = 0;
    for (auto& group : opt.param_groups()) {
        for (auto& p : group.params()) {
            const auto key = prefix + std::to_string(i++);
            auto step = lookup.find(key + ".step");
            if (step == lookup.end()) continue;
            auto s = std::make_unique<torch::optim::AdamParamState>();
            s->step(static_cast<std::int64_t>(step->second->item<float>()));
            s->exp_avg(lookup.at(key + ".exp_avg")->clone().to(p.scalar_type()));
            s->exp_avg_sq(lookup.at(key + ".exp_avg_sq")->clone().to(p.scalar_type()));
            state[p.unsafeGetTensorImpl()] = std::move(s);
        }
    }
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void GenTrainConfig::validate() const {
    if (lambda < 0.0) throw Error("lambda must be >= 0");
    if (!(learning_rate > 0.0) || !(wae_learning_rate > 0.0)) throw Error("learning rates must be positive");
    if (batch_size < 2) throw Error("batch_size must be >= 2");
    if (epochs < 0 || wae_epochs < 0) throw Error("epochs must be >= 0");
    if (!(mmd_scale > 0.0)) throw Error("mmd_scale must be positive");
    if (holdout_every < 2) throw Error("holdout_every must be >= 2");
}

std::string GenTrainConfig::hash() const {
    const auto text = nlohmann::json(*this).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex << h;
    return out.str();
}

nlohmann::json TrainReport::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) {
        nlohmann::json row{{"epoch", e.epoch},
                           {"loss_autoencoder", e.loss_autoencoder},
                           {"loss_discriminator", e.loss_discriminator},
                           {"loss_adversarial", e.loss_adversarial},
                           {"loss_wae", e.loss_wae},
                           {"reconstruction_mse", e.reconstruction_mse},
                           {"wall_seconds", e.wall_seconds}};
        row["probe_accuracy"] = e.probe_accuracy ? nlohmann::json(*e.probe_accuracy) : nlohmann::json(nullptr);
        j["epochs"].push_back(std::move(row));
    }
    return j;
}

DataSplit split_by_episode(const RolloutDataset& data, int holdout_every) {
    DataSplit split;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const bool held = data.records[i].episode % static_cast<std::uint32_t>(holdout_every) == 0;
        (held ? split.test : split.train).push_back(static_cast<std::int64_t>(i));
    }
    if (split.train.empty()) std::swap(split.train, split.test);
    return split;
}

torch::Tensor agent_latents(agent::AgentNet& net, const torch::Tensor& observations) {
    torch::NoGradGuard guard;
    net->eval();
    return net->latent(observations);
}

GenTrainer::GenTrainer(genmodel::GenModel model, const GenTrainConfig& cfg)
    : model_(std::move(model)),
      cfg_(cfg),
      opt_d_(model_->discriminator->parameters(),
             torch::optim::AdamOptions(cfg.learning_rate).betas({cfg.beta1, cfg.beta2})),
      opt_eg_(params_of({model_->encoder.get(), model_->generator.get()}),
              torch::optim::AdamOptions(cfg.learning_rate).betas({cfg.beta1, cfg.beta2})),
      opt_w_(params_of({model_->wae_encoder.get(), model_->wae_decoder.get()}),
             torch::optim::AdamOptions(cfg.wae_learning_rate)) {}

double GenTrainer::step_discriminator(const genmodel::LossBatch& batch) {
    const auto kind = cfg_.discriminator_kl ? genmodel::DiscriminatorLoss::Kl : genmodel::DiscriminatorLoss::Mse;
    opt_d_.zero_grad();
    auto loss = genmodel::discriminator_objective(model_, batch, kind);
    loss.backward();
    opt_d_.step();
    return loss.item<double>();
}

std::pair<double, double> GenTrainer::step_encoder_generator(const genmodel::LossBatch& batch) {
    opt_eg_.zero_grad();
    auto terms = genmodel::encoder_generator_objective(model_, batch, cfg_.lambda);
    terms.total().backward();
    // D is frozen inside the objective, but clear anything that leaked so the
    // next D step starts clean.
    opt_d_.zero_grad();
    opt_eg_.step();
    return {terms.autoencoder.item<double>(), terms.adversarial.item<double>()};
}

double GenTrainer::step_wae(const genmodel::LossBatch& batch) {
    opt_w_.zero_grad();
    auto loss = genmodel::wae_objective(model_, batch, cfg_.mmd_scale);
    loss.backward();
    opt_w_.step();
    return loss.item<double>();
}

void GenTrainer::save(const std::filesystem::path& path, int epoch) {
    auto table = persistence::module_state(*model_);
    append_optimizer_state(table, opt_d_, "optim0.");
    append_optimizer_state(table, opt_eg_, "optim1.");
    append_optimizer_state(table, opt_w_, "optim2.");
    table.emplace_back("meta.epoch", torch::tensor({static_cast<float>(epoch)}));
    persistence::save_checkpoint(path, table);
}

int GenTrainer::load(const std::filesystem::path& path) {
    const auto table = persistence::load_checkpoint(path);
    persistence::load_module_state(*model_, table);
    restore_optimizer_state(table, opt_d_, "optim0.");
    restore_optimizer_state(table, opt_eg_, "optim1.");
    restore_optimizer_state(table, opt_w_, "optim2.");
    return static_cast<int>(persistence::find_tensor(table, "meta.epoch").item<float>());
}

TrainResult train_models(const RolloutDataset& data, agent::AgentNet& net, const GenTrainConfig& cfg,
                         const TrainOptions& options) {
    cfg.validate();
    if (data.empty()) throw Error("train_models: dataset is empty");
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    torch::manual_seed(cfg.seed);
    GenTrainer trainer(genmodel::GenModel(genmodel::GenModelConfig{data.height, data.width}), cfg);
    TrainResult result;
    result.model = trainer.model();
    auto& model = result.model;
    result.report.seed = cfg.seed;
    result.report.config_hash = cfg.hash();

    int start_epoch = 0;
    if (options.resume_from) {
        start_epoch = trainer.load(*options.resume_from);
        log("resumed at epoch " + std::to_string(start_epoch));
    }

    const auto split = split_by_episode(data, cfg.holdout_every);
    std::vector<std::int64_t> eval_idx(
        split.test.begin(),
        split.test.begin() + static_cast<std::ptrdiff_t>(std::min(split.test.size(), cfg.eval_records)));
    if (eval_idx.empty()) {
        eval_idx.assign(split.train.begin(),
                        split.train.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(64, split.train.size())));
    }
    std::optional<std::filesystem::path> last_checkpoint;
    if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    const auto run_start = std::chrono::steady_clock::now();
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) break;
        const auto epoch_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
        torch::manual_seed(epoch_seed);
        std::mt19937_64 rng(epoch_seed);
        auto order = split.train;
        std::shuffle(order.begin(), order.end(), rng);

        std::vector<double> ld, lae, ladv, lw;
        model->train();
        for (std::size_t start = 0; start + 2 <= order.size(); start += bs) {
            const std::span<const std::int64_t> idx(order.data() + start, std::min(bs, order.size() - start));
            genmodel::LossBatch batch{data.observations(idx), data.policies(idx), {}};
            batch.latents = agent_latents(net, batch.observations);

            const double d = trainer.step_discriminator(batch);
            const auto [ae, adv] = trainer.step_encoder_generator(batch);
            const double w = cfg.wae_separate ? 0.0 : trainer.step_wae(batch);

            if (!std::isfinite(d) || !std::isfinite(ae) || !std::isfinite(adv) || !std::isfinite(w)) {
                std::ostringstream msg;
                msg << "non-finite loss in epoch " << epoch + 1 << " (D " << d << ", AE " << ae << ", adv " << adv
                    << ", WAE " << w << ")";
                if (last_checkpoint) msg << "; last good checkpoint: " << last_checkpoint->string();
                throw Error(msg.str());
            }
            ld.push_back(d);
            lae.push_back(ae);
            ladv.push_back(adv);
            lw.push_back(w);
            result.report.loss_trace.insert(result.report.loss_trace.end(), {d, ae + adv, w});
        }

        EpochReport rep;
        rep.epoch = epoch + 1;
        rep.loss_discriminator = mean_of(ld);
        rep.loss_autoencoder = mean_of(lae);
        rep.loss_adversarial = mean_of(ladv);
        rep.loss_wae = mean_of(lw);
        rep.reconstruction_mse = eval_reconstruction(model, data, eval_idx);
        const bool last = epoch + 1 == cfg.epochs;
        if ((cfg.probe_every > 0 && (epoch + 1) % cfg.probe_every == 0) || (cfg.probe_every == 0 && last)) {
            rep.probe_accuracy = probe_invariance(model, data).accuracy;
        }
        model->train();
        rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
        result.report.epochs.push_back(rep);
        if (options.on_epoch) options.on_epoch(rep);

        if (options.checkpoint_dir && ((epoch + 1) % std::max(1, cfg.checkpoint_every) == 0 || last)) {
            char name[64];
            std::snprintf(name, sizeof name, "gen_epoch_%03d.ckpt", epoch + 1);
            last_checkpoint = *options.checkpoint_dir / name;
            trainer.save(*last_checkpoint, epoch + 1);
        }
    }

    if (cfg.wae_separate) {
        const auto wae_seed = mix_seed(cfg.seed, 0xAEULL);
        torch::manual_seed(wae_seed);
        std::mt19937_64 rng(wae_seed);
        model->train();
        for (int epoch = 0; epoch < cfg.wae_epochs; ++epoch) {
            auto order = split.train;
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t start = 0; start + 2 <= order.size(); start += bs) {
                const std::span<const std::int64_t> idx(order.data() + start, std::min(bs, order.size() - start));
                genmodel::LossBatch batch{data.observations(idx), {}, {}};
                batch.latents = agent_latents(net, batch.observations);
                const double w = trainer.step_wae(batch);
                if (!std::isfinite(w)) throw Error("non-finite WAE loss in separate phase");
                result.report.loss_trace.push_back(w);
            }
        }
    }
    model->eval();
    return result;
}

torch::Tensor encode_records(genmodel::GenModel& model, const RolloutDataset& data,
                             std::span<const std::int64_t> indices) {
    torch::NoGradGuard guard;
    model->eval();
    std::vector<torch::Tensor> parts;
    for_chunks(indices, kEvalChunk, [&](std::span<const std::int64_t> idx) {
        parts.push_back(model->encoder->forward(data.observations(idx)));
    });
    if (parts.empty()) return torch::empty({0, kEncodedDim});
    return torch::cat(parts, 0);
}

double eval_reconstruction(genmodel::GenModel& model, const RolloutDataset& data,
                           std::span<const std::int64_t> indices) {
    if (indices.empty()) throw Error("eval_reconstruction: empty evaluation set");
    torch::NoGradGuard guard;
    model->eval();
    double total = 0.0;
    for_chunks(indices, kEvalChunk, [&](std::span<const std::int64_t> idx) {
        auto obs = data.observations(idx);
        auto recon = model->reconstruct(model->encoder->forward(obs), data.policies(idx));
        total += genmodel::autoencoder_loss(recon, obs).item<double>() * static_cast<double>(idx.size());
    });
    return total / static_cast<double>(indices.size()) / static_cast<double>(data.observation_size());
}

double conditioning_change(genmodel::GenModel& model, const RolloutDataset& data,
                           std::span<const std::int64_t> indices) {
    if (indices.empty()) throw Error("conditioning_change: empty evaluation set");
    torch::NoGradGuard guard;
    model->eval();
    double total = 0.0;
    std::size_t count = 0;
    for_chunks(indices, kEvalChunk, [&](std::span<const std::int64_t> idx) {
        auto obs = data.observations(idx);
        auto pi = data.policies(idx);
        auto encoded = model->encoder->forward(obs);
        auto base = model->reconstruct(encoded, pi);
        auto greedy = pi.argmax(1);
        for (int b = 0; b < kNumActions; ++b) {
            auto onehot = torch::zeros_like(pi);
            onehot.index_put_({torch::indexing::Slice(), b}, 1.0);
            auto diff = (model->reconstruct(encoded, onehot) - base).abs().flatten(1).mean(1);
            auto keep = greedy.ne(b);
            total += diff.masked_select(keep).sum().item<double>();
            count += static_cast<std::size_t>(keep.sum().item<std::int64_t>());
        }
    });
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

ProbeResult probe_split(const torch::Tensor& features, std::span<const int> labels,
                        std::span<const std::int64_t> train, std::span<const std::int64_t> test,
                        const ProbeConfig& cfg) {
    if (train.empty() || test.empty()) throw Error("probe needs non-empty train and test splits");
    std::vector<int> train_counts(kNumActions, 0), test_counts(kNumActions, 0);
    for (auto i : train) ++train_counts.at(static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]));
    for (auto i : test) ++test_counts.at(static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]));
    for (int a = 0; a < kNumActions; ++a) {
        if (test_counts[static_cast<std::size_t>(a)] > 0 && train_counts[static_cast<std::size_t>(a)] == 0) {
            throw Error("insufficient class coverage");
        }
    }

    auto to_index = [](std::span<const std::int64_t> s) {
        return torch::tensor(std::vector<std::int64_t>(s.begin(), s.end()), torch::kInt64);
    };
    auto all_labels = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()), torch::kInt64);
    auto x = features.to(torch::kFloat32);
    auto x_train = x.index_select(0, to_index(train));
    auto x_test = x.index_select(0, to_index(test));
    auto y_train = all_labels.index_select(0, to_index(train));
    auto y_test = all_labels.index_select(0, to_index(test));
    auto mean = x_train.mean(0, true);
    auto stddev = x_train.std(0, true, true).clamp_min(1e-6);
    x_train = (x_train - mean) / stddev;
    x_test = (x_test - mean) / stddev;

    torch::manual_seed(cfg.seed);
    torch::nn::Sequential probe(torch::nn::Linear(x.size(1), cfg.hidden), torch::nn::ReLU(),
                                torch::nn::Linear(cfg.hidden, kNumActions));
    torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(x_train.size(0)));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
            const auto len = std::min(order.size() - s, static_cast<std::size_t>(cfg.batch_size));
            auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<std::ptrdiff_t>(s),
                                                               order.begin() + static_cast<std::ptrdiff_t>(s + len)),
                                     torch::kInt64);
            opt.zero_grad();
            auto loss = torch::nn::functional::cross_entropy(probe->forward(x_train.index_select(0, idx)),
                                                             y_train.index_select(0, idx));
            loss.backward();
            opt.step();
        }
    }

    torch::NoGradGuard guard;
    ProbeResult result;
    result.accuracy = probe->forward(x_test).argmax(1).eq(y_test).to(torch::kFloat64).mean().item<double>();
    result.chance = static_cast<double>(*std::max_element(test_counts.begin(), test_counts.end())) /
                    static_cast<double>(test.size());
    result.train_size = train.size();
    result.test_size = test.size();
    return result;
}

ProbeResult probe_features(const torch::Tensor& features, std::span<const int> labels, const ProbeConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::vector<std::int64_t>> by_class(kNumActions);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(static_cast<std::int64_t>(i));
    std::vector<std::int64_t> train, test;
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_train = static_cast<std::size_t>(std::ceil(cfg.train_fraction * static_cast<double>(members.size())));
        train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        test.insert(test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    return probe_split(features, labels, train, test, cfg);
}

ProbeResult probe_invariance(genmodel::GenModel& model, const RolloutDataset& data, const ProbeConfig& cfg) {
    std::vector<std::int64_t> indices(data.size());
    std::iota(indices.begin(), indices.end(), 0);
    if (indices.size() > cfg.max_records) {
        std::mt19937_64 rng(cfg.seed);
        std::shuffle(indices.begin(), indices.end(), rng);
        indices.resize(cfg.max_records);
        std::sort(indices.begin(), indices.end());
    }
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (auto i : indices) {
        const auto& pi = data.records[static_cast<std::size_t>(i)].pi;
        labels.push_back(static_cast<int>(argmax(pi)));
    }
    return probe_features(encode_records(model, data, indices), labels, cfg);
}

}  // namespace cfstates::training
