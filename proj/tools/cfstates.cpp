// cfstates: command-line entry points for every stage of the pipeline.

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cfstates/agent.hpp"
#include "cfstates/api.hpp"
#include "cfstates/baselines.hpp"
#include "cfstates/config.hpp"
#include "cfstates/counterfactual.hpp"
#include "cfstates/persistence.hpp"
#include "cfstates/training.hpp"

using namespace cfstates;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Shared flags: every subcommand accepts --seed and --config.
struct Common {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    json config;

    void attach(CLI::App* cmd) {
        cmd->add_option("--seed", seed, "RNG seed");
        cmd->add_option("--config", config_path, "JSON file with config overrides per section")
            ->check(CLI::ExistingFile);
    }

    void load() {
        if (config_path.empty()) return;
        std::ifstream in(config_path);
        try {
            config = json::parse(in);
        } catch (const json::exception& e) {
            throw Error("cannot parse " + config_path + ": " + e.what());
        }
        if (!config.is_object()) throw Error(config_path + " must hold a JSON object");
        static const std::set<std::string> sections{"env", "agent", "train", "probe", "cf", "ablation"};
        for (const auto& [key, _] : config.items()) {
            if (!sections.count(key)) throw Error("unknown config section '" + key + "'");
        }
    }

    template <typename T>
    T section(const std::string& name) const {
        T cfg{};
        if (config.contains(name)) apply_overrides(cfg, config[name]);
        return cfg;
    }
};

void print_json(const json& j) { std::cout << j.dump() << std::endl; }

json scores_json(const agent::ScoreStats& s) {
    return {{"mean", s.mean}, {"stddev", s.stddev}, {"episodes", s.scores.size()}};
}

agent::AgentNet load_agent(const fs::path& path, const env::EnvConfig& env_cfg) {
    agent::AgentNet net(env_cfg.height, env_cfg.width);
    persistence::load_module_state(*net, persistence::load_checkpoint(path));
    net->eval();
    return net;
}

env::Frame frame_of(const env::Observation& obs) { return obs.current_frame(); }

json policy_json(const PolicyVector& pi) { return std::vector<float>(pi.begin(), pi.end()); }

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Counterfactual state toolkit"};
    app.require_subcommand(1);

    // ---- env-play ----------------------------------------------------------
    Common play_c;
    auto* play = app.add_subcommand("env-play", "Play one episode and optionally dump frames");
    play_c.attach(play);
    std::string play_policy = "random", play_agent, play_out;
    play->add_option("--policy", play_policy, "random | greedy")->check(CLI::IsMember({"random", "greedy"}));
    play->add_option("--agent", play_agent, "Agent checkpoint (greedy policy)");
    play->add_option("--out", play_out, "Directory for frame PNGs");

    // ---- agent-train -------------------------------------------------------
    Common at_c;
    auto* agent_train = app.add_subcommand("agent-train", "Train the actor-critic agent");
    at_c.attach(agent_train);
    std::string at_out;
    std::optional<std::int64_t> at_steps;
    std::optional<double> at_lr;
    agent_train->add_option("--out", at_out, "Checkpoint path")->required();
    agent_train->add_option("--steps", at_steps, "Total environment steps");
    agent_train->add_option("--lr", at_lr, "Learning rate");

    // ---- collect -----------------------------------------------------------
    Common col_c;
    auto* collect = app.add_subcommand("collect", "Collect an epsilon-greedy rollout dataset");
    col_c.attach(collect);
    std::string col_agent, col_out;
    std::size_t col_count = 200000;
    double col_eps = 0.2;
    collect->add_option("--agent", col_agent)->required()->check(CLI::ExistingFile);
    collect->add_option("--out", col_out)->required();
    collect->add_option("--count", col_count, "Number of records");
    collect->add_option("--epsilon", col_eps)->check(CLI::Range(0.0, 1.0));

    // ---- replay-record -----------------------------------------------------
    Common rr_c;
    auto* replay_record = app.add_subcommand("replay-record", "Record a greedy replay");
    rr_c.attach(replay_record);
    std::string rr_agent, rr_out;
    replay_record->add_option("--agent", rr_agent)->required()->check(CLI::ExistingFile);
    replay_record->add_option("--out", rr_out)->required();

    // ---- model-train -------------------------------------------------------
    Common mt_c;
    auto* model_train = app.add_subcommand("model-train", "Train E, G, D and the Wasserstein autoencoder");
    mt_c.attach(model_train);
    std::string mt_dataset, mt_agent, mt_out, mt_resume, mt_report;
    std::optional<double> mt_lambda;
    std::optional<int> mt_epochs;
    bool mt_wae_separate = false;
    model_train->add_option("--dataset", mt_dataset)->required()->check(CLI::ExistingFile);
    model_train->add_option("--agent", mt_agent)->required()->check(CLI::ExistingFile);
    model_train->add_option("--out", mt_out, "Final model checkpoint")->required();
    model_train->add_option("--checkpoint-dir", mt_resume, "Directory for per-epoch checkpoints");
    std::string mt_resume_from;
    model_train->add_option("--resume", mt_resume_from, "Resume from a training checkpoint")->check(CLI::ExistingFile);
    model_train->add_option("--report", mt_report, "Write the final TrainReport JSON here");
    model_train->add_option("--lambda", mt_lambda);
    model_train->add_option("--epochs", mt_epochs);
    model_train->add_flag("--wae-separate", mt_wae_separate, "Train the WAE in its own phase after E/G/D");

    // ---- cf-generate -------------------------------------------------------
    Common cf_c;
    auto* cf_generate = app.add_subcommand("cf-generate", "Generate a counterfactual state for a replay step");
    cf_c.attach(cf_generate);
    std::string cf_agent, cf_model, cf_replay, cf_action = "auto", cf_out;
    std::size_t cf_t = 0;
    cf_generate->add_option("--agent", cf_agent)->required()->check(CLI::ExistingFile);
    cf_generate->add_option("--model", cf_model)->required()->check(CLI::ExistingFile);
    cf_generate->add_option("--replay", cf_replay)->required()->check(CLI::ExistingFile);
    cf_generate->add_option("--t", cf_t)->required();
    cf_generate->add_option("--action", cf_action, "Action id, name, or auto");
    cf_generate->add_option("--out", cf_out)->required();

    // ---- ablate ------------------------------------------------------------
    Common ab_c;
    auto* ablate = app.add_subcommand("ablate", "Train an ablation configuration and optionally generate with it");
    ab_c.attach(ablate);
    int ab_id = 3;
    std::string ab_dataset, ab_agent, ab_model, ab_out, ab_replay, ab_action, ab_out_dir;
    std::size_t ab_t = 0;
    ablate->add_option("--config-id", ab_id)->required()->check(CLI::Range(1, 10));
    ablate->add_option("--agent", ab_agent)->required()->check(CLI::ExistingFile);
    ablate->add_option("--model", ab_model, "Full model (supplies the Wasserstein autoencoder)")
        ->required()
        ->check(CLI::ExistingFile);
    ablate->add_option("--dataset", ab_dataset, "Train on this dataset")->check(CLI::ExistingFile);
    ablate->add_option("--out", ab_out, "Ablation checkpoint (written after training, read otherwise)")->required();
    ablate->add_option("--replay", ab_replay)->check(CLI::ExistingFile);
    ablate->add_option("--t", ab_t);
    ablate->add_option("--action", ab_action);
    ablate->add_option("--out-dir", ab_out_dir);

    // ---- nn-baseline -------------------------------------------------------
    Common nn_c;
    auto* nn_baseline = app.add_subcommand("nn-baseline", "Nearest-neighbour counterfactual baseline");
    nn_c.attach(nn_baseline);
    std::string nn_dataset, nn_agent, nn_replay, nn_action, nn_out;
    std::size_t nn_t = 0, nn_max = 100000;
    nn_baseline->add_option("--dataset", nn_dataset)->required()->check(CLI::ExistingFile);
    nn_baseline->add_option("--agent", nn_agent)->required()->check(CLI::ExistingFile);
    nn_baseline->add_option("--replay", nn_replay)->required()->check(CLI::ExistingFile);
    nn_baseline->add_option("--t", nn_t)->required();
    nn_baseline->add_option("--action", nn_action)->required();
    nn_baseline->add_option("--max-records", nn_max);
    nn_baseline->add_option("--out", nn_out);

    // ---- evaluate ----------------------------------------------------------
    Common ev_c;
    auto* evaluate = app.add_subcommand("evaluate", "Score the agent, a random policy and the WAE-filtered agent");
    ev_c.attach(evaluate);
    std::string ev_agent, ev_model;
    int ev_episodes = 50;
    evaluate->add_option("--agent", ev_agent)->required()->check(CLI::ExistingFile);
    evaluate->add_option("--model", ev_model, "Also score argmax pi(D_w(E_w(A(s))))")->check(CLI::ExistingFile);
    evaluate->add_option("--episodes", ev_episodes)->check(CLI::PositiveNumber);

    // ---- serve -------------------------------------------------------------
    Common sv_c;
    auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
    sv_c.attach(serve);
    std::string sv_dir, sv_host = "127.0.0.1";
    std::optional<int> sv_port;
    int sv_workers = 2;
    serve->add_option("--model-dir", sv_dir, "Defaults to $CFSTATES_MODEL_DIR or ./models");
    serve->add_option("--host", sv_host);
    serve->add_option("--port", sv_port, "Defaults to $CFSTATES_PORT or 8787");
    serve->add_option("--workers", sv_workers)->check(CLI::Range(1, 64));

    CLI11_PARSE(app, argc, argv);

    try {
        if (play->parsed()) {
            play_c.load();
            auto env_cfg = play_c.section<env::EnvConfig>("env");
            const auto seed = play_c.seed.value_or(1);
            agent::PolicyFn policy;
            std::optional<agent::AgentNet> net;
            if (play_policy == "greedy") {
                if (play_agent.empty()) throw Error("--policy greedy needs --agent");
                net = load_agent(play_agent, env_cfg);
                policy = agent::greedy_policy(*net);
            } else {
                policy = agent::uniform_random_policy(seed);
            }
            auto r = env::reset(seed, env_cfg);
            auto state = r.state;
            auto obs = r.observation;
            if (!play_out.empty()) fs::create_directories(play_out);
            int t = 0;
            double score = 0.0;
            for (bool done = false; !done; ++t) {
                if (!play_out.empty()) {
                    char name[32];
                    std::snprintf(name, sizeof name, "frame_%05d.png", t);
                    persistence::write_png(fs::path(play_out) / name, obs.current_frame());
                }
                auto s = env::step(state, action_from_id(policy(obs)), env_cfg.frame_skip, env_cfg);
                state = s.state;
                obs = s.observation;
                score += s.reward;
                done = s.done;
            }
            print_json({{"seed", seed}, {"steps", t}, {"score", score}, {"policy", play_policy}});
        } else if (agent_train->parsed()) {
            at_c.load();
            auto env_cfg = at_c.section<env::EnvConfig>("env");
            auto cfg = at_c.section<agent::AgentTrainConfig>("agent");
            if (at_c.seed) cfg.seed = *at_c.seed;
            if (at_steps) cfg.total_steps = *at_steps;
            if (at_lr) cfg.learning_rate = *at_lr;
            auto net = agent::train_agent(env_cfg, cfg, [](const agent::TrainProgress& p) {
                print_json({{"steps", p.steps}, {"episodes", p.episodes}, {"recent_mean_score", p.recent_mean_score},
                            {"loss", p.loss}});
            });
            persistence::save_checkpoint(at_out, persistence::module_state(*net));
        } else if (collect->parsed()) {
            col_c.load();
            auto env_cfg = col_c.section<env::EnvConfig>("env");
            auto net = load_agent(col_agent, env_cfg);
            auto data = agent::collect_dataset(net, env_cfg, col_eps, col_count, col_c.seed.value_or(1));
            persistence::write_dataset(col_out, data);
            print_json({{"records", data.size()}, {"out", col_out}});
        } else if (replay_record->parsed()) {
            rr_c.load();
            auto env_cfg = rr_c.section<env::EnvConfig>("env");
            auto net = load_agent(rr_agent, env_cfg);
            auto replay = agent::record_replay(net, env_cfg, rr_c.seed.value_or(1));
            persistence::write_replay(rr_out, replay);
            print_json({{"length", replay.length()}, {"score", replay.score}, {"seed", replay.seed}});
        } else if (model_train->parsed()) {
            mt_c.load();
            auto env_cfg = mt_c.section<env::EnvConfig>("env");
            auto cfg = mt_c.section<training::GenTrainConfig>("train");
            if (mt_c.seed) cfg.seed = *mt_c.seed;
            if (mt_lambda) cfg.lambda = *mt_lambda;
            if (mt_epochs) cfg.epochs = *mt_epochs;
            if (mt_wae_separate) cfg.wae_separate = true;
            auto net = load_agent(mt_agent, env_cfg);
            const auto data = persistence::read_dataset(mt_dataset);
            training::TrainOptions opts;
            if (!mt_resume.empty()) opts.checkpoint_dir = mt_resume;
            if (!mt_resume_from.empty()) opts.resume_from = mt_resume_from;
            opts.log = [](const std::string& msg) { std::cerr << msg << std::endl; };
            opts.on_epoch = [](const training::EpochReport& e) {
                json row{{"epoch", e.epoch},
                         {"loss_autoencoder", e.loss_autoencoder},
                         {"loss_discriminator", e.loss_discriminator},
                         {"loss_adversarial", e.loss_adversarial},
                         {"loss_wae", e.loss_wae},
                         {"reconstruction_mse", e.reconstruction_mse},
                         {"wall_seconds", e.wall_seconds}};
                if (e.probe_accuracy) row["probe_accuracy"] = *e.probe_accuracy;
                print_json(row);
            };
            auto result = training::train_models(data, net, cfg, opts);
            persistence::save_checkpoint(mt_out, persistence::module_state(*result.model));
            if (!mt_report.empty()) {
                const auto text = result.report.to_json().dump(2);
                persistence::write_file_atomic(mt_report, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                                    text.size()));
            }
        } else if (cf_generate->parsed()) {
            cf_c.load();
            auto env_cfg = cf_c.section<env::EnvConfig>("env");
            auto cfg = cf_c.section<counterfactual::CfConfig>("cf");
            auto models = counterfactual::load_models(cf_agent, cf_model, env_cfg.height, env_cfg.width);
            const auto replay = persistence::read_replay(cf_replay);
            if (cf_t >= replay.length()) throw Error("--t is beyond the replay end");
            const auto obs = replay.observation(cf_t);
            json record;
            int target = 0;
            if (cf_action == "auto") {
                auto choice = counterfactual::select_cf_action(models, obs, cfg);
                target = choice.action;
                for (const auto& [a, run] : choice.table) {
                    record["auto_table"][std::string(action_name(action_from_id(a)))] = {
                        {"success", run.success}, {"distance", run.distance}, {"steps", run.steps}};
                }
            } else {
                target = action_id(parse_action(cf_action));
            }
            const auto r = counterfactual::generate_counterfactual(models, obs, target, cfg);
            fs::create_directories(cf_out);
            const fs::path out(cf_out);
            persistence::write_png(out / "query.png", frame_of(r.query));
            persistence::write_png(out / "reconstruction.png", frame_of(r.reconstruction));
            persistence::write_png(out / "counterfactual.png", frame_of(r.counterfactual));
            persistence::write_png(out / "highlight.png", r.highlight.overlay);
            record["replay"] = cf_replay;
            record["t"] = cf_t;
            record["action"] = {{"id", r.action}, {"name", action_name(action_from_id(r.action))}};
            record["target"] = {{"id", r.target}, {"name", action_name(action_from_id(r.target))}};
            record["pi_agent"] = policy_json(r.pi_agent);
            record["pi_before"] = policy_json(r.pi_before);
            record["pi_after"] = policy_json(r.pi_after);
            record["steps"] = r.steps;
            record["success"] = r.success;
            record["latent_distance"] = r.latent_distance;
            record["objectives"] = r.objectives;
            std::ofstream(out / "result.json") << record.dump(2) << '\n';
            record.erase("objectives");
            print_json(record);
        } else if (ablate->parsed()) {
            ab_c.load();
            auto env_cfg = ab_c.section<env::EnvConfig>("env");
            auto cf_cfg = ab_c.section<counterfactual::CfConfig>("cf");
            auto train_cfg = ab_c.section<baselines::AblationTrainConfig>("ablation");
            if (ab_c.seed) train_cfg.seed = *ab_c.seed;
            auto base = counterfactual::load_models(ab_agent, ab_model, env_cfg.height, env_cfg.width);
            const auto& config = baselines::ablation_config(ab_id);
            baselines::AblationModel model(config, genmodel::GenModelConfig{env_cfg.height, env_cfg.width});
            if (!ab_dataset.empty()) {
                const auto data = persistence::read_dataset(ab_dataset);
                model = baselines::train_ablation(config, data, base, train_cfg, [](int epoch, double loss) {
                    print_json({{"epoch", epoch}, {"loss", loss}});
                });
                persistence::save_checkpoint(ab_out, persistence::module_state(*model));
            } else {
                persistence::load_module_state(*model, persistence::load_checkpoint(ab_out));
                model->eval();
            }
            if (!ab_replay.empty()) {
                if (ab_action.empty() || ab_out_dir.empty()) throw Error("generation needs --action and --out-dir");
                const auto replay = persistence::read_replay(ab_replay);
                if (ab_t >= replay.length()) throw Error("--t is beyond the replay end");
                const auto obs = replay.observation(ab_t);
                const auto r = baselines::ablation_generate(model, base, obs, action_id(parse_action(ab_action)),
                                                            cf_cfg);
                fs::create_directories(ab_out_dir);
                persistence::write_png(fs::path(ab_out_dir) / "query.png", frame_of(obs));
                persistence::write_png(fs::path(ab_out_dir) / "reconstruction.png", frame_of(r.reconstruction));
                persistence::write_png(fs::path(ab_out_dir) / "counterfactual.png", frame_of(r.counterfactual));
                print_json({{"config_id", r.config_id},
                            {"steps", r.steps},
                            {"success", r.success},
                            {"pi_after", policy_json(r.pi_after)}});
            }
        } else if (nn_baseline->parsed()) {
            nn_c.load();
            auto env_cfg = nn_c.section<env::EnvConfig>("env");
            auto net = load_agent(nn_agent, env_cfg);
            const auto data = persistence::read_dataset(nn_dataset);
            const auto index = baselines::build_nn_index(data, net, nn_max);
            const auto replay = persistence::read_replay(nn_replay);
            if (nn_t >= replay.length()) throw Error("--t is beyond the replay end");
            const auto obs = replay.observation(nn_t);
            const auto match = baselines::nn_counterfactual(index, net, obs, action_id(parse_action(nn_action)));
            if (!nn_out.empty()) {
                fs::create_directories(nn_out);
                persistence::write_png(fs::path(nn_out) / "query.png", frame_of(obs));
                persistence::write_png(fs::path(nn_out) / "nearest.png",
                                       frame_of(data.observation(static_cast<std::size_t>(match.record))));
            }
            print_json({{"record", match.record}, {"distance", match.distance}});
        } else if (evaluate->parsed()) {
            ev_c.load();
            auto env_cfg = ev_c.section<env::EnvConfig>("env");
            const auto seed = ev_c.seed.value_or(1000000);
            auto net = load_agent(ev_agent, env_cfg);
            json out;
            const auto greedy = agent::evaluate_policy(env_cfg, agent::greedy_policy(net), ev_episodes, seed);
            const auto random = agent::evaluate_policy(env_cfg, agent::uniform_random_policy(seed), ev_episodes, seed);
            out["agent"] = scores_json(greedy);
            out["random"] = scores_json(random);
            if (!ev_model.empty()) {
                auto models = counterfactual::load_models(ev_agent, ev_model, env_cfg.height, env_cfg.width);
                const auto wae = agent::evaluate_policy(env_cfg, counterfactual::wae_policy(models), ev_episodes, seed);
                out["wae_agent"] = scores_json(wae);
            }
            print_json(out);
        } else if (serve->parsed()) {
            sv_c.load();
            api::ServiceConfig cfg;
            cfg.model_dir = sv_dir.empty() ? api::model_dir_from_env("models") : fs::path(sv_dir);
            cfg.cf = sv_c.section<counterfactual::CfConfig>("cf");
            cfg.workers = sv_workers;
            const int port = sv_port.value_or(api::port_from_env());
            api::Service service(cfg);
            std::thread loader([&] {
                try {
                    service.load();
                    std::cerr << "models loaded from " << cfg.model_dir << std::endl;
                } catch (const std::exception& e) {
                    std::cerr << "error: loading models failed: " << e.what() << std::endl;
                }
            });
            loader.detach();
            std::cerr << "listening on " << sv_host << ":" << port << std::endl;
            api::serve(service, sv_host, port);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
