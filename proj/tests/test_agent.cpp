#include "catch_torch.hpp"

#include <cmath>
#include <random>

#include "cfstates/agent.hpp"
#include "cfstates/distribution.hpp"

using namespace cfstates;
using namespace cfstates::agent;
using Catch::Matchers::WithinAbs;

namespace {

// Direct sum over future TD errors, cut at episode ends.
double gae_oracle(const std::vector<double>& r, const std::vector<double>& v, const std::vector<int>& done,
                  std::size_t t, double gamma, double lambda) {
    double total = 0.0;
    double weight = 1.0;
    for (std::size_t k = t; k < r.size(); ++k) {
        const double live = done[k] ? 0.0 : 1.0;
        total += weight * (r[k] + gamma * v[k + 1] * live - v[k]);
        if (done[k]) break;
        weight *= gamma * lambda;
    }
    return total;
}

}  // namespace

TEST_CASE("GAE with gamma = lambda = 1 gives return minus value") {
    torch::manual_seed(0);
    const int T = 7, E = 3;
    auto rewards = torch::randn({T, E}, torch::kFloat64);
    auto values = torch::randn({T + 1, E}, torch::kFloat64);
    auto dones = torch::zeros({T, E}, torch::kFloat64);
    auto est = compute_gae(rewards, values, dones, 1.0, 1.0);
    for (int e = 0; e < E; ++e) {
        for (int t = 0; t < T; ++t) {
            double ret = values[T][e].item<double>();
            for (int k = t; k < T; ++k) ret += rewards[k][e].item<double>();
            CHECK_THAT(est.returns[t][e].item<double>(), WithinAbs(ret, 1e-10));
            CHECK_THAT(est.advantages[t][e].item<double>(), WithinAbs(ret - values[t][e].item<double>(), 1e-10));
        }
    }
}

TEST_CASE("GAE matches a direct sum with episode ends") {
    std::mt19937 rng(3);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 20; ++trial) {
        const int T = 1 + static_cast<int>(rng() % 9);
        const double gamma = 0.5 + 0.5 * (rng() % 100) / 100.0;
        const double lambda = (rng() % 101) / 100.0;
        std::vector<double> r(T), v(T + 1);
        std::vector<int> d(T);
        for (auto& x : r) x = n(rng);
        for (auto& x : v) x = n(rng);
        for (auto& x : d) x = rng() % 4 == 0;
        auto rt = torch::tensor(r, torch::kFloat64).view({T, 1});
        auto vt = torch::tensor(v, torch::kFloat64).view({T + 1, 1});
        auto dt = torch::tensor(std::vector<double>(d.begin(), d.end()), torch::kFloat64).view({T, 1});
        auto est = compute_gae(rt, vt, dt, gamma, lambda);
        for (int t = 0; t < T; ++t) {
            CHECK_THAT(est.advantages[t][0].item<double>(), WithinAbs(gae_oracle(r, v, d, t, gamma, lambda), 1e-10));
        }
    }
}

TEST_CASE("actor-critic loss terms and gradients") {
    torch::manual_seed(1);
    // Toy 4-dim -> 2-action network, in double.
    auto w = torch::randn({2, 4}, torch::kFloat64);
    auto u = torch::randn({4}, torch::kFloat64);
    auto x = torch::randn({5, 4}, torch::kFloat64);
    auto actions = torch::tensor(std::vector<std::int64_t>{0, 1, 1, 0, 1});
    auto adv = torch::randn({5}, torch::kFloat64);
    auto ret = torch::randn({5}, torch::kFloat64);

    auto loss_of = [&](const torch::Tensor& weights) {
        auto logits = x.matmul(weights.t());
        return actor_critic_loss(logits, x.matmul(u), actions, adv, ret, 0.01, 0.5);
    };

    // Term values against a hand computation.
    const auto l = loss_of(w);
    auto logits = x.matmul(w.t());
    double policy = 0.0, ent = 0.0, value = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double a = logits[i][0].item<double>(), b = logits[i][1].item<double>();
        const double m = std::max(a, b);
        const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        const double lp[2] = {a - lse, b - lse};
        policy -= lp[actions[i].item<std::int64_t>()] * adv[i].item<double>();
        ent -= std::exp(lp[0]) * lp[0] + std::exp(lp[1]) * lp[1];
        const double dv = ret[i].item<double>() - x[i].dot(u).item<double>();
        value += 0.5 * dv * dv;
    }
    policy /= 5;
    ent /= 5;
    value /= 5;
    CHECK_THAT(l.policy.item<double>(), WithinAbs(policy, 1e-12));
    CHECK_THAT(l.entropy.item<double>(), WithinAbs(ent, 1e-12));
    CHECK_THAT(l.value.item<double>(), WithinAbs(value, 1e-12));
    CHECK_THAT(l.total.item<double>(), WithinAbs(policy + 0.5 * value - 0.01 * ent, 1e-12));

    // Finite-difference check on the policy weights.
    auto var = w.clone().requires_grad_(true);
    auto grad = torch::autograd::grad({loss_of(var).total}, {var})[0];
    const double h = 1e-6;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 4; ++j) {
            auto p = w.clone(), m = w.clone();
            p[i][j] += h;
            m[i][j] -= h;
            const double fd = (loss_of(p).total.item<double>() - loss_of(m).total.item<double>()) / (2 * h);
            CHECK_THAT(grad[i][j].item<double>(), WithinAbs(fd, 1e-7));
        }
    }
}

TEST_CASE("pi is a distribution and the decomposition matches the full pass") {
    torch::manual_seed(2);
    AgentNet net;
    net->eval();
    auto obs = env::reset(4).observation;
    const auto z = a_of_s(net, obs);
    CHECK(z.numel() == kAgentLatentDim);
    const auto pi = pi_of_z(net, z);
    double sum = 0.0;
    for (float p : pi) {
        CHECK(p >= 0.0F);
        sum += p;
    }
    CHECK_THAT(sum, WithinAbs(1.0, 1e-5));

    torch::NoGradGuard guard;
    auto full = net->forward(observation_tensor(obs));
    auto split = torch::softmax(full.logits, -1).view({-1});
    for (int a = 0; a < kNumActions; ++a) CHECK_THAT(split[a].item<double>(), WithinAbs(pi[a], 1e-6));
    CHECK_THROWS_AS(net->latent(torch::zeros({1, 12, 32, 32})), Error);
}

TEST_CASE("zero training steps returns the seeded initialisation") {
    AgentTrainConfig cfg;
    cfg.total_steps = 0;
    auto a = train_agent(env::EnvConfig{}, cfg);
    auto b = train_agent(env::EnvConfig{}, cfg);
    auto pa = a->parameters();
    auto pb = b->parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));

    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(train_agent(env::EnvConfig{}, cfg), Error);
}

TEST_CASE("a short training run is deterministic and finite") {
    AgentTrainConfig cfg;
    cfg.total_steps = 200;
    cfg.num_envs = 2;
    int reports = 0;
    auto a = train_agent(env::EnvConfig{}, cfg, [&](const TrainProgress&) { ++reports; });
    auto b = train_agent(env::EnvConfig{}, cfg);
    auto pa = a->parameters();
    auto pb = b->parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(torch::equal(pa[i], pb[i]));
        CHECK(torch::isfinite(pa[i]).all().item<bool>());
    }
    CHECK(reports == 0);  // progress fires every 10k steps
}

TEST_CASE("epsilon = 1 picks actions uniformly (chi-square)") {
    torch::manual_seed(3);
    AgentNet net;
    net->eval();
    const std::size_t n = 10000;
    const auto data = collect_dataset(net, env::EnvConfig{}, 1.0, n, 77);
    REQUIRE(data.size() == n);
    std::array<double, kNumActions> counts{};
    for (const auto& r : data.records) counts[r.action] += 1.0;
    double chi2 = 0.0;
    const double expected = static_cast<double>(n) / kNumActions;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 5 degrees of freedom, p = 0.001.
    CHECK(chi2 < 20.515);
}

TEST_CASE("epsilon = 0 executes argmax pi and records consistent metadata") {
    torch::manual_seed(4);
    AgentNet net;
    net->eval();
    const auto data = collect_dataset(net, env::EnvConfig{}, 0.0, 300, 5);
    REQUIRE(data.size() == 300);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& r = data.records[i];
        CHECK(r.action == argmax(std::span<const float>(r.pi)));
        double sum = 0.0;
        for (float p : r.pi) sum += p;
        CHECK_THAT(sum, WithinAbs(1.0, 1e-5));
        if (i > 0 && r.episode == data.records[i - 1].episode) CHECK(r.step == data.records[i - 1].step + 1);
        if (i > 0 && r.episode != data.records[i - 1].episode) CHECK(r.step == 0);
    }
    CHECK(data.records.front().step == 0);
    CHECK_THROWS_AS(collect_dataset(net, env::EnvConfig{}, 1.5, 10, 5), Error);
}

TEST_CASE("replay entropies lie in [0, ln 6] and match the stored policies") {
    torch::manual_seed(5);
    AgentNet net;
    net->eval();
    const auto replay = record_replay(net, env::EnvConfig{}, 9);
    REQUIRE(replay.length() > 0);
    replay.validate();
    for (std::size_t t = 0; t < replay.length(); ++t) {
        CHECK(replay.entropies[t] >= 0.0F);
        CHECK(replay.entropies[t] <= std::log(6.0F) + 1e-5F);
        CHECK_THAT(replay.entropies[t], WithinAbs(entropy(std::span<const float>(replay.policies[t])), 1e-5));
        CHECK(replay.actions[t] == argmax(std::span<const float>(replay.policies[t])));
    }
}

TEST_CASE("score summary statistics") {
    const auto s = summarize({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == 2.5);
    CHECK_THAT(s.stddev, WithinAbs(std::sqrt(1.25), 1e-12));
    CHECK(summarize({}).mean == 0.0);

    auto p1 = uniform_random_policy(3);
    auto p2 = uniform_random_policy(3);
    env::Observation obs(64, 64);
    for (int i = 0; i < 50; ++i) CHECK(p1(obs) == p2(obs));
}
