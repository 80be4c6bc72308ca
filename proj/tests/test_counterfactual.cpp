#include "catch_torch.hpp"

#include <cmath>
#include <random>
#include <thread>

#include "cfstates/counterfactual.hpp"
#include "cfstates/distribution.hpp"

using namespace cfstates;
using namespace cfstates::counterfactual;
using Catch::Matchers::WithinAbs;

namespace {

constexpr int kSide = 32;

ModelSet random_models(std::uint64_t seed) {
    torch::manual_seed(seed);
    return ModelSet(agent::AgentNet(kSide, kSide), genmodel::GenModel(genmodel::GenModelConfig{kSide, kSide}));
}

torch::Tensor unit_latent(std::uint64_t seed) {
    torch::manual_seed(seed);
    auto z = torch::randn({kWassersteinDim});
    return z / z.norm();
}

env::Observation random_observation(std::uint64_t seed) {
    std::mt19937 rng(static_cast<unsigned>(seed));
    std::uniform_real_distribution<float> u(0.0F, 1.0F);
    env::Observation obs(kSide, kSide);
    for (auto& v : obs.channels) v = u(rng);
    return obs;
}

int least_likely(const PolicyVector& pi) {
    return static_cast<int>(std::min_element(pi.begin(), pi.end()) - pi.begin());
}

}  // namespace

TEST_CASE("objective at the anchor is the log-complement of the target probability") {
    auto models = random_models(0);
    const auto z0 = unit_latent(1);
    const auto pi = policy_at(models, z0);
    for (int a = 0; a < kNumActions; ++a) {
        const double value = cf_objective(z0, z0, a, models).item<double>();
        CHECK_THAT(value, WithinAbs(std::log1p(-static_cast<double>(pi[a])), 1e-6));
    }
    CHECK_THROWS_AS(cf_objective(z0, z0, 6, models), Error);
}

TEST_CASE("objective clamps a saturated target probability") {
    auto models = random_models(2);
    {
        torch::NoGradGuard guard;
        for (auto& p : models.agent->named_parameters()) {
            if (p.key() == "policy.weight") p.value().zero_();
            if (p.key() == "policy.bias") {
                p.value().zero_();
                p.value()[3] = 100.0F;
            }
        }
    }
    const auto z0 = unit_latent(3);
    CHECK(policy_at(models, z0)[3] == 1.0F);
    CHECK_THAT(cf_objective(z0, z0, 3, models).item<double>(), WithinAbs(std::log(1e-7), 1e-6));
    CHECK_THAT(std::log(1e-7), WithinAbs(-16.118, 1e-3));
}

TEST_CASE("objective gradient agrees with finite differences") {
    auto models = random_models(4);
    models.agent->to(torch::kFloat64);
    models.gen->to(torch::kFloat64);
    const auto z0 = unit_latent(5).to(torch::kFloat64);
    const auto z = (z0 + 0.1 * torch::randn({kWassersteinDim}, torch::kFloat64)).contiguous();
    const int target = 2;

    auto var = z.clone().requires_grad_(true);
    auto grad = torch::autograd::grad({cf_objective(var, z0, target, models)}, {var})[0];
    const double h = 1e-6;
    double worst = 0.0;
    for (int i = 0; i < kWassersteinDim; ++i) {
        auto p = z.clone(), m = z.clone();
        p[i] += h;
        m[i] -= h;
        const double fd = (cf_objective(p, z0, target, models).item<double>() -
                           cf_objective(m, z0, target, models).item<double>()) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i].item<double>()));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("optimisation stops immediately when the target is already preferred") {
    auto models = random_models(6);
    const auto z0 = unit_latent(7);
    const int current = static_cast<int>(argmax(policy_at(models, z0)));
    const auto trace = cf_optimize(models, z0, current, CfConfig{});
    CHECK(trace.steps == 0);
    CHECK(trace.success);
    CHECK(trace.objectives.empty());
    CHECK(torch::equal(trace.z_w, z0));
}

TEST_CASE("a single step moves exactly step_size times the gradient") {
    auto models = random_models(8);
    const auto z0 = unit_latent(9);
    const int target = least_likely(policy_at(models, z0));

    auto var = z0.clone().requires_grad_(true);
    auto grad = torch::autograd::grad({cf_objective(var, z0, target, models)}, {var})[0];

    CfConfig cfg;
    cfg.max_steps = 1;
    cfg.renormalize = false;
    cfg.step_size = 0.05;
    const auto trace = cf_optimize(models, z0, target, cfg);
    if (!trace.success) {
        CHECK(trace.steps == 1);
        CHECK(trace.objectives.size() == 1);
    }
    CHECK(torch::allclose(trace.z_w, z0 - 0.05 * grad, 1e-6, 1e-7));
    CHECK_THAT((trace.z_w - z0).norm().item<double>(), WithinAbs(0.05 * grad.norm().item<double>(), 1e-6));

    cfg.renormalize = true;
    const auto projected = cf_optimize(models, z0, target, cfg);
    CHECK_THAT(projected.z_w.norm().item<double>(), WithinAbs(1.0, 1e-6));
}

TEST_CASE("an exhausted budget reports failure") {
    auto models = random_models(10);
    const auto z0 = unit_latent(11);
    const auto pi = policy_at(models, z0);
    const int target = least_likely(pi);
    REQUIRE(target != static_cast<int>(argmax(pi)));
    CfConfig cfg;
    cfg.max_steps = 3;
    cfg.step_size = 1e-9;
    const auto trace = cf_optimize(models, z0, target, cfg);
    CHECK_FALSE(trace.success);
    CHECK(trace.steps == 3);
    CHECK(trace.objectives.size() == 3);

    cfg.step_size = 0.0;
    CHECK_THROWS_AS(cf_optimize(models, z0, target, cfg), Error);
}

TEST_CASE("optimisation on shared models is thread-safe") {
    auto models = random_models(12);
    const auto z0 = unit_latent(13);
    const int target = least_likely(policy_at(models, z0));
    CfConfig cfg;
    cfg.max_steps = 40;
    const auto serial = cf_optimize(models, z0, target, cfg);
    CfTrace a, b;
    std::thread ta([&] { a = cf_optimize(models, z0, target, cfg); });
    std::thread tb([&] { b = cf_optimize(models, z0, target, cfg); });
    ta.join();
    tb.join();
    CHECK(torch::equal(a.z_w, serial.z_w));
    CHECK(torch::equal(b.z_w, serial.z_w));
    for (auto& p : models.agent->parameters()) CHECK_FALSE(p.grad().defined());
}

TEST_CASE("highlight of identical frames is empty") {
    env::Frame f(16, 16);
    std::mt19937 rng(1);
    for (auto& v : f.pixels) v = static_cast<float>(rng() % 256) / 255.0F;
    const auto h = highlight_mask(f, f, f);
    CHECK(std::all_of(h.mask.begin(), h.mask.end(), [](float m) { return m == 0.0F; }));
    CHECK(h.overlay == f);
    CHECK_THROWS_AS(highlight_mask(f, env::Frame(16, 15), f), Error);
}

TEST_CASE("highlight of a single changed pixel is a thresholded Gaussian disk") {
    const int side = 21, cy = 10, cx = 10;
    env::Frame recon(side, side), cf(side, side), original(side, side);
    std::fill(original.pixels.begin(), original.pixels.end(), 0.5F);
    cf.pixels[(cy * side + cx) * 3 + 1] = 1.0F;  // green channel only
    const HighlightParams params;
    const auto h = highlight_mask(recon, cf, original, params);

    const double s2 = params.sigma * params.sigma;
    const int r = static_cast<int>(std::ceil(3 * params.sigma));
    double norm1d = 0.0;
    for (int i = -r; i <= r; ++i) norm1d += std::exp(-i * i / (2 * s2));
    int support = 0;
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const int dy = y - cy, dx = x - cx;
            double expected = 0.0;
            if (std::abs(dy) <= r && std::abs(dx) <= r) {
                expected = std::exp(-(dy * dy + dx * dx) / (2 * s2)) / (norm1d * norm1d);
            }
            if (expected < params.threshold) expected = 0.0;
            const float m = h.mask[static_cast<std::size_t>(y * side + x)];
            REQUIRE_THAT(m, WithinAbs(expected, 1e-6));
            if (m > 0.0F) {
                ++support;
                // Radially symmetric: the support is a disk around the changed pixel.
                CHECK(dy * dy + dx * dx <= r * r);
                const double alpha = params.max_alpha * m;
                CHECK_THAT(h.overlay.at(y, x, 0), WithinAbs((1 - alpha) * 0.5 + alpha, 1e-6));
                CHECK_THAT(h.overlay.at(y, x, 1), WithinAbs((1 - alpha) * 0.5, 1e-6));
            } else {
                CHECK(h.overlay.at(y, x, 0) == 0.5F);
            }
        }
    }
    CHECK(support > 1);
}

TEST_CASE("highlight mask stays in [0, 1]") {
    std::mt19937 rng(7);
    std::uniform_real_distribution<float> u(0.0F, 1.0F);
    for (int trial = 0; trial < 20; ++trial) {
        env::Frame a(12, 9), b(12, 9);
        for (auto& v : a.pixels) v = u(rng);
        for (auto& v : b.pixels) v = u(rng) < 0.5F ? 0.0F : 1.0F;
        const auto h = highlight_mask(a, b, a);
        REQUIRE(h.mask.size() == 12u * 9u);
        for (float m : h.mask) REQUIRE((m == 0.0F || (m >= 0.05F && m <= 1.0F)));
        for (float v : h.overlay.pixels) REQUIRE((v >= 0.0F && v <= 1.0F));
    }
}

TEST_CASE("key frames: worked example and edge cases") {
    const std::vector<float> e{0.1F, 0.09F, 2.0F, 0.05F};
    CHECK(select_key_frames(e, 2) == std::vector<std::size_t>{3, 0});
    CHECK(select_key_frames(e, 0).empty());
    CHECK(select_key_frames(std::span<const float>{}, 5).empty());
    CHECK(select_key_frames(e, 2, false) == std::vector<std::size_t>{2});

    const std::vector<float> flat(10, 0.7F);
    CHECK(select_key_frames(flat, 10) == std::vector<std::size_t>{0, 3, 6, 9});
}

TEST_CASE("key frames: fuzzed entropy sequences") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<float> u(0.0F, std::log(6.0F));
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> e(rng() % 60);
        for (auto& v : e) v = rng() % 5 == 0 ? 0.3F : u(rng);  // repeated values exercise ties
        const std::size_t n = rng() % 15;
        const auto picked = select_key_frames(e, n);
        REQUIRE(picked.size() <= n);
        for (std::size_t i = 0; i < picked.size(); ++i) {
            REQUIRE(picked[i] < e.size());
            for (std::size_t j = i + 1; j < picked.size(); ++j) {
                const auto gap = picked[i] > picked[j] ? picked[i] - picked[j] : picked[j] - picked[i];
                REQUIRE(gap >= 3);
            }
            if (i > 0) REQUIRE(e[picked[i - 1]] <= e[picked[i]]);
        }
        // Maximality: any skipped frame is blocked by a picked frame with no higher entropy.
        if (picked.size() < n) {
            for (std::size_t t = 0; t < e.size(); ++t) {
                if (std::find(picked.begin(), picked.end(), t) != picked.end()) continue;
                const bool blocked = std::any_of(picked.begin(), picked.end(), [&](std::size_t p) {
                    const auto gap = p > t ? p - t : t - p;
                    return gap < 3 && e[p] <= e[t];
                });
                REQUIRE(blocked);
            }
        }
    }
}

TEST_CASE("counterfactual action choice") {
    std::map<int, ActionRun> table;
    table[action_id(Action::Left)] = {true, 0.4, 3};
    table[action_id(Action::Right)] = {true, 0.9, 5};
    table[action_id(Action::Fire)] = {true, 0.2, 1};
    CHECK(choose_cf_action(table) == action_id(Action::Right));

    table[action_id(Action::LeftFire)] = {false, 5.0, 500};
    CHECK(choose_cf_action(table) == action_id(Action::Right));

    table[action_id(Action::Left)].distance = 0.9;
    CHECK(choose_cf_action(table) == action_id(Action::Left));

    for (auto& [a, run] : table) run.success = false;
    CHECK_THROWS_WITH(choose_cf_action(table), Catch::Matchers::ContainsSubstring("no counterfactual found"));
    CHECK_THROWS_AS(choose_cf_action({}), Error);
}

TEST_CASE("generated counterfactual fields are consistent") {
    auto models = random_models(14);
    const auto obs = random_observation(15);
    CfConfig cfg;
    cfg.max_steps = 20;

    const auto z0 = wasserstein_latent(models, obs);
    const int current = static_cast<int>(argmax(policy_at(models, z0)));
    const auto same = generate_counterfactual(models, obs, current, cfg);
    CHECK(same.steps == 0);
    CHECK(same.success);
    CHECK(same.action == current);
    CHECK(same.counterfactual == same.reconstruction);
    CHECK(same.latent_distance == 0.0);
    CHECK(std::all_of(same.highlight.mask.begin(), same.highlight.mask.end(), [](float m) { return m == 0.0F; }));

    const int target = least_likely(same.pi_before);
    const auto r = generate_counterfactual(models, obs, target, cfg);
    CHECK(r.target == target);
    CHECK(r.query == obs);
    CHECK(r.reconstruction.height == kSide);
    CHECK(r.counterfactual.width == kSide);
    CHECK(r.pi_before == same.pi_before);
    CHECK(r.objectives.size() == static_cast<std::size_t>(r.steps));
    CHECK_THAT(r.latent_distance, WithinAbs((r.z_w_star - r.z_w0).norm().item<double>(), 1e-9));
    CHECK(r.success == (static_cast<int>(argmax(r.pi_after)) == target));
    double sum = 0.0;
    for (float p : r.pi_agent) sum += p;
    CHECK_THAT(sum, WithinAbs(1.0, 1e-5));
}
