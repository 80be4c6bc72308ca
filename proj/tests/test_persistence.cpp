#include "catch_torch.hpp"

#include <png.h>

#include <cmath>
#include <fstream>
#include <random>

#include "cfstates/distribution.hpp"
#include "cfstates/persistence.hpp"
#include "helpers.hpp"

using namespace cfstates;
using namespace cfstates::persistence;
using testing_support::TempDir;

namespace {

bool tables_equal(const TensorTable& a, const TensorTable& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first) return false;
        if (a[i].second.sizes() != b[i].second.sizes()) return false;
        if (!torch::equal(a[i].second.to(torch::kFloat32), b[i].second)) return false;
    }
    return true;
}

// Independent decoder: libpng's simplified API.
std::vector<std::uint8_t> decode_png(const std::vector<std::uint8_t>& bytes, int& width, int& height) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw std::runtime_error(image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) throw std::runtime_error(image.message);
    width = static_cast<int>(image.width);
    height = static_cast<int>(image.height);
    return pixels;
}

Replay random_replay(std::size_t length, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Replay r;
    r.seed = seed;
    r.height = 16;
    r.width = 12;
    for (std::size_t t = 0; t < length; ++t) {
        std::vector<std::uint8_t> f(static_cast<std::size_t>(r.height * r.width * 3));
        for (auto& b : f) b = static_cast<std::uint8_t>(rng() & 0xFF);
        r.frames.push_back(std::move(f));
        r.actions.push_back(static_cast<std::uint8_t>(rng() % kNumActions));
        r.policies.push_back(testing_support::random_policy(rng));
        r.entropies.push_back(static_cast<float>(entropy(std::span<const float>(r.policies.back()))));
    }
    r.score = 7;
    return r;
}

bool replays_equal(const Replay& a, const Replay& b) {
    return a.seed == b.seed && a.height == b.height && a.width == b.width && a.frames == b.frames &&
           a.actions == b.actions && a.policies == b.policies && a.entropies == b.entropies && a.score == b.score;
}

}  // namespace

TEST_CASE("checkpoint round-trips exactly") {
    TensorTable empty;
    CHECK(decode_checkpoint(encode_checkpoint(empty)).empty());

    TensorTable t{{"zero", torch::zeros({0})}, {"w", torch::randn({3, 4})}, {"scalar", torch::tensor(2.5F)}};
    CHECK(tables_equal(decode_checkpoint(encode_checkpoint(t)), t));

    TempDir dir;
    save_checkpoint(dir / "a.ckpt", t);
    CHECK(tables_equal(load_checkpoint(dir / "a.ckpt"), t));
}

TEST_CASE("checkpoint fuzz: 1000 random tensors") {
    std::mt19937_64 rng(17);
    TensorTable t;
    for (int i = 0; i < 1000; ++i) {
        const auto ndim = static_cast<int>(rng() % 4);
        std::vector<std::int64_t> dims;
        for (int d = 0; d < ndim; ++d) dims.push_back(static_cast<std::int64_t>(rng() % 5));
        auto tensor = torch::randn(dims) * static_cast<double>(rng() % 1000);
        if (rng() % 10 == 0 && tensor.numel() > 0) {
            tensor.view({-1})[0] = std::numeric_limits<float>::infinity();
        }
        t.emplace_back("t" + std::to_string(i) + std::string(rng() % 30, 'x'), tensor);
    }
    CHECK(tables_equal(decode_checkpoint(encode_checkpoint(t)), t));
}

TEST_CASE("duplicate checkpoint names are rejected") {
    TensorTable t{{"a", torch::ones({2})}, {"a", torch::zeros({2})}};
    CHECK_THROWS_AS(encode_checkpoint(t), Error);
}

TEST_CASE("every single-byte corruption of a checkpoint is detected") {
    TensorTable t{{"w", torch::randn({5})}, {"b", torch::randn({2, 2})}};
    const auto bytes = encode_checkpoint(t);
    std::mt19937 rng(1);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= static_cast<std::uint8_t>(1 + rng() % 255);
        REQUIRE_THROWS_AS(decode_checkpoint(bad), Error);
    }
}

TEST_CASE("unknown checkpoint version is rejected") {
    auto bytes = encode_checkpoint({{"w", torch::ones({1})}});
    bytes[4] = 9;  // version field follows the 4-byte magic
    // Fix up the CRC so only the version is wrong.
    const auto crc = crc32(std::span(bytes.data(), bytes.size() - 4));
    for (int k = 0; k < 4; ++k) bytes[bytes.size() - 4 + k] = static_cast<std::uint8_t>(crc >> (8 * k));
    CHECK_THROWS_WITH(decode_checkpoint(bytes), Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("dataset round-trip") {
    TempDir dir;
    SECTION("empty") {
        RolloutDataset empty;
        write_dataset(dir / "e.cfds", empty);
        const auto back = read_dataset(dir / "e.cfds");
        CHECK(back.empty());
        CHECK(back.height == 64);
    }
    SECTION("records are bit-exact") {
        const auto data = testing_support::random_dataset(25, 8, 6, 3);
        write_dataset(dir / "d.cfds", data);
        const auto back = read_dataset(dir / "d.cfds");
        REQUIRE(back.size() == data.size());
        CHECK(back.height == 8);
        CHECK(back.width == 6);
        for (std::size_t i = 0; i < data.size(); ++i) {
            CHECK(back.records[i].observation == data.records[i].observation);
            CHECK(back.records[i].pi == data.records[i].pi);
            CHECK(back.records[i].action == data.records[i].action);
            CHECK(back.records[i].episode == data.records[i].episode);
            CHECK(back.records[i].step == data.records[i].step);
            double sum = 0.0;
            for (float p : back.records[i].pi) sum += p;
            CHECK(std::abs(sum - 1.0) <= 1e-4);
        }
    }
}

TEST_CASE("dataset corruption and truncation are detected") {
    TempDir dir;
    const auto data = testing_support::random_dataset(2, 4, 4, 5);
    write_dataset(dir / "d.cfds", data);
    const auto bytes = read_file(dir / "d.cfds");
    std::mt19937 rng(2);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= static_cast<std::uint8_t>(1 + rng() % 255);
        write_file_atomic(dir / "bad.cfds", bad);
        REQUIRE_THROWS_AS(read_dataset(dir / "bad.cfds"), Error);
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() - 40);
    write_file_atomic(dir / "short.cfds", truncated);
    CHECK_THROWS_WITH(read_dataset(dir / "short.cfds"), Catch::Matchers::ContainsSubstring("offset"));

    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    write_file_atomic(dir / "magic.cfds", wrong_magic);
    CHECK_THROWS_AS(read_dataset(dir / "magic.cfds"), Error);
}

TEST_CASE("replay round-trip and corruption") {
    TempDir dir;
    const auto replay = random_replay(9, 44);
    write_replay(dir / "r.replay", replay);
    CHECK(replays_equal(read_replay(dir / "r.replay"), replay));

    const auto bytes = read_file(dir / "r.replay");
    for (std::size_t i = 0; i < bytes.size(); i += 7) {
        auto bad = bytes;
        bad[i] ^= 0x5A;
        write_file_atomic(dir / "bad.replay", bad);
        REQUIRE_THROWS_AS(read_replay(dir / "bad.replay"), Error);
    }

    Replay broken = replay;
    broken.actions.pop_back();
    CHECK_THROWS_AS(write_replay(dir / "x.replay", broken), Error);
}

TEST_CASE("replay observations stack the previous frames") {
    const auto replay = random_replay(6, 8);
    const auto obs = replay.observation(1);
    // Frames t-3..t clamped at 0: frames 0,0,0,1.
    const auto f0 = replay.frame(0);
    const auto f1 = replay.frame(1);
    for (int c = 0; c < 3; ++c) {
        CHECK(obs.at(c, 2, 3) == f0.at(2, 3, c));
        CHECK(obs.at(6 + c, 2, 3) == f0.at(2, 3, c));
        CHECK(obs.at(9 + c, 2, 3) == f1.at(2, 3, c));
    }
}

TEST_CASE("PNG export decodes with libpng to round(255 v)") {
    env::Frame black(5, 7);
    int w = 0, h = 0;
    auto pixels = decode_png(export_png(black), w, h);
    CHECK(w == 7);
    CHECK(h == 5);
    CHECK(std::all_of(pixels.begin(), pixels.end(), [](std::uint8_t b) { return b == 0; }));

    std::mt19937 rng(4);
    std::uniform_real_distribution<float> u(0.0F, 1.0F);
    env::Frame f(64, 64);
    for (auto& v : f.pixels) v = u(rng);
    const auto bytes = export_png(f);
    CHECK(bytes == export_png(f));
    pixels = decode_png(bytes, w, h);
    REQUIRE(pixels.size() == f.pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        REQUIRE(pixels[i] == static_cast<std::uint8_t>(std::lround(255.0F * f.pixels[i])));
    }
}

TEST_CASE("module state round-trips through a checkpoint") {
    torch::nn::Sequential net(torch::nn::Linear(4, 3), torch::nn::BatchNorm1d(3));
    TempDir dir;
    save_checkpoint(dir / "m.ckpt", module_state(*net));
    torch::nn::Sequential other(torch::nn::Linear(4, 3), torch::nn::BatchNorm1d(3));
    load_module_state(*other, load_checkpoint(dir / "m.ckpt"));
    auto a = module_state(*net);
    auto b = module_state(*other);
    CHECK(tables_equal(a, b));

    torch::nn::Sequential wrong(torch::nn::Linear(5, 3), torch::nn::BatchNorm1d(3));
    CHECK_THROWS_AS(load_module_state(*wrong, load_checkpoint(dir / "m.ckpt")), Error);
}
