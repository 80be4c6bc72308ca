#include "cfstates/genmodel.hpp"

#include <array>
#include <cmath>
#include <sstream>

namespace cfstates::genmodel {
namespace {

namespace nn = torch::nn;

struct ConvSpec {
    int out;
    int kernel;
    int stride;
    int padding;
};

// Five stride-2 stages take 64x64 to 2x2; the stride-1 stage keeps 2x2.
constexpr std::array<ConvSpec, 6> kEncoderConvs{{
    {32, 3, 2, 1},
    {64, 3, 2, 1},
    {128, 4, 2, 1},
    {256, 4, 2, 1},
    {256, 4, 2, 1},
    {256, 3, 1, 1},
}};

constexpr std::array<int, 5> kGeneratorChannels{256, 128, 128, 64, kObservationChannels};
constexpr int kGeneratorBaseChannels = 512;
constexpr double kLeak = 0.2;
constexpr int kDiscriminatorHidden = 512;

int conv_out(int size, const ConvSpec& s) { return (size + 2 * s.padding - s.kernel) / s.stride + 1; }

nn::LeakyReLU leaky() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeak)); }

torch::Tensor with_pi_channels(const torch::Tensor& x, const torch::Tensor& pi) {
    auto planes = pi.reshape({pi.size(0), pi.size(1), 1, 1}).expand({pi.size(0), pi.size(1), x.size(2), x.size(3)});
    return torch::cat({x, planes}, 1);
}

PolicyVector to_policy_vector(const torch::Tensor& p) {
    auto flat = p.reshape({-1}).to(torch::kFloat32).contiguous();
    PolicyVector out{};
    std::copy(flat.data_ptr<float>(), flat.data_ptr<float>() + kNumActions, out.begin());
    return out;
}

void require_nonempty(const torch::Tensor& t, const char* what) {
    if (!t.defined() || t.dim() == 0 || t.size(0) == 0) throw Error(std::string(what) + ": empty batch");
}

}  // namespace

EncoderImpl::EncoderImpl(const GenModelConfig& cfg) : height_(cfg.height), width_(cfg.width) {
    convs_ = nn::Sequential();
    int channels = kObservationChannels;
    int h = cfg.height;
    int w = cfg.width;
    for (const auto& spec : kEncoderConvs) {
        convs_->push_back(nn::Conv2d(
            nn::Conv2dOptions(channels, spec.out, spec.kernel).stride(spec.stride).padding(spec.padding)));
        convs_->push_back(nn::BatchNorm2d(spec.out));
        convs_->push_back(leaky());
        channels = spec.out;
        h = conv_out(h, spec);
        w = conv_out(w, spec);
    }
    if (h < 1 || w < 1) throw Error("encoder input too small");
    head_ = nn::Sequential(nn::Linear(channels * h * w, 256), nn::BatchNorm1d(256), leaky(),
                           nn::Linear(256, kEncodedDim));
    register_module("convs", convs_);
    register_module("head", head_);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& obs) {
    if (obs.dim() != 4 || obs.size(1) != kObservationChannels || obs.size(2) != height_ || obs.size(3) != width_) {
        std::ostringstream msg;
        msg << "encoder input shape mismatch: got " << obs.sizes();
        throw Error(msg.str());
    }
    return head_->forward(convs_->forward(obs).flatten(1));
}

GeneratorImpl::GeneratorImpl(int code_dim, bool pi_channels, const GenModelConfig& cfg)
    : code_dim_(code_dim), pi_channels_(pi_channels) {
    const int upsamples = static_cast<int>(kGeneratorChannels.size());
    base_h_ = cfg.height >> upsamples;
    base_w_ = cfg.width >> upsamples;
    if (base_h_ < 1 || base_w_ < 1 || (base_h_ << upsamples) != cfg.height || (base_w_ << upsamples) != cfg.width) {
        throw Error("generator output size must be a multiple of 32");
    }
    fc_ = register_module("fc", nn::Linear(code_dim, kGeneratorBaseChannels * base_h_ * base_w_));
    fc_bn_ = register_module("fc_bn", nn::BatchNorm1d(kGeneratorBaseChannels * base_h_ * base_w_));
    int channels = kGeneratorBaseChannels;
    const int extra = pi_channels ? kNumActions : 0;
    for (std::size_t i = 0; i < kGeneratorChannels.size(); ++i) {
        const int out = kGeneratorChannels[i];
        deconvs_.push_back(register_module("deconv" + std::to_string(i + 1),
                                           nn::ConvTranspose2d(nn::ConvTranspose2dOptions(channels + extra, out, 4)
                                                                   .stride(2)
                                                                   .padding(1))));
        if (i + 1 < kGeneratorChannels.size()) {
            bns_.push_back(register_module("bn" + std::to_string(i + 1), nn::BatchNorm2d(out)));
        }
        channels = out;
    }
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& code, const torch::Tensor& pi) {
    if (code.dim() != 2 || code.size(1) != code_dim_) throw Error("generator code has wrong width");
    if (pi_channels_ && (!pi.defined() || pi.size(-1) != kNumActions)) throw Error("generator requires pi");
    auto x = torch::relu(fc_bn_->forward(fc_->forward(code)));
    x = x.view({code.size(0), kGeneratorBaseChannels, base_h_, base_w_});
    for (std::size_t i = 0; i < deconvs_.size(); ++i) {
        if (pi_channels_) x = with_pi_channels(x, pi);
        x = deconvs_[i]->forward(x);
        x = i < bns_.size() ? torch::relu(bns_[i]->forward(x)) : torch::sigmoid(x);
    }
    return x;
}

// Two FC layers as in the latent discriminator of Fader networks (512 hidden,
// dropout 0.3). A narrow D is fooled without information actually leaving E(s).
DiscriminatorImpl::DiscriminatorImpl() {
    hidden_ = register_module("hidden", nn::Linear(kEncodedDim, kDiscriminatorHidden));
    out_ = register_module("out", nn::Linear(kDiscriminatorHidden, kNumActions));
    drop_ = register_module("drop", nn::Dropout(0.3));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& encoded) {
    auto x = drop_->forward(torch::leaky_relu(hidden_->forward(encoded), kLeak));
    return torch::softmax(out_->forward(x), -1);
}

WaeEncoderImpl::WaeEncoderImpl() {
    net_ = register_module("net", nn::Sequential(nn::Linear(kAgentLatentDim, 256), nn::BatchNorm1d(256), leaky(),
                                                 nn::Linear(256, 256), nn::BatchNorm1d(256), leaky(),
                                                 nn::Linear(256, kWassersteinDim)));
}

torch::Tensor WaeEncoderImpl::forward(const torch::Tensor& z) {
    if (z.size(-1) != kAgentLatentDim) throw Error("wae_encode expects a 256-dimensional latent");
    auto raw = net_->forward(z);
    auto norms = raw.norm(2, -1, true);
    if (norms.min().item<double>() < 1e-12) throw Error("degenerate latent");
    return raw / norms;
}

WaeDecoderImpl::WaeDecoderImpl() {
    net_ = register_module("net", nn::Sequential(nn::Linear(kWassersteinDim, 256), nn::BatchNorm1d(256), leaky(),
                                                 nn::Linear(256, 256), nn::BatchNorm1d(256), leaky(),
                                                 nn::Linear(256, kAgentLatentDim)));
}

torch::Tensor WaeDecoderImpl::forward(const torch::Tensor& z_w) {
    if (z_w.size(-1) != kWassersteinDim) throw Error("wae_decode expects a 128-dimensional latent");
    return net_->forward(z_w);
}

GenModelImpl::GenModelImpl(const GenModelConfig& cfg) : cfg_(cfg) {
    encoder = register_module("encoder", Encoder(cfg));
    generator = register_module("generator", Generator(kEncodedDim + kNumActions, true, cfg));
    discriminator = register_module("discriminator", Discriminator());
    wae_encoder = register_module("wae_encoder", WaeEncoder());
    wae_decoder = register_module("wae_decoder", WaeDecoder());
}

torch::Tensor GenModelImpl::reconstruct(const torch::Tensor& encoded, const torch::Tensor& pi) {
    return generator->forward(torch::cat({encoded, pi}, 1), pi);
}

torch::Tensor observation_batch(const env::Observation& obs) {
    return torch::from_blob(const_cast<float*>(obs.channels.data()),
                            {1, kObservationChannels, obs.height, obs.width}, torch::kFloat32)
        .clone();
}

env::Observation to_observation(const torch::Tensor& chw) {
    auto t = chw.reshape({kObservationChannels, chw.size(-2), chw.size(-1)}).to(torch::kFloat32).contiguous();
    env::Observation obs(static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
    std::copy(t.data_ptr<float>(), t.data_ptr<float>() + t.numel(), obs.channels.begin());
    return obs;
}

torch::Tensor encode(GenModel& model, const env::Observation& obs) {
    torch::NoGradGuard guard;
    model->eval();
    return model->encoder->forward(observation_batch(obs)).squeeze(0);
}

env::Observation generate(GenModel& model, const torch::Tensor& encoded, const PolicyVector& pi) {
    if (encoded.numel() != kEncodedDim) throw Error("generate expects a 16-dimensional encoding");
    torch::NoGradGuard guard;
    model->eval();
    auto p = torch::from_blob(const_cast<float*>(pi.data()), {1, kNumActions}, torch::kFloat32).clone();
    return to_observation(model->reconstruct(encoded.reshape({1, kEncodedDim}).to(torch::kFloat32), p));
}

PolicyVector discriminate(GenModel& model, const torch::Tensor& encoded) {
    if (encoded.numel() != kEncodedDim) throw Error("discriminate expects a 16-dimensional encoding");
    torch::NoGradGuard guard;
    model->eval();
    return to_policy_vector(model->discriminator->forward(encoded.reshape({1, kEncodedDim})));
}

torch::Tensor wae_encode(GenModel& model, const torch::Tensor& z) {
    torch::NoGradGuard guard;
    model->eval();
    return model->wae_encoder->forward(z.reshape({1, -1})).squeeze(0);
}

torch::Tensor wae_decode(GenModel& model, const torch::Tensor& z_w) {
    torch::NoGradGuard guard;
    model->eval();
    return model->wae_decoder->forward(z_w.reshape({1, -1})).squeeze(0);
}

torch::Tensor autoencoder_loss(const torch::Tensor& reconstruction, const torch::Tensor& target) {
    require_nonempty(target, "autoencoder_loss");
    return (reconstruction - target).pow(2).flatten(1).sum(1).mean();
}

torch::Tensor discriminator_loss(const torch::Tensor& predicted, const torch::Tensor& target, DiscriminatorLoss kind) {
    require_nonempty(target, "discriminator_loss");
    if (kind == DiscriminatorLoss::Kl) {
        auto t = target.clamp_min(1e-12);
        return (target * (torch::log(t) - torch::log(predicted.clamp_min(1e-12)))).sum(1).mean();
    }
    return (predicted - target).pow(2).sum(1).mean();
}

torch::Tensor adversarial_loss(const torch::Tensor& predicted, double lambda) {
    require_nonempty(predicted, "adversarial_loss");
    if (lambda < 0.0) throw Error("lambda must be >= 0");
    return lambda * (-entropy(predicted)).mean();
}

double imq_kernel(std::span<const double> x, std::span<const double> y, double scale) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
    return scale / (scale + d2);
}

torch::Tensor mmd_imq(const torch::Tensor& x, const torch::Tensor& y, double scale) {
    if (x.size(0) < 2 || y.size(0) < 2) throw Error("mmd_imq needs at least 2 samples per set");
    if (!(scale > 0.0)) throw Error("mmd_imq scale must be positive");
    auto kernel = [scale](const torch::Tensor& a, const torch::Tensor& b) {
        auto d2 = (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1);
        return scale / (scale + d2);
    };
    auto off_diagonal_mean = [](const torch::Tensor& k) {
        const auto n = k.size(0);
        auto mask = 1.0 - torch::eye(n, k.options());
        return (k * mask).sum() / static_cast<double>(n * (n - 1));
    };
    const auto kxx = off_diagonal_mean(kernel(x, x));
    const auto kyy = off_diagonal_mean(kernel(y, y));
    // Averaging both orientations makes the estimate bit-for-bit symmetric.
    const auto kxy = 0.5 * (kernel(x, y).mean() + kernel(y, x).mean());
    return kxx + kyy - 2.0 * kxy;
}

torch::Tensor wae_loss(const torch::Tensor& reconstructed_z, const torch::Tensor& z, const torch::Tensor& encoded,
                       const torch::Tensor& prior, double scale) {
    if (z.size(0) < 2) throw Error("wae_loss needs a batch of at least 2");
    return (reconstructed_z - z).pow(2).sum(1).mean() + mmd_imq(encoded, prior, scale);
}

torch::Tensor sample_sphere(std::int64_t n, std::int64_t dim) {
    auto g = torch::randn({n, dim});
    return g / g.norm(2, -1, true).clamp_min(1e-12);
}

FrozenParameters::FrozenParameters(torch::nn::Module& module) {
    for (auto& p : module.parameters()) {
        params_.push_back(p);
        previous_.push_back(p.requires_grad());
        p.set_requires_grad(false);
    }
}

FrozenParameters::~FrozenParameters() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(previous_[i]);
}

torch::Tensor discriminator_objective(GenModel& model, const LossBatch& batch, DiscriminatorLoss kind) {
    torch::Tensor encoded;
    {
        torch::NoGradGuard guard;
        encoded = model->encoder->forward(batch.observations);
    }
    return discriminator_loss(model->discriminator->forward(encoded), batch.policies, kind);
}

EncoderGeneratorTerms encoder_generator_objective(GenModel& model, const LossBatch& batch, double lambda) {
    auto encoded = model->encoder->forward(batch.observations);
    auto recon = model->reconstruct(encoded, batch.policies);
    FrozenParameters frozen(*model->discriminator);
    return {autoencoder_loss(recon, batch.observations), adversarial_loss(model->discriminator->forward(encoded), lambda)};
}

torch::Tensor wae_objective(GenModel& model, const LossBatch& batch, double scale) {
    auto encoded = model->wae_encoder->forward(batch.latents);
    auto decoded = model->wae_decoder->forward(encoded);
    auto prior = sample_sphere(encoded.size(0), kWassersteinDim).to(encoded.dtype());
    return wae_loss(decoded, batch.latents, encoded, prior, scale);
}

}  // namespace cfstates::genmodel
