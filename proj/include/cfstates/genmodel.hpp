#pragma once

// Encoder E, generator G, discriminator D and the Wasserstein autoencoder
// (E_w, D_w) around a frozen agent, with the losses that train them.

#include <optional>

#include <torch/torch.h>

#include "cfstates/dataset.hpp"
#include "cfstates/distribution.hpp"
#include "cfstates/env.hpp"
#include "cfstates/types.hpp"

namespace cfstates::genmodel {

struct GenModelConfig {
    int height = 64;
    int width = 64;
};

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const GenModelConfig& cfg = {});
    torch::Tensor forward(const torch::Tensor& obs);

private:
    int height_;
    int width_;
    torch::nn::Sequential convs_{nullptr};
    torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(Encoder);

/// Transposed-conv generator. The input code goes through one FC layer; when
/// `pi_channels` is set, every transposed conv also sees |A| constant
/// channels broadcasting the action distribution.
class GeneratorImpl : public torch::nn::Module {
public:
    GeneratorImpl(int code_dim, bool pi_channels, const GenModelConfig& cfg = {});
    torch::Tensor forward(const torch::Tensor& code, const torch::Tensor& pi = {});

    int code_dim() const { return code_dim_; }
    bool uses_pi_channels() const { return pi_channels_; }

private:
    int code_dim_;
    bool pi_channels_;
    int base_h_;
    int base_w_;
    torch::nn::Linear fc_{nullptr};
    torch::nn::BatchNorm1d fc_bn_{nullptr};
    std::vector<torch::nn::ConvTranspose2d> deconvs_;
    std::vector<torch::nn::BatchNorm2d> bns_;
};
TORCH_MODULE(Generator);

class DiscriminatorImpl : public torch::nn::Module {
public:
    DiscriminatorImpl();
    torch::Tensor forward(const torch::Tensor& encoded);

private:
    torch::nn::Linear hidden_{nullptr}, out_{nullptr};
    torch::nn::Dropout drop_{nullptr};
};
TORCH_MODULE(Discriminator);

class WaeEncoderImpl : public torch::nn::Module {
public:
    WaeEncoderImpl();
    /// Unit-norm rows; throws Error("degenerate latent") on a zero pre-normalization output.
    torch::Tensor forward(const torch::Tensor& z);

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(WaeEncoder);

class WaeDecoderImpl : public torch::nn::Module {
public:
    WaeDecoderImpl();
    torch::Tensor forward(const torch::Tensor& z_w);

private:
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(WaeDecoder);

class GenModelImpl : public torch::nn::Module {
public:
    explicit GenModelImpl(const GenModelConfig& cfg = {});

    Encoder encoder{nullptr};
    Generator generator{nullptr};
    Discriminator discriminator{nullptr};
    WaeEncoder wae_encoder{nullptr};
    WaeDecoder wae_decoder{nullptr};

    /// G(E(s), pi) on batched tensors.
    torch::Tensor reconstruct(const torch::Tensor& encoded, const torch::Tensor& pi);
    const GenModelConfig& config() const { return cfg_; }

private:
    GenModelConfig cfg_;
};
TORCH_MODULE(GenModel);

// Single-item inference; batch norm uses running statistics (eval mode).
torch::Tensor encode(GenModel& model, const env::Observation& obs);
env::Observation generate(GenModel& model, const torch::Tensor& encoded, const PolicyVector& pi);
PolicyVector discriminate(GenModel& model, const torch::Tensor& encoded);
torch::Tensor wae_encode(GenModel& model, const torch::Tensor& z);
torch::Tensor wae_decode(GenModel& model, const torch::Tensor& z_w);

torch::Tensor observation_batch(const env::Observation& obs);
env::Observation to_observation(const torch::Tensor& chw);

// ---- losses -------------------------------------------------------------

/// Mean over the batch of the squared L2 norm over the whole observation tensor.
torch::Tensor autoencoder_loss(const torch::Tensor& reconstruction, const torch::Tensor& target);

enum class DiscriminatorLoss { Mse, Kl };

/// Mean over the batch of ||D(E(s)) - pi||^2 (or KL(pi || D(E(s))) when requested).
torch::Tensor discriminator_loss(const torch::Tensor& predicted, const torch::Tensor& target,
                                 DiscriminatorLoss kind = DiscriminatorLoss::Mse);

/// (lambda / N) * sum of -H(D(E(s))).
torch::Tensor adversarial_loss(const torch::Tensor& predicted, double lambda);

/// Inverse multiquadratic kernel C / (C + ||x - y||^2).
double imq_kernel(std::span<const double> x, std::span<const double> y, double scale);

/// Unbiased MMD estimate with the inverse multiquadratic kernel; symmetric in (X, Y).
torch::Tensor mmd_imq(const torch::Tensor& x, const torch::Tensor& y, double scale);

/// Reconstruction of z plus MMD between the encoded batch and prior samples.
torch::Tensor wae_loss(const torch::Tensor& reconstructed_z, const torch::Tensor& z, const torch::Tensor& encoded,
                       const torch::Tensor& prior, double scale);

/// Uniform samples on the unit sphere in R^dim.
torch::Tensor sample_sphere(std::int64_t n, std::int64_t dim);

/// Disables gradients for every parameter of a module for the guard's lifetime.
class FrozenParameters {
public:
    explicit FrozenParameters(torch::nn::Module& module);
    ~FrozenParameters();
    FrozenParameters(const FrozenParameters&) = delete;
    FrozenParameters& operator=(const FrozenParameters&) = delete;

private:
    std::vector<torch::Tensor> params_;
    std::vector<bool> previous_;
};

struct LossBatch {
    torch::Tensor observations;  // [N, 12, H, W]
    torch::Tensor policies;      // [N, |A|]
    torch::Tensor latents;       // [N, 256], z = A(s)
};

/// D's objective with E's output detached.
torch::Tensor discriminator_objective(GenModel& model, const LossBatch& batch,
                                      DiscriminatorLoss kind = DiscriminatorLoss::Mse);

struct EncoderGeneratorTerms {
    torch::Tensor autoencoder;
    torch::Tensor adversarial;
    torch::Tensor total() const { return autoencoder + adversarial; }
};

/// Reconstruction plus adversarial entropy terms; D's parameters are frozen.
EncoderGeneratorTerms encoder_generator_objective(GenModel& model, const LossBatch& batch, double lambda);

torch::Tensor wae_objective(GenModel& model, const LossBatch& batch, double scale);

}  // namespace cfstates::genmodel
