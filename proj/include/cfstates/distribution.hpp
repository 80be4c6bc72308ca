#pragma once

#include <cstddef>
#include <span>

#include <torch/torch.h>

namespace cfstates {

/// Shannon entropy in nats with 0·log 0 = 0.
double entropy(std::span<const float> p);
double entropy(std::span<const double> p);

/// Row-wise entropy of a batch of distributions [N, K] -> [N]. Differentiable;
/// zero entries contribute nothing and no NaN gradient.
torch::Tensor entropy(const torch::Tensor& p);

std::size_t argmax(std::span<const float> p);

}  // namespace cfstates
