#include "cfstates/distribution.hpp"

#include <algorithm>
#include <cmath>

namespace cfstates {
namespace {

template <typename T>
double entropy_impl(std::span<const T> p) {
    double h = 0.0;
    for (const T v : p) {
        if (v > 0) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
    }
    return h;
}

}  // namespace

double entropy(std::span<const float> p) { return entropy_impl(p); }
double entropy(std::span<const double> p) { return entropy_impl(p); }

torch::Tensor entropy(const torch::Tensor& p) {
    // p·log(max(p, eps)) is exactly 0 at p = 0 and keeps the gradient finite.
    return -(p * torch::log(p.clamp_min(1e-12))).sum(-1);
}

std::size_t argmax(std::span<const float> p) {
    return static_cast<std::size_t>(std::distance(p.begin(), std::max_element(p.begin(), p.end())));
}

}  // namespace cfstates
