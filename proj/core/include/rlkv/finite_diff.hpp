#pragma once

#include <functional>

#include "rlkv/tensor.hpp"

namespace rlkv {

// Central-difference gradient of a scalar-valued function at `point`.
// Evaluates f at 2*numel perturbed copies; deliberately knows nothing about
// the graph so it can referee backward().
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& point,
                               float step) {
  if (step <= 0.0f) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor g = Tensor::zeros(point.shape());
  std::vector<float> base(point.data(), point.data() + point.numel());
  for (std::int64_t i = 0; i < point.numel(); ++i) {
    std::vector<float> up = base;
    std::vector<float> dn = base;
    up[static_cast<std::size_t>(i)] += step;
    dn[static_cast<std::size_t>(i)] -= step;
    double fu = f(Tensor::from_data(point.shape(), std::move(up)));
    double fd = f(Tensor::from_data(point.shape(), std::move(dn)));
    g.data()[i] = static_cast<float>((fu - fd) / (2.0 * static_cast<double>(step)));
  }
  return g;
}

}  // namespace rlkv
