#include "rlkv/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rlkv {

void AdamWConfig::validate() const {
  if (!(lr > 0.0f)) throw std::invalid_argument("AdamWConfig: lr must be positive");
  if (!(beta1 > 0.0f && beta1 < 1.0f)) throw std::invalid_argument("AdamWConfig: beta1 must be in (0, 1)");
  if (!(beta2 > 0.0f && beta2 < 1.0f)) throw std::invalid_argument("AdamWConfig: beta2 must be in (0, 1)");
  if (!(eps > 0.0f)) throw std::invalid_argument("AdamWConfig: eps must be positive");
  if (weight_decay < 0.0f) throw std::invalid_argument("AdamWConfig: weight_decay must be non-negative");
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), cfg_(config) {
  cfg_.validate();
  if (params_.empty()) throw std::invalid_argument("AdamW: no parameters");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("AdamW: parameter does not track gradients");
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.grad_allocated()) {
      throw std::runtime_error("AdamW::step: parameter has no gradient; run backward first");
    }
    float* w = p.data();
    const float* g = p.grad_data();
    std::vector<float>& m = m_[i];
    std::vector<float>& v = v_[i];
    const std::int64_t n = p.numel();
    for (std::int64_t j = 0; j < n; ++j) {
      const double gd = static_cast<double>(g[j]);
      const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gd;
      const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gd * gd;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double upd = mhat / (std::sqrt(vhat) + static_cast<double>(cfg_.eps)) +
                         static_cast<double>(cfg_.weight_decay) * static_cast<double>(w[j]);
      w[j] = static_cast<float>(static_cast<double>(w[j]) - static_cast<double>(cfg_.lr) * upd);
    }
  }
}

void AdamW::zero_grads() {
  for (Tensor& p : params_) {
    if (p.grad_allocated()) p.zero_grad();
  }
}

}  // namespace rlkv
