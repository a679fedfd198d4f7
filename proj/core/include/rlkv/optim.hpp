#pragma once

#include <cstdint>
#include <vector>

#include "rlkv/tensor.hpp"

namespace rlkv {

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;

  void validate() const;  // throws std::invalid_argument
};

// AdamW with bias correction and decoupled weight decay, constant schedule.
// Parameters must be grad-tracked leaves; step() consumes whatever backward()
// left in their grad buffers.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  void step();
  void zero_grads();
  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace rlkv
