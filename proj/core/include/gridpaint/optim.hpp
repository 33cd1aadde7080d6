#pragma once

#include <cstdint>
#include <vector>

#include "gridpaint/tensor.hpp"

namespace gridpaint {

struct AdamWOptions {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  /// t <- t + 1, then one update of every parameter from its accumulated
  /// gradient (parameters without a gradient are treated as zero-gradient).
  /// `lr_scale` multiplies the base learning rate (warmup).
  void step(float lr_scale = 1.0f);
  void zero_grad();

  std::int64_t step_count() const { return t_; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<float>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<float>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

/// Linear warmup multiplier min(1, step / warmup_steps); 1 when warmup_steps == 0.
float warmup_multiplier(std::int64_t step, std::int64_t warmup_steps);

}  // namespace gridpaint
