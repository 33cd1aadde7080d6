#include "gridpaint/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gridpaint {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.beta1 >= 0.0f && options_.beta1 < 1.0f) ||
      !(options_.beta2 >= 0.0f && options_.beta2 < 1.0f)) {
    throw std::invalid_argument("AdamW betas must lie in [0, 1)");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step(float lr_scale) {
  ++t_;
  const float lr = options_.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(double(options_.beta1), double(t_));
  const double bc2 = 1.0 - std::pow(double(options_.beta2), double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float decay = 1.0f - lr * options_.weight_decay;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = g.empty() ? 0.0f : g[j];
      m[j] = options_.beta1 * m[j] + (1.0f - options_.beta1) * gj;
      v[j] = options_.beta2 * v[j] + (1.0f - options_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] = w[j] * decay - static_cast<float>(lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float g : p.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float factor = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (float& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

float warmup_multiplier(std::int64_t step, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return 1.0f;
  return std::min(1.0f, static_cast<float>(step) / static_cast<float>(warmup_steps));
}

}  // namespace gridpaint
