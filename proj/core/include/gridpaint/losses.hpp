// Generator / discriminator loss formulas of a grid-conditioned GAN
// renderer. Only the math lives here; there is no GAN training. Every loss
// is built from tensor ops, so it differentiates through an active tape.
#pragma once

#include <span>
#include <vector>

#include "gridpaint/tensor.hpp"

namespace gridpaint {

struct LossWeights {
  float adv = 1.0f;
  float acgan = 1.0f;
  float fm = 10.0f;    // discriminator feature matching
  float fm_e = 10.0f;  // perceptual (external encoder) feature matching

  void validate() const;
};

/// One feature map per block, in block order.
template <typename T>
using BasicFeatureStack = std::vector<BasicTensor<T>>;
using FeatureStack = BasicFeatureStack<float>;

/// mean(-d_fake)
template <typename T>
BasicTensor<T> hinge_g(const BasicTensor<T>& d_fake);

/// mean(max(1 + d_fake, 0)) + mean(max(1 - d_real, 0)).
template <typename T>
BasicTensor<T> hinge_d(const BasicTensor<T>& d_fake, const BasicTensor<T>& d_real);

/// Per-cell cross-entropy of the target cluster ids, averaged over cells,
/// for the fake and the real image, summed. Logits are [cells, k].
template <typename T>
BasicTensor<T> acgan_loss(const BasicTensor<T>& cls_logits_fake, const BasicTensor<T>& cls_logits_real,
                          std::span<const int> target_ids);

/// Sum over blocks of the mean elementwise huber(fake - real).
template <typename T>
BasicTensor<T> feature_match_loss(const BasicFeatureStack<T>& fake, const BasicFeatureStack<T>& real);

struct LossParts {
  double g_adv = 0.0;
  double d_adv = 0.0;
  double acgan = 0.0;
  double fm = 0.0;
  double fm_e = 0.0;
};

struct TotalLosses {
  double generator = 0.0;
  double discriminator = 0.0;
};

/// L_G = adv*g_adv + acgan*acgan + fm*fm + fm_e*fm_e;
/// L_D = adv*d_adv + acgan*acgan.
TotalLosses total_losses(const LossParts& parts, const LossWeights& weights = {});

/// Differentiable counterparts of total_losses.
template <typename T>
BasicTensor<T> generator_total(const BasicTensor<T>& g_adv, const BasicTensor<T>& acgan,
                               const BasicTensor<T>& fm, const BasicTensor<T>& fm_e,
                               const LossWeights& weights = {});
template <typename T>
BasicTensor<T> discriminator_total(const BasicTensor<T>& d_adv, const BasicTensor<T>& acgan,
                                   const LossWeights& weights = {});

}  // namespace gridpaint
