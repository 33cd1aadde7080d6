#include "gridpaint/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gridpaint {

void LossWeights::validate() const {
  for (float w : {adv, acgan, fm, fm_e}) {
    if (!(w >= 0.0f) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
}

template <typename T>
BasicTensor<T> hinge_g(const BasicTensor<T>& d_fake) {
  return scale(mean(d_fake), T(-1));
}

template <typename T>
BasicTensor<T> hinge_d(const BasicTensor<T>& d_fake, const BasicTensor<T>& d_real) {
  auto fake_term = mean(relu(add_scalar(d_fake, T(1))));
  auto real_term = mean(relu(add_scalar(scale(d_real, T(-1)), T(1))));
  return add(fake_term, real_term);
}

template <typename T>
BasicTensor<T> acgan_loss(const BasicTensor<T>& fake, const BasicTensor<T>& real, std::span<const int> target_ids) {
  if (fake.rank() != 2 || fake.shape() != real.shape()) throw shape_error("acgan logits must be matching [cells, k]");
  if (target_ids.size() != fake.dim(0)) throw shape_error("acgan needs one target id per cell");
  const auto k = static_cast<int>(fake.dim(1));
  for (int id : target_ids) {
    if (id < 0 || id >= k) throw index_error("acgan target id " + std::to_string(id) + " out of range");
  }
  return add(cross_entropy_from_logits(fake, target_ids), cross_entropy_from_logits(real, target_ids));
}

template <typename T>
BasicTensor<T> feature_match_loss(const BasicFeatureStack<T>& fake, const BasicFeatureStack<T>& real) {
  if (fake.size() != real.size()) throw shape_error("feature stacks have different block counts");
  if (fake.empty()) return BasicTensor<T>::scalar(T(0));
  BasicTensor<T> total;
  for (std::size_t b = 0; b < fake.size(); ++b) {
    if (fake[b].shape() != real[b].shape()) {
      throw shape_error("feature block " + std::to_string(b) + ": " + shape_str(fake[b].shape()) + " vs " +
                        shape_str(real[b].shape()));
    }
    auto term = mean(huber(sub(fake[b], real[b])));
    total = b == 0 ? term : add(total, term);
  }
  return total;
}

TotalLosses total_losses(const LossParts& p, const LossWeights& w) {
  w.validate();
  for (double v : {p.g_adv, p.d_adv, p.acgan, p.fm, p.fm_e}) {
    if (!std::isfinite(v)) throw numeric_error("total_losses: non-finite loss part");
  }
  TotalLosses t;
  t.generator = w.adv * p.g_adv + w.acgan * p.acgan + w.fm * p.fm + w.fm_e * p.fm_e;
  t.discriminator = w.adv * p.d_adv + w.acgan * p.acgan;
  return t;
}

template <typename T>
BasicTensor<T> generator_total(const BasicTensor<T>& g_adv, const BasicTensor<T>& acgan, const BasicTensor<T>& fm,
                               const BasicTensor<T>& fm_e, const LossWeights& w) {
  w.validate();
  auto g = add(scale(g_adv, T(w.adv)), scale(acgan, T(w.acgan)));
  g = add(g, scale(fm, T(w.fm)));
  return add(g, scale(fm_e, T(w.fm_e)));
}

template <typename T>
BasicTensor<T> discriminator_total(const BasicTensor<T>& d_adv, const BasicTensor<T>& acgan, const LossWeights& w) {
  w.validate();
  return add(scale(d_adv, T(w.adv)), scale(acgan, T(w.acgan)));
}

#define GRIDPAINT_LOSSES(T)                                                                                  \
  template BasicTensor<T> hinge_g(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> hinge_d(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> acgan_loss(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const int>);   \
  template BasicTensor<T> feature_match_loss(const BasicFeatureStack<T>&, const BasicFeatureStack<T>&);     \
  template BasicTensor<T> generator_total(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                          const BasicTensor<T>&, const LossWeights&);                       \
  template BasicTensor<T> discriminator_total(const BasicTensor<T>&, const BasicTensor<T>&, const LossWeights&);

GRIDPAINT_LOSSES(float)
GRIDPAINT_LOSSES(double)

}  // namespace gridpaint
