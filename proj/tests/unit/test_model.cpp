#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "gridpaint/checkpoint.hpp"
#include "gridpaint/model.hpp"
#include "gridpaint/scene.hpp"

using namespace gridpaint;
using gridpaint::testing::check_gradients;

namespace {

ModelConfig tiny_config(Architecture arch, VisualMode mode) {
  ModelConfig c;
  c.d_model = 8;
  c.layers = 1;
  c.cross_layers = 1;
  c.heads = 2;
  c.ffn_mult = 2;
  c.text_vocab = TextVocab::size();
  c.visual_vocab = 5;
  c.grid_n = 2;
  c.feature_dim = 3;
  c.max_text_len = 6;
  c.architecture = arch;
  c.visual_mode = mode;
  return c;
}

EncoderInputs tiny_inputs(const ModelConfig& c, std::size_t batch) {
  EncoderInputs in;
  in.batch = batch;
  Rng rng(7, "inputs");
  const auto L = static_cast<std::size_t>(c.max_text_len);
  const auto cells = static_cast<std::size_t>(c.grid_cells());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t words = 1 + rng.below(L - 2);
    in.text.push_back(TextVocab::kCls);
    for (std::size_t w = 0; w < words; ++w) in.text.push_back(4 + static_cast<int>(rng.below(20)));
    in.text.push_back(TextVocab::kEos);
    while (in.text.size() < (b + 1) * L) in.text.push_back(TextVocab::kPad);
    for (std::size_t i = 0; i < cells; ++i) {
      in.grid_ids.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(c.visual_vocab))));
      for (int d = 0; d < c.feature_dim; ++d) in.grid_features.push_back(static_cast<float>(rng.normal()));
      in.grid_mask.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
  }
  return in;
}

struct Combo {
  Architecture arch;
  VisualMode mode;
};

class ModelGrad : public ::testing::TestWithParam<int> {};

}  // namespace

TEST_P(ModelGrad, EveryHeadMatchesFiniteDifferences) {
  const Combo combos[] = {{Architecture::single_stream, VisualMode::discrete},
                          {Architecture::two_stream, VisualMode::discrete},
                          {Architecture::single_stream, VisualMode::continuous},
                          {Architecture::two_stream, VisualMode::continuous}};
  const auto combo = combos[GetParam()];
  const auto cfg = tiny_config(combo.arch, combo.mode);
  BasicModel<double> model(cfg, 11);
  // Zero-initialized output layers would make several gradients vanish;
  // perturb every parameter so all paths are exercised.
  Rng rng(3, "perturb");
  for (auto& [name, p] : model.named_parameters()) {
    auto t = p;
    for (auto& x : t.mutable_data()) x += 0.3 * rng.normal();
  }
  const auto in = tiny_inputs(cfg, 2);
  std::vector<int> grid_targets(in.grid_ids);
  std::vector<int> text_targets(in.text);
  auto loss = [&] {
    auto out = model.encode(in);
    auto total = cross_entropy_from_logits(model.mlm_logits(out.h_text), text_targets);
    std::vector<double> labels{1.0, 0.0};
    total = add(total, bce_with_logits(model.itm_logits(out.h_cls), std::span<const double>(labels)));
    if (combo.mode == VisualMode::discrete) {
      total = add(total, cross_entropy_from_logits(model.ccc_logits(out.h_grid), grid_targets));
    } else {
      auto pred = model.mvfr_regress(out.h_grid);
      std::vector<double> target(in.grid_features.begin(), in.grid_features.end());
      total = add(total, mse_loss(pred, BasicTensor<double>::from(pred.shape(), target)));
    }
    return total;
  };
  const auto report = check_gradients(loss, model.parameters(), 1e-5, 6);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.where;
}

INSTANTIATE_TEST_SUITE_P(ArchitecturesAndModes, ModelGrad, ::testing::Range(0, 4));

TEST(Model, ConfigValidationRejectsBadHeads) {
  auto c = tiny_config(Architecture::single_stream, VisualMode::discrete);
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Model, InitialItmScoreIsOneHalf) {
  const auto cfg = tiny_config(Architecture::two_stream, VisualMode::discrete);
  Model model(cfg, 5);
  const auto out = model.encode(tiny_inputs(cfg, 3));
  for (float s : model.itm_score(out.h_cls)) EXPECT_FLOAT_EQ(s, 0.5f);
}

TEST(Model, InitialCccIsUniform) {
  const auto cfg = tiny_config(Architecture::single_stream, VisualMode::discrete);
  Model model(cfg, 5);
  const auto in = tiny_inputs(cfg, 2);
  const auto loss = cross_entropy_from_logits(model.ccc_logits(model.encode(in).h_grid), in.grid_ids);
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-5);
}

TEST(Model, StateRoundTripsAndRejectsOtherConfig) {
  const auto cfg = tiny_config(Architecture::single_stream, VisualMode::discrete);
  Model a(cfg, 1), b(cfg, 2);
  load_model_state(b, model_state(a));
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto pa = a.parameters()[i].data(), pb = b.parameters()[i].data();
    EXPECT_TRUE(std::equal(pa.begin(), pa.end(), pb.begin()));
  }
  auto other = cfg;
  other.d_model = 16;
  Model c(other, 1);
  EXPECT_ANY_THROW(load_model_state(c, model_state(a)));
}
