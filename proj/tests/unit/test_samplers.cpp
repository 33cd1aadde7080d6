#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "gridpaint/samplers.hpp"

using namespace gridpaint;

namespace {

ModelConfig small_config(int grid_n = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_mult = 2;
  c.text_vocab = TextVocab::size();
  c.visual_vocab = 6;
  c.grid_n = grid_n;
  c.max_text_len = 10;
  return c;
}

// Random weights everywhere (heads included) so that predictions are
// neither uniform nor constant.
Model perturbed_model(const ModelConfig& c, std::uint64_t seed) {
  Model m(c, seed);
  Rng rng(seed, "perturb");
  for (const auto& [name, t] : m.named_parameters()) {
    auto p = t;
    for (auto& v : p.mutable_data()) v += static_cast<float>(0.5 * rng.normal());
  }
  return m;
}

const TokenSequence& caption() {
  static const auto c = TokenSequence::parse("a red circle in the top left", 10);
  return c;
}

SamplerSchedule schedule(Strategy s, float temperature = 1.0f, std::uint64_t seed = 1) {
  SamplerSchedule sc;
  sc.strategy = s;
  sc.temperature = temperature;
  sc.seed = seed;
  return sc;
}

}  // namespace

TEST(MaskPredictSchedule, WorkedExamples) {
  EXPECT_EQ(mask_predict_schedule(4, 4), (std::vector<int>{4, 3, 2, 1}));
  EXPECT_EQ(mask_predict_schedule(16, 1), std::vector<int>{16});
  EXPECT_EQ(mask_predict_schedule(64, 4), (std::vector<int>{64, 43, 22, 1}));
  for (int T : {1, 4, 16, 64})
    for (int K = 1; K <= 6; ++K) {
      const auto s = mask_predict_schedule(T, K);
      ASSERT_EQ(static_cast<int>(s.size()), K);
      EXPECT_EQ(s.front(), T);
      for (int n : s) EXPECT_GE(n, 1);
    }
}

TEST(Strategies, NamesRoundTrip) {
  for (auto s : {Strategy::tlbr, Strategy::random, Strategy::easy_first, Strategy::mask_predict})
    EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  EXPECT_EQ(parse_strategy("easy_first"), Strategy::easy_first);
  EXPECT_EQ(parse_strategy("mask_predict"), Strategy::mask_predict);
  EXPECT_THROW(parse_strategy("beam"), std::invalid_argument);
  EXPECT_EQ(SamplerSchedule{}.strategy, Strategy::mask_predict);
  EXPECT_EQ(SamplerSchedule{}.k_iters, 4);
}

TEST(Strategies, EveryStrategyFillsEveryCell) {
  const auto m = perturbed_model(small_config(3), 2);
  for (auto s : {Strategy::tlbr, Strategy::random, Strategy::easy_first, Strategy::mask_predict}) {
    const auto g = sample_grid(m, caption(), schedule(s));
    ASSERT_EQ(g.grid.ids.size(), 9u) << strategy_name(s);
    for (int id : g.grid.ids) EXPECT_TRUE(id >= 0 && id < 6);
    for (float c : g.confidence) EXPECT_TRUE(c >= 0.0f && c <= 1.0f);
  }
}

TEST(Tlbr, RowMajorOrderAndPassCount) {
  const auto m = perturbed_model(small_config(2), 3);
  auto sc = schedule(Strategy::tlbr);
  sc.keep_trace = true;
  const auto g = sample_grid(m, caption(), sc);
  EXPECT_EQ(g.forward_passes, 4);
  ASSERT_EQ(g.trace.size(), 4u);
  for (std::size_t step = 0; step < 4; ++step)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g.trace[step].ids[c] >= 0, c <= step);
}

TEST(Tlbr, ArgmaxIsDeterministicAcrossSeeds) {
  const auto m = perturbed_model(small_config(2), 4);
  const auto a = sample_grid(m, caption(), schedule(Strategy::tlbr, 0.0f, 1));
  const auto b = sample_grid(m, caption(), schedule(Strategy::tlbr, 0.0f, 999));
  EXPECT_EQ(a.grid, b.grid);
}

TEST(RandomStrategy, UpdateCountAndReproducibility) {
  const auto m = perturbed_model(small_config(2), 5);
  auto sc = schedule(Strategy::random);
  sc.steps = 11;
  const auto a = sample_grid(m, caption(), sc);
  EXPECT_EQ(a.updates, 11);
  EXPECT_EQ(a.forward_passes, 11);
  EXPECT_EQ(a.grid, sample_grid(m, caption(), sc).grid);
  sc.steps = 140;
  EXPECT_EQ(sample_grid(m, caption(), sc).updates, 140);
}

TEST(MaskPredict, PassCountAndOneShotCase) {
  const auto m = perturbed_model(small_config(3), 6);
  for (int k : {1, 2, 4}) {
    auto sc = schedule(Strategy::mask_predict);
    sc.k_iters = k;
    const auto g = sample_grid(m, caption(), sc);
    EXPECT_EQ(g.forward_passes, k);
    EXPECT_EQ(g.remasked.size(), static_cast<std::size_t>(k - 1));
  }
}

TEST(MaskPredict, RemasksTheLowestConfidenceCells) {
  const auto m = perturbed_model(small_config(3), 7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    // Pass 1 is identical for K = 1 and K = 4 under one seed, so the K = 1
    // confidences are the iteration-1 distribution.
    auto one = schedule(Strategy::mask_predict, 1.0f, seed);
    one.k_iters = 1;
    const auto first = sample_grid(m, caption(), one);
    auto four = one;
    four.k_iters = 4;
    const auto g = sample_grid(m, caption(), four);
    const int n2 = mask_predict_schedule(9, 4)[1];
    std::vector<int> order(9);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return first.confidence[static_cast<std::size_t>(a)] <
                                                first.confidence[static_cast<std::size_t>(b)]; });
    std::vector<int> expected(order.begin(), order.begin() + n2);
    std::sort(expected.begin(), expected.end());
    auto got = g.remasked.at(0);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, expected) << "seed " << seed;
  }
}

TEST(Sampling, BatchedEqualsOneByOne) {
  const auto m = perturbed_model(small_config(2), 8);
  const std::vector<TokenSequence> caps{caption(), TokenSequence::parse("two blue objects", 10),
                                        TokenSequence::parse("a green square above a red diamond", 10)};
  for (auto s : {Strategy::tlbr, Strategy::random, Strategy::easy_first, Strategy::mask_predict}) {
    const auto batch = sample_grids(m, caps, schedule(s));
    ASSERT_EQ(batch.size(), caps.size());
    // Caption i draws from stream (seed, i): compare with the batch of one
    // holding it at position i.
    EXPECT_EQ(batch[0].grid, sample_grid(m, caps[0], schedule(s)).grid) << strategy_name(s);
    for (std::size_t i = 0; i < caps.size(); ++i) {
      const auto again = sample_grids(m, caps, schedule(s));
      EXPECT_EQ(again[i].grid, batch[i].grid);
    }
  }
}

TEST(DrawFromLogits, ArgmaxTiesAndProbabilities) {
  const std::vector<float> logits{1.0f, 3.0f, 3.0f, 0.0f};
  const auto [id, p] = draw_from_logits(logits, 0.0f, nullptr);
  EXPECT_EQ(id, 1);
  const double z = std::exp(1.0) + 2 * std::exp(3.0) + 1.0;
  EXPECT_NEAR(p, std::exp(3.0) / z, 1e-6);
  Rng rng(1);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 20000; ++i) counts[static_cast<std::size_t>(draw_from_logits(logits, 1.0f, &rng).first)]++;
  EXPECT_NEAR(counts[3] / 20000.0, 1.0 / z, 0.01);
  EXPECT_NEAR(counts[1] / 20000.0, std::exp(3.0) / z, 0.02);
}

TEST(Gibbs, PrefixAndSpecialsArePreserved) {
  const auto m = perturbed_model(small_config(2), 9);
  const ClusterGrid grid{2, {0, 1, 2, 3}};
  const std::vector<int> prefix{TextVocab::id("a"), TextVocab::id("blue")};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = sample_text_gibbs(m, grid, prefix, 5, 12, 1.0f, seed);
    ASSERT_EQ(t.size(), 7u);
    EXPECT_EQ(t.tokens().front(), TextVocab::kCls);
    EXPECT_EQ(t.tokens().back(), TextVocab::kEos);
    EXPECT_EQ(t.tokens()[1], prefix[0]);
    EXPECT_EQ(t.tokens()[2], prefix[1]);
    for (std::size_t i = 1; i + 1 < t.size(); ++i) EXPECT_FALSE(TextVocab::is_special(t.tokens()[i]));
    EXPECT_EQ(t, sample_text_gibbs(m, grid, prefix, 5, 12, 1.0f, seed));
  }
  EXPECT_THROW(sample_text_gibbs(m, grid, prefix, 5, 2, 1.0f, 0), std::invalid_argument);
}

TEST(SampleRecord, CarriesCaptionIdsAndHash) {
  const auto m = perturbed_model(small_config(2), 10);
  auto sc = schedule(Strategy::mask_predict);
  sc.keep_trace = true;
  const auto g = sample_grid(m, caption(), sc);
  const auto j = sample_record_json(caption(), sc, g, 0xfeed);
  EXPECT_NE(j.find("\"mask-predict\""), std::string::npos);
  EXPECT_NE(j.find("000000000000feed"), std::string::npos);
  EXPECT_NE(j.find("\"trace\""), std::string::npos);
}
