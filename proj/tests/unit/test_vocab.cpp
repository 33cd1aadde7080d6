#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "gridpaint/io.hpp"
#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

using namespace gridpaint;

namespace {

std::vector<float> features_of(std::span<const DatasetRecord> records) {
  std::vector<float> pts;
  for (const auto& r : records) pts.insert(pts.end(), r.features.values.begin(), r.features.values.end());
  return pts;
}

// Shared across tests: the default dataset and its default codebook are
// expensive enough to build once.
struct DefaultVocab {
  Dataset ds;
  Codebook cb;
  DefaultVocab() {
    ds = make_dataset(1, DatasetConfig{});
    cb = kmeans_fit(features_of(ds.train), 16, {32, 20, 1});
  }
};
const DefaultVocab& default_vocab() {
  static const DefaultVocab v;
  return v;
}

}  // namespace

TEST(KMeans, KEqualsDistinctPointsIsExact) {
  const std::vector<float> pts{0, 0, 1, 0, 0, 1, 5, 5};
  const auto cb = kmeans_fit(pts, 2, {4, 5, 3});
  EXPECT_EQ(cb.inertia(), 0.0);
  std::multiset<std::pair<float, float>> got, want{{0, 0}, {1, 0}, {0, 1}, {5, 5}};
  for (int j = 0; j < 4; ++j) got.insert({cb.centroid(j)[0], cb.centroid(j)[1]});
  EXPECT_EQ(got, want);
}

TEST(KMeans, TwoBlobsGiveBlobMeans) {
  Rng rng(4);
  std::vector<float> pts;
  double sum_a = 0, sum_b = 0;
  for (int i = 0; i < 50; ++i) {
    const double a = -10 + 0.3 * rng.normal(), b = 10 + 0.3 * rng.normal();
    pts.push_back(static_cast<float>(a));
    pts.push_back(static_cast<float>(b));
    sum_a += static_cast<float>(a);
    sum_b += static_cast<float>(b);
  }
  const auto cb = kmeans_fit(pts, 1, {2, 10, 9});
  const double lo = std::min(cb.centroid(0)[0], cb.centroid(1)[0]);
  const double hi = std::max(cb.centroid(0)[0], cb.centroid(1)[0]);
  EXPECT_NEAR(lo, sum_a / 50, 1e-4);
  EXPECT_NEAR(hi, sum_b / 50, 1e-4);
}

TEST(KMeans, RejectsTooFewDistinctPoints) {
  const std::vector<float> pts{1, 1, 1, 1, 2, 2};
  EXPECT_THROW(kmeans_fit(pts, 2, {3, 5, 0}), std::invalid_argument);
  EXPECT_THROW(kmeans_fit(pts, 2, {2, 0, 0}), std::invalid_argument);
}

TEST(KMeans, InertiaIsMonotoneOnEveryFit) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, "points");
    std::vector<float> pts(600);
    for (auto& x : pts) x = static_cast<float>(rng.normal());
    const auto cb = kmeans_fit(pts, 3, {8, 20, seed});
    ASSERT_FALSE(cb.inertia_history.empty());
    for (std::size_t i = 1; i < cb.inertia_history.size(); ++i)
      EXPECT_LE(cb.inertia_history[i], cb.inertia_history[i - 1] * (1 + 1e-12));
  }
}

TEST(KMeans, PlusPlusSeedingMatchesExactProbabilities) {
  // Points 0, 1, 3 on a line. First seed uniform; second proportional to d^2.
  const std::vector<float> pts{0, 1, 3};
  const std::map<std::pair<std::size_t, std::size_t>, double> expected{
      {{0, 1}, 1.0 / 3 * 0.1},      {{0, 2}, 1.0 / 3 * 0.9},      {{1, 0}, 1.0 / 3 * 0.2},
      {{1, 2}, 1.0 / 3 * 0.8},      {{2, 0}, 1.0 / 3 * 9.0 / 13}, {{2, 1}, 1.0 / 3 * 4.0 / 13}};
  constexpr int kRuns = 30000;
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  for (int r = 0; r < kRuns; ++r) {
    Rng rng(static_cast<std::uint64_t>(r), "kpp");
    const auto idx = kmeans_plus_plus(pts, 1, 2, rng);
    ASSERT_EQ(idx.size(), 2u);
    counts[{idx[0], idx[1]}]++;
  }
  for (const auto& [pair, p] : expected) {
    const double sd = std::sqrt(kRuns * p * (1 - p));
    EXPECT_NEAR(counts[pair], kRuns * p, 3 * sd) << pair.first << "," << pair.second;
  }
}

TEST(Quantize, NearestCentroidAndRoundTrip) {
  Codebook cb;
  cb.k = 3;
  cb.dim = 2;
  cb.centroids = {0, 0, 1, 1, 2, 0};
  FeatureGrid g{2, 2, {1, 1, 0, 0, 2, 0, 1.9f, 0.1f}};
  EXPECT_EQ(quantize(g, cb).ids, (std::vector<int>{1, 0, 2, 2}));
  // Equidistant from centroids 0 and 2: the lower id wins.
  FeatureGrid tie{1, 2, {1, 0}};
  EXPECT_EQ(quantize(tie, cb).ids, std::vector<int>{0});

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    ClusterGrid ids{2, {}};
    for (int c = 0; c < 4; ++c) ids.ids.push_back(static_cast<int>(rng.below(3)));
    EXPECT_EQ(quantize(reconstruct(ids, cb), cb), ids);
  }
  ClusterGrid zeros{2, {0, 0, 0, 0}};
  EXPECT_EQ(reconstruct(zeros, cb).values, std::vector<float>(8, 0.0f));
}

TEST(Quantize, RejectsBadInput) {
  Codebook cb;
  cb.k = 2;
  cb.dim = 2;
  cb.centroids = {0, 0, 1, 1};
  FeatureGrid wrong_dim{1, 3, {0, 0, 0}};
  EXPECT_THROW(quantize(wrong_dim, cb), std::invalid_argument);
  ClusterGrid bad{1, {2}};
  EXPECT_THROW(reconstruct(bad, cb), std::out_of_range);
}

TEST(Purity, WorkedExamples) {
  const std::vector<int> labels{3, 3, 1, 1, 2};
  EXPECT_EQ(purity(labels, labels), 1.0);
  // One cluster holding two equal-sized labels contributes half its size.
  const std::vector<int> merged{0, 0, 0, 0};
  const std::vector<int> two{1, 1, 2, 2};
  EXPECT_EQ(purity(merged, two), 0.5);
}

TEST(CodebookFile, RoundTripDeterminismAndCorruption) {
  const std::vector<float> pts{0, 0, 1, 0, 0, 1, 5, 5, 5, 6, 6, 5};
  const auto a = kmeans_fit(pts, 2, {3, 10, 42});
  const auto b = kmeans_fit(pts, 2, {3, 10, 42});
  EXPECT_EQ(encode_codebook(a), encode_codebook(b));
  auto stamped = a;
  stamped.config_hash = 0x1234;
  const auto bytes = encode_codebook(stamped);
  EXPECT_EQ(bytes.substr(0, 6), kCodebookMagic);
  const auto back = decode_codebook(bytes);
  EXPECT_EQ(back.k, a.k);
  EXPECT_EQ(back.dim, a.dim);
  EXPECT_EQ(back.centroids, a.centroids);
  EXPECT_EQ(back.inertia_history, a.inertia_history);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.config_hash, 0x1234u);
  EXPECT_THROW(decode_codebook("GPVOX1" + bytes.substr(6)), format_error);
  EXPECT_THROW(decode_codebook(bytes.substr(0, 20)), format_error);
}

TEST(DefaultVocabulary, KAndIterations) {
  const auto& v = default_vocab();
  EXPECT_EQ(v.cb.k, 32);
  EXPECT_EQ(v.cb.iterations, 20);
}

TEST(DefaultVocabulary, PurityIsOne) {
  const auto& v = default_vocab();
  std::vector<int> assign, labels;
  for (const auto& r : v.ds.train) {
    const auto q = quantize(r.features, v.cb);
    const auto content = r.scene.content();
    assign.insert(assign.end(), q.ids.begin(), q.ids.end());
    labels.insert(labels.end(), content.begin(), content.end());
  }
  EXPECT_EQ(purity(assign, labels), 1.0);
}

TEST(DefaultVocabulary, NoisyCellsKeepTheirPrototypeClass) {
  // With k = 32 > 17 classes the background class spans several clusters, so
  // agreement is measured at the level of the content class each id decodes to.
  const auto& v = default_vocab();
  const PrototypeTable protos(FeatureConfig{});
  const auto classes = centroid_classes(v.cb, protos);
  Rng rng(77);
  int cells = 0;
  for (int s = 0; cells < 10000; ++s) {
    const auto scene = generate_scene(static_cast<std::uint64_t>(s) + 900000, SceneConfig{});
    const auto noisy = scene_features(scene, protos, FeatureConfig{}.sigma, rng);
    const auto clean = scene_features(scene, protos, 0.0f, rng);
    const auto qn = quantize(noisy, v.cb), qc = quantize(clean, v.cb);
    for (int c = 0; c < noisy.cells(); ++c, ++cells)
      ASSERT_EQ(classes[static_cast<std::size_t>(qn.ids[static_cast<std::size_t>(c)])],
                classes[static_cast<std::size_t>(qc.ids[static_cast<std::size_t>(c)])]);
  }
}

TEST(DefaultVocabulary, ReconstructionErrorBounds) {
  const auto& v = default_vocab();
  const auto pts = features_of(v.ds.train);
  const double radius = max_cluster_radius(pts, v.cb);
  for (std::size_t i = 0; i < pts.size(); i += 16) {
    double d2 = 0;
    v.cb.nearest(std::span<const float>(pts.data() + i, 16), &d2);
    ASSERT_LE(std::sqrt(d2), radius + 1e-6);
  }
  const auto eval = features_of(v.ds.eval);
  double total = 0;
  for (std::size_t i = 0; i < eval.size(); i += 16) {
    double d2 = 0;
    v.cb.nearest(std::span<const float>(eval.data() + i, 16), &d2);
    total += std::sqrt(d2);
  }
  const double mean = total / double(eval.size() / 16);
  EXPECT_LE(mean, 2 * FeatureConfig{}.sigma * std::sqrt(16.0));
}
