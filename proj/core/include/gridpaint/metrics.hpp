// Automated evaluation of generated grids: FID, Inception Score, caption
// retrieval (R-precision) against easy and hard negatives, and exact
// semantic accuracy from the caption oracle.
//
// FID and IS need feature extractors / classifiers; both are pluggable.
// The defaults are surrogates trained on the synthetic data, so absolute
// values are only comparable within one set of artifacts.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gridpaint/model.hpp"
#include "gridpaint/random.hpp"
#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

namespace gridpaint {

// ---------------------------------------------------------------------------
// Linear algebra (row-major, double)

struct SymmetricEigen {
  std::vector<double> values;   // ascending
  std::vector<double> vectors;  // column j is the eigenvector of values[j]
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix.
SymmetricEigen jacobi_eigen(std::span<const double> a, int n, double tol = 1e-12, int max_sweeps = 100);

/// Square root of a symmetric PSD matrix; negative eigenvalues (rounding)
/// are clamped to 0.
std::vector<double> sqrtm_psd(std::span<const double> a, int n);

std::vector<double> matmul_square(std::span<const double> a, std::span<const double> b, int n);

// ---------------------------------------------------------------------------
// FID

struct GaussianStats {
  int dim = 0;
  std::vector<double> mean;
  std::vector<double> cov;  // unbiased (n - 1), symmetrized
  std::size_t count = 0;
};

/// `samples` holds count * dim values. Needs at least dim + 1 samples.
GaussianStats gaussian_stats(std::span<const float> samples, int dim);
double fid(const GaussianStats& a, const GaussianStats& b);
double fid(std::span<const float> a, std::span<const float> b, int dim);

// ---------------------------------------------------------------------------
// Inception score

struct ScoreSummary {
  double mean = 0.0;
  double std = 0.0;
};

/// `probs` holds rows of `classes` probabilities (each summing to 1 within
/// 1e-4). Rows are split into `splits` contiguous chunks; per chunk
/// exp(mean KL(p(y|x) || p(y))); mean and population std over chunks.
ScoreSummary inception_score(std::span<const double> probs, int classes, int splits = 10);

// ---------------------------------------------------------------------------
// Retrieval

enum class NegativeKind : std::uint8_t { easy, hard };
enum class HardCategory : std::uint8_t { color, shape, count };

std::string_view hard_category_name(HardCategory c);
inline constexpr HardCategory kHardCategories[] = {HardCategory::color, HardCategory::shape, HardCategory::count};
inline constexpr int kHardNegatives = 9;
inline constexpr int kEasyNegatives = 99;

bool has_category_word(const TokenSequence& caption, HardCategory category);

/// `count` captions, each differing from `caption` by one same-category
/// word swap. Distinct swaps come first in random order; when the caption
/// admits fewer distinct swaps than `count`, they are reused cyclically.
/// Throws std::invalid_argument when the caption has no word of the
/// category.
std::vector<TokenSequence> build_hard_negatives(const TokenSequence& caption, HardCategory category, Rng& rng,
                                                int count = kHardNegatives);

/// `count` captions drawn without replacement from `pool`, skipping any
/// caption equal to `positive`.
std::vector<TokenSequence> build_easy_negatives(std::span<const TokenSequence> pool, const TokenSequence& positive,
                                                Rng& rng, int count = kEasyNegatives);

struct RetrievalSet {
  TokenSequence positive;
  std::vector<TokenSequence> negatives;
  ClusterGrid grid;
  NegativeKind kind = NegativeKind::easy;
  HardCategory category = HardCategory::color;
};

using CaptionScorer = std::function<double(const ClusterGrid&, const TokenSequence&)>;
/// Scores many captions against one grid at once.
using BatchCaptionScorer = std::function<std::vector<double>(const ClusterGrid&, std::span<const TokenSequence>)>;

/// Fraction of sets whose positive caption scores strictly above every
/// negative (ties count as failures).
double r_precision(const CaptionScorer& scorer, std::span<const RetrievalSet> sets);
double r_precision(const BatchCaptionScorer& scorer, std::span<const RetrievalSet> sets);

/// ITM-head scorer of a trained model. Continuous-mode models see the
/// centroid features of the ids, so they need the codebook.
BatchCaptionScorer itm_scorer(const Model& model, const Codebook* codebook = nullptr);

// ---------------------------------------------------------------------------
// Semantic accuracy

/// Mean oracle_check(scene_i, caption_i).
double semantic_accuracy(std::span<const Scene> scenes, std::span<const TokenSequence> captions);

// ---------------------------------------------------------------------------
// Surrogates

/// Per-cell softmax regression from a cell feature to its content class
/// (17 classes, background included). A grid's class distribution is the
/// mean of the per-cell distributions over cells predicted as objects, or
/// the background class when there are none. It feeds the Inception Score.
class AttributeClassifier {
 public:
  static constexpr int kClasses = kNumContentClasses;

  AttributeClassifier() = default;
  AttributeClassifier(int input_dim, std::vector<float> weights, std::vector<float> bias);

  /// Full-batch Adam on the cells' cross-entropy; deterministic per seed.
  static AttributeClassifier train(std::span<const FeatureGrid> grids, std::span<const Scene> scenes,
                                   std::uint64_t seed, int epochs = 100);

  int input_dim() const { return input_dim_; }
  std::vector<double> cell_proba(std::span<const float> feature) const;
  std::vector<double> predict_proba(const FeatureGrid& grid) const;
  /// Per-cell accuracy.
  double accuracy(std::span<const FeatureGrid> grids, std::span<const Scene> scenes) const;

  std::string encode() const;
  static AttributeClassifier decode(std::string_view bytes);
  std::uint64_t hash() const;

 private:
  int input_dim_ = 0;
  std::vector<float> weights_;  // [input_dim, classes]
  std::vector<float> bias_;
};

/// Mean-pooled final grid states of the model with an empty caption; the
/// default FID feature space. Continuous-mode models read `features`
/// (one grid per entry of `grids`) instead of the ids.
std::vector<float> pooled_grid_features(const Model& model, std::span<const ClusterGrid> grids,
                                        std::span<const FeatureGrid> features = {});

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::string label;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  double fid = 0.0;
  ScoreSummary inception;
  double rprec_easy = 0.0;
  std::map<std::string, double> rprec_hard;  // per category
  double semantic_accuracy = 0.0;
  double chance_accuracy = 0.0;

  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

}  // namespace gridpaint
