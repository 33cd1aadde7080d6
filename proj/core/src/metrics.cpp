#include "gridpaint/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gridpaint/io.hpp"
#include "gridpaint/optim.hpp"
#include "gridpaint/tensor.hpp"

namespace gridpaint {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Linear algebra

SymmetricEigen jacobi_eigen(std::span<const double> input, int n, double tol, int max_sweeps) {
  if (n <= 0 || input.size() != static_cast<std::size_t>(n) * n) throw shape_error("jacobi_eigen: need n*n values");
  const auto N = static_cast<std::size_t>(n);
  std::vector<double> a(input.begin(), input.end());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      if (std::abs(a[i * N + j] - a[j * N + i]) > 1e-6 * (1.0 + std::abs(a[i * N + j])))
        throw std::invalid_argument("jacobi_eigen: matrix is not symmetric");
      const double m = 0.5 * (a[i * N + j] + a[j * N + i]);
      a[i * N + j] = a[j * N + i] = m;
    }
  std::vector<double> v(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i) v[i * N + i] = 1.0;

  double scale = 0.0;
  for (double x : a) scale += x * x;
  scale = std::sqrt(scale);

  SymmetricEigen out;
  for (out.sweeps = 0; out.sweeps < max_sweeps; ++out.sweeps) {
    double off = 0.0;
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t q = p + 1; q < N; ++q) off += a[p * N + q] * a[p * N + q];
    if (std::sqrt(off) <= tol * std::max(scale, 1e-300)) break;

    for (std::size_t p = 0; p < N; ++p) {
      for (std::size_t q = p + 1; q < N; ++q) {
        const double apq = a[p * N + q];
        if (apq == 0.0) continue;
        // Rotation angle that zeroes a[p][q] (Golub & Van Loan, sym.schur2).
        const double theta = (a[q * N + q] - a[p * N + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < N; ++k) {
          const double akp = a[k * N + p], akq = a[k * N + q];
          a[k * N + p] = c * akp - s * akq;
          a[k * N + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < N; ++k) {
          const double apk = a[p * N + k], aqk = a[q * N + k];
          a[p * N + k] = c * apk - s * aqk;
          a[q * N + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < N; ++k) {
          const double vkp = v[k * N + p], vkq = v[k * N + q];
          v[k * N + p] = c * vkp - s * vkq;
          v[k * N + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  if (out.sweeps == max_sweeps) throw numeric_error("jacobi_eigen: no convergence");

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * N + x] < a[y * N + y]; });
  out.values.resize(N);
  out.vectors.resize(N * N);
  for (std::size_t j = 0; j < N; ++j) {
    out.values[j] = a[order[j] * N + order[j]];
    for (std::size_t k = 0; k < N; ++k) out.vectors[k * N + j] = v[k * N + order[j]];
  }
  return out;
}

std::vector<double> sqrtm_psd(std::span<const double> a, int n) {
  const auto e = jacobi_eigen(a, n);
  const auto N = static_cast<std::size_t>(n);
  std::vector<double> root(N * N, 0.0);
  for (std::size_t j = 0; j < N; ++j) {
    const double s = std::sqrt(std::max(e.values[j], 0.0));
    if (s == 0.0) continue;
    for (std::size_t r = 0; r < N; ++r) {
      const double vr = e.vectors[r * N + j] * s;
      for (std::size_t c = 0; c < N; ++c) root[r * N + c] += vr * e.vectors[c * N + j];
    }
  }
  return root;
}

std::vector<double> matmul_square(std::span<const double> a, std::span<const double> b, int n) {
  const auto N = static_cast<std::size_t>(n);
  if (a.size() != N * N || b.size() != N * N) throw shape_error("matmul_square: need n*n values");
  std::vector<double> c(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < N; ++k) {
      const double aik = a[i * N + k];
      for (std::size_t j = 0; j < N; ++j) c[i * N + j] += aik * b[k * N + j];
    }
  return c;
}

// ---------------------------------------------------------------------------
// FID

GaussianStats gaussian_stats(std::span<const float> samples, int dim) {
  if (dim <= 0 || samples.size() % static_cast<std::size_t>(dim) != 0) throw shape_error("gaussian_stats: bad shape");
  const auto D = static_cast<std::size_t>(dim);
  const std::size_t n = samples.size() / D;
  if (n < D + 1) {
    throw std::invalid_argument("gaussian_stats: need at least dim + 1 samples (" + std::to_string(n) + " < " +
                                std::to_string(D + 1) + ")");
  }
  GaussianStats s;
  s.dim = dim;
  s.count = n;
  s.mean.assign(D, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) s.mean[j] += samples[i * D + j];
  for (auto& m : s.mean) m /= double(n);
  s.cov.assign(D * D, 0.0);
  std::vector<double> c(D);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < D; ++j) c[j] = samples[i * D + j] - s.mean[j];
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t k = j; k < D; ++k) s.cov[j * D + k] += c[j] * c[k];
  }
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t k = j; k < D; ++k) {
      s.cov[j * D + k] /= double(n - 1);
      s.cov[k * D + j] = s.cov[j * D + k];
    }
  for (double x : s.cov)
    if (!std::isfinite(x)) throw numeric_error("gaussian_stats: non-finite covariance");
  return s;
}

double fid(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim != b.dim) throw shape_error("fid: dimension mismatch");
  const int n = a.dim;
  double mean_term = 0.0;
  for (int i = 0; i < n; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  // tr((A^1/2 B A^1/2)^1/2) is symmetric in A and B and only involves
  // square roots of symmetric PSD matrices.
  const auto ra = sqrtm_psd(a.cov, n);
  auto m = matmul_square(matmul_square(ra, b.cov, n), ra, n);
  const auto N = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) m[i * N + j] = m[j * N + i] = 0.5 * (m[i * N + j] + m[j * N + i]);
  const auto e = jacobi_eigen(m, n);
  double cross = 0.0;
  for (double v : e.values) cross += std::sqrt(std::max(v, 0.0));
  double trace = 0.0;
  for (std::size_t i = 0; i < N; ++i) trace += a.cov[i * N + i] + b.cov[i * N + i];
  const double d = mean_term + trace - 2.0 * cross;
  if (!std::isfinite(d)) throw numeric_error("fid: non-finite result");
  return std::max(d, 0.0);
}

double fid(std::span<const float> a, std::span<const float> b, int dim) {
  return fid(gaussian_stats(a, dim), gaussian_stats(b, dim));
}

// ---------------------------------------------------------------------------
// Inception score

ScoreSummary inception_score(std::span<const double> probs, int classes, int splits) {
  if (classes <= 0 || probs.size() % static_cast<std::size_t>(classes) != 0)
    throw shape_error("inception_score: bad shape");
  const auto C = static_cast<std::size_t>(classes);
  const std::size_t n = probs.size() / C;
  if (splits < 1 || static_cast<std::size_t>(splits) > n)
    throw std::invalid_argument("inception_score: need 1 <= splits <= rows");
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double p = probs[i * C + c];
      if (!(p >= 0.0)) throw std::invalid_argument("inception_score: negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-4) throw std::invalid_argument("inception_score: row " + std::to_string(i) +
                                                             " does not sum to 1");
  }
  std::vector<double> scores;
  for (int k = 0; k < splits; ++k) {
    const std::size_t lo = n * static_cast<std::size_t>(k) / static_cast<std::size_t>(splits);
    const std::size_t hi = n * static_cast<std::size_t>(k + 1) / static_cast<std::size_t>(splits);
    std::vector<double> marginal(C, 0.0);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < C; ++c) marginal[c] += probs[i * C + c];
    for (auto& m : marginal) m /= double(hi - lo);
    double kl = 0.0;
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double p = probs[i * C + c];
        if (p > 0.0) kl += p * (std::log(p) - std::log(marginal[c]));
      }
    scores.push_back(std::exp(kl / double(hi - lo)));
  }
  ScoreSummary s;
  for (double x : scores) s.mean += x;
  s.mean /= double(scores.size());
  for (double x : scores) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / double(scores.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Retrieval

std::string_view hard_category_name(HardCategory c) {
  switch (c) {
    case HardCategory::color: return "color";
    case HardCategory::shape: return "shape";
    case HardCategory::count: return "count";
  }
  return "?";
}

namespace {

const std::vector<std::string>& category_words(HardCategory c) {
  static const std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  static const std::vector<std::string> shapes{"circle", "square", "triangle", "diamond"};
  static const std::vector<std::string> counts{"one", "two", "three"};
  switch (c) {
    case HardCategory::color: return colors;
    case HardCategory::shape: return shapes;
    case HardCategory::count: return counts;
  }
  return colors;
}

std::vector<std::size_t> category_positions(const std::vector<std::string>& words, HardCategory c) {
  const auto& vocab = category_words(c);
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < words.size(); ++i)
    if (std::find(vocab.begin(), vocab.end(), words[i]) != vocab.end()) pos.push_back(i);
  return pos;
}

}  // namespace

bool has_category_word(const TokenSequence& caption, HardCategory category) {
  return !category_positions(caption.words(), category).empty();
}

std::vector<TokenSequence> build_hard_negatives(const TokenSequence& caption, HardCategory category, Rng& rng,
                                                int count) {
  const auto words = caption.words();
  const auto positions = category_positions(words, category);
  if (positions.empty()) {
    throw std::invalid_argument("caption \"" + caption.text() + "\" has no " +
                                std::string(hard_category_name(category)) + " word");
  }
  // Every single-word swap; swaps that reproduce the positive (a caption
  // repeating the swapped word elsewhere still differs at this position)
  // cannot occur because the replacement always differs from the original.
  std::vector<TokenSequence> distinct;
  std::set<std::vector<int>> seen{caption.tokens()};
  for (std::size_t p : positions) {
    for (const auto& w : category_words(category)) {
      if (w == words[p]) continue;
      auto swapped = words;
      swapped[p] = w;
      auto seq = TokenSequence::from_words(swapped, static_cast<int>(caption.size()));
      if (seen.insert(seq.tokens()).second) distinct.push_back(std::move(seq));
    }
  }
  rng.shuffle(distinct.begin(), distinct.end());
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(distinct[static_cast<std::size_t>(i) % distinct.size()]);
  return out;
}

std::vector<TokenSequence> build_easy_negatives(std::span<const TokenSequence> pool, const TokenSequence& positive,
                                                Rng& rng, int count) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!(pool[i] == positive)) candidates.push_back(i);
  if (candidates.size() < static_cast<std::size_t>(count))
    throw std::invalid_argument("build_easy_negatives: caption pool too small");
  std::vector<TokenSequence> out;
  for (std::size_t i : rng.choose(candidates.size(), static_cast<std::size_t>(count))) out.push_back(pool[candidates[i]]);
  return out;
}

double r_precision(const BatchCaptionScorer& scorer, std::span<const RetrievalSet> sets) {
  if (sets.empty()) return 0.0;
  std::size_t hits = 0;
  std::vector<TokenSequence> captions;
  for (const auto& s : sets) {
    captions.clear();
    captions.push_back(s.positive);
    captions.insert(captions.end(), s.negatives.begin(), s.negatives.end());
    const auto scores = scorer(s.grid, captions);
    if (scores.size() != captions.size()) throw std::logic_error("scorer returned the wrong number of scores");
    bool top = true;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (!(scores[0] > scores[i])) {
        top = false;
        break;
      }
    }
    hits += top ? 1 : 0;
  }
  return double(hits) / double(sets.size());
}

double r_precision(const CaptionScorer& scorer, std::span<const RetrievalSet> sets) {
  return r_precision(BatchCaptionScorer([&](const ClusterGrid& g, std::span<const TokenSequence> caps) {
                       std::vector<double> out;
                       for (const auto& c : caps) out.push_back(scorer(g, c));
                       return out;
                     }),
                     sets);
}

BatchCaptionScorer itm_scorer(const Model& model, const Codebook* codebook) {
  const bool continuous = model.config().visual_mode == VisualMode::continuous;
  if (continuous && codebook == nullptr) throw std::invalid_argument("itm_scorer: continuous model needs a codebook");
  return [&model, codebook, continuous](const ClusterGrid& grid, std::span<const TokenSequence> captions) {
    const auto& mc = model.config();
    if (grid.cells() != mc.grid_cells()) throw shape_error("itm_scorer: grid size does not match model");
    const auto features = continuous ? reconstruct(grid, *codebook).values : std::vector<float>{};
    EncoderInputs in;
    in.batch = captions.size();
    for (const auto& c : captions) {
      auto t = c.tokens();
      if (static_cast<int>(t.size()) > mc.max_text_len) throw shape_error("itm_scorer: caption too long");
      t.resize(static_cast<std::size_t>(mc.max_text_len), TextVocab::kPad);
      in.text.insert(in.text.end(), t.begin(), t.end());
      if (continuous)
        in.grid_features.insert(in.grid_features.end(), features.begin(), features.end());
      else
        in.grid_ids.insert(in.grid_ids.end(), grid.ids.begin(), grid.ids.end());
    }
    if (continuous) in.grid_mask.assign(in.batch * grid.ids.size(), 0);
    const auto out = model.encode(in);
    // Logits rather than sigmoid scores: same ranking, no saturation ties.
    const auto logits = model.itm_logits(out.h_cls);
    return std::vector<double>(logits.data().begin(), logits.data().end());
  };
}

double semantic_accuracy(std::span<const Scene> scenes, std::span<const TokenSequence> captions) {
  if (scenes.size() != captions.size()) throw std::invalid_argument("semantic_accuracy: size mismatch");
  if (scenes.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) total += oracle_check(scenes[i], captions[i]);
  return total / double(scenes.size());
}

// ---------------------------------------------------------------------------
// Surrogates

AttributeClassifier::AttributeClassifier(int input_dim, std::vector<float> weights, std::vector<float> bias)
    : input_dim_(input_dim), weights_(std::move(weights)), bias_(std::move(bias)) {
  if (input_dim_ <= 0 || weights_.size() != static_cast<std::size_t>(input_dim_) * kClasses ||
      bias_.size() != static_cast<std::size_t>(kClasses)) {
    throw shape_error("attribute classifier: bad parameter shapes");
  }
}

AttributeClassifier AttributeClassifier::train(std::span<const FeatureGrid> grids, std::span<const Scene> scenes,
                                               std::uint64_t seed, int epochs) {
  if (grids.empty() || grids.size() != scenes.size()) throw std::invalid_argument("attribute classifier: bad data");
  const int dim = grids[0].dim;
  std::vector<float> x;
  std::vector<int> y;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i].dim != dim) throw shape_error("attribute classifier: feature dims differ");
    const auto content = scenes[i].content();
    if (static_cast<int>(content.size()) != grids[i].cells()) throw shape_error("attribute classifier: scene size");
    x.insert(x.end(), grids[i].values.begin(), grids[i].values.end());
    y.insert(y.end(), content.begin(), content.end());
  }
  Rng rng(seed, "classifier");
  std::vector<float> w0(static_cast<std::size_t>(dim) * kClasses);
  for (auto& v : w0) v = static_cast<float>(rng.normal() * 0.01);
  auto w = Tensor::parameter({static_cast<std::size_t>(dim), static_cast<std::size_t>(kClasses)}, std::move(w0));
  auto b = Tensor::parameter({static_cast<std::size_t>(kClasses)}, std::vector<float>(kClasses, 0.0f));
  const auto X = Tensor::from({y.size(), static_cast<std::size_t>(dim)}, x);
  AdamWOptions opt;
  opt.lr = 0.05f;
  opt.weight_decay = 0.0f;
  AdamW adam({w, b}, opt);
  for (int e = 0; e < epochs; ++e) {
    adam.zero_grad();
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      auto loss = cross_entropy_from_logits(linear(X, w, b), y);
      tape.backward(loss);
    }
    adam.step(1.0f);
  }
  return AttributeClassifier(dim, {w.data().begin(), w.data().end()}, {b.data().begin(), b.data().end()});
}

std::vector<double> AttributeClassifier::cell_proba(std::span<const float> feature) const {
  if (static_cast<int>(feature.size()) != input_dim_) throw shape_error("attribute classifier: input size mismatch");
  std::vector<double> logits(bias_.begin(), bias_.end());
  for (int i = 0; i < input_dim_; ++i) {
    const double xi = feature[static_cast<std::size_t>(i)];
    const float* row = weights_.data() + static_cast<std::size_t>(i) * kClasses;
    for (int c = 0; c < kClasses; ++c) logits[c] += xi * row[c];
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& l : logits) total += (l = std::exp(l - mx));
  for (auto& l : logits) l /= total;
  return logits;
}

std::vector<double> AttributeClassifier::predict_proba(const FeatureGrid& grid) const {
  std::vector<double> mix(kClasses, 0.0);
  int objects = 0;
  for (int c = 0; c < grid.cells(); ++c) {
    const auto p = cell_proba(grid.cell(c));
    if (std::max_element(p.begin(), p.end()) - p.begin() == kBackgroundClass) continue;
    for (int k = 0; k < kClasses; ++k) mix[k] += p[k];
    ++objects;
  }
  if (objects == 0) {
    mix[kBackgroundClass] = 1.0;
    return mix;
  }
  for (auto& m : mix) m /= objects;
  return mix;
}

double AttributeClassifier::accuracy(std::span<const FeatureGrid> grids, std::span<const Scene> scenes) const {
  if (grids.size() != scenes.size() || grids.empty()) throw std::invalid_argument("attribute classifier: bad data");
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto content = scenes[i].content();
    for (int c = 0; c < grids[i].cells(); ++c) {
      const auto p = cell_proba(grids[i].cell(c));
      hits += std::max_element(p.begin(), p.end()) - p.begin() == content[static_cast<std::size_t>(c)];
      ++total;
    }
  }
  return double(hits) / double(total);
}

std::string AttributeClassifier::encode() const {
  ByteWriter w;
  w.bytes("GPCLS1");
  w.u32(static_cast<std::uint32_t>(input_dim_));
  w.u32(static_cast<std::uint32_t>(kClasses));
  w.f32s(weights_);
  w.f32s(bias_);
  return w.take();
}

AttributeClassifier AttributeClassifier::decode(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 6 || r.bytes(6) != "GPCLS1") throw format_error("not an attribute classifier file");
  const auto dim = r.u32();
  if (r.u32() != static_cast<std::uint32_t>(kClasses)) throw format_error("attribute classifier: class count");
  if (dim == 0 || r.remaining() != (std::size_t(dim) * kClasses + kClasses) * 4)
    throw format_error("attribute classifier: truncated payload");
  auto w = r.f32s(std::size_t(dim) * kClasses);
  auto b = r.f32s(kClasses);
  return AttributeClassifier(static_cast<int>(dim), std::move(w), std::move(b));
}

std::uint64_t AttributeClassifier::hash() const { return fnv1a64(encode()); }

std::vector<float> pooled_grid_features(const Model& model, std::span<const ClusterGrid> grids,
                                        std::span<const FeatureGrid> features) {
  const auto& mc = model.config();
  const bool continuous = mc.visual_mode == VisualMode::continuous;
  if (continuous && features.size() != grids.size())
    throw std::invalid_argument("pooled_grid_features: continuous model needs one feature grid per grid");
  const auto cells = static_cast<std::size_t>(mc.grid_cells());
  const auto D = static_cast<std::size_t>(mc.d_model);
  std::vector<float> out;
  out.reserve(grids.size() * D);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < grids.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, grids.size() - start);
    EncoderInputs in;
    in.batch = n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& g = grids[start + i];
      if (g.ids.size() != cells) throw shape_error("pooled_grid_features: grid size does not match model");
      std::vector<int> t(static_cast<std::size_t>(mc.max_text_len), TextVocab::kPad);
      t[0] = TextVocab::kCls;
      t[1] = TextVocab::kEos;
      in.text.insert(in.text.end(), t.begin(), t.end());
      if (continuous) {
        const auto& f = features[start + i].values;
        if (f.size() != cells * static_cast<std::size_t>(mc.feature_dim))
          throw shape_error("pooled_grid_features: feature grid does not match model");
        in.grid_features.insert(in.grid_features.end(), f.begin(), f.end());
      } else {
        in.grid_ids.insert(in.grid_ids.end(), g.ids.begin(), g.ids.end());
      }
    }
    if (continuous) in.grid_mask.assign(n * cells, 0);
    const auto enc = model.encode(in);
    const auto h = enc.h_grid.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> pooled(D, 0.0);
      for (std::size_t c = 0; c < cells; ++c)
        for (std::size_t d = 0; d < D; ++d) pooled[d] += h[(i * cells + c) * D + d];
      for (double v : pooled) out.push_back(static_cast<float>(v / double(cells)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string MetricsReport::to_json() const {
  json j;
  j["label"] = label;
  j["config_hash"] = hex64(config_hash);
  j["seed"] = seed;
  j["samples"] = samples;
  j["fid"] = fid;
  j["is_mean"] = inception.mean;
  j["is_std"] = inception.std;
  j["rprec_easy"] = rprec_easy;
  j["rprec_hard"] = rprec_hard;
  j["semantic_accuracy"] = semantic_accuracy;
  j["chance_accuracy"] = chance_accuracy;
  return j.dump(2);
}

std::string MetricsReport::csv_header() {
  return "label,config_hash,seed,samples,fid,is_mean,is_std,rprec_easy,rprec_hard_color,rprec_hard_shape,"
         "rprec_hard_count,semantic_accuracy,chance_accuracy";
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(6);
  auto hard = [&](const char* k) {
    const auto it = rprec_hard.find(k);
    return it == rprec_hard.end() ? 0.0 : it->second;
  };
  os << label << ',' << hex64(config_hash) << ',' << seed << ',' << samples << ',' << fid << ',' << inception.mean
     << ',' << inception.std << ',' << rprec_easy << ',' << hard("color") << ',' << hard("shape") << ','
     << hard("count") << ',' << semantic_accuracy << ',' << chance_accuracy;
  return os.str();
}

}  // namespace gridpaint
