#include "gridpaint/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <stdexcept>

#include "gridpaint/io.hpp"
#include "gridpaint/pretrain.hpp"

namespace gridpaint {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::tlbr:
      return "tlbr";
    case Strategy::random:
      return "random";
    case Strategy::easy_first:
      return "easy-first";
    case Strategy::mask_predict:
      return "mask-predict";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "tlbr") return Strategy::tlbr;
  if (name == "random") return Strategy::random;
  if (name == "easy-first" || name == "easy_first") return Strategy::easy_first;
  if (name == "mask-predict" || name == "mask_predict") return Strategy::mask_predict;
  throw std::invalid_argument("unknown sampling strategy '" + std::string(name) + "'");
}

void SamplerSchedule::validate() const {
  if (k_iters < 1) throw std::invalid_argument("sampler: k_iters must be >= 1");
  if (steps < 0) throw std::invalid_argument("sampler: steps must be >= 0");
  if (!(temperature >= 0.0f) || !(refine_temperature >= 0.0f)) {
    throw std::invalid_argument("sampler: temperatures must be >= 0");
  }
}

std::vector<int> mask_predict_schedule(int cells, int k) {
  if (cells < 1 || k < 1) throw std::invalid_argument("mask_predict_schedule needs T >= 1 and K >= 1");
  if (k == 1) return {cells};
  // n_i = T - (T - 1) (i - 1) / (K - 1), rounded half up in exact integers.
  std::vector<int> out;
  const long long den = k - 1;
  for (int i = 0; i < k; ++i) {
    const long long num = static_cast<long long>(cells) * den - static_cast<long long>(cells - 1) * i;
    out.push_back(static_cast<int>((2 * num + den) / (2 * den)));
  }
  return out;
}

std::pair<int, float> draw_from_logits(std::span<const float> logits, float temperature, Rng* rng) {
  if (logits.empty()) throw std::invalid_argument("draw_from_logits: empty logits");
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(double(logits[i]) - mx);
    z += p[i];
  }
  int chosen = 0;
  if (temperature == 0.0f) {
    chosen = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  } else {
    if (rng == nullptr) throw std::invalid_argument("draw_from_logits: sampling needs an rng");
    std::vector<double> w(logits.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((double(logits[i]) - mx) / temperature);
    chosen = static_cast<int>(rng->categorical(w));
  }
  return {chosen, static_cast<float>(p[static_cast<std::size_t>(chosen)] / z)};
}

namespace {

constexpr std::size_t kChunk = 256;

std::vector<int> padded_text(std::span<const TokenSequence> captions, int max_len) {
  std::vector<int> out;
  out.reserve(captions.size() * static_cast<std::size_t>(max_len));
  for (const auto& c : captions) {
    auto t = pad_tokens(c, max_len);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

// Discrete backend: cells hold cluster ids; predictions are CCC logits.
class DiscreteBackend {
 public:
  DiscreteBackend(const Model& model, std::span<const TokenSequence> captions)
      : model_(model), B_(captions.size()), T_(static_cast<std::size_t>(model.config().grid_cells())),
        k_(static_cast<std::size_t>(model.config().visual_vocab)) {
    if (model.config().visual_mode != VisualMode::discrete) throw contract_error("grid sampling needs a discrete-mode model");
    text_ = padded_text(captions, model.config().max_text_len);
    ids_.assign(B_ * T_, -1);
  }

  void forward(const std::vector<std::uint8_t>& mask) {
    EncoderInputs in;
    in.batch = B_;
    in.text = text_;
    in.grid_ids.resize(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) in.grid_ids[i] = mask[i] || ids_[i] < 0 ? 0 : ids_[i];
    in.grid_mask = mask;
    const auto h = model_.encode(in);
    const auto logits = model_.ccc_logits(h.h_grid);
    logits_.assign(logits.data().begin(), logits.data().end());
  }

  std::span<const float> logits(std::size_t b, std::size_t cell) const {
    return {logits_.data() + (b * T_ + cell) * k_, k_};
  }

  float peek(std::size_t b, std::size_t cell) const { return draw_from_logits(logits(b, cell), 0.0f, nullptr).second; }

  float write(std::size_t b, std::size_t cell, float tau, Rng& rng) {
    const auto [id, conf] = draw_from_logits(logits(b, cell), tau, &rng);
    ids_[b * T_ + cell] = id;
    return conf;
  }

  std::vector<int> ids_;

 private:
  const Model& model_;
  std::size_t B_, T_, k_;
  std::vector<int> text_;
  std::vector<float> logits_;
};

// Continuous backend: cells hold regressed features.
class ContinuousBackend {
 public:
  ContinuousBackend(const Model& model, std::span<const TokenSequence> captions, const Codebook& codebook)
      : model_(model), codebook_(codebook), B_(captions.size()),
        T_(static_cast<std::size_t>(model.config().grid_cells())),
        d_(static_cast<std::size_t>(model.config().feature_dim)) {
    if (model.config().visual_mode != VisualMode::continuous) throw contract_error("feature sampling needs a continuous-mode model");
    if (codebook.dim != model.config().feature_dim) throw std::invalid_argument("codebook dim does not match model");
    text_ = padded_text(captions, model.config().max_text_len);
    features_.assign(B_ * T_ * d_, 0.0f);
  }

  void forward(const std::vector<std::uint8_t>& mask) {
    EncoderInputs in;
    in.batch = B_;
    in.text = text_;
    in.grid_features = features_;
    in.grid_mask = mask;
    const auto h = model_.encode(in);
    const auto pred = model_.mvfr_regress(h.h_grid);
    pred_.assign(pred.data().begin(), pred.data().end());
  }

  float peek(std::size_t b, std::size_t cell) const {
    double d2 = 0.0;
    codebook_.nearest(std::span<const float>(pred_.data() + (b * T_ + cell) * d_, d_), &d2);
    return static_cast<float>(1.0 / (1.0 + d2));
  }

  float write(std::size_t b, std::size_t cell, float, Rng&) {
    std::copy_n(pred_.begin() + static_cast<std::ptrdiff_t>((b * T_ + cell) * d_), d_,
                features_.begin() + static_cast<std::ptrdiff_t>((b * T_ + cell) * d_));
    return peek(b, cell);
  }

  std::vector<float> features_;

 private:
  const Model& model_;
  const Codebook& codebook_;
  std::size_t B_, T_, d_;
  std::vector<int> text_;
  std::vector<float> pred_;
};

struct RunState {
  std::vector<std::vector<float>> confidence;
  std::vector<std::vector<std::uint8_t>> filled;
  std::vector<std::vector<std::vector<int>>> remasked;
  int passes = 0;
  int updates = 0;
};

// Runs one strategy for a chunk of B captions whose global indices start at
// `first`. `after_pass` is called after every forward pass and write.
template <typename Backend, typename AfterPass>
RunState run_strategy(Backend& be, std::size_t B, std::size_t T, std::size_t first, const SamplerSchedule& s,
                      AfterPass&& after_pass) {
  RunState st;
  st.confidence.assign(B, std::vector<float>(T, 0.0f));
  st.filled.assign(B, std::vector<std::uint8_t>(T, 0));
  st.remasked.resize(B);
  std::vector<Rng> rngs;
  for (std::size_t b = 0; b < B; ++b) rngs.emplace_back(mix64(derive_seed(s.seed, "sampler") + first + b));

  std::vector<std::uint8_t> mask(B * T);
  auto unfilled_mask = [&] {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < T; ++c) mask[b * T + c] = st.filled[b][c] ? 0 : 1;
  };
  auto commit = [&](std::size_t b, std::size_t c, float tau) {
    st.confidence[b][c] = be.write(b, c, tau, rngs[b]);
    st.filled[b][c] = 1;
    ++st.updates;
  };
  auto pass = [&] {
    be.forward(mask);
    ++st.passes;
  };

  switch (s.strategy) {
    case Strategy::tlbr:
      for (std::size_t c = 0; c < T; ++c) {
        unfilled_mask();
        pass();
        for (std::size_t b = 0; b < B; ++b) commit(b, c, s.temperature);
        after_pass();
      }
      break;
    case Strategy::random: {
      const std::size_t steps = s.steps == 0 ? T : static_cast<std::size_t>(s.steps);
      if (steps < T) throw std::invalid_argument("random sampling needs at least N*N steps");
      std::vector<std::vector<std::size_t>> order(B);
      for (std::size_t b = 0; b < B; ++b) {
        order[b].resize(T);
        std::iota(order[b].begin(), order[b].end(), std::size_t{0});
        rngs[b].shuffle(order[b].begin(), order[b].end());
      }
      std::vector<std::size_t> cell(B);
      for (std::size_t t = 0; t < steps; ++t) {
        unfilled_mask();
        for (std::size_t b = 0; b < B; ++b) {
          cell[b] = t < T ? order[b][t] : rngs[b].below(T);
          mask[b * T + cell[b]] = 1;
        }
        pass();
        for (std::size_t b = 0; b < B; ++b) commit(b, cell[b], s.temperature);
        after_pass();
      }
      break;
    }
    case Strategy::easy_first:
      for (std::size_t t = 0; t < T; ++t) {
        unfilled_mask();
        pass();
        for (std::size_t b = 0; b < B; ++b) {
          std::size_t best = T;
          float best_conf = -1.0f;
          for (std::size_t c = 0; c < T; ++c) {
            if (st.filled[b][c]) continue;
            const float p = be.peek(b, c);
            if (p > best_conf) {
              best_conf = p;
              best = c;
            }
          }
          commit(b, best, s.temperature);
        }
        after_pass();
      }
      break;
    case Strategy::mask_predict: {
      const auto counts = mask_predict_schedule(static_cast<int>(T), s.k_iters);
      std::fill(mask.begin(), mask.end(), std::uint8_t{1});
      pass();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < T; ++c) commit(b, c, s.temperature);
      after_pass();
      for (std::size_t it = 1; it < counts.size(); ++it) {
        const auto n = static_cast<std::size_t>(counts[it]);
        std::fill(mask.begin(), mask.end(), std::uint8_t{0});
        std::vector<std::vector<std::size_t>> chosen(B);
        for (std::size_t b = 0; b < B; ++b) {
          std::vector<std::size_t> idx(T);
          std::iota(idx.begin(), idx.end(), std::size_t{0});
          std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
            return st.confidence[b][x] < st.confidence[b][y];
          });
          idx.resize(n);
          std::sort(idx.begin(), idx.end());
          for (std::size_t c : idx) mask[b * T + c] = 1;
          st.remasked[b].emplace_back(idx.begin(), idx.end());
          chosen[b] = std::move(idx);
        }
        pass();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c : chosen[b]) commit(b, c, s.refine_temperature);
        after_pass();
      }
      break;
    }
  }
  return st;
}

}  // namespace

std::vector<GridSample> sample_grids(const Model& model, std::span<const TokenSequence> captions,
                                     const SamplerSchedule& schedule) {
  schedule.validate();
  const auto T = static_cast<std::size_t>(model.config().grid_cells());
  const int n = model.config().grid_n;
  std::vector<GridSample> out;
  out.reserve(captions.size());
  for (std::size_t first = 0; first < captions.size(); first += kChunk) {
    const auto chunk = captions.subspan(first, std::min(kChunk, captions.size() - first));
    DiscreteBackend be(model, chunk);
    std::vector<std::vector<ClusterGrid>> traces(chunk.size());
    auto after = [&] {
      if (!schedule.keep_trace) return;
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        traces[b].push_back({n, std::vector<int>(be.ids_.begin() + static_cast<std::ptrdiff_t>(b * T),
                                                 be.ids_.begin() + static_cast<std::ptrdiff_t>((b + 1) * T))});
      }
    };
    auto st = run_strategy(be, chunk.size(), T, first, schedule, after);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      GridSample g;
      g.grid.grid_n = n;
      g.grid.ids.assign(be.ids_.begin() + static_cast<std::ptrdiff_t>(b * T),
                        be.ids_.begin() + static_cast<std::ptrdiff_t>((b + 1) * T));
      g.confidence = std::move(st.confidence[b]);
      g.trace = std::move(traces[b]);
      g.forward_passes = st.passes;
      g.updates = st.updates / static_cast<int>(chunk.size());
      for (auto& r : st.remasked[b]) g.remasked.emplace_back(r.begin(), r.end());
      out.push_back(std::move(g));
    }
  }
  return out;
}

GridSample sample_grid(const Model& model, const TokenSequence& caption, const SamplerSchedule& schedule) {
  return sample_grids(model, std::span<const TokenSequence>(&caption, 1), schedule).front();
}

std::vector<FeatureSample> sample_feature_grids(const Model& model, std::span<const TokenSequence> captions,
                                                const SamplerSchedule& schedule, const Codebook& codebook) {
  schedule.validate();
  const auto T = static_cast<std::size_t>(model.config().grid_cells());
  const auto d = static_cast<std::size_t>(model.config().feature_dim);
  std::vector<FeatureSample> out;
  for (std::size_t first = 0; first < captions.size(); first += kChunk) {
    const auto chunk = captions.subspan(first, std::min(kChunk, captions.size() - first));
    ContinuousBackend be(model, chunk, codebook);
    auto st = run_strategy(be, chunk.size(), T, first, schedule, [] {});
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      FeatureSample f;
      f.grid.grid_n = model.config().grid_n;
      f.grid.dim = static_cast<int>(d);
      f.grid.values.assign(be.features_.begin() + static_cast<std::ptrdiff_t>(b * T * d),
                           be.features_.begin() + static_cast<std::ptrdiff_t>((b + 1) * T * d));
      f.confidence = std::move(st.confidence[b]);
      f.forward_passes = st.passes;
      out.push_back(std::move(f));
    }
  }
  return out;
}

TokenSequence sample_text_gibbs(const Model& model, const ClusterGrid& grid, std::span<const int> prefix,
                                int words, int steps, float temperature, std::uint64_t seed) {
  const auto& mc = model.config();
  if (mc.visual_mode != VisualMode::discrete) throw contract_error("text sampling needs a discrete-mode model");
  if (grid.ids.size() != static_cast<std::size_t>(mc.grid_cells())) throw shape_error("grid does not match model");
  if (words < 1 || words + 2 > mc.max_text_len) throw std::invalid_argument("word count out of range");
  if (static_cast<int>(prefix.size()) >= words) throw std::invalid_argument("prefix must be shorter than the caption");
  if (!(temperature >= 0.0f)) throw std::invalid_argument("temperature must be >= 0");
  for (int t : prefix)
    if (t < 0 || t >= mc.text_vocab || TextVocab::is_special(t)) throw std::invalid_argument("prefix must hold word ids");
  const auto P = prefix.size();
  const auto free = static_cast<std::size_t>(words) - P;
  if (steps < static_cast<int>(free)) throw std::invalid_argument("Gibbs sampling needs steps >= free positions");

  const auto L = static_cast<std::size_t>(mc.max_text_len);
  std::vector<int> text(L, TextVocab::kPad);
  text[0] = TextVocab::kCls;
  for (std::size_t i = 0; i < P; ++i) text[1 + i] = prefix[i];
  for (std::size_t i = 0; i < free; ++i) text[1 + P + i] = TextVocab::kMask;
  text[static_cast<std::size_t>(words) + 1] = TextVocab::kEos;

  Rng rng(seed, "gibbs");
  std::vector<std::size_t> order(free);
  std::iota(order.begin(), order.end(), 1 + P);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::uint8_t> filled(L, 1);
  for (std::size_t i = 0; i < free; ++i) filled[1 + P + i] = 0;

  for (int t = 0; t < steps; ++t) {
    const std::size_t pos = static_cast<std::size_t>(t) < free ? order[static_cast<std::size_t>(t)] : 1 + P + rng.below(free);
    EncoderInputs in;
    in.batch = 1;
    in.text = text;
    in.grid_ids = grid.ids;
    in.grid_mask.assign(grid.ids.size(), 0);
    in.text_mask.assign(L, 0);
    for (std::size_t i = 0; i < L; ++i) in.text_mask[i] = filled[i] ? 0 : 1;
    in.text_mask[pos] = 1;
    for (std::size_t i = 0; i < L; ++i)
      if (in.text_mask[i]) in.text[i] = TextVocab::kMask;
    const auto h = model.encode(in);
    const auto logits = model.mlm_logits(h.h_text);
    std::vector<float> row(logits.data().begin() + static_cast<std::ptrdiff_t>(pos * mc.text_vocab),
                           logits.data().begin() + static_cast<std::ptrdiff_t>((pos + 1) * mc.text_vocab));
    for (int s = 0; s <= TextVocab::kMask; ++s) row[static_cast<std::size_t>(s)] = -std::numeric_limits<float>::infinity();
    text[pos] = draw_from_logits(row, temperature, &rng).first;
    filled[pos] = 1;
  }
  text.resize(static_cast<std::size_t>(words) + 2);
  return TokenSequence(std::move(text), mc.max_text_len);
}

std::string sample_record_json(const TokenSequence& caption, const SamplerSchedule& schedule,
                               const GridSample& sample, std::uint64_t config_hash) {
  nlohmann::json j = {{"caption", caption.text()},
                      {"caption_ids", caption.tokens()},
                      {"strategy", strategy_name(schedule.strategy)},
                      {"k_iters", schedule.k_iters},
                      {"temperature", schedule.temperature},
                      {"refine_temperature", schedule.refine_temperature},
                      {"seed", schedule.seed},
                      {"grid_n", sample.grid.grid_n},
                      {"ids", sample.grid.ids},
                      {"forward_passes", sample.forward_passes},
                      {"config_hash", hex64(config_hash)}};
  if (!sample.trace.empty()) {
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& g : sample.trace) tr.push_back(g.ids);
    j["trace"] = std::move(tr);
  }
  return j.dump();
}

}  // namespace gridpaint
