// Grid generation from a caption and Gibbs-style caption generation from a
// grid.
//
// Every grid strategy starts from an all-MASK grid and ends with every cell
// filled. Strategies:
//   tlbr          one cell per forward pass in row-major order
//   random        a random permutation of the cells for the first N*N steps,
//                 then uniformly random cells (re-masked and re-predicted)
//   easy_first    one cell per pass: the unfilled cell with the highest
//                 confidence
//   mask_predict  K passes; pass 1 fills every cell, pass i re-masks the n_i
//                 lowest-confidence cells (ties in row-major order)
//
// A cell's confidence is the model probability of the id written there, at
// the pass that wrote it. Temperature 0 means argmax (ties to the lowest id)
// and consumes no randomness.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gridpaint/model.hpp"
#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

namespace gridpaint {

enum class Strategy : std::uint8_t { tlbr, random, easy_first, mask_predict };

std::string_view strategy_name(Strategy s);
/// Accepts tlbr, random, easy-first / easy_first, mask-predict / mask_predict.
Strategy parse_strategy(std::string_view name);

struct SamplerSchedule {
  Strategy strategy = Strategy::mask_predict;
  int k_iters = 4;          // mask_predict
  int steps = 0;            // random; 0 means N*N
  float temperature = 1.0f; // every pass of tlbr/random/easy_first, pass 1 of mask_predict
  float refine_temperature = 0.0f;  // mask_predict passes 2..K
  std::uint64_t seed = 0;
  bool keep_trace = false;  // record the grid after every pass

  void validate() const;
};

/// Per-iteration update counts: linear from T down to 1 over K iterations,
/// rounded half up.
std::vector<int> mask_predict_schedule(int cells, int k);

struct GridSample {
  ClusterGrid grid;
  std::vector<float> confidence;   // per cell, in [0, 1]
  std::vector<ClusterGrid> trace;  // optional; unfilled cells hold -1
  int forward_passes = 0;
  int updates = 0;
  /// mask_predict: cells re-masked at each pass after the first.
  std::vector<std::vector<int>> remasked;
};

/// Batched sampling; caption i uses the random stream (schedule.seed, i), so
/// results do not depend on how captions are grouped.
std::vector<GridSample> sample_grids(const Model& model, std::span<const TokenSequence> captions,
                                     const SamplerSchedule& schedule);
GridSample sample_grid(const Model& model, const TokenSequence& caption, const SamplerSchedule& schedule);

/// Continuous-mode counterpart used for the regression baseline: cells hold
/// regressed features; a cell's confidence is 1 / (1 + d^2) with d the
/// distance of the feature to its nearest codebook centroid.
struct FeatureSample {
  FeatureGrid grid;
  std::vector<float> confidence;
  int forward_passes = 0;
};
std::vector<FeatureSample> sample_feature_grids(const Model& model, std::span<const TokenSequence> captions,
                                                const SamplerSchedule& schedule, const Codebook& codebook);

/// CLS + prefix + MASK ... + EOS with `words` word positions in total; each
/// step re-masks one non-prefix word position (a random permutation first,
/// then uniformly random positions) and samples it from the MLM head,
/// restricted to non-special tokens. Requires steps >= words - prefix.
TokenSequence sample_text_gibbs(const Model& model, const ClusterGrid& grid, std::span<const int> prefix,
                                int words, int steps, float temperature, std::uint64_t seed);

/// One JSON object: caption, strategy, seed, ids and (optionally) the trace.
std::string sample_record_json(const TokenSequence& caption, const SamplerSchedule& schedule,
                               const GridSample& sample, std::uint64_t config_hash);

/// Categorical draw from softmax(logits / temperature); argmax when
/// temperature is 0. Returns the index and its untempered probability.
std::pair<int, float> draw_from_logits(std::span<const float> logits, float temperature, Rng* rng);

}  // namespace gridpaint
