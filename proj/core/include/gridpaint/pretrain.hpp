// Masking, task sampling, loss assembly and the pretraining loop.
//
// Each step trains exactly one objective, chosen uniformly among
//   image_mask  masked grid cells -> CCC cross-entropy (or MVFR regression)
//   text_mask   masked words      -> MLM cross-entropy
//   no_mask     matched / swapped captions -> ITM binary cross-entropy
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gridpaint/model.hpp"
#include "gridpaint/optim.hpp"
#include "gridpaint/random.hpp"
#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

namespace gridpaint {

enum class Masking : std::uint8_t { uniform, bernoulli };
enum class VisualObjective : std::uint8_t { ccc, mvfr };

struct TrainConfig {
  int epochs = 40;
  int batch_size = 64;
  /// Stop after this many steps when > 0 (otherwise epochs * batches per epoch).
  int max_steps = 0;
  float lr = 1e-3f;
  float warmup_fraction = 0.05f;
  float weight_decay = 0.01f;
  double clip_norm = 1.0;
  Masking masking = Masking::uniform;
  double bernoulli_p = 0.15;
  double text_mask_p = 0.15;
  VisualObjective objective = VisualObjective::ccc;
  /// Drop question captions from image_mask batches.
  bool ccc_data_filter = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 = final checkpoint only

  void validate() const;
};

struct MaskPattern {
  std::vector<std::uint8_t> masked;  // 1 = masked

  std::size_t length() const { return masked.size(); }
  std::size_t count() const;
};

/// Each position masked independently with probability p.
MaskPattern sample_mask_bernoulli(std::size_t length, double p, Rng& rng);
/// r ~ U[0, 1]; round(r * length) positions chosen without replacement.
MaskPattern sample_mask_uniform(std::size_t length, Rng& rng);
/// Bernoulli masking of word positions only (CLS, EOS and PAD are never masked).
MaskPattern sample_text_mask(std::span<const int> tokens, double p, Rng& rng);

enum class TaskKind : std::uint8_t { image_mask, text_mask, no_mask };
std::string_view task_name(TaskKind k);

struct Task {
  TaskKind kind = TaskKind::image_mask;
  /// Drawn with probability 0.5 for no_mask steps; always false otherwise.
  bool replaced = false;
};

Task sample_task(Rng& rng);

/// A dataset record in model-ready form.
struct Example {
  std::vector<int> text;       // max_text_len ids, PAD padded
  std::vector<int> grid_ids;   // N*N cluster ids
  std::vector<float> features; // N*N*d
  CaptionKind kind = CaptionKind::descriptive;
  Scene scene;
  TokenSequence caption;
};

std::vector<int> pad_tokens(const TokenSequence& caption, int max_text_len);
std::vector<Example> make_examples(std::span<const DatasetRecord> records, const Codebook& codebook,
                                   int max_text_len);

/// Masked-position losses; positions with mask 0 are ignored entirely and an
/// empty mask yields a constant zero.
Tensor ccc_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);
Tensor mvfr_loss(const Tensor& pred, std::span<const float> targets, std::span<const std::uint8_t> mask);
Tensor mlm_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

struct PreparedBatch {
  Task task;
  EncoderInputs inputs;
  std::vector<int> grid_targets;      // batch * N*N
  std::vector<float> feature_targets; // batch * N*N * d
  std::vector<int> text_targets;      // batch * L
  std::vector<float> itm_labels;      // batch
};

/// Builds the encoder inputs and targets of one step. For image_mask with
/// the data filter on, question examples are dropped (the batch may shrink
/// or become empty). For no_mask, every example is independently swapped for
/// another example's caption with probability 0.5, rejecting captions that
/// happen to be true of the scene.
PreparedBatch prepare_batch(std::span<const Example> examples, std::span<const std::size_t> indices,
                            Task task, const TrainConfig& config, const ModelConfig& model_config,
                            Rng& mask_rng);

struct StepLosses {
  std::int64_t step = 0;
  TaskKind task = TaskKind::image_mask;
  double ccc = 0.0;
  double mvfr = 0.0;
  double mlm = 0.0;
  double itm = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::size_t examples = 0;
  bool skipped = false;  // nothing to learn from (empty batch or empty mask)
  double wall_seconds = 0.0;  // since the start of the loop
};

/// Loss of one prepared batch; records on the active tape if any.
Tensor batch_loss(const Model& model, const PreparedBatch& batch, const TrainConfig& config,
                  Rng* dropout_rng, StepLosses* terms);

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& config, std::int64_t total_steps);

  /// One optimizer step (gradient clipping and warmup included).
  StepLosses step(const PreparedBatch& batch, Rng* dropout_rng);

  std::int64_t steps_done() const { return step_; }
  std::int64_t warmup_steps() const { return warmup_; }
  const AdamW& optimizer() const { return optim_; }

 private:
  Model& model_;
  TrainConfig config_;
  std::vector<Tensor> params_;
  AdamW optim_;
  std::int64_t total_;
  std::int64_t warmup_;
  std::int64_t step_ = 0;
};

std::int64_t planned_steps(const TrainConfig& config, std::size_t examples);

struct TrainResult {
  std::vector<StepLosses> log;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

/// Runs the full schedule. Data order, tasks, masks and dropout come from
/// separate sub-streams of config.seed so that toggling one ablation factor
/// leaves the others untouched. When out_dir is non-empty, writes
/// train_log.csv and checkpoints (step_<n>.ckpt, final.ckpt) there.
/// Throws numeric_error on a non-finite loss.
TrainResult pretrain_loop(const TrainConfig& config, std::span<const Example> examples, Model& model,
                          const std::filesystem::path& out_dir = {},
                          const std::function<void(const StepLosses&)>& on_step = {});

std::string train_log_csv(std::span<const StepLosses> log);

}  // namespace gridpaint
