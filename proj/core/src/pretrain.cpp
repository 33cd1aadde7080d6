#include "gridpaint/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gridpaint/checkpoint.hpp"
#include "gridpaint/io.hpp"

namespace gridpaint {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(lr > 0.0f)) fail("lr must be positive");
  if (!(warmup_fraction >= 0.0f && warmup_fraction <= 1.0f)) fail("warmup_fraction must be in [0, 1]");
  if (!(weight_decay >= 0.0f)) fail("weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (!(bernoulli_p > 0.0 && bernoulli_p < 1.0)) fail("bernoulli p must be in (0, 1)");
  if (!(text_mask_p > 0.0 && text_mask_p < 1.0)) fail("text mask p must be in (0, 1)");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

std::size_t MaskPattern::count() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), std::uint8_t{1}));
}

MaskPattern sample_mask_bernoulli(std::size_t length, double p, Rng& rng) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("bernoulli mask p must be in (0, 1)");
  MaskPattern m;
  m.masked.resize(length);
  for (auto& x : m.masked) x = rng.bernoulli(p) ? 1 : 0;
  return m;
}

MaskPattern sample_mask_uniform(std::size_t length, Rng& rng) {
  if (length == 0) throw std::invalid_argument("uniform mask needs length >= 1");
  const double r = rng.uniform();
  const auto count = static_cast<std::size_t>(std::floor(r * double(length) + 0.5));
  MaskPattern m;
  m.masked.assign(length, 0);
  for (std::size_t i : rng.choose(length, std::min(count, length))) m.masked[i] = 1;
  return m;
}

MaskPattern sample_text_mask(std::span<const int> tokens, double p, Rng& rng) {
  MaskPattern m;
  m.masked.assign(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (TextVocab::is_special(tokens[i])) continue;
    m.masked[i] = rng.bernoulli(p) ? 1 : 0;
  }
  return m;
}

std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::image_mask:
      return "image_mask";
    case TaskKind::text_mask:
      return "text_mask";
    case TaskKind::no_mask:
      return "no_mask";
  }
  return "?";
}

Task sample_task(Rng& rng) {
  Task t;
  t.kind = static_cast<TaskKind>(rng.below(3));
  if (t.kind == TaskKind::no_mask) t.replaced = rng.bernoulli(0.5);
  return t;
}

std::vector<int> pad_tokens(const TokenSequence& caption, int max_text_len) {
  if (caption.size() > static_cast<std::size_t>(max_text_len)) throw std::invalid_argument("caption longer than max_text_len");
  std::vector<int> out(caption.tokens());
  out.resize(static_cast<std::size_t>(max_text_len), TextVocab::kPad);
  return out;
}

std::vector<Example> make_examples(std::span<const DatasetRecord> records, const Codebook& codebook,
                                   int max_text_len) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Example e;
    e.text = pad_tokens(r.caption, max_text_len);
    e.grid_ids = quantize(r.features, codebook).ids;
    e.features = r.features.values;
    e.kind = r.kind;
    e.scene = r.scene;
    e.caption = r.caption;
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::vector<std::size_t> masked_rows(std::span<const std::uint8_t> mask) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  return rows;
}

Tensor masked_ce(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != mask.size() || logits.rank() != 2 || logits.dim(0) != mask.size()) {
    throw shape_error("masked loss: logits, targets and mask disagree");
  }
  const auto rows = masked_rows(mask);
  if (rows.empty()) return Tensor::scalar(0.0f);
  std::vector<int> t(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) t[i] = targets[rows[i]];
  return cross_entropy_from_logits(gather_rows(logits, rows), t);
}

}  // namespace

Tensor ccc_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  return masked_ce(logits, targets, mask);
}

Tensor mlm_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  return masked_ce(logits, targets, mask);
}

Tensor mvfr_loss(const Tensor& pred, std::span<const float> targets, std::span<const std::uint8_t> mask) {
  if (pred.rank() != 2 || pred.dim(0) != mask.size() || targets.size() != pred.numel()) {
    throw shape_error("mvfr loss: prediction, targets and mask disagree");
  }
  const auto rows = masked_rows(mask);
  if (rows.empty()) return Tensor::scalar(0.0f);
  const std::size_t d = pred.dim(1);
  std::vector<float> t(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(targets.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d, t.begin() + static_cast<std::ptrdiff_t>(i * d));
  return mse_loss(gather_rows(pred, rows), Tensor::from({rows.size(), d}, std::move(t)));
}

PreparedBatch prepare_batch(std::span<const Example> examples, std::span<const std::size_t> indices,
                            Task task, const TrainConfig& config, const ModelConfig& mc, Rng& mask_rng) {
  PreparedBatch b;
  b.task = task;
  std::vector<std::size_t> chosen;
  for (std::size_t i : indices) {
    if (i >= examples.size()) throw index_error("example index out of range");
    if (task.kind == TaskKind::image_mask && config.ccc_data_filter &&
        examples[i].kind == CaptionKind::question) {
      continue;
    }
    chosen.push_back(i);
  }
  const std::size_t cells = static_cast<std::size_t>(mc.grid_cells());
  const std::size_t L = static_cast<std::size_t>(mc.max_text_len);
  auto& in = b.inputs;
  in.batch = chosen.size();
  in.grid_mask.assign(chosen.size() * cells, 0);
  in.text_mask.assign(chosen.size() * L, 0);
  for (std::size_t bi = 0; bi < chosen.size(); ++bi) {
    const Example* ex = &examples[chosen[bi]];
    const Example* text_source = ex;
    if (task.kind == TaskKind::no_mask) {
      bool swap = mask_rng.bernoulli(0.5);
      if (swap && examples.size() > 1) {
        for (int attempt = 0; attempt < 8; ++attempt) {
          std::size_t j = mask_rng.below(examples.size() - 1);
          if (j >= chosen[bi]) ++j;
          text_source = &examples[j];
          if (oracle_check(ex->scene, text_source->caption) < 1.0) break;
        }
      } else {
        swap = false;
      }
      b.itm_labels.push_back(swap ? 0.0f : 1.0f);
    }
    if (text_source->text.size() != L) throw shape_error("example text length does not match model");
    in.text.insert(in.text.end(), text_source->text.begin(), text_source->text.end());
    in.grid_ids.insert(in.grid_ids.end(), ex->grid_ids.begin(), ex->grid_ids.end());
    in.grid_features.insert(in.grid_features.end(), ex->features.begin(), ex->features.end());
    if (task.kind == TaskKind::image_mask) {
      const auto m = config.masking == Masking::uniform ? sample_mask_uniform(cells, mask_rng)
                                                         : sample_mask_bernoulli(cells, config.bernoulli_p, mask_rng);
      std::copy(m.masked.begin(), m.masked.end(), in.grid_mask.begin() + static_cast<std::ptrdiff_t>(bi * cells));
    } else if (task.kind == TaskKind::text_mask) {
      const auto m = sample_text_mask(ex->text, config.text_mask_p, mask_rng);
      std::copy(m.masked.begin(), m.masked.end(), in.text_mask.begin() + static_cast<std::ptrdiff_t>(bi * L));
    }
  }
  if (mc.visual_mode == VisualMode::discrete) {
    in.grid_features.clear();
  }
  b.grid_targets = in.grid_ids;
  b.feature_targets = in.grid_features;
  b.text_targets = in.text;
  if (mc.visual_mode == VisualMode::continuous) {
    // The continuous model never sees cluster ids.
    b.inputs.grid_ids.clear();
  }
  return b;
}

Tensor batch_loss(const Model& model, const PreparedBatch& b, const TrainConfig& config,
                  Rng* dropout_rng, StepLosses* terms) {
  StepLosses local;
  StepLosses& t = terms ? *terms : local;
  t.task = b.task.kind;
  t.examples = b.inputs.batch;
  if (b.inputs.batch == 0) {
    t.skipped = true;
    return Tensor::scalar(0.0f);
  }
  const auto& mc = model.config();
  // Skip the forward pass entirely when the step has nothing to learn from.
  auto any = [](const std::vector<std::uint8_t>& m) { return std::find(m.begin(), m.end(), 1) != m.end(); };
  if ((b.task.kind == TaskKind::image_mask && !any(b.inputs.grid_mask)) ||
      (b.task.kind == TaskKind::text_mask && !any(b.inputs.text_mask))) {
    t.skipped = true;
    return Tensor::scalar(0.0f);
  }
  const auto h = model.encode(b.inputs, dropout_rng);
  Tensor loss;
  switch (b.task.kind) {
    case TaskKind::image_mask:
      if (config.objective == VisualObjective::ccc) {
        if (mc.visual_mode != VisualMode::discrete) throw contract_error("CCC objective needs a discrete-mode model");
        loss = ccc_loss(model.ccc_logits(h.h_grid), b.grid_targets, b.inputs.grid_mask);
        t.ccc = loss.item();
      } else {
        if (mc.visual_mode != VisualMode::continuous) throw contract_error("MVFR objective needs a continuous-mode model");
        loss = mvfr_loss(model.mvfr_regress(h.h_grid), b.feature_targets, b.inputs.grid_mask);
        t.mvfr = loss.item();
      }
      break;
    case TaskKind::text_mask:
      loss = mlm_loss(model.mlm_logits(h.h_text), b.text_targets, b.inputs.text_mask);
      t.mlm = loss.item();
      break;
    case TaskKind::no_mask:
      loss = bce_with_logits(model.itm_logits(h.h_cls), std::span<const float>(b.itm_labels));
      t.itm = loss.item();
      break;
  }
  t.total = loss.item();
  if (!std::isfinite(t.total)) throw numeric_error("non-finite training loss");
  return loss;
}

Trainer::Trainer(Model& model, const TrainConfig& config, std::int64_t total_steps)
    : model_(model),
      config_(config),
      params_(model.parameters()),
      optim_(params_, AdamWOptions{config.lr, 0.9f, 0.999f, 1e-8f, config.weight_decay}),
      total_(total_steps),
      warmup_(static_cast<std::int64_t>(std::llround(double(config.warmup_fraction) * double(total_steps)))) {
  config_.validate();
}

StepLosses Trainer::step(const PreparedBatch& batch, Rng* dropout_rng) {
  StepLosses s;
  s.step = step_;
  const float mult = warmup_multiplier(step_ + 1, warmup_);
  s.lr = double(config_.lr) * mult;
  ++step_;
  optim_.zero_grad();
  Tape<float> tape;
  Tensor loss;
  {
    TapeScope<float> scope(tape);
    loss = batch_loss(model_, batch, config_, dropout_rng, &s);
  }
  if (s.skipped || tape.size() == 0) {
    s.skipped = true;
    return s;
  }
  tape.backward(loss);
  s.grad_norm = clip_grad_norm(params_, config_.clip_norm);
  if (!std::isfinite(s.grad_norm)) throw numeric_error("non-finite gradient norm");
  optim_.step(mult);
  return s;
}

std::int64_t planned_steps(const TrainConfig& config, std::size_t examples) {
  const auto per_epoch = static_cast<std::int64_t>(examples / static_cast<std::size_t>(config.batch_size));
  std::int64_t total = std::max<std::int64_t>(per_epoch, 1) * config.epochs;
  if (config.max_steps > 0) total = std::min<std::int64_t>(total, config.max_steps);
  return total;
}

std::string train_log_csv(std::span<const StepLosses> log) {
  std::ostringstream os;
  os << "step,task,examples,skipped,ccc,mvfr,mlm,itm,total,lr,grad_norm,wall_seconds\n";
  os.precision(7);
  for (const auto& s : log) {
    os << s.step << ',' << task_name(s.task) << ',' << s.examples << ',' << (s.skipped ? 1 : 0) << ',' << s.ccc
       << ',' << s.mvfr << ',' << s.mlm << ',' << s.itm << ',' << s.total << ',' << s.lr << ',' << s.grad_norm
       << ',' << s.wall_seconds << '\n';
  }
  return os.str();
}

TrainResult pretrain_loop(const TrainConfig& config, std::span<const Example> examples, Model& model,
                          const std::filesystem::path& out_dir,
                          const std::function<void(const StepLosses&)>& on_step) {
  config.validate();
  if (examples.empty()) throw std::invalid_argument("no training examples");
  const auto start = std::chrono::steady_clock::now();
  const std::int64_t total = planned_steps(config, examples.size());
  Trainer trainer(model, config, total);
  Rng order_rng(config.seed, "data");
  Rng task_rng(config.seed, "task");
  const std::uint64_t mask_seed = derive_seed(config.seed, "mask");
  const std::uint64_t dropout_seed = derive_seed(config.seed, "dropout");

  const auto B = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();  // forces a shuffle on the first step
  TrainResult result;
  for (std::int64_t step = 0; step < total; ++step) {
    if (cursor + B > order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    std::span<const std::size_t> idx(order.data() + cursor, std::min(B, order.size()));
    cursor += B;
    const Task task = sample_task(task_rng);
    Rng mask_rng(mix64(mask_seed + static_cast<std::uint64_t>(step)));
    Rng dropout_rng(mix64(dropout_seed + static_cast<std::uint64_t>(step)));
    const auto batch = prepare_batch(examples, idx, task, config, model.config(), mask_rng);
    auto s = trainer.step(batch, &dropout_rng);
    s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(s);
    if (on_step) on_step(s);
    if (!out_dir.empty() && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < total) {
      save_checkpoint(out_dir / ("step_" + std::to_string(step + 1) + ".ckpt"), model_state(model));
    }
  }
  result.steps = total;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "final.ckpt", model_state(model));
    write_file(out_dir / "train_log.csv", train_log_csv(result.log));
  }
  return result;
}

}  // namespace gridpaint
