#include "gridpaint/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "gridpaint/checkpoint.hpp"
#include "gridpaint/dataset.hpp"
#include "gridpaint/io.hpp"
#include "gridpaint/losses.hpp"
#include "gridpaint/render.hpp"

namespace gridpaint {

using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config (de)serialization

std::string_view architecture_name(Architecture a) {
  return a == Architecture::two_stream ? "two_stream" : "single_stream";
}
std::string_view masking_name(Masking m) { return m == Masking::bernoulli ? "bernoulli" : "uniform"; }
std::string_view objective_name(VisualObjective o) { return o == VisualObjective::mvfr ? "mvfr" : "ccc"; }

void check_keys(const json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw config_error("config: '" + std::string(section) + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw config_error("config: unknown key '" + key + "' in '" + std::string(section) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

template <typename Enum, typename Parse>
void read_enum(const json& j, const char* key, Enum& out, Parse parse) {
  std::string name;
  read(j, key, name);
  if (!name.empty()) out = parse(name);
}

json to_json_sections(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& s = c.sampler;
  const auto& x = c.metrics;
  json j;
  j["seed"] = c.seed;
  j["dataset"] = {{"grid_n", d.scene.grid_n},
                  {"min_objects", d.scene.min_objects},
                  {"max_objects", d.scene.max_objects},
                  {"feature_dim", d.features.dim},
                  {"sigma", d.features.sigma},
                  {"projection_seed", d.features.projection_seed},
                  {"margin_sigmas", d.features.margin_sigmas},
                  {"train_records", d.train_records},
                  {"eval_records", d.eval_records},
                  {"max_text_len", d.max_text_len},
                  {"kind_weights", d.kind_weights}};
  j["vocab"] = {{"k", c.vocab_k}, {"iterations", c.vocab_iterations}};
  j["model"] = {{"d_model", m.d_model},   {"layers", m.layers},
                {"cross_layers", m.cross_layers}, {"heads", m.heads},
                {"ffn_mult", m.ffn_mult}, {"architecture", architecture_name(m.architecture)},
                {"dropout", m.dropout}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"max_steps", t.max_steps},
                {"lr", t.lr},
                {"warmup_fraction", t.warmup_fraction},
                {"weight_decay", t.weight_decay},
                {"clip_norm", t.clip_norm},
                {"masking", masking_name(t.masking)},
                {"bernoulli_p", t.bernoulli_p},
                {"text_mask_p", t.text_mask_p},
                {"objective", objective_name(t.objective)},
                {"ccc_data_filter", t.ccc_data_filter},
                {"checkpoint_every", t.checkpoint_every}};
  j["sampler"] = {{"strategy", strategy_name(s.strategy)},
                  {"k_iters", s.k_iters},
                  {"steps", s.steps},
                  {"temperature", s.temperature},
                  {"refine_temperature", s.refine_temperature}};
  j["metrics"] = {{"eval_captions", x.eval_captions}, {"fid", x.fid},
                  {"inception", x.inception},         {"rprec", x.rprec},
                  {"is_splits", x.is_splits},         {"rprec_sets", x.rprec_sets},
                  {"png_samples", x.png_samples},     {"png_cell_px", x.png_cell_px}};
  j["ablate"] = {{"seeds", c.ablate_seeds}};
  return j;
}

std::uint64_t chain(std::uint64_t parent, std::string_view stage, const json& section) {
  return fnv1a64(hex64(parent) + "|" + std::string(stage) + "|" + section.dump());
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Checked artifact loading

LoadedSplit load_split_checked(const ExperimentConfig& config, std::string_view split) {
  const auto paths = split_paths(config.dataset_dir(), split);
  auto loaded = read_split(paths);
  if (loaded.config_hash != stage_hashes(config).data) {
    throw format_error("dataset " + paths.records.string() + " was built from a different config (stamp " +
                       hex64(loaded.config_hash) + "); rerun make-data");
  }
  return loaded;
}

Codebook load_codebook_checked(const ExperimentConfig& config) {
  const auto path = config.vocab_dir() / "codebook.bin";
  auto cb = load_codebook(path);
  if (cb.config_hash != stage_hashes(config).vocab) {
    throw format_error("codebook " + path.string() + " does not match the current config; rerun build-vocab");
  }
  return cb;
}

json read_manifest(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw format_error("malformed manifest " + path.string() + ": " + e.what());
  }
}

void check_stamp(const json& manifest, const char* key, std::uint64_t expected, const std::filesystem::path& path,
                 std::string_view rerun) {
  if (!manifest.contains(key) || manifest.at(key) != hex64(expected)) {
    throw format_error(path.string() + " belongs to a different artifact chain; rerun " + std::string(rerun));
  }
}

AttributeClassifier load_classifier_checked(const ExperimentConfig& config) {
  const auto manifest_path = config.vocab_dir() / "manifest.json";
  const auto manifest = read_manifest(manifest_path);
  check_stamp(manifest, "vocab_hash", stage_hashes(config).vocab, manifest_path, "build-vocab");
  auto clf = AttributeClassifier::decode(read_file(config.vocab_dir() / "classifier.bin"));
  if (manifest.value("classifier_hash", std::string{}) != hex64(clf.hash()))
    throw format_error("classifier.bin does not match its manifest; rerun build-vocab");
  return clf;
}

Model load_model_checked(const ExperimentConfig& config) {
  const auto manifest_path = config.checkpoint_dir() / "manifest.json";
  const auto manifest = read_manifest(manifest_path);
  check_stamp(manifest, "model_hash", stage_hashes(config).model, manifest_path, "pretrain");
  Model model(config.model, config.seed);
  load_model_state(model, load_checkpoint(config.checkpoint_dir() / "final.ckpt"));
  return model;
}

std::vector<float> all_cell_features(std::span<const DatasetRecord> records) {
  std::vector<float> pts;
  for (const auto& r : records) pts.insert(pts.end(), r.features.values.begin(), r.features.values.end());
  return pts;
}

std::vector<TokenSequence> captions_of(std::span<const DatasetRecord> records) {
  std::vector<TokenSequence> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.caption);
  return out;
}

// Artifacts for evaluation from files (no training data needed).
RunArtifacts load_eval_artifacts(const ExperimentConfig& config) {
  RunArtifacts run;
  run.prototypes = PrototypeTable(config.dataset.features);
  run.codebook = load_codebook_checked(config);
  run.classifier = load_classifier_checked(config);
  const auto eval = load_split_checked(config, "eval");
  run.eval_records = select_eval_records(config, eval.records);
  return run;
}

std::string sample_json(const TokenSequence& caption, const SamplerSchedule& schedule, const GeneratedGrid& g,
                        bool continuous, std::size_t index, std::uint64_t stamp) {
  json j = {{"index", index},
            {"caption", caption.text()},
            {"strategy", strategy_name(schedule.strategy)},
            {"k_iters", schedule.k_iters},
            {"temperature", schedule.temperature},
            {"refine_temperature", schedule.refine_temperature},
            {"seed", schedule.seed},
            {"grid_n", g.ids.grid_n},
            {"ids", g.ids.ids},
            {"config_hash", hex64(stamp)}};
  if (continuous) j["features"] = g.features.values;
  return j.dump();
}

std::vector<GeneratedGrid> read_samples(const ExperimentConfig& config, const Codebook& codebook) {
  const auto path = config.samples_dir() / "samples.jsonl";
  const auto text = read_file(path);
  const auto expected = hex64(stage_hashes(config).samples);
  std::vector<GeneratedGrid> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw format_error("malformed sample record in " + path.string() + ": " + e.what());
    }
    if (j.value("config_hash", std::string{}) != expected)
      throw format_error(path.string() + " belongs to a different artifact chain; rerun sample");
    GeneratedGrid g;
    g.ids.grid_n = j.at("grid_n").get<int>();
    g.ids.ids = j.at("ids").get<std::vector<int>>();
    if (j.contains("features")) {
      g.features.grid_n = g.ids.grid_n;
      g.features.dim = codebook.dim;
      g.features.values = j.at("features").get<std::vector<float>>();
    } else {
      g.features = reconstruct(g.ids, codebook);
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string ExperimentConfig::canonical_json() const { return to_json_sections(*this).dump(); }

void ExperimentConfig::validate() const {
  try {
    const auto& d = dataset;
    if (d.scene.grid_n < 2) throw std::invalid_argument("dataset.grid_n must be >= 2");
    if (d.scene.min_objects < 0 || d.scene.max_objects < d.scene.min_objects ||
        d.scene.max_objects > d.scene.grid_n * d.scene.grid_n)
      throw std::invalid_argument("dataset object counts out of range");
    if (d.features.dim < 1 || !(d.features.sigma > 0.0f) || !(d.features.margin_sigmas > 0.0f))
      throw std::invalid_argument("dataset feature settings out of range");
    if (d.train_records < 1 || d.eval_records < 1) throw std::invalid_argument("dataset record counts must be >= 1");
    if (vocab_k < 2 || vocab_iterations < 1) throw std::invalid_argument("vocab.k must be >= 2, iterations >= 1");
    model.validate();
    train.validate();
    sampler.validate();
    const auto& m = metrics;
    if (m.eval_captions < 1 || m.is_splits < 1 || m.rprec_sets < 0 || m.png_samples < 0 || m.png_cell_px < 4)
      throw std::invalid_argument("metrics settings out of range");
    if (ablate_seeds < 1) throw std::invalid_argument("ablate.seeds must be >= 1");
  } catch (const config_error&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw config_error(std::string("config: ") + e.what());
  }
}

void resolve(ExperimentConfig& c) {
  c.model.text_vocab = TextVocab::size();
  c.model.visual_vocab = c.vocab_k;
  c.model.grid_n = c.dataset.scene.grid_n;
  c.model.feature_dim = c.dataset.features.dim;
  c.model.max_text_len = c.dataset.max_text_len;
  c.model.visual_mode =
      c.train.objective == VisualObjective::mvfr ? VisualMode::continuous : VisualMode::discrete;
  c.train.seed = c.seed;
  c.sampler.seed = derive_seed(c.seed, "sampler");
}

ExperimentConfig parse_experiment_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw config_error(std::string("config: not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"seed", "out", "paths", "dataset", "vocab", "model", "train", "sampler", "metrics", "ablate"});
  ExperimentConfig c;
  read(j, "seed", c.seed);
  std::string out;
  read(j, "out", out);
  if (!out.empty()) c.out = out;
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, "paths", {"dataset", "vocab", "checkpoints", "samples", "reports"});
    read(p, "dataset", c.paths.dataset);
    read(p, "vocab", c.paths.vocab);
    read(p, "checkpoints", c.paths.checkpoints);
    read(p, "samples", c.paths.samples);
    read(p, "reports", c.paths.reports);
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset",
               {"grid_n", "min_objects", "max_objects", "feature_dim", "sigma", "projection_seed", "margin_sigmas",
                "train_records", "eval_records", "max_text_len", "kind_weights"});
    read(d, "grid_n", c.dataset.scene.grid_n);
    read(d, "min_objects", c.dataset.scene.min_objects);
    read(d, "max_objects", c.dataset.scene.max_objects);
    read(d, "feature_dim", c.dataset.features.dim);
    read(d, "sigma", c.dataset.features.sigma);
    read(d, "projection_seed", c.dataset.features.projection_seed);
    read(d, "margin_sigmas", c.dataset.features.margin_sigmas);
    read(d, "train_records", c.dataset.train_records);
    read(d, "eval_records", c.dataset.eval_records);
    read(d, "max_text_len", c.dataset.max_text_len);
    read(d, "kind_weights", c.dataset.kind_weights);
  }
  if (j.contains("vocab")) {
    const auto& v = j["vocab"];
    check_keys(v, "vocab", {"k", "iterations"});
    read(v, "k", c.vocab_k);
    read(v, "iterations", c.vocab_iterations);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"d_model", "layers", "cross_layers", "heads", "ffn_mult", "architecture", "dropout"});
    read(m, "d_model", c.model.d_model);
    read(m, "layers", c.model.layers);
    read(m, "cross_layers", c.model.cross_layers);
    read(m, "heads", c.model.heads);
    read(m, "ffn_mult", c.model.ffn_mult);
    read(m, "dropout", c.model.dropout);
    read_enum(m, "architecture", c.model.architecture, [](const std::string& s) {
      if (s == "single_stream") return Architecture::single_stream;
      if (s == "two_stream") return Architecture::two_stream;
      throw config_error("config: model.architecture must be single_stream or two_stream");
    });
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train",
               {"epochs", "batch_size", "max_steps", "lr", "warmup_fraction", "weight_decay", "clip_norm", "masking",
                "bernoulli_p", "text_mask_p", "objective", "ccc_data_filter", "checkpoint_every"});
    read(t, "epochs", c.train.epochs);
    read(t, "batch_size", c.train.batch_size);
    read(t, "max_steps", c.train.max_steps);
    read(t, "lr", c.train.lr);
    read(t, "warmup_fraction", c.train.warmup_fraction);
    read(t, "weight_decay", c.train.weight_decay);
    read(t, "clip_norm", c.train.clip_norm);
    read(t, "bernoulli_p", c.train.bernoulli_p);
    read(t, "text_mask_p", c.train.text_mask_p);
    read(t, "ccc_data_filter", c.train.ccc_data_filter);
    read(t, "checkpoint_every", c.train.checkpoint_every);
    read_enum(t, "masking", c.train.masking, [](const std::string& s) {
      if (s == "uniform") return Masking::uniform;
      if (s == "bernoulli") return Masking::bernoulli;
      throw config_error("config: train.masking must be uniform or bernoulli");
    });
    read_enum(t, "objective", c.train.objective, [](const std::string& s) {
      if (s == "ccc") return VisualObjective::ccc;
      if (s == "mvfr") return VisualObjective::mvfr;
      throw config_error("config: train.objective must be ccc or mvfr");
    });
  }
  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    check_keys(s, "sampler", {"strategy", "k_iters", "steps", "temperature", "refine_temperature"});
    read(s, "k_iters", c.sampler.k_iters);
    read(s, "steps", c.sampler.steps);
    read(s, "temperature", c.sampler.temperature);
    read(s, "refine_temperature", c.sampler.refine_temperature);
    read_enum(s, "strategy", c.sampler.strategy, [](const std::string& name) {
      try {
        return parse_strategy(name);
      } catch (const std::invalid_argument& e) {
        throw config_error(std::string("config: ") + e.what());
      }
    });
  }
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    check_keys(m, "metrics",
               {"eval_captions", "fid", "inception", "rprec", "is_splits", "rprec_sets", "png_samples",
                "png_cell_px"});
    read(m, "eval_captions", c.metrics.eval_captions);
    read(m, "fid", c.metrics.fid);
    read(m, "inception", c.metrics.inception);
    read(m, "rprec", c.metrics.rprec);
    read(m, "is_splits", c.metrics.is_splits);
    read(m, "rprec_sets", c.metrics.rprec_sets);
    read(m, "png_samples", c.metrics.png_samples);
    read(m, "png_cell_px", c.metrics.png_cell_px);
  }
  if (j.contains("ablate")) {
    const auto& a = j["ablate"];
    check_keys(a, "ablate", {"seeds"});
    read(a, "seeds", c.ablate_seeds);
  }
  resolve(c);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const io_error& e) {
    throw config_error(std::string("cannot read config: ") + e.what());
  }
  return parse_experiment_config(text);
}

std::string default_config_json() {
  ExperimentConfig c;
  resolve(c);
  auto j = to_json_sections(c);
  j["out"] = c.out.string();
  j["paths"] = {{"dataset", c.paths.dataset},
                {"vocab", c.paths.vocab},
                {"checkpoints", c.paths.checkpoints},
                {"samples", c.paths.samples},
                {"reports", c.paths.reports}};
  return j.dump(2) + "\n";
}

StageHashes stage_hashes(const ExperimentConfig& config) {
  const auto j = to_json_sections(config);
  StageHashes h;
  h.data = chain(0, "data", {{"seed", j["seed"]}, {"dataset", j["dataset"]}});
  h.vocab = chain(h.data, "vocab", j["vocab"]);
  h.model = chain(h.vocab, "model", {{"model", j["model"]}, {"train", j["train"]}});
  h.samples = chain(h.model, "samples", {{"sampler", j["sampler"]}, {"metrics", j["metrics"]}});
  h.report = chain(h.samples, "report", json::object());
  return h;
}

// ---------------------------------------------------------------------------
// In-memory runs

Codebook fit_vocab(const ExperimentConfig& config, std::span<const DatasetRecord> train) {
  auto cb = kmeans_fit(all_cell_features(train), config.dataset.features.dim,
                       {config.vocab_k, config.vocab_iterations, derive_seed(config.seed, "vocab")});
  cb.config_hash = stage_hashes(config).vocab;
  return cb;
}

AttributeClassifier fit_classifier(const ExperimentConfig& config, std::span<const DatasetRecord> train) {
  std::vector<FeatureGrid> grids;
  std::vector<Scene> scenes;
  grids.reserve(train.size());
  scenes.reserve(train.size());
  for (const auto& r : train) {
    grids.push_back(r.features);
    scenes.push_back(r.scene);
  }
  return AttributeClassifier::train(grids, scenes, derive_seed(config.seed, "classifier"));
}

std::vector<DatasetRecord> select_eval_records(const ExperimentConfig& config, std::span<const DatasetRecord> eval) {
  // Questions only presuppose an attribute, so they are not generation prompts.
  std::vector<DatasetRecord> out;
  for (const auto& r : eval) {
    if (static_cast<int>(out.size()) >= config.metrics.eval_captions) break;
    if (r.kind != CaptionKind::question) out.push_back(r);
  }
  return out;
}

RunArtifacts prepare_run(const ExperimentConfig& config) {
  RunArtifacts run;
  run.dataset = make_dataset(config.seed, config.dataset);
  run.prototypes = PrototypeTable(config.dataset.features);
  run.codebook = fit_vocab(config, run.dataset.train);
  run.classifier = fit_classifier(config, run.dataset.train);
  run.train_examples = make_examples(run.dataset.train, run.codebook, config.dataset.max_text_len);
  run.eval_records = select_eval_records(config, run.dataset.eval);
  run.max_radius = max_cluster_radius(all_cell_features(run.dataset.train), run.codebook);
  return run;
}

Model train_model(const ExperimentConfig& config, const RunArtifacts& run, std::ostream* log) {
  Model model(config.model, config.seed);
  pretrain_loop(config.train, run.train_examples, model, {}, [&](const StepLosses& s) {
    if (log && (s.step + 1) % 500 == 0) *log << "  step " << s.step + 1 << " loss " << fmt(s.total) << '\n';
  });
  return model;
}

ExperimentConfig with_variant(const ExperimentConfig& base, VisualObjective objective, Masking masking,
                              bool data_filter) {
  auto c = base;
  c.train.objective = objective;
  c.train.masking = masking;
  c.train.ccc_data_filter = data_filter;
  resolve(c);
  return c;
}

std::vector<GeneratedGrid> generate(const Model& model, const RunArtifacts& run, const SamplerSchedule& schedule) {
  const auto captions = captions_of(run.eval_records);
  std::vector<GeneratedGrid> out(captions.size());
  if (model.config().visual_mode == VisualMode::continuous) {
    auto samples = sample_feature_grids(model, captions, schedule, run.codebook);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out[i].ids = quantize(samples[i].grid, run.codebook);
      out[i].features = std::move(samples[i].grid);
    }
  } else {
    auto samples = sample_grids(model, captions, schedule);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out[i].features = reconstruct(samples[i].grid, run.codebook);
      out[i].ids = std::move(samples[i].grid);
    }
  }
  return out;
}

std::vector<GeneratedGrid> ground_truth_grids(const RunArtifacts& run) {
  std::vector<GeneratedGrid> out;
  out.reserve(run.eval_records.size());
  for (const auto& r : run.eval_records) out.push_back({quantize(r.features, run.codebook), r.features});
  return out;
}

double drift_ratio(std::span<const GeneratedGrid> grids, const RunArtifacts& run) {
  if (!(run.max_radius > 0.0)) throw std::invalid_argument("drift_ratio: run has no cluster radius");
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& g : grids) {
    for (int c = 0; c < g.features.cells(); ++c) {
      double d2 = 0.0;
      run.codebook.nearest(g.features.cell(c), &d2);
      total += std::sqrt(d2);
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / double(n) / run.max_radius;
}

double chance_accuracy(const RunArtifacts& run, std::uint64_t seed, int rounds) {
  const auto captions = captions_of(run.eval_records);
  std::vector<Scene> scenes;
  for (const auto& r : run.eval_records) scenes.push_back(r.scene);
  if (scenes.empty()) return 0.0;
  Rng rng(seed, "chance");
  double total = 0.0;
  for (int t = 0; t < rounds; ++t) {
    rng.shuffle(scenes.begin(), scenes.end());
    total += semantic_accuracy(scenes, captions);
  }
  return total / rounds;
}

MetricsReport evaluate(const Model* model, const RunArtifacts& run, std::span<const GeneratedGrid> grids,
                       const EvalOptions& options) {
  if (grids.size() != run.eval_records.size())
    throw std::invalid_argument("evaluate: one generated grid per evaluation caption expected");
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  MetricsReport r;
  r.label = options.label;
  r.config_hash = options.config_hash;
  r.seed = options.seed;
  r.samples = grids.size();
  r.fid = nan;
  r.inception = {nan, nan};
  r.rprec_easy = nan;

  const auto captions = captions_of(run.eval_records);
  std::vector<Scene> scenes;
  scenes.reserve(grids.size());
  for (const auto& g : grids) scenes.push_back(decode_features(g.features, run.prototypes));
  r.semantic_accuracy = semantic_accuracy(scenes, captions);
  r.chance_accuracy = chance_accuracy(run, options.seed);

  const auto& m = options.metrics;
  if (m.inception && !grids.empty()) {
    std::vector<double> probs;
    for (const auto& g : grids) {
      const auto p = run.classifier.predict_proba(g.features);
      probs.insert(probs.end(), p.begin(), p.end());
    }
    const int splits = std::min<int>(m.is_splits, static_cast<int>(grids.size()));
    r.inception = inception_score(probs, AttributeClassifier::kClasses, splits);
  }
  if (model == nullptr) return r;

  if (m.fid && grids.size() > static_cast<std::size_t>(model->config().d_model)) {
    const auto truth = ground_truth_grids(run);
    std::vector<ClusterGrid> gen_ids, real_ids;
    std::vector<FeatureGrid> gen_feat, real_feat;
    for (const auto& g : grids) {
      gen_ids.push_back(g.ids);
      gen_feat.push_back(g.features);
    }
    for (const auto& g : truth) {
      real_ids.push_back(g.ids);
      real_feat.push_back(g.features);
    }
    r.fid = fid(pooled_grid_features(*model, gen_ids, gen_feat), pooled_grid_features(*model, real_ids, real_feat),
                model->config().d_model);
  }
  if (m.rprec && m.rprec_sets > 0 && grids.size() > static_cast<std::size_t>(kEasyNegatives)) {
    const auto scorer = itm_scorer(*model, &run.codebook);
    Rng rng(options.seed, "retrieval");
    std::vector<RetrievalSet> easy;
    for (std::size_t i = 0; i < grids.size() && static_cast<int>(easy.size()) < m.rprec_sets; ++i) {
      easy.push_back({captions[i], build_easy_negatives(captions, captions[i], rng), grids[i].ids,
                      NegativeKind::easy, HardCategory::color});
    }
    r.rprec_easy = r_precision(scorer, easy);
    for (auto cat : kHardCategories) {
      std::vector<RetrievalSet> hard;
      for (std::size_t i = 0; i < grids.size() && static_cast<int>(hard.size()) < m.rprec_sets; ++i) {
        if (!has_category_word(captions[i], cat)) continue;
        hard.push_back({captions[i], build_hard_negatives(captions[i], cat, rng), grids[i].ids, NegativeKind::hard,
                        cat});
      }
      r.rprec_hard[std::string(hard_category_name(cat))] = hard.empty() ? nan : r_precision(scorer, hard);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_make_data(const ExperimentConfig& config, std::ostream& log) {
  const auto h = stage_hashes(config);
  const auto ds = make_dataset(config.seed, config.dataset);
  const auto dir = config.dataset_dir();
  write_split(split_paths(dir, "train"), ds.train, h.data);
  write_split(split_paths(dir, "eval"), ds.eval, h.data);
  write_file(dir / "grammar.txt", grammar_manifest(config.dataset));
  log << "wrote " << ds.train.size() << " train / " << ds.eval.size() << " eval records to " << dir.string()
      << " (data " << hex64(h.data) << ")\n";
}

void cmd_build_vocab(const ExperimentConfig& config, std::ostream& log) {
  const auto h = stage_hashes(config);
  const auto train = load_split_checked(config, "train");
  const auto cb = fit_vocab(config, train.records);
  save_codebook(config.vocab_dir() / "codebook.bin", cb);

  std::vector<int> assignments, labels;
  for (const auto& r : train.records) {
    const auto content = r.scene.content();
    for (int c = 0; c < r.features.cells(); ++c) {
      assignments.push_back(cb.nearest(r.features.cell(c)));
      labels.push_back(content[static_cast<std::size_t>(c)]);
    }
  }
  const double pur = purity(assignments, labels);

  const auto clf = fit_classifier(config, train.records);
  std::vector<FeatureGrid> grids;
  std::vector<Scene> scenes;
  for (const auto& r : train.records) {
    grids.push_back(r.features);
    scenes.push_back(r.scene);
  }
  const double clf_acc = clf.accuracy(grids, scenes);
  write_file(config.vocab_dir() / "classifier.bin", clf.encode());
  const json manifest = {{"data_hash", hex64(h.data)},
                         {"vocab_hash", hex64(h.vocab)},
                         {"classifier_hash", hex64(clf.hash())},
                         {"k", cb.k},
                         {"iterations", cb.iterations},
                         {"inertia", cb.inertia()},
                         {"purity", pur},
                         {"classifier_cell_accuracy", clf_acc}};
  write_file(config.vocab_dir() / "manifest.json", manifest.dump(2) + "\n");
  log << "k-means k=" << cb.k << " iterations=" << cb.iterations << " inertia " << fmt(cb.inertia(), 3)
      << " purity " << fmt(pur) << "\n"
      << "attribute classifier cell accuracy " << fmt(clf_acc) << "\n";
}

void cmd_pretrain(const ExperimentConfig& config, std::ostream& log) {
  const auto h = stage_hashes(config);
  const auto train = load_split_checked(config, "train");
  const auto cb = load_codebook_checked(config);
  const auto examples = make_examples(train.records, cb, config.dataset.max_text_len);
  Model model(config.model, config.seed);
  const auto total = planned_steps(config.train, examples.size());
  log << "pretraining " << model.parameter_count() << " parameters for " << total << " steps ("
      << objective_name(config.train.objective) << ", " << masking_name(config.train.masking) << " masking, filter "
      << (config.train.ccc_data_filter ? "on" : "off") << ")\n";
  const auto result = pretrain_loop(config.train, examples, model, config.checkpoint_dir(), [&](const StepLosses& s) {
    if ((s.step + 1) % 250 == 0 || s.step + 1 == total)
      log << "  step " << s.step + 1 << "/" << total << " " << task_name(s.task) << " loss " << fmt(s.total) << '\n';
  });
  const json manifest = {{"vocab_hash", hex64(h.vocab)},
                         {"model_hash", hex64(h.model)},
                         {"model_config_hash", hex64(config_hash(config.model))},
                         {"steps", result.steps},
                         {"parameters", model.parameter_count()}};
  write_file(config.checkpoint_dir() / "manifest.json", manifest.dump(2) + "\n");
  write_file(config.checkpoint_dir() / "config.json", json::parse(config.canonical_json()).dump(2) + "\n");
  log << "trained " << result.steps << " steps in " << fmt(result.seconds, 1) << "s -> "
      << (config.checkpoint_dir() / "final.ckpt").string() << "\n";
}

void cmd_sample(const ExperimentConfig& config, std::ostream& log) {
  const auto h = stage_hashes(config);
  const auto model = load_model_checked(config);
  RunArtifacts run;
  run.prototypes = PrototypeTable(config.dataset.features);
  run.codebook = load_codebook_checked(config);
  run.eval_records = select_eval_records(config, load_split_checked(config, "eval").records);
  const auto grids = generate(model, run, config.sampler);
  const bool continuous = config.model.visual_mode == VisualMode::continuous;

  std::string lines;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    lines += sample_json(run.eval_records[i].caption, config.sampler, grids[i], continuous, i, h.samples);
    lines += '\n';
  }
  const auto dir = config.samples_dir();
  write_file(dir / "samples.jsonl", lines);
  const auto pngs = std::min<std::size_t>(grids.size(), static_cast<std::size_t>(config.metrics.png_samples));
  for (std::size_t i = 0; i < pngs; ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << i << ".png";
    const auto scene = decode_features(grids[i].features, run.prototypes);
    write_file(dir / "png" / name.str(), encode_png(rasterize(scene, config.metrics.png_cell_px)));
  }
  log << "sampled " << grids.size() << " grids with " << strategy_name(config.sampler.strategy);
  if (config.sampler.strategy == Strategy::mask_predict) log << "-" << config.sampler.k_iters;
  log << " -> " << (dir / "samples.jsonl").string() << " (" << pngs << " PNGs)\n";
}

void cmd_eval(const ExperimentConfig& config, std::ostream& log) {
  const auto h = stage_hashes(config);
  const auto model = load_model_checked(config);
  const auto run = load_eval_artifacts(config);
  const auto grids = read_samples(config, run.codebook);
  if (grids.size() != run.eval_records.size())
    throw format_error("samples.jsonl holds " + std::to_string(grids.size()) + " samples, expected " +
                       std::to_string(run.eval_records.size()) + "; rerun sample");

  EvalOptions opt{config.metrics, config.seed, "Original", h.report};
  const auto truth = ground_truth_grids(run);
  const auto original = evaluate(&model, run, truth, opt);
  opt.label = std::string(strategy_name(config.sampler.strategy));
  if (config.sampler.strategy == Strategy::mask_predict) opt.label += "-" + std::to_string(config.sampler.k_iters);
  const auto generated = evaluate(&model, run, grids, opt);

  json rows = json::array({json::parse(original.to_json()), json::parse(generated.to_json())});
  const json report = {{"report_hash", hex64(h.report)}, {"rows", rows}};
  const auto dir = config.reports_dir();
  write_file(dir / "report.json", report.dump(2) + "\n");
  write_file(dir / "report.csv", MetricsReport::csv_header() + "\n" + original.csv_row() + "\n" +
                                     generated.csv_row() + "\n");
  for (const auto* r : {&original, &generated}) {
    log << std::left << std::setw(16) << r->label << " semantic " << fmt(r->semantic_accuracy) << "  chance "
        << fmt(r->chance_accuracy) << "  FID " << fmt(r->fid, 3) << "  IS " << fmt(r->inception.mean, 3)
        << "  R-prec easy " << fmt(r->rprec_easy, 3) << "\n";
  }
  log << "report -> " << (dir / "report.json").string() << "\n";
}

namespace {

struct AblationRow {
  std::string group;  // training or sampler
  VisualObjective objective = VisualObjective::ccc;
  Masking masking = Masking::uniform;
  bool filter = true;
  Strategy strategy = Strategy::mask_predict;
  std::vector<MetricsReport> reports;  // per seed
  std::vector<double> drift;           // per seed
};

std::string row_label(const AblationRow& r, int k_iters) {
  std::string s = std::string(objective_name(r.objective)) + "/" + std::string(masking_name(r.masking)) + "/" +
                  (r.filter ? "filter" : "nofilter");
  if (r.group == "sampler") {
    s = std::string(strategy_name(r.strategy));
    if (r.strategy == Strategy::mask_predict) s += "-" + std::to_string(k_iters);
  }
  return s;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0.0};
}

}  // namespace

void cmd_ablate(const ExperimentConfig& config, int threads, std::ostream& log) {
  const Strategy sampler_rows[] = {Strategy::mask_predict, Strategy::tlbr, Strategy::random, Strategy::easy_first};
  std::vector<AblationRow> rows;
  for (auto objective : {VisualObjective::ccc, VisualObjective::mvfr})
    for (auto masking : {Masking::uniform, Masking::bernoulli})
      for (bool filter : {true, false}) rows.push_back({"training", objective, masking, filter, config.sampler.strategy, {}, {}});
  for (auto s : sampler_rows) {
    rows.push_back({"sampler", config.train.objective, config.train.masking, config.train.ccc_data_filter, s, {}, {}});
  }
  const std::size_t train_rows = 8;
  for (auto& r : rows) {
    r.reports.resize(static_cast<std::size_t>(config.ablate_seeds));
    r.drift.resize(static_cast<std::size_t>(config.ablate_seeds));
  }

  // Data and vocab depend only on the seed; build them once per seed.
  std::vector<RunArtifacts> runs(static_cast<std::size_t>(config.ablate_seeds));
  std::vector<ExperimentConfig> seed_configs;
  for (int s = 0; s < config.ablate_seeds; ++s) {
    auto c = config;
    c.seed = config.seed + static_cast<std::uint64_t>(s);
    resolve(c);
    seed_configs.push_back(c);
  }

  std::mutex log_mutex;
  auto say = [&](const std::string& line) {
    std::lock_guard lock(log_mutex);
    log << line << std::flush;
  };
  auto run_parallel = [&](std::size_t count, const std::function<void(std::size_t)>& work) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    const auto n = std::max<std::size_t>(1, std::min<std::size_t>(count, static_cast<std::size_t>(threads)));
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
  };

  run_parallel(runs.size(), [&](std::size_t s) {
    runs[s] = prepare_run(seed_configs[s]);
    say("seed " + std::to_string(seed_configs[s].seed) + ": data and vocabulary ready\n");
  });

  const auto default_row = [&] {
    for (std::size_t i = 0; i < train_rows; ++i) {
      if (rows[i].objective == config.train.objective && rows[i].masking == config.train.masking &&
          rows[i].filter == config.train.ccc_data_filter)
        return i;
    }
    return std::size_t{0};
  }();

  const std::size_t tasks = train_rows * runs.size();
  run_parallel(tasks, [&](std::size_t t) {
    const std::size_t ri = t / runs.size(), s = t % runs.size();
    auto& row = rows[ri];
    const auto c = with_variant(seed_configs[s], row.objective, row.masking, row.filter);
    const auto& run = runs[s];
    const auto model = train_model(c, run);
    const auto h = stage_hashes(c);
    auto opt = EvalOptions{c.metrics, c.seed, row_label(row, c.sampler.k_iters), h.model};
    const auto grids = generate(model, run, c.sampler);
    row.reports[s] = evaluate(&model, run, grids, opt);
    row.drift[s] = drift_ratio(grids, run);
    say(opt.label + " seed " + std::to_string(c.seed) + ": semantic " + fmt(row.reports[s].semantic_accuracy) +
        " drift " + fmt(row.drift[s], 2) + "\n");
    if (ri != default_row) return;
    for (std::size_t k = train_rows; k < rows.size(); ++k) {
      auto schedule = c.sampler;
      schedule.strategy = rows[k].strategy;
      const auto g = generate(model, run, schedule);
      opt.label = row_label(rows[k], schedule.k_iters);
      rows[k].reports[s] = evaluate(&model, run, g, opt);
      rows[k].drift[s] = drift_ratio(g, run);
      say("  sampler " + opt.label + " seed " + std::to_string(c.seed) + ": semantic " +
          fmt(rows[k].reports[s].semantic_accuracy) + "\n");
    }
  });

  // Per-seed detail and the summary table.
  std::string detail = "row," + MetricsReport::csv_header() + ",drift_ratio\n";
  std::ostringstream summary;
  summary << "group,row,objective,masking,data_filter,strategy,seeds,semantic_mean,semantic_std,chance_mean,"
             "fid_mean,is_mean,rprec_easy_mean,rprec_color_mean,rprec_shape_mean,rprec_count_mean,drift_mean\n";
  summary << std::setprecision(6);
  for (const auto& r : rows) {
    const auto label = row_label(r, config.sampler.k_iters);
    std::vector<double> sem, chance, fids, is, easy, color, shape, count;
    for (std::size_t s = 0; s < r.reports.size(); ++s) {
      const auto& m = r.reports[s];
      detail += label + "," + m.csv_row() + "," + fmt(r.drift[s], 6) + "\n";
      sem.push_back(m.semantic_accuracy);
      chance.push_back(m.chance_accuracy);
      fids.push_back(m.fid);
      is.push_back(m.inception.mean);
      easy.push_back(m.rprec_easy);
      auto hard = [&](const char* k) {
        const auto it = m.rprec_hard.find(k);
        return it == m.rprec_hard.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
      };
      color.push_back(hard("color"));
      shape.push_back(hard("shape"));
      count.push_back(hard("count"));
    }
    const auto [sm, ss] = mean_std(sem);
    summary << r.group << ',' << label << ',' << objective_name(r.objective) << ',' << masking_name(r.masking) << ','
            << (r.filter ? "on" : "off") << ',' << strategy_name(r.strategy) << ',' << r.reports.size() << ',' << sm
            << ',' << ss << ',' << mean_std(chance).first << ',' << mean_std(fids).first << ','
            << mean_std(is).first << ',' << mean_std(easy).first << ',' << mean_std(color).first << ','
            << mean_std(shape).first << ',' << mean_std(count).first << ',' << mean_std(r.drift).first << '\n';
  }
  const auto dir = config.reports_dir();
  write_file(dir / "ablation_runs.csv", detail);
  write_file(dir / "ablation.csv", summary.str());
  log << summary.str() << "ablation table -> " << (dir / "ablation.csv").string() << "\n";
}

void cmd_losses(const ExperimentConfig& config, std::ostream& log) {
  Rng rng(config.seed, "losses");
  auto randn = [&](Shape shape, double scale) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return BasicTensor<double>::from(shape, std::move(v));
  };
  constexpr std::size_t kBatch = 8;
  const auto d_fake = randn({kBatch}, 1.0), d_real = randn({kBatch}, 1.0);
  const auto c_fake = randn({kBatch, static_cast<std::size_t>(kNumContentClasses)}, 1.0);
  const auto c_real = randn({kBatch, static_cast<std::size_t>(kNumContentClasses)}, 1.0);
  std::vector<int> labels(kBatch);
  for (auto& l : labels) l = static_cast<int>(rng.below(kNumContentClasses));
  const BasicFeatureStack<double> f_fake{randn({kBatch, 16}, 1.0), randn({kBatch, 32}, 1.0)};
  const BasicFeatureStack<double> f_real{randn({kBatch, 16}, 1.0), randn({kBatch, 32}, 1.0)};
  const BasicFeatureStack<double> e_fake{randn({kBatch, 64}, 1.0)};
  const BasicFeatureStack<double> e_real{randn({kBatch, 64}, 1.0)};

  LossParts parts;
  parts.g_adv = hinge_g(d_fake).item();
  parts.d_adv = hinge_d(d_fake, d_real).item();
  parts.acgan = acgan_loss(c_fake, c_real, labels).item();
  parts.fm = feature_match_loss(f_fake, f_real).item();
  parts.fm_e = feature_match_loss(e_fake, e_real).item();
  const LossWeights weights;
  const auto totals = total_losses(parts, weights);
  const json j = {{"hinge_g", parts.g_adv},
                  {"hinge_d", parts.d_adv},
                  {"acgan", parts.acgan},
                  {"feature_match", parts.fm},
                  {"perceptual_feature_match", parts.fm_e},
                  {"weights", {{"adv", weights.adv}, {"acgan", weights.acgan}, {"fm", weights.fm}, {"fm_e", weights.fm_e}}},
                  {"generator_total", totals.generator},
                  {"discriminator_total", totals.discriminator}};
  write_file(config.reports_dir() / "losses.json", j.dump(2) + "\n");
  log << j.dump(2) << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const numeric_error*>(&e)) return 4;
  if (dynamic_cast<const io_error*>(&e) || dynamic_cast<const format_error*>(&e)) return 3;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return 2;
  return 1;
}

int worker_threads() {
  if (const char* env = std::getenv("GRIDPAINT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace gridpaint
