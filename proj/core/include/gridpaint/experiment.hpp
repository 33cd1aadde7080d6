// Experiment configuration and the pipeline stages behind the command-line
// tool: make-data -> build-vocab -> pretrain -> sample -> eval, plus the
// ablation grid.
//
// Each stage writes its artifacts under the experiment's output root and
// stamps them with a stage hash: the hash of the stage's own config section
// chained with its parent stage's hash. A stage refuses to run on artifacts
// whose stamp does not match what the current config expects.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridpaint/metrics.hpp"
#include "gridpaint/model.hpp"
#include "gridpaint/pretrain.hpp"
#include "gridpaint/samplers.hpp"
#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

namespace gridpaint {

/// Invalid or unreadable configuration (exit code 2).
class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MetricsSelection {
  int eval_captions = 500;
  bool fid = true;
  bool inception = true;
  bool rprec = true;
  int is_splits = 10;
  /// Sets per retrieval protocol (easy, and each hard category).
  int rprec_sets = 200;
  int png_samples = 16;
  int png_cell_px = 32;
};

struct ExperimentPaths {
  std::string dataset = "data";
  std::string vocab = "vocab";
  std::string checkpoints = "pretrain";
  std::string samples = "samples";
  std::string reports = "reports";
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  /// Output root; relative stage paths resolve against it.
  std::filesystem::path out = "runs/default";
  ExperimentPaths paths;
  DatasetConfig dataset;
  int vocab_k = 32;
  int vocab_iterations = 20;
  ModelConfig model;
  TrainConfig train;
  SamplerSchedule sampler;
  MetricsSelection metrics;
  int ablate_seeds = 5;

  /// Canonical JSON of everything except the output locations.
  std::string canonical_json() const;
  void validate() const;

  std::filesystem::path dataset_dir() const { return out / paths.dataset; }
  std::filesystem::path vocab_dir() const { return out / paths.vocab; }
  std::filesystem::path checkpoint_dir() const { return out / paths.checkpoints; }
  std::filesystem::path samples_dir() const { return out / paths.samples; }
  std::filesystem::path reports_dir() const { return out / paths.reports; }
};

/// Defaults for every field, then overrides from the JSON object. Unknown
/// keys are rejected. Throws config_error.
ExperimentConfig parse_experiment_config(std::string_view json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string default_config_json();

/// Derives the sub-configs that depend on others (model vocab sizes,
/// seeds of the individual stages).
void resolve(ExperimentConfig& config);

struct StageHashes {
  std::uint64_t data = 0;
  std::uint64_t vocab = 0;
  std::uint64_t model = 0;
  std::uint64_t samples = 0;
  std::uint64_t report = 0;
};
StageHashes stage_hashes(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// One in-memory run (used by the ablation grid and the acceptance suite)

/// A generated grid in both representations: cluster ids (discrete models,
/// or nearest centroids of regressed features) and cell features.
struct GeneratedGrid {
  ClusterGrid ids;
  FeatureGrid features;
};

struct RunArtifacts {
  Dataset dataset;
  PrototypeTable prototypes{FeatureConfig{}};
  Codebook codebook;
  AttributeClassifier classifier;
  std::vector<Example> train_examples;
  std::vector<DatasetRecord> eval_records;  // the evaluation captions
  double max_radius = 0.0;                  // of the training features
};

/// Data + codebook + classifier for a config (deterministic per seed).
RunArtifacts prepare_run(const ExperimentConfig& config);

Codebook fit_vocab(const ExperimentConfig& config, std::span<const DatasetRecord> train);
AttributeClassifier fit_classifier(const ExperimentConfig& config, std::span<const DatasetRecord> train);
/// The first metrics.eval_captions non-question records of the eval split.
std::vector<DatasetRecord> select_eval_records(const ExperimentConfig& config, std::span<const DatasetRecord> eval);

/// Fresh model trained with config.train on the run's examples.
Model train_model(const ExperimentConfig& config, const RunArtifacts& run, std::ostream* log = nullptr);

/// Copy of `base` with one training-grid cell selected (and re-resolved).
ExperimentConfig with_variant(const ExperimentConfig& base, VisualObjective objective, Masking masking,
                              bool data_filter);

std::vector<GeneratedGrid> generate(const Model& model, const RunArtifacts& run, const SamplerSchedule& schedule);

struct EvalOptions {
  MetricsSelection metrics;
  std::uint64_t seed = 0;
  std::string label;
  std::uint64_t config_hash = 0;
};

/// Mean over generated cells of the distance to the nearest centroid,
/// divided by the largest cluster radius of the training features.
double drift_ratio(std::span<const GeneratedGrid> grids, const RunArtifacts& run);

MetricsReport evaluate(const Model* model, const RunArtifacts& run, std::span<const GeneratedGrid> grids,
                       const EvalOptions& options);

/// Ground-truth grids of the evaluation records ("Original" row).
std::vector<GeneratedGrid> ground_truth_grids(const RunArtifacts& run);

/// Chance semantic accuracy: captions paired with shuffled ground-truth
/// scenes, averaged over `rounds` shuffles.
double chance_accuracy(const RunArtifacts& run, std::uint64_t seed, int rounds = 20);

// ---------------------------------------------------------------------------
// Commands. Each returns normally on success and throws on failure:
// config_error (2), io_error / format_error (3), numeric_error (4).

void cmd_make_data(const ExperimentConfig& config, std::ostream& log);
void cmd_build_vocab(const ExperimentConfig& config, std::ostream& log);
void cmd_pretrain(const ExperimentConfig& config, std::ostream& log);
void cmd_sample(const ExperimentConfig& config, std::ostream& log);
void cmd_eval(const ExperimentConfig& config, std::ostream& log);
/// Runs the 2x2x2 training grid and the four sampler rows over
/// config.ablate_seeds seeds on up to `threads` workers.
void cmd_ablate(const ExperimentConfig& config, int threads, std::ostream& log);
/// Evaluates every GAN loss on a fixed pair of feature stacks.
void cmd_losses(const ExperimentConfig& config, std::ostream& log);

/// Maps an exception from a command to the documented exit code.
int exit_code_for(const std::exception& e);

/// GRIDPAINT_THREADS if set (>= 1), else the hardware concurrency.
int worker_threads();

}  // namespace gridpaint
