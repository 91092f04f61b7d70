// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmtl/data.hpp"
#include "dmtl/model.hpp"
#include "dmtl/training.hpp"

namespace dmtl::train {

struct DataConfig {
  /// Dataset directory; empty generates one under the run directory.
  std::string train;
  /// Optional held-out dataset directory; empty generates `eval_n` images (0 disables).
  std::string eval;
  std::size_t n = 64;
  std::size_t eval_n = 16;
  data::LabelSetting setting = data::LabelSetting::one_label;
  std::uint64_t seed = 0;
  data::SceneConfig scene;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct DiffusionConfig {
  int steps = 2;
  double beta_start = 1e-3;
  double beta_end = 1e-2;
  friend bool operator==(const DiffusionConfig&, const DiffusionConfig&) = default;
};

enum class BaselineMode { cotrain, file, none };

struct BaselineConfig {
  /// cotrain: single-task models trained alongside on the same batches.
  BaselineMode mode = BaselineMode::cotrain;
  /// Report file for mode `file`.
  std::string report;
  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

/// Everything that determines a run. Serialized as nested JSON.
struct RunConfig {
  DataConfig data;
  BackboneConfig backbone;
  DenoiserConfig denoiser;
  DiffusionConfig diffusion;
  TrainConfig train;
  Seeds seeds;
  BaselineConfig baseline;

  ModelConfig model() const;
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Sets `dotted` (e.g. "denoiser.variant") in `j`. The key must already exist,
/// except entries of train.task_weights. String fields take the value
/// verbatim; other fields parse it as JSON.
void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value);

/// Defaults, then `file` (when given), then the overrides in order.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

/// Dotted paths whose values differ between two configs.
std::vector<std::string> divergent_keys(const nlohmann::json& a, const nlohmann::json& b);

/// Batch positions of `step`: consecutive slices of per-epoch shuffles, the
/// shuffle of epoch e drawn from Rng{data_seed, e}.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, int step, std::uint64_t data_seed);

struct StepRecord {
  LossReport loss;
  double lr = 0.0;
  /// Single-task losses of the co-trained baselines (tasks absent from the batch omitted).
  std::map<std::string, double> single_task;
};

nlohmann::json to_json(const StepRecord& r);

/// Owns the model, the optional co-trained single-task models, their
/// optimizers and the step counter of one run.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<PartialLabelSample> train_samples);

  /// Runs the next step.
  StepRecord step();
  int current_step() const noexcept { return step_; }
  bool finished() const noexcept { return step_ >= cfg_.train.steps; }

  const RunConfig& config() const noexcept { return cfg_; }
  const DiffusionModel& model() const noexcept { return *model_; }
  DiffusionModel& model() noexcept { return *model_; }
  std::vector<const SingleTaskModel*> single_task_models() const;

  /// `<stem>.bin` (parameters, buffers, optimizer state) plus `<stem>.json`
  /// (config, step, archive hash). Both written atomically, sidecar last.
  void save(const std::filesystem::path& dir, const std::string& stem, const nlohmann::json& extra = {}) const;
  /// Restores a checkpoint written by save. Throws listing the divergent
  /// config keys when the checkpoint was made with a different config.
  void load(const std::filesystem::path& dir, const std::string& stem);

 private:
  RunConfig cfg_;
  std::vector<PartialLabelSample> samples_;
  std::unique_ptr<DiffusionModel> model_;
  std::unique_ptr<Adam> opt_;
  std::vector<std::unique_ptr<SingleTaskModel>> stl_;
  std::vector<std::unique_ptr<Adam>> stl_opt_;
  int step_ = 0;
};

/// Checkpoint sidecar contents.
nlohmann::json read_checkpoint_info(const std::filesystem::path& dir, const std::string& stem);

/// Model stored in a checkpoint written by Trainer::save. A positive
/// `diffusion_steps` rebuilds the schedule with that many steps; the
/// parameters do not depend on it.
std::unique_ptr<DiffusionModel> load_model(const std::filesystem::path& dir, const std::string& stem,
                                           RunConfig* config = nullptr, int diffusion_steps = 0);

struct RunSummary {
  int steps = 0;
  EvalReport train_report;
  std::optional<EvalReport> eval_report;
  std::optional<metrics::MetricReport> baseline;
  std::optional<double> best_delta_m;
};

/// Full run into `run_dir`: config.json, data/ (when generated), log.jsonl
/// (one record per step), checkpoints/{last,best}.{bin,json}, reports and a
/// MANIFEST of SHA-256 hashes. With resume, continues from checkpoints/last.
RunSummary run_training(const RunConfig& cfg, const std::filesystem::path& run_dir, bool resume = false);

/// `<sha256>  <relative path>` for every regular file under dir except MANIFEST, sorted by path.
std::string build_manifest(const std::filesystem::path& dir);

}  // namespace dmtl::train
