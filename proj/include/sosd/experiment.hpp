#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sosd/checkpoint.hpp"
#include "sosd/metrics.hpp"
#include "sosd/model.hpp"
#include "sosd/scene.hpp"
#include "sosd/trainer.hpp"

namespace sosd {

// One table row of the ablation protocol: a variant trained under a schedule.
struct AblationRow {
  std::string name;
  Variant variant = Variant::Sosd;
  Schedule schedule = Schedule::Joint;
};

// Top-level experiment description, loaded from a JSON spec file. Datasets
// may be given inline (configs, generated on demand) or as paths to
// previously generated roots.
struct ExperimentSpec {
  DatasetConfig train_data;
  DatasetConfig val_data;
  std::string train_data_path;
  std::string val_data_path;
  NetConfig net;
  TrainConfig train;
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds;

  static ExperimentSpec from_json(const nlohmann::json& j);
  static ExperimentSpec load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct EvalOptions {
  int ignore_id = 255;
  int dump_count = 0;  // write visual dumps for the first k scenes
  std::filesystem::path dump_dir;
};

struct EvalReport {
  DepthMetricReport depth;
  SegMetricReport seg;
  std::string dataset_id;
  std::string checkpoint_id;
  // Measured but not serialized, so report bytes stay run-independent.
  double ms_per_image = 0.0;

  nlohmann::json to_json() const;
};

// Eval-mode forward over every scene (batch 1, running batch-norm
// statistics, argmax ties resolved to the lowest class id), pooled into one
// report. Requires dataset resolution and class count to match the model.
EvalReport evaluate_model(Model& model, const Dataset& data, const EvalOptions& opts = {});

// Scores the ground truth against itself through the same metric plumbing;
// the all-perfect baseline for wiring checks.
EvalReport evaluate_oracle(const Dataset& data, const EvalOptions& opts = {});

struct CellResult {
  std::string row;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  DepthMetricReport depth;
  SegMetricReport seg;
  std::int64_t param_count = 0;
  double eval_ms_per_image = 0.0;
  double train_wall_ms = 0.0;
  std::filesystem::path checkpoint;
};

struct AblationResult {
  std::vector<CellResult> cells;
  nlohmann::json table;
  std::string text_table;
  bool all_cells_ok = false;
  // pass | warning | fail, from the median ordering checks (warning when
  // only the joint-schedule comparisons miss).
  std::string status;
};

// Trains every (row, seed) cell under one shared step budget on one shared
// dataset pair, evaluates each on the validation split, and emits
// <out>/ablation.json plus an aligned text table. threads > 1 runs cells in
// parallel workers; results and table ordering are thread-count independent.
AblationResult run_ablation(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                            int threads = 1);

// Ensures a dataset exists at <root> (generating it when absent) and loads it.
Dataset materialize_dataset(const DatasetConfig& cfg, const std::filesystem::path& root);

}  // namespace sosd
