#pragma once

// Experiment configuration, run-directory layout, the file-based stages the
// CLI exposes, and an in-memory benchmark runner built from the same pieces.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "agro/data.hpp"
#include "agro/erm.hpp"
#include "agro/eval.hpp"
#include "agro/robust.hpp"
#include "json.hpp"

namespace agro::experiment {

using json = nlohmann::ordered_json;

struct ExperimentConfig {
  std::string run_id = "default";
  std::uint64_t seed = 0;
  data::GeneratorConfig data;
  erm::NetSpec net;
  erm::TrainConfig erm;
  std::size_t gdro_epochs = 20;
  // pipeline.agro.m == 0 means 2 * n_classes; slice count always equals m.
  robust::AgroPipelineConfig pipeline;

  // Fills derived fields: per-component seeds from `seed`, m, slice k and
  // the task-net spec shared with the pipeline. Idempotent.
  ExperimentConfig resolved() const;
  void validate() const;
};

ExperimentConfig default_config();

// Per-component seed offsets from the experiment seed.
std::uint64_t encoder_seed(const ExperimentConfig& config);

json to_json(const ExperimentConfig& config);
// Strict: unknown keys and type mismatches raise ConfigError naming the
// field. Missing keys keep their defaults.
ExperimentConfig from_json(const json& j);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

// "a.b.c=value". The value is read as JSON when it parses, else as a string.
void apply_override(json& j, const std::string& assignment);
ExperimentConfig with_overrides(const ExperimentConfig& base, const std::vector<std::string>& assignments);

// $AGRO_RUNS_ROOT, else ./runs.
std::filesystem::path runs_root();

struct RunPaths {
  std::filesystem::path dir;  // <root>/<run_id>/seed_<seed>

  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path manifest(const std::string& stage) const { return dir / "manifests" / (stage + ".json"); }
  std::filesystem::path split_csv(const std::string& name) const { return dir / "data" / (name + ".csv"); }
  std::filesystem::path generator_cfg() const { return dir / "data" / "generator.cfg"; }
  std::filesystem::path erm_dir() const { return dir / "erm"; }
  std::filesystem::path features() const { return dir / "features" / "train"; }
  std::filesystem::path slice_model() const { return dir / "slices" / "model"; }
  std::filesystem::path responsibilities() const { return dir / "slices" / "responsibilities"; }
  std::filesystem::path slice_report() const { return dir / "slices" / "report.csv"; }
  std::filesystem::path pretrained_grouper() const { return dir / "grouper" / "pretrained"; }
  std::filesystem::path gdro_dir() const { return dir / "gdro"; }
  std::filesystem::path agro_dir() const { return dir / "agro"; }
  std::filesystem::path metrics(const std::string& method) const { return dir / "metrics" / (method + ".json"); }
  std::filesystem::path selection(const std::string& method) const {
    return dir / "selection" / (method + ".json");
  }
};

RunPaths run_paths(const ExperimentConfig& config, const std::filesystem::path& root);

// Checkpoint stems <dir>/epoch_<e>, e = 1..epochs.
std::filesystem::path epoch_stem(const std::filesystem::path& dir, std::size_t epoch);

// Matrix persisted as <stem>.bin plus a rows/cols manifest.
void save_matrix(const std::filesystem::path& stem, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& stem);

// File-based stages. Each checks its inputs first (MissingInputError lists
// every missing file), writes outputs, the resolved config and a stage
// manifest with input/output SHA-256s; wall time sits in a separate field.
void stage_generate(const ExperimentConfig& config, const RunPaths& paths);
void stage_train_erm(const ExperimentConfig& config, const RunPaths& paths);
void stage_extract_features(const ExperimentConfig& config, const RunPaths& paths);
void stage_fit_slices(const ExperimentConfig& config, const RunPaths& paths);
void stage_pretrain_grouper(const ExperimentConfig& config, const RunPaths& paths);
void stage_train_gdro(const ExperimentConfig& config, const RunPaths& paths);
void stage_train_agro(const ExperimentConfig& config, const RunPaths& paths);

// Methods that can be selected/evaluated from a run directory.
const std::vector<std::string>& method_names();  // erm, gdro, agro
eval::Selection stage_select(const ExperimentConfig& config, const RunPaths& paths, const std::string& method);
// Selects (writing selection/<method>.json) and writes metrics/<method>.json.
eval::MetricsReport stage_evaluate(const ExperimentConfig& config, const RunPaths& paths, const std::string& method);

enum class PipelineScope { full, agro_only };
// Runs every stage in order and evaluates each trained method.
std::vector<eval::MetricsReport> run_pipeline(const ExperimentConfig& config, const RunPaths& paths,
                                              PipelineScope scope = PipelineScope::full);

// Sweepable parameter names and the config fields they set.
const std::vector<std::string>& sweep_params();
std::vector<std::string> sweep_assignments(const std::string& param, const std::string& value);

struct SweepRow {
  std::string value;
  eval::MetricsReport agro;
};

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::filesystem::path& root,
                                const std::string& param, const std::vector<std::string>& values, bool parallel);
void write_sweep_csv(const std::filesystem::path& path, const std::string& param, const std::vector<SweepRow>& rows);

// In-memory runs of every method and ablation on one seed.
struct BenchmarkOptions {
  bool erm = true;
  bool gdro_oracle = true;
  bool agro = true;
  bool ablations = true;
  bool no_pretrain = true;
};

struct BenchmarkResult {
  std::map<std::string, eval::MetricsReport> reports;
  bool agro_collapse = false;
  bool no_pretrain_collapse = false;
  std::vector<double> agro_epoch_max_share;
  std::vector<double> no_pretrain_epoch_max_share;
};

BenchmarkResult run_benchmark(const ExperimentConfig& config, const BenchmarkOptions& options = {});

}  // namespace agro::experiment
