#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "agro/error.hpp"
#include "agro/eval.hpp"
#include "agro/experiment.hpp"
#include "agro/io.hpp"

namespace fs = std::filesystem;
using namespace agro;
using experiment::ExperimentConfig;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kMissing = 2, kConfig = 3 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_id;
  std::int64_t seed = -1;
  std::string root;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON experiment config");
  cmd->add_option("--set", c.overrides, "Override a config field, e.g. --set agro.alpha=0.3");
  cmd->add_option("--run-id", c.run_id, "Run id (directory under the runs root)");
  cmd->add_option("--seed", c.seed, "Experiment seed");
  cmd->add_option("--root", c.root, "Runs root (default $AGRO_RUNS_ROOT or ./runs)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? experiment::default_config() : experiment::load_config(c.config_path);
  std::vector<std::string> sets = c.overrides;
  if (!c.run_id.empty()) sets.push_back("run_id=\"" + c.run_id + "\"");
  if (c.seed >= 0) sets.push_back("seed=" + std::to_string(c.seed));
  return experiment::with_overrides(cfg, sets).resolved();
}

fs::path root_of(const Common& c) { return c.root.empty() ? experiment::runs_root() : fs::path(c.root); }

ExperimentConfig with_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto c = cfg;
  c.seed = seed;
  return c.resolved();
}

std::vector<std::string> split_values(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void print_report(const eval::MetricsReport& r) {
  std::printf("%-8s avg=%.4f worst_group=%.4f ood=%.4f selected_epoch=%zu score=%.4f\n", r.method.c_str(),
              r.dev.avg_accuracy, r.dev.worst_group_accuracy, r.ood_accuracy, r.selected_checkpoint + 1,
              r.selection_score);
}

bool has_checkpoints(const experiment::RunPaths& p, const std::string& method) {
  const fs::path dir = method == "erm" ? p.erm_dir() : method == "gdro" ? p.gdro_dir() : p.agro_dir();
  return fs::exists(nn::checkpoint_bin(experiment::epoch_stem(dir, 1)));
}

void print_summary(const std::map<std::string, std::vector<eval::MetricsReport>>& by_method, const fs::path& out) {
  experiment::json j;
  for (const auto& [method, reports] : by_method) {
    const auto summary = eval::summarize_seeds(reports);
    std::printf("%s (%zu seeds)\n", method.c_str(), reports.size());
    for (const auto& [metric, s] : summary) {
      std::printf("  %-26s mean=%.4f std=%.4f\n", metric.c_str(), s.mean, s.stddev);
      j[method][metric] = {{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
    }
  }
  io::write_text(out, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agro: adversarial group discovery and group-robust training on synthetic benchmarks"};
  app.require_subcommand(1);

  Common common;
  using StageFn = void (*)(const ExperimentConfig&, const experiment::RunPaths&);
  const std::vector<std::tuple<std::string, std::string, StageFn>> stages = {
      {"generate", "Generate the synthetic splits", experiment::stage_generate},
      {"train-erm", "Train the ERM baseline", experiment::stage_train_erm},
      {"extract-features", "K-fold grouper features for the training split", experiment::stage_extract_features},
      {"fit-slices", "Fit the error-aware slice model", experiment::stage_fit_slices},
      {"pretrain-grouper", "Distil slices into the grouper", experiment::stage_pretrain_grouper},
      {"train-gdro", "G-DRO with ground-truth groups (oracle baseline)", experiment::stage_train_gdro},
      {"train-agro", "Adversarial rounds from the pretrained grouper", experiment::stage_train_agro},
  };
  std::vector<std::pair<CLI::App*, StageFn>> stage_cmds;
  for (const auto& [name, desc, fn] : stages) {
    auto* cmd = app.add_subcommand(name, desc);
    add_common(cmd, common);
    stage_cmds.emplace_back(cmd, fn);
  }

  std::string method = "all";
  int n_seeds = 1;
  auto* select = app.add_subcommand("select", "Checkpoint selection for one method");
  add_common(select, common);
  select->add_option("--method", method, "erm, gdro or agro")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Select and report metrics");
  add_common(evaluate, common);
  evaluate->add_option("--method", method, "erm, gdro, agro or all");
  evaluate->add_option("--seeds", n_seeds, "Evaluate this many consecutive seeds and report mean/std")
      ->check(CLI::PositiveNumber);

  std::string scope = "full";
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage, then evaluate");
  add_common(pipeline, common);
  pipeline->add_option("--seeds", n_seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  pipeline->add_option("--scope", scope, "full or agro")->check(CLI::IsMember({"full", "agro"}));

  std::string param, values;
  bool parallel = false;
  auto* sweep = app.add_subcommand("sweep", "AGRO pipeline per value of one parameter");
  add_common(sweep, common);
  sweep->add_option("--param", param, "alpha, m, T2, lr, weight_decay or hidden")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_flag("--parallel", parallel, "Run values concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    const auto cfg = resolve(common);
    const auto root = root_of(common);
    const auto paths = experiment::run_paths(cfg, root);

    for (const auto& [cmd, fn] : stage_cmds) {
      if (cmd->parsed()) {
        fn(cfg, paths);
        std::printf("%s: wrote %s\n", cmd->get_name().c_str(), paths.dir.string().c_str());
        return kOk;
      }
    }
    if (select->parsed()) {
      const auto sel = experiment::stage_select(cfg, paths, method);
      std::printf("%s: selected epoch %zu (score %.4f, mode %s)\n", method.c_str(), sel.index + 1, sel.score,
                  eval::to_string(sel.mode).c_str());
      return kOk;
    }
    if (evaluate->parsed()) {
      std::map<std::string, std::vector<eval::MetricsReport>> by_method;
      for (int s = 0; s < n_seeds; ++s) {
        const auto c = with_seed(cfg, cfg.seed + static_cast<std::uint64_t>(s));
        const auto p = experiment::run_paths(c, root);
        std::vector<std::string> methods;
        if (method == "all") {
          for (const auto& m : experiment::method_names()) {
            if (has_checkpoints(p, m)) methods.push_back(m);
          }
          if (methods.empty()) {
            throw MissingInputError(nn::checkpoint_bin(experiment::epoch_stem(p.agro_dir(), 1)).string());
          }
        } else {
          methods.push_back(method);
        }
        for (const auto& m : methods) {
          const auto r = experiment::stage_evaluate(c, p, m);
          if (n_seeds == 1) print_report(r);
          by_method[m].push_back(r);
        }
      }
      if (n_seeds > 1) print_summary(by_method, root / cfg.run_id / "summary.json");
      return kOk;
    }
    if (pipeline->parsed()) {
      std::map<std::string, std::vector<eval::MetricsReport>> by_method;
      for (int s = 0; s < n_seeds; ++s) {
        const auto c = with_seed(cfg, cfg.seed + static_cast<std::uint64_t>(s));
        const auto reports = experiment::run_pipeline(
            c, experiment::run_paths(c, root),
            scope == "full" ? experiment::PipelineScope::full : experiment::PipelineScope::agro_only);
        std::printf("seed %llu\n", static_cast<unsigned long long>(c.seed));
        for (const auto& r : reports) {
          print_report(r);
          by_method[r.method].push_back(r);
        }
      }
      if (n_seeds > 1) print_summary(by_method, root / cfg.run_id / "summary.json");
      return kOk;
    }
    if (sweep->parsed()) {
      const auto vals = split_values(values);
      if (vals.empty()) throw ConfigError("sweep: --values lists no values");
      bool known = false;
      for (const auto& p : experiment::sweep_params()) known = known || p == param;
      if (!known) throw ConfigError("sweep: unknown parameter '" + param + "'");
      const auto rows = experiment::run_sweep(cfg, root, param, vals, parallel);
      const auto out = root / cfg.run_id / ("sweep_" + param + ".csv");
      experiment::write_sweep_csv(out, param, rows);
      std::printf("%-10s %-10s %-12s %-10s\n", param.c_str(), "avg", "worst_group", "ood");
      for (const auto& r : rows) {
        std::printf("%-10s %-10.4f %-12.4f %-10.4f\n", r.value.c_str(), r.agro.dev.avg_accuracy,
                    r.agro.dev.worst_group_accuracy, r.agro.ood_accuracy);
      }
      std::printf("wrote %s\n", out.string().c_str());
      return kOk;
    }
  } catch (const MissingInputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMissing;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kRuntime;
}
