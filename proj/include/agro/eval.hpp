#pragma once

// Accuracy reports against ground-truth groups and checkpoint selection.
// Ground-truth groups enter only through evaluate() and the oracle
// selection mode; the predicted-group rule sees labels and grouper output.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "agro/data.hpp"
#include "agro/erm.hpp"
#include "agro/grouper.hpp"
#include "agro/nn.hpp"

namespace agro::eval {

struct SplitMetrics {
  std::size_t n = 0;
  double avg_accuracy = 0.0;
  std::vector<data::GroupAccuracy> per_group;  // empty without true groups
  double worst_group_accuracy = 0.0;           // NaN without true groups
  int worst_group = -1;
};

// Minimum accuracy over nonempty groups, ties to the smaller id; NaN and -1
// when every group is empty.
std::pair<double, int> worst_group(const std::vector<data::GroupAccuracy>& table);

SplitMetrics evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                  std::optional<std::span<const int>> true_groups, std::size_t n_groups);
SplitMetrics evaluate(const nn::NetworkParams& theta, const data::TrainingView& view,
                      std::optional<std::span<const int>> true_groups, std::size_t n_groups);

// Groups ranked by ascending accuracy (ties to the smaller id), empty
// groups skipped; the shortest prefix whose share of examples reaches alpha
// is pooled and its accuracy returned.
double predicted_group_score(std::span<const int> predictions, std::span<const int> labels,
                             std::span<const int> predicted_groups, std::size_t m, double alpha);

enum class SelectionMode { average, predicted_groups, oracle_worst_group };
std::string to_string(SelectionMode mode);
SelectionMode parse_selection_mode(const std::string& name);

struct Selection {
  SelectionMode mode = SelectionMode::average;
  std::size_t index = 0;
  double score = 0.0;
  std::vector<double> scores;  // one per checkpoint
};

// Argmax with ties to the earliest entry. Throws ConfigError when empty.
std::size_t argmax_earliest(std::span<const double> scores);

Selection select_average(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev);

// Argmax group of every row under the grouper.
std::vector<int> predicted_groups(const grouper::Grouper& grouper, const erm::FeatureMatrix& features);

// Dev examples keep the predicted groups given (one id in [0, m) each) for
// every checkpoint; each checkpoint is scored by predicted_group_score.
Selection select_predicted_groups(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev,
                                  std::span<const int> dev_groups, std::size_t m, double alpha);

Selection select_oracle_worst_group(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev,
                                    std::span<const int> dev_groups, std::size_t n_groups);

struct MetricsReport {
  std::string method;
  SplitMetrics dev;
  SplitMetrics test;
  double ood_accuracy = 0.0;
  SelectionMode selection_mode = SelectionMode::average;
  std::size_t selected_checkpoint = 0;
  double selection_score = 0.0;
  std::map<std::string, double> extra;
};

MetricsReport make_report(std::string method, const nn::NetworkParams& theta, const data::DatasetBundle& bundle,
                          const Selection& selection);

std::string report_json(const MetricsReport& report);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report(const std::filesystem::path& path);

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

MetricSummary summarize_values(std::span<const double> values);

// Per metric name (avg_accuracy, worst_group_accuracy, test_avg_accuracy,
// test_worst_group_accuracy, ood_accuracy, selection_score).
std::map<std::string, MetricSummary> summarize_seeds(std::span<const MetricsReport> reports);

}  // namespace agro::eval
