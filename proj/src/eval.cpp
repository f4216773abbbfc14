#include "agro/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "agro/error.hpp"
#include "agro/io.hpp"
#include "agro/slice_model.hpp"
#include "json.hpp"

namespace agro::eval {

namespace {

using json = nlohmann::ordered_json;

data::TrainingView view_of(const data::Split& split, std::size_t n_classes) { return {split, n_classes}; }

json split_json(const SplitMetrics& m) {
  json j;
  j["n"] = m.n;
  j["avg_accuracy"] = m.avg_accuracy;
  if (!m.per_group.empty()) {
    j["worst_group_accuracy"] = m.worst_group_accuracy;
    j["worst_group"] = m.worst_group;
    json groups = json::array();
    for (const auto& g : m.per_group) {
      json row;
      row["group"] = g.group;
      row["count"] = g.count;
      row["correct"] = g.correct;
      if (g.count > 0) {
        row["accuracy"] = g.accuracy;
      } else {
        row["accuracy"] = nullptr;
      }
      groups.push_back(row);
    }
    j["per_group"] = groups;
  }
  return j;
}

SplitMetrics split_from_json(const json& j) {
  SplitMetrics m;
  m.n = j.at("n").get<std::size_t>();
  m.avg_accuracy = j.at("avg_accuracy").get<double>();
  m.worst_group_accuracy = std::numeric_limits<double>::quiet_NaN();
  if (j.contains("per_group")) {
    m.worst_group_accuracy = j.at("worst_group_accuracy").get<double>();
    m.worst_group = j.at("worst_group").get<int>();
    for (const auto& row : j.at("per_group")) {
      data::GroupAccuracy g;
      g.group = row.at("group").get<int>();
      g.count = row.at("count").get<std::size_t>();
      g.correct = row.at("correct").get<std::size_t>();
      g.accuracy = row.at("accuracy").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                 : row.at("accuracy").get<double>();
      m.per_group.push_back(g);
    }
  }
  return m;
}

}  // namespace

std::pair<double, int> worst_group(const std::vector<data::GroupAccuracy>& table) {
  double worst = std::numeric_limits<double>::quiet_NaN();
  int id = -1;
  for (const auto& g : table) {
    if (g.count == 0) continue;
    if (id < 0 || g.accuracy < worst) {
      worst = g.accuracy;
      id = g.group;
    }
  }
  return {worst, id};
}

SplitMetrics evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                  std::optional<std::span<const int>> true_groups, std::size_t n_groups) {
  if (predictions.size() != labels.size()) throw ShapeError("evaluate: prediction/label length mismatch");
  if (labels.empty()) throw ConfigError("evaluate: empty split");
  SplitMetrics m;
  m.n = labels.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  m.avg_accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  m.worst_group_accuracy = std::numeric_limits<double>::quiet_NaN();
  if (true_groups) {
    m.per_group = data::group_accuracy_table(predictions, labels, *true_groups, n_groups);
    std::tie(m.worst_group_accuracy, m.worst_group) = worst_group(m.per_group);
  }
  return m;
}

SplitMetrics evaluate(const nn::NetworkParams& theta, const data::TrainingView& view,
                      std::optional<std::span<const int>> true_groups, std::size_t n_groups) {
  const auto pred = erm::predict(theta, view.inputs());
  return evaluate_predictions(pred, view.labels(), true_groups, n_groups);
}

double predicted_group_score(std::span<const int> predictions, std::span<const int> labels,
                             std::span<const int> predicted_groups, std::size_t m, double alpha) {
  if (predictions.size() != labels.size() || predicted_groups.size() != labels.size()) {
    throw ShapeError("predicted_group_score: length mismatch");
  }
  if (labels.empty()) throw ConfigError("predicted_group_score: empty split");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  std::vector<std::size_t> count(m, 0), correct(m, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto g = static_cast<std::size_t>(predicted_groups[i]);
    if (g >= m) throw ShapeError("predicted group out of range");
    ++count[g];
    correct[g] += predictions[i] == labels[i];
  }
  std::vector<std::size_t> order;
  for (std::size_t g = 0; g < m; ++g) {
    if (count[g] > 0) order.push_back(g);
  }
  // Compare c_a / n_a < c_b / n_b exactly in integers.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return correct[a] * count[b] < correct[b] * count[a]; });
  const double target = alpha * static_cast<double>(labels.size());
  std::size_t pooled_n = 0, pooled_c = 0;
  for (auto g : order) {
    pooled_n += count[g];
    pooled_c += correct[g];
    if (static_cast<double>(pooled_n) >= target) break;
  }
  return static_cast<double>(pooled_c) / static_cast<double>(pooled_n);
}

std::string to_string(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::average: return "average";
    case SelectionMode::predicted_groups: return "predicted_groups";
    case SelectionMode::oracle_worst_group: return "oracle_worst_group";
  }
  return "average";
}

SelectionMode parse_selection_mode(const std::string& name) {
  if (name == "average") return SelectionMode::average;
  if (name == "predicted_groups") return SelectionMode::predicted_groups;
  if (name == "oracle_worst_group") return SelectionMode::oracle_worst_group;
  throw ConfigError("unknown selection mode '" + name + "'");
}

std::size_t argmax_earliest(std::span<const double> scores) {
  if (scores.empty()) throw ConfigError("checkpoint selection: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

namespace {

Selection finish(SelectionMode mode, std::vector<double> scores) {
  Selection s;
  s.mode = mode;
  s.index = argmax_earliest(scores);
  s.score = scores[s.index];
  s.scores = std::move(scores);
  return s;
}

}  // namespace

Selection select_average(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev) {
  std::vector<double> scores;
  for (const auto& c : checkpoints) scores.push_back(erm::accuracy(c, dev));
  return finish(SelectionMode::average, std::move(scores));
}

std::vector<int> predicted_groups(const grouper::Grouper& grouper, const erm::FeatureMatrix& features) {
  if (features.values.cols() != grouper.feature_dim()) {
    throw ShapeError("selection: feature dim " + std::to_string(features.values.cols()) +
                     " does not match grouper input dim " + std::to_string(grouper.feature_dim()));
  }
  return slice::argmax_rows(grouper::group_probs(grouper, features.values));
}

Selection select_predicted_groups(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev,
                                  std::span<const int> dev_groups, std::size_t m, double alpha) {
  if (dev_groups.size() != dev.size()) throw ShapeError("selection: one predicted group per dev example required");
  std::vector<double> scores;
  for (const auto& c : checkpoints) {
    const auto pred = erm::predict(c, dev.inputs());
    scores.push_back(predicted_group_score(pred, dev.labels(), dev_groups, m, alpha));
  }
  return finish(SelectionMode::predicted_groups, std::move(scores));
}

Selection select_oracle_worst_group(std::span<const nn::NetworkParams> checkpoints, const data::TrainingView& dev,
                                    std::span<const int> dev_groups, std::size_t n_groups) {
  std::vector<double> scores;
  for (const auto& c : checkpoints) {
    scores.push_back(evaluate(c, dev, dev_groups, n_groups).worst_group_accuracy);
  }
  return finish(SelectionMode::oracle_worst_group, std::move(scores));
}

MetricsReport make_report(std::string method, const nn::NetworkParams& theta, const data::DatasetBundle& bundle,
                          const Selection& selection) {
  const std::size_t c = bundle.config.n_classes;
  const std::size_t groups = bundle.config.group_count();
  MetricsReport r;
  r.method = std::move(method);
  const auto dev_groups = data::true_groups(bundle.dev);
  const auto test_groups = data::true_groups(bundle.test);
  r.dev = evaluate(theta, view_of(bundle.dev, c), std::span<const int>(dev_groups), groups);
  r.test = evaluate(theta, view_of(bundle.test, c), std::span<const int>(test_groups), groups);
  r.ood_accuracy = evaluate(theta, view_of(bundle.ood, c), std::nullopt, groups).avg_accuracy;
  r.selection_mode = selection.mode;
  r.selected_checkpoint = selection.index;
  r.selection_score = selection.score;
  return r;
}

std::string report_json(const MetricsReport& report) {
  json j;
  j["method"] = report.method;
  j["avg_accuracy"] = report.dev.avg_accuracy;
  j["worst_group_accuracy"] = report.dev.worst_group_accuracy;
  j["ood_accuracy"] = report.ood_accuracy;
  j["selection_mode"] = to_string(report.selection_mode);
  j["selected_checkpoint"] = report.selected_checkpoint;
  j["selection_score"] = report.selection_score;
  j["dev"] = split_json(report.dev);
  j["test"] = split_json(report.test);
  json extra = json::object();
  for (const auto& [k, v] : report.extra) extra[k] = v;
  j["extra"] = extra;
  return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  io::write_text(path, report_json(report));
}

MetricsReport read_report(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  MetricsReport r;
  try {
    r.method = j.at("method").get<std::string>();
    r.dev = split_from_json(j.at("dev"));
    r.test = split_from_json(j.at("test"));
    r.ood_accuracy = j.at("ood_accuracy").get<double>();
    r.selection_mode = parse_selection_mode(j.at("selection_mode").get<std::string>());
    r.selected_checkpoint = j.at("selected_checkpoint").get<std::size_t>();
    r.selection_score = j.at("selection_score").get<double>();
    for (const auto& [k, v] : j.at("extra").items()) r.extra[k] = v.get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return r;
}

MetricSummary summarize_values(std::span<const double> values) {
  MetricSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

std::map<std::string, MetricSummary> summarize_seeds(std::span<const MetricsReport> reports) {
  std::map<std::string, std::vector<double>> columns;
  for (const auto& r : reports) {
    columns["avg_accuracy"].push_back(r.dev.avg_accuracy);
    columns["worst_group_accuracy"].push_back(r.dev.worst_group_accuracy);
    columns["test_avg_accuracy"].push_back(r.test.avg_accuracy);
    columns["test_worst_group_accuracy"].push_back(r.test.worst_group_accuracy);
    columns["ood_accuracy"].push_back(r.ood_accuracy);
    columns["selection_score"].push_back(r.selection_score);
  }
  std::map<std::string, MetricSummary> out;
  for (const auto& [k, v] : columns) out[k] = summarize_values(v);
  return out;
}

}  // namespace agro::eval
