#pragma once

// Synthetic classification benchmarks with planted spurious attributes.
// Each example's ground-truth group is the (label, attribute agreement)
// cell it falls in; groups are evaluation-only and are stripped from the
// views handed to training code.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "agro/matrix.hpp"

namespace agro::data {

struct SpuriousAttribute {
  double correlation = 0.95;  // probability the attribute agrees with the label
  std::size_t dim = 4;
  double strength = 2.0;      // per-dimension mean magnitude
};

struct GeneratorConfig {
  std::size_t n_train = 10000;
  std::size_t n_dev = 5000;
  std::size_t n_test = 5000;
  std::size_t n_ood = 5000;
  std::size_t n_classes = 2;
  std::size_t d_core = 4;
  std::size_t d_noise = 8;
  std::vector<SpuriousAttribute> spurious{SpuriousAttribute{}};
  double core_signal_strength = 1.0;  // per-dimension mean magnitude
  double label_noise = 0.0;
  std::size_t folds = 5;
  std::uint64_t seed = 0;

  std::size_t input_dim() const;
  // n_classes * 2^(number of spurious attributes).
  std::size_t group_count() const;
  // Throws ConfigError.
  void validate() const;
};

struct Example {
  std::vector<double> x;
  int y = 0;
  int true_group = 0;
  int fold = 0;
};

struct Split {
  std::vector<Example> examples;
  std::size_t size() const noexcept { return examples.size(); }
};

struct DatasetBundle {
  Split train, dev, test, ood;
  GeneratorConfig config;
};

DatasetBundle generate(const GeneratorConfig& config);

// Mixed-radix code of (y, a_1, ..., a_k): y * 2^k + sum_j a_j 2^(k-1-j).
int group_code(int y, std::span<const int> agreements);

// Fold ids for n items: a seeded permutation dealt round-robin, so fold sizes
// are floor(n/K) or ceil(n/K).
std::vector<int> kfold_assign(std::size_t n, std::size_t k, std::uint64_t seed);

struct GroupAccuracy {
  int group = 0;
  std::size_t count = 0;
  std::size_t correct = 0;
  // NaN for empty groups.
  double accuracy = 0.0;
};

std::vector<GroupAccuracy> group_accuracy_table(std::span<const int> predictions,
                                                std::span<const int> labels,
                                                std::span<const int> groups, std::size_t n_groups);
std::vector<GroupAccuracy> group_accuracy_table(std::span<const int> predictions, const Split& split,
                                                std::size_t n_groups);

// Inputs, labels and fold ids of a split; no ground-truth groups.
// Everything that trains or selects models reads data through this type.
class TrainingView {
 public:
  TrainingView() = default;
  TrainingView(const Split& split, std::size_t n_classes);
  TrainingView(Matrix inputs, std::vector<int> labels, std::vector<int> folds, std::size_t n_classes);

  const Matrix& inputs() const noexcept { return inputs_; }
  std::span<const int> labels() const noexcept { return labels_; }
  std::span<const int> folds() const noexcept { return folds_; }
  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t n_classes() const noexcept { return n_classes_; }
  std::size_t input_dim() const noexcept { return inputs_.cols(); }

  TrainingView subset(std::span<const std::size_t> indices) const;
  TrainingView with_labels(std::vector<int> labels) const;

 private:
  Matrix inputs_;
  std::vector<int> labels_;
  std::vector<int> folds_;
  std::size_t n_classes_ = 0;
};

std::vector<int> true_groups(const Split& split);

// CSV with header x_0..x_{d-1},y,true_group,fold; values printed so they
// parse back to the same doubles.
void write_split_csv(const std::filesystem::path& path, const Split& split);
Split read_split_csv(const std::filesystem::path& path);

// Key=value echo of a generator config.
void write_config(const std::filesystem::path& path, const GeneratorConfig& config);
GeneratorConfig read_config(const std::filesystem::path& path);

}  // namespace agro::data
