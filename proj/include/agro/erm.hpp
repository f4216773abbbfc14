#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "agro/data.hpp"
#include "agro/matrix.hpp"
#include "agro/nn.hpp"

namespace agro::erm {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

// Hidden layer widths of the task network; input and output sizes come from
// the data.
struct NetSpec {
  std::vector<std::size_t> hidden{32};

  std::vector<std::size_t> layer_sizes(std::size_t input_dim, std::size_t n_classes) const;
};

// Seeded per-epoch shuffles cut into contiguous minibatches; the final batch
// of an epoch may be short.
class MinibatchSampler {
 public:
  MinibatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::vector<std::size_t>> next_epoch();

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

struct ErmResult {
  nn::NetworkParams params;
  std::vector<nn::NetworkParams> checkpoints;  // one per epoch
  std::vector<double> epoch_mean_loss;
};

// Uniformly weighted minibatch SGD. Starts from init when given, otherwise
// from init_network(seed). Throws NumericError on a non-finite loss.
ErmResult train_erm(const data::TrainingView& view, const NetSpec& net, const TrainConfig& config,
                    const nn::NetworkParams* init = nullptr);

std::vector<int> predict(const nn::NetworkParams& params, const Matrix& inputs);
double accuracy(const nn::NetworkParams& params, const data::TrainingView& view);

// Frozen random linear projection standing in for a dataset-agnostic
// pretrained encoder. Never trained.
class PretrainedAnalog {
 public:
  PretrainedAnalog() = default;
  PretrainedAnalog(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed);

  std::size_t input_dim() const noexcept { return projection_.cols(); }
  std::size_t output_dim() const noexcept { return projection_.rows(); }
  std::uint64_t seed() const noexcept { return seed_; }

  std::vector<double> encode(std::span<const double> x) const;
  Matrix encode(const Matrix& inputs) const;

 private:
  Matrix projection_;
  std::uint64_t seed_ = 0;
};

struct FeatureLayout {
  std::size_t g_dim = 0;
  std::size_t h_dim = 0;
  std::size_t n_classes = 0;

  std::size_t total() const noexcept { return g_dim + h_dim + 2 * n_classes; }
  std::size_t h_offset() const noexcept { return g_dim; }
  std::size_t label_offset() const noexcept { return g_dim + h_dim; }
  std::size_t probs_offset() const noexcept { return g_dim + h_dim + n_classes; }
  bool operator==(const FeatureLayout&) const = default;
};

// Rows are [g(x) | h(x) | onehot(y) | p(y_hat | x)].
struct FeatureMatrix {
  FeatureLayout layout;
  Matrix values;

  std::size_t size() const noexcept { return values.rows(); }
  // Columns [g | h]: the embedding the slice model clusters.
  Matrix embedding() const;
  Matrix pred_probs() const;
};

FeatureMatrix assemble_features(const PretrainedAnalog& encoder, const nn::NetworkParams& model,
                                const Matrix& inputs, std::span<const int> labels, std::size_t n_classes);

// Features for examples outside the training split (dev): row i comes from
// models[i mod K], mirroring how training rows mix the fold models.
FeatureMatrix assemble_features_by_fold(const PretrainedAnalog& encoder, std::span<const nn::NetworkParams> models,
                                        const Matrix& inputs, std::span<const int> labels, std::size_t n_classes);

struct KFoldFeatures {
  FeatureMatrix features;
  std::vector<nn::NetworkParams> fold_models;
  // trained_on[k]: view indices fold model k saw during training.
  std::vector<std::vector<std::size_t>> trained_on;
  // Which fold model produced each row.
  std::vector<int> source_fold;
};

// For each example in fold k, h and p come from a model trained on the other
// K-1 folds (seed = config.seed + k). Folds are read from the view.
KFoldFeatures extract_features_kfold(const data::TrainingView& view, std::size_t k, const NetSpec& net,
                                     const TrainConfig& config, const PretrainedAnalog& encoder);

// <stem>.bin (row-major float64) and <stem>.manifest (n, dim, block layout,
// seeds); plus an optional CSV export for inspection.
void save_features(const std::filesystem::path& stem, const FeatureMatrix& features,
                   const std::vector<std::pair<std::string, std::string>>& extra = {});
FeatureMatrix load_features(const std::filesystem::path& stem);
void export_features_csv(const std::filesystem::path& path, const FeatureMatrix& features);

}  // namespace agro::erm
