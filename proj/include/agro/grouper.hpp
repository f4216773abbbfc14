#pragma once

// The adversary: a two-layer MLP with a softmax head mapping group-discovery
// features to a distribution over m groups.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "agro/matrix.hpp"
#include "agro/nn.hpp"

namespace agro::grouper {

// Per-column zero mean / unit variance, fitted on training features. Columns
// with (near) zero spread are only centered.
class Standardizer {
 public:
  Standardizer() = default;
  static Standardizer fit(const Matrix& features);
  static Standardizer identity(std::size_t dim);
  static Standardizer from_moments(std::vector<double> mean, std::vector<double> scale);

  Matrix apply(const Matrix& features) const;
  std::size_t dim() const noexcept { return mean_.size(); }
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& scale() const noexcept { return scale_; }

  bool operator==(const Standardizer&) const = default;

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;
};

struct GrouperConfig {
  std::size_t hidden = 64;
  bool standardize = true;
  std::size_t pretrain_epochs = 10;
  std::size_t pretrain_batch_size = 256;
  double pretrain_lr = 0.5;
  std::uint64_t seed = 0;
};

struct Grouper {
  nn::NetworkParams net;  // [feature_dim, hidden, m]
  Standardizer standardizer;

  std::size_t groups() const { return net.output_dim(); }
  std::size_t feature_dim() const { return net.input_dim(); }
  bool operator==(const Grouper&) const = default;
};

// Randomly initialised grouper; the standardizer is fitted on `features`
// when standardize is set, identity otherwise.
Grouper init_grouper(const Matrix& features, std::size_t m, const GrouperConfig& config);

// P: n x m, rows on the simplex.
Matrix group_probs(const Grouper& grouper, const Matrix& features);

struct KlResult {
  double mean_kl = 0.0;
  nn::GradientSet grad;
};

// Mean over rows of KL(target || softmax(net(inputs))), and its gradient.
// `inputs` are already standardized.
KlResult kl_loss_and_grad(const nn::NetworkParams& net, const Matrix& inputs, const Matrix& targets);
double mean_kl(const nn::NetworkParams& net, const Matrix& inputs, const Matrix& targets);

struct PretrainResult {
  Grouper grouper;
  // kl_trace[0]: before training; kl_trace[e]: after epoch e (full data).
  std::vector<double> kl_trace;
};

// Gradient descent on the mean KL from slice responsibilities to the grouper
// output. Requires responsibilities.cols() == grouper.groups().
PretrainResult pretrain_kl(Grouper grouper, const Matrix& features, const Matrix& responsibilities,
                           std::size_t epochs, std::size_t batch_size, double lr, std::uint64_t seed);

double mean_entropy(const Matrix& probs);
// Fraction of rows whose argmax is each group.
std::vector<double> argmax_shares(const Matrix& probs);
// Column means of P.
std::vector<double> soft_shares(const Matrix& probs);

void save_grouper(const std::filesystem::path& stem, const Grouper& grouper);
Grouper load_grouper(const std::filesystem::path& stem);

}  // namespace agro::grouper
