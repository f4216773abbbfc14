#pragma once

// Error-aware mixture model over (embedding, label, prediction). Each slice j
// carries a prior weight, a diagonal Gaussian over the embedding and two
// categoricals (over labels and over predicted labels); the categorical terms
// are raised to the coherence exponent gamma. Fitted by EM.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "agro/matrix.hpp"

namespace agro::slice {

enum class PcaMode { automatic, on, off };

// points: means at k distinct seeded examples, shared global variances and
// smoothed global categoricals. confusion: initial responsibilities from the
// (label, predicted label) cell of each example (soft in the prediction),
// slice j taking cell j mod C^2, plus seeded uniform noise; the first M-step
// builds the parameters from them.
enum class SliceInit { points, confusion };

struct SliceConfig {
  std::size_t k = 4;
  double gamma = 1.0;
  std::size_t max_iters = 100;
  double tol = 1e-5;
  double var_floor = 1e-4;
  PcaMode pca = PcaMode::automatic;  // automatic: on when d > pca_dim
  std::size_t pca_dim = 32;
  SliceInit init = SliceInit::points;
  double confusion_noise = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

// Centering plus projection onto leading principal axes. Empty components
// means identity.
struct Projection {
  std::vector<double> mean;
  Matrix components;  // d' x d

  bool identity() const noexcept { return components.empty(); }
  std::size_t output_dim(std::size_t input_dim) const noexcept {
    return identity() ? input_dim : components.rows();
  }
  Matrix apply(const Matrix& z) const;
  std::vector<double> apply(std::span<const double> z) const;
};

Projection fit_pca(const Matrix& z, std::size_t dim);

struct SliceModelParams {
  std::size_t k = 0;
  std::size_t dim = 0;        // after projection
  std::size_t input_dim = 0;  // before projection
  std::size_t n_classes = 0;
  std::vector<double> p_s;
  Matrix mu;       // k x dim
  Matrix var;      // k x dim
  Matrix p_label;  // k x C
  Matrix p_pred;   // k x C
  double gamma = 1.0;
  double var_floor = 1e-4;
  Projection pca;
};

struct SliceFit {
  SliceModelParams params;
  Matrix responsibilities;          // n x k, consistent with params
  std::vector<double> loglik_trace; // one entry per E-step
  std::vector<std::size_t> init_indices;
  std::size_t iterations = 0;       // M-steps performed
  bool reseeded = false;            // an empty slice was re-seeded
};

// Argmax with ties broken toward the smaller index.
int argmax(std::span<const double> row);
std::vector<int> argmax_rows(const Matrix& m);

// z: n x d embedding; y: labels; yhat_probs: n x C prediction probabilities
// (argmax taken as the predicted label).
SliceFit fit_em(const Matrix& z, std::span<const int> y, const Matrix& yhat_probs, const SliceConfig& config);

struct SlicePosterior {
  std::vector<double> probs;
  bool underflow = false;  // every component had zero likelihood; probs uniform
};

SlicePosterior predict_slice_probs(const SliceModelParams& params, std::span<const double> z, int y, int yhat);
Matrix predict_slice_probs(const SliceModelParams& params, const Matrix& z, std::span<const int> y,
                           const Matrix& yhat_probs);

// Log-likelihood of (already projected) data under params.
double log_likelihood(const SliceModelParams& params, const Matrix& z_projected, std::span<const int> y,
                      std::span<const int> yhat);

void save_slice_model(const std::filesystem::path& stem, const SliceFit& fit);
SliceModelParams load_slice_model(const std::filesystem::path& stem);

// Per-slice size, dominant (y, y_hat) pair and error rate under hard
// assignment.
struct SliceSummary {
  std::size_t slice = 0;
  std::size_t size = 0;
  int top_y = -1;
  int top_yhat = -1;
  double top_pair_share = 0.0;
  double error_rate = 0.0;
};
std::vector<SliceSummary> summarize(const Matrix& responsibilities, std::span<const int> y,
                                    std::span<const int> yhat, std::size_t n_classes);
void write_report_csv(const std::filesystem::path& path, const std::vector<SliceSummary>& rows);

}  // namespace agro::slice
