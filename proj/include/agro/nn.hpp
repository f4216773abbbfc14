#pragma once

// Fixed-architecture feed-forward classifier: dense layers with ReLU between
// them and raw logits at the output. Gradients are derived by hand; a
// central-difference oracle is provided for checking them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "agro/matrix.hpp"

namespace agro::nn {

enum class Activation { relu };

// Weights and biases of every layer. Layer l maps layer_sizes[l] inputs to
// layer_sizes[l+1] outputs, so weights[l] is (out x in).
struct ParamTensors {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  std::size_t parameter_count() const noexcept;
  // Layer by layer: weights row-major, then bias.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  // Mutable views in flatten() order.
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;

  bool operator==(const ParamTensors&) const = default;
};

struct NetworkParams : ParamTensors {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t layer_count() const { return weights.size(); }

  bool operator==(const NetworkParams&) const = default;
};

// Shape-congruent with the NetworkParams it was computed for.
struct GradientSet : ParamTensors {
  double max_abs() const;
};

struct Batch {
  Matrix inputs;                    // n x d
  std::vector<int> labels;          // n class ids in [0, C)
  std::vector<double> example_weights;  // n nonnegative reals
};

struct ForwardResult {
  Matrix logits;  // n x C
  Matrix hidden;  // n x H, input to the output layer
};

// Activations of every layer: activations[0] is the input, activations.back()
// the logits.
struct ForwardTrace {
  std::vector<Matrix> activations;
};

struct LossResult {
  std::vector<double> per_example;
  double weighted_sum = 0.0;
};

enum class Direction { descend, ascend };

NetworkParams init_network(std::span<const std::size_t> layer_sizes, std::uint64_t seed);
GradientSet zeros_like(const NetworkParams& params);

ForwardResult forward(const NetworkParams& params, const Matrix& inputs);
ForwardTrace forward_trace(const NetworkParams& params, const Matrix& inputs);

// Row-wise softmax, computed with max subtraction.
Matrix softmax_rows(const Matrix& logits);

LossResult weighted_ce_loss(const Matrix& logits, std::span<const int> labels,
                            std::span<const double> example_weights);

// Gradient of weighted_ce_loss(...).weighted_sum with respect to all params.
GradientSet backward(const NetworkParams& params, const Batch& batch);

// Backpropagate a given gradient with respect to the logits through a trace
// produced by forward_trace on the same params. Returns parameter gradients;
// if input_grad is non-null it receives the gradient w.r.t. the inputs.
GradientSet backprop(const NetworkParams& params, const ForwardTrace& trace,
                     const Matrix& logit_grad, Matrix* input_grad = nullptr);

NetworkParams sgd_step(const NetworkParams& params, const GradientSet& grads, double lr,
                       double weight_decay, Direction direction);
void sgd_step_inplace(NetworkParams& params, const GradientSet& grads, double lr,
                      double weight_decay, Direction direction);

// Central differences of weighted_ce_loss(...).weighted_sum.
GradientSet finite_diff_grad(const NetworkParams& params, const Batch& batch, double epsilon);
// Central differences of an arbitrary scalar objective of the parameters.
GradientSet finite_diff_grad(const NetworkParams& params,
                             const std::function<double(const NetworkParams&)>& objective,
                             double epsilon);

// Largest |a-b| / max(|a|,|b|) over coordinates where max(|a|,|b|) > floor.
double max_relative_error(const GradientSet& a, const GradientSet& b, double floor = 1e-6);

// Checkpoint: <stem>.bin holds the flattened parameters as little-endian
// float64, <stem>.manifest records layer_sizes, activation, seed, role and the
// format version.
inline constexpr std::uint64_t kCheckpointFormatVersion = 1;
void save_checkpoint(const std::filesystem::path& stem, const NetworkParams& params,
                     const std::string& role = "task");
NetworkParams load_checkpoint(const std::filesystem::path& stem);
std::filesystem::path checkpoint_bin(const std::filesystem::path& stem);
std::filesystem::path checkpoint_manifest(const std::filesystem::path& stem);

}  // namespace agro::nn
