#include "agro/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "agro/error.hpp"
#include "agro/io.hpp"
#include "agro/kernels.hpp"

namespace agro::nn {

std::size_t ParamTensors::parameter_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

std::vector<double> ParamTensors::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto w = weights[l].values();
    flat.insert(flat.end(), w.begin(), w.end());
    flat.insert(flat.end(), biases[l].begin(), biases[l].end());
  }
  return flat;
}

void ParamTensors::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError("parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                     std::to_string(parameter_count()));
  }
  std::size_t pos = 0;
  for (auto block : blocks()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), block.size(), block.begin());
    pos += block.size();
  }
}

std::vector<std::span<double>> ParamTensors::blocks() {
  std::vector<std::span<double>> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l].values());
    out.push_back(biases[l]);
  }
  return out;
}

std::vector<std::span<const double>> ParamTensors::blocks() const {
  std::vector<std::span<const double>> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l].values());
    out.push_back(biases[l]);
  }
  return out;
}

double GradientSet::max_abs() const {
  double m = 0.0;
  for (double v : flatten()) m = std::max(m, std::abs(v));
  return m;
}

NetworkParams init_network(std::span<const std::size_t> layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("network needs at least two layer sizes");
  for (auto s : layer_sizes) {
    if (s == 0) throw ConfigError("layer sizes must be positive");
  }
  NetworkParams p;
  p.layer_sizes.assign(layer_sizes.begin(), layer_sizes.end());
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t fan_in = layer_sizes[l];
    const std::size_t fan_out = layer_sizes[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    Matrix w(fan_out, fan_in);
    for (double& v : w.values()) v = dist(rng);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(fan_out, 0.0);
  }
  return p;
}

GradientSet zeros_like(const NetworkParams& params) {
  GradientSet g;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    g.weights.emplace_back(params.weights[l].rows(), params.weights[l].cols());
    g.biases.emplace_back(params.biases[l].size(), 0.0);
  }
  return g;
}

ForwardTrace forward_trace(const NetworkParams& params, const Matrix& inputs) {
  if (inputs.cols() != params.input_dim()) {
    throw ShapeError("input dim " + std::to_string(inputs.cols()) + " does not match network input " +
                     std::to_string(params.input_dim()));
  }
  ForwardTrace trace;
  trace.activations.reserve(params.layer_count() + 1);
  trace.activations.push_back(inputs);
  const std::size_t n = inputs.rows();
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    const Matrix& w = params.weights[l];
    const auto& b = params.biases[l];
    const Matrix& in = trace.activations.back();
    Matrix out(n, w.rows());
    const bool last = (l + 1 == params.layer_count());
    for (std::size_t i = 0; i < n; ++i) {
      auto x = in.row(i);
      auto y = out.row(i);
      for (std::size_t j = 0; j < w.rows(); ++j) {
        const double z = b[j] + kernels::dot(w.row(j), x);
        y[j] = (last || z > 0.0) ? z : 0.0;
      }
    }
    trace.activations.push_back(std::move(out));
  }
  return trace;
}

ForwardResult forward(const NetworkParams& params, const Matrix& inputs) {
  auto trace = forward_trace(params, inputs);
  ForwardResult r;
  r.logits = std::move(trace.activations.back());
  r.hidden = std::move(trace.activations[trace.activations.size() - 2]);
  return r;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    auto out = p.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      out[c] = std::exp(z[c] - mx);
      sum += out[c];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

LossResult weighted_ce_loss(const Matrix& logits, std::span<const int> labels,
                            std::span<const double> example_weights) {
  if (labels.size() != logits.rows() || example_weights.size() != logits.rows()) {
    throw ShapeError("loss: logits, labels and weights disagree on example count");
  }
  LossResult r;
  r.per_example.resize(logits.rows());
  const auto n_classes = static_cast<int>(logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    if (labels[i] < 0 || labels[i] >= n_classes) throw ShapeError("label out of range");
    double mx = -INFINITY;
    for (double v : z) {
      if (!std::isfinite(v)) throw NumericError("non-finite logit at example " + std::to_string(i));
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double loss = std::log(sum) + mx - z[static_cast<std::size_t>(labels[i])];
    r.per_example[i] = std::max(loss, 0.0);
    r.weighted_sum += example_weights[i] * r.per_example[i];
  }
  return r;
}

GradientSet backprop(const NetworkParams& params, const ForwardTrace& trace, const Matrix& logit_grad,
                     Matrix* input_grad) {
  const std::size_t n = logit_grad.rows();
  GradientSet g = zeros_like(params);
  Matrix delta = logit_grad;
  for (std::size_t l = params.layer_count(); l-- > 0;) {
    const Matrix& w = params.weights[l];
    const Matrix& in = trace.activations[l];
    Matrix& gw = g.weights[l];
    auto& gb = g.biases[l];
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto x = in.row(i);
      for (std::size_t j = 0; j < w.rows(); ++j) {
        if (d[j] == 0.0) continue;
        kernels::axpy(d[j], x, gw.row(j));
        gb[j] += d[j];
      }
    }
    if (l == 0 && input_grad == nullptr) break;
    Matrix prev(n, w.cols());
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto out = prev.row(i);
      for (std::size_t j = 0; j < w.rows(); ++j) {
        if (d[j] != 0.0) kernels::axpy(d[j], w.row(j), out);
      }
      if (l > 0) {
        auto a = in.row(i);
        for (std::size_t k = 0; k < out.size(); ++k) {
          if (a[k] <= 0.0) out[k] = 0.0;
        }
      }
    }
    if (l == 0) {
      *input_grad = std::move(prev);
      break;
    }
    delta = std::move(prev);
  }
  return g;
}

GradientSet backward(const NetworkParams& params, const Batch& batch) {
  if (batch.inputs.rows() == 0) throw ShapeError("empty batch");
  auto trace = forward_trace(params, batch.inputs);
  const Matrix& logits = trace.activations.back();
  // Validates labels and finiteness.
  (void)weighted_ce_loss(logits, batch.labels, batch.example_weights);
  Matrix dlogits = softmax_rows(logits);
  for (std::size_t i = 0; i < dlogits.rows(); ++i) {
    auto row = dlogits.row(i);
    row[static_cast<std::size_t>(batch.labels[i])] -= 1.0;
    for (double& v : row) v *= batch.example_weights[i];
  }
  return backprop(params, trace, dlogits);
}

void sgd_step_inplace(NetworkParams& params, const GradientSet& grads, double lr, double weight_decay,
                      Direction direction) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (grads.weights.size() != params.weights.size()) throw ShapeError("gradient/param layer mismatch");
  auto p_blocks = params.blocks();
  auto g_blocks = grads.blocks();
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    auto p = p_blocks[b];
    auto g = g_blocks[b];
    if (p.size() != g.size()) throw ShapeError("gradient/param block mismatch");
    if (direction == Direction::descend) {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * (g[k] + weight_decay * p[k]);
    } else {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] += lr * (g[k] - weight_decay * p[k]);
    }
  }
}

NetworkParams sgd_step(const NetworkParams& params, const GradientSet& grads, double lr,
                       double weight_decay, Direction direction) {
  NetworkParams out = params;
  sgd_step_inplace(out, grads, lr, weight_decay, direction);
  return out;
}

GradientSet finite_diff_grad(const NetworkParams& params,
                             const std::function<double(const NetworkParams&)>& objective,
                             double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("finite difference epsilon must be positive");
  NetworkParams probe = params;
  GradientSet g = zeros_like(params);
  auto p_blocks = probe.blocks();
  auto g_blocks = g.blocks();
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    for (std::size_t k = 0; k < p_blocks[b].size(); ++k) {
      const double orig = p_blocks[b][k];
      p_blocks[b][k] = orig + epsilon;
      const double up = objective(probe);
      p_blocks[b][k] = orig - epsilon;
      const double down = objective(probe);
      p_blocks[b][k] = orig;
      g_blocks[b][k] = (up - down) / (2.0 * epsilon);
    }
  }
  return g;
}

GradientSet finite_diff_grad(const NetworkParams& params, const Batch& batch, double epsilon) {
  return finite_diff_grad(
      params,
      [&batch](const NetworkParams& p) {
        return weighted_ce_loss(forward(p, batch.inputs).logits, batch.labels, batch.example_weights)
            .weighted_sum;
      },
      epsilon);
}

double max_relative_error(const GradientSet& a, const GradientSet& b, double floor) {
  auto fa = a.flatten();
  auto fb = b.flatten();
  if (fa.size() != fb.size()) throw ShapeError("gradient sets differ in size");
  double worst = 0.0;
  for (std::size_t k = 0; k < fa.size(); ++k) {
    const double scale = std::max(std::abs(fa[k]), std::abs(fb[k]));
    if (scale <= floor) continue;
    worst = std::max(worst, std::abs(fa[k] - fb[k]) / scale);
  }
  return worst;
}

std::filesystem::path checkpoint_bin(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".bin");
}

std::filesystem::path checkpoint_manifest(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".manifest");
}

void save_checkpoint(const std::filesystem::path& stem, const NetworkParams& params, const std::string& role) {
  io::write_f64(checkpoint_bin(stem), params.flatten());
  io::Manifest m;
  m.set("format_version", kCheckpointFormatVersion);
  m.set_list("layer_sizes", params.layer_sizes);
  m.set("activation", "relu");
  m.set("seed", params.seed);
  m.set("role", role);
  m.set("parameter_count", static_cast<std::uint64_t>(params.parameter_count()));
  m.write(checkpoint_manifest(stem));
}

NetworkParams load_checkpoint(const std::filesystem::path& stem) {
  auto m = io::Manifest::read(checkpoint_manifest(stem));
  if (m.get_uint("format_version") != kCheckpointFormatVersion) {
    throw ConfigError("unsupported checkpoint format version in " + checkpoint_manifest(stem).string());
  }
  if (m.get("activation") != "relu") throw ConfigError("unsupported activation " + m.get("activation"));
  auto sizes = m.get_list("layer_sizes");
  NetworkParams p = init_network(sizes, m.get_uint("seed"));
  p.assign(io::read_f64(checkpoint_bin(stem)));
  return p;
}

}  // namespace agro::nn
