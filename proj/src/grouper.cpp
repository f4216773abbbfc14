#include "agro/grouper.hpp"

#include <algorithm>
#include <cmath>

#include "agro/erm.hpp"
#include "agro/error.hpp"
#include "agro/io.hpp"
#include "agro/slice_model.hpp"

namespace agro::grouper {

Standardizer Standardizer::fit(const Matrix& features) {
  Standardizer s;
  const std::size_t n = features.rows(), d = features.cols();
  s.mean_.assign(d, 0.0);
  s.scale_.assign(d, 1.0);
  if (n == 0) return s;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) s.mean_[k] += features(i, k);
  }
  for (double& m : s.mean_) m /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double c = features(i, k) - s.mean_[k];
      var[k] += c * c;
    }
  }
  for (std::size_t k = 0; k < d; ++k) {
    const double sd = std::sqrt(var[k] / static_cast<double>(n));
    s.scale_[k] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t dim) {
  Standardizer s;
  s.mean_.assign(dim, 0.0);
  s.scale_.assign(dim, 1.0);
  return s;
}

Standardizer Standardizer::from_moments(std::vector<double> mean, std::vector<double> scale) {
  if (mean.size() != scale.size()) throw ShapeError("standardizer: mean/scale size mismatch");
  Standardizer s;
  s.mean_ = std::move(mean);
  s.scale_ = std::move(scale);
  return s;
}

Matrix Standardizer::apply(const Matrix& features) const {
  if (features.cols() != dim()) throw ShapeError("standardizer: feature dim mismatch");
  Matrix out(features.rows(), features.cols());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t k = 0; k < features.cols(); ++k) out(i, k) = (features(i, k) - mean_[k]) / scale_[k];
  }
  return out;
}

Grouper init_grouper(const Matrix& features, std::size_t m, const GrouperConfig& config) {
  if (m < 1) throw ConfigError("grouper needs at least one group");
  Grouper g;
  const std::vector<std::size_t> sizes{features.cols(), config.hidden, m};
  g.net = nn::init_network(sizes, config.seed);
  g.standardizer = config.standardize ? Standardizer::fit(features) : Standardizer::identity(features.cols());
  return g;
}

Matrix group_probs(const Grouper& grouper, const Matrix& features) {
  if (features.cols() != grouper.feature_dim()) {
    throw ShapeError("group_probs: feature dim " + std::to_string(features.cols()) + ", grouper expects " +
                     std::to_string(grouper.feature_dim()));
  }
  return nn::softmax_rows(nn::forward(grouper.net, grouper.standardizer.apply(features)).logits);
}

namespace {

double kl_rows(const Matrix& targets, const Matrix& probs) {
  double total = 0.0;
  for (std::size_t i = 0; i < targets.rows(); ++i) {
    for (std::size_t g = 0; g < targets.cols(); ++g) {
      const double t = targets(i, g);
      if (t > 0.0) total += t * (std::log(t) - std::log(probs(i, g)));
    }
  }
  return total / static_cast<double>(targets.rows());
}

}  // namespace

KlResult kl_loss_and_grad(const nn::NetworkParams& net, const Matrix& inputs, const Matrix& targets) {
  if (targets.rows() != inputs.rows() || targets.cols() != net.output_dim()) {
    throw ShapeError("kl_loss_and_grad: target shape mismatch");
  }
  const auto trace = nn::forward_trace(net, inputs);
  const Matrix probs = nn::softmax_rows(trace.activations.back());
  KlResult r;
  r.mean_kl = kl_rows(targets, probs);
  if (!std::isfinite(r.mean_kl)) throw NumericError("grouper KL is not finite");
  Matrix dlogits(probs.rows(), probs.cols());
  const double inv_n = 1.0 / static_cast<double>(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double target_mass = 0.0;
    for (std::size_t g = 0; g < probs.cols(); ++g) target_mass += targets(i, g);
    for (std::size_t g = 0; g < probs.cols(); ++g) {
      dlogits(i, g) = (target_mass * probs(i, g) - targets(i, g)) * inv_n;
    }
  }
  r.grad = nn::backprop(net, trace, dlogits);
  return r;
}

double mean_kl(const nn::NetworkParams& net, const Matrix& inputs, const Matrix& targets) {
  return kl_rows(targets, nn::softmax_rows(nn::forward(net, inputs).logits));
}

PretrainResult pretrain_kl(Grouper grouper, const Matrix& features, const Matrix& responsibilities,
                           std::size_t epochs, std::size_t batch_size, double lr, std::uint64_t seed) {
  if (responsibilities.cols() != grouper.groups()) {
    throw ConfigError("pretrain_kl: slice count " + std::to_string(responsibilities.cols()) +
                      " differs from group count " + std::to_string(grouper.groups()));
  }
  if (responsibilities.rows() != features.rows()) throw ShapeError("pretrain_kl: row count mismatch");
  const Matrix inputs = grouper.standardizer.apply(features);
  PretrainResult result;
  result.kl_trace.push_back(mean_kl(grouper.net, inputs, responsibilities));
  erm::MinibatchSampler sampler(features.rows(), batch_size, seed);
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& idx : sampler.next_epoch()) {
      const auto kl = kl_loss_and_grad(grouper.net, gather_rows(inputs, idx), gather_rows(responsibilities, idx));
      nn::sgd_step_inplace(grouper.net, kl.grad, lr, 0.0, nn::Direction::descend);
    }
    result.kl_trace.push_back(mean_kl(grouper.net, inputs, responsibilities));
  }
  result.grouper = std::move(grouper);
  return result;
}

double mean_entropy(const Matrix& probs) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (double p : probs.row(i)) {
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return probs.rows() ? total / static_cast<double>(probs.rows()) : 0.0;
}

std::vector<double> argmax_shares(const Matrix& probs) {
  std::vector<double> shares(probs.cols(), 0.0);
  for (int g : slice::argmax_rows(probs)) shares[static_cast<std::size_t>(g)] += 1.0;
  for (double& s : shares) s /= static_cast<double>(std::max<std::size_t>(probs.rows(), 1));
  return shares;
}

std::vector<double> soft_shares(const Matrix& probs) {
  std::vector<double> shares(probs.cols(), 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (std::size_t g = 0; g < probs.cols(); ++g) shares[g] += probs(i, g);
  }
  for (double& s : shares) s /= static_cast<double>(std::max<std::size_t>(probs.rows(), 1));
  return shares;
}

void save_grouper(const std::filesystem::path& stem, const Grouper& grouper) {
  nn::save_checkpoint(stem, grouper.net, "grouper");
  std::vector<double> flat(grouper.standardizer.mean());
  flat.insert(flat.end(), grouper.standardizer.scale().begin(), grouper.standardizer.scale().end());
  io::write_f64(stem.string() + ".standardizer.bin", flat);
}

Grouper load_grouper(const std::filesystem::path& stem) {
  Grouper g;
  g.net = nn::load_checkpoint(stem);
  const auto flat = io::read_f64(stem.string() + ".standardizer.bin");
  const std::size_t d = g.net.input_dim();
  if (flat.size() != 2 * d) throw ShapeError("grouper standardizer size disagrees with network input");
  g.standardizer = Standardizer::from_moments(std::vector<double>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(d)),
                                              std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(d), flat.end()));
  return g;
}

}  // namespace agro::grouper
