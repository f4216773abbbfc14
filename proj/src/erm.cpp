#include "agro/erm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "agro/error.hpp"
#include "agro/io.hpp"
#include "agro/kernels.hpp"

namespace agro::erm {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
}

std::vector<std::size_t> NetSpec::layer_sizes(std::size_t input_dim, std::size_t n_classes) const {
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(n_classes);
  return sizes;
}

MinibatchSampler::MinibatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
}

std::vector<std::vector<std::size_t>> MinibatchSampler::next_epoch() {
  std::vector<std::size_t> perm(n_);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng_);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n_; start += batch_size_) {
    const std::size_t end = std::min(n_, start + batch_size_);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

ErmResult train_erm(const data::TrainingView& view, const NetSpec& net, const TrainConfig& config,
                    const nn::NetworkParams* init) {
  if (view.size() == 0) throw ConfigError("train_erm: empty training view");
  config.validate();
  ErmResult result;
  result.params = init ? *init : nn::init_network(net.layer_sizes(view.input_dim(), view.n_classes()), config.seed);
  MinibatchSampler sampler(view.size(), config.batch_size, config.seed);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t b = 0;
    for (const auto& idx : sampler.next_epoch()) {
      nn::Batch batch;
      batch.inputs = gather_rows(view.inputs(), idx);
      for (auto i : idx) batch.labels.push_back(view.labels()[i]);
      batch.example_weights.assign(idx.size(), 1.0 / static_cast<double>(idx.size()));
      const auto loss = nn::weighted_ce_loss(nn::forward(result.params, batch.inputs).logits, batch.labels,
                                             batch.example_weights);
      if (!std::isfinite(loss.weighted_sum)) {
        throw NumericError("ERM diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      }
      loss_sum += loss.weighted_sum * static_cast<double>(idx.size());
      const auto grads = nn::backward(result.params, batch);
      nn::sgd_step_inplace(result.params, grads, config.lr, config.weight_decay, nn::Direction::descend);
      ++b;
    }
    result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(view.size()));
    result.checkpoints.push_back(result.params);
  }
  return result;
}

std::vector<int> predict(const nn::NetworkParams& params, const Matrix& inputs) {
  const auto logits = nn::forward(params, inputs).logits;
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(const nn::NetworkParams& params, const data::TrainingView& view) {
  const auto pred = predict(params, view.inputs());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == view.labels()[i];
  return pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
}

PretrainedAnalog::PretrainedAnalog(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
    : projection_(output_dim, input_dim), seed_(seed) {
  std::mt19937_64 rng(seed ^ 0x707265747261696eULL);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(input_dim, 1))));
  for (double& v : projection_.values()) v = normal(rng);
}

std::vector<double> PretrainedAnalog::encode(std::span<const double> x) const {
  if (x.size() != input_dim()) throw ShapeError("pretrained_analog: input dim mismatch");
  std::vector<double> out(output_dim());
  for (std::size_t j = 0; j < output_dim(); ++j) out[j] = kernels::dot(projection_.row(j), x);
  return out;
}

Matrix PretrainedAnalog::encode(const Matrix& inputs) const {
  if (inputs.cols() != input_dim() && output_dim() > 0) throw ShapeError("pretrained_analog: input dim mismatch");
  Matrix out(inputs.rows(), output_dim());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    auto x = inputs.row(i);
    auto y = out.row(i);
    for (std::size_t j = 0; j < output_dim(); ++j) y[j] = kernels::dot(projection_.row(j), x);
  }
  return out;
}

Matrix FeatureMatrix::embedding() const {
  const std::size_t d = layout.g_dim + layout.h_dim;
  Matrix z(values.rows(), d);
  for (std::size_t i = 0; i < values.rows(); ++i) {
    auto src = values.row(i);
    std::copy_n(src.begin(), d, z.row(i).begin());
  }
  return z;
}

Matrix FeatureMatrix::pred_probs() const {
  Matrix p(values.rows(), layout.n_classes);
  for (std::size_t i = 0; i < values.rows(); ++i) {
    auto src = values.row(i).subspan(layout.probs_offset(), layout.n_classes);
    std::copy(src.begin(), src.end(), p.row(i).begin());
  }
  return p;
}

namespace {

void write_feature_rows(FeatureMatrix& out, std::span<const std::size_t> rows, const Matrix& g, const Matrix& h,
                        const Matrix& probs, std::span<const int> labels) {
  const auto& lay = out.layout;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto dst = out.values.row(rows[r]);
    std::copy(g.row(r).begin(), g.row(r).end(), dst.begin());
    std::copy(h.row(r).begin(), h.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(lay.h_offset()));
    dst[lay.label_offset() + static_cast<std::size_t>(labels[r])] = 1.0;
    std::copy(probs.row(r).begin(), probs.row(r).end(),
              dst.begin() + static_cast<std::ptrdiff_t>(lay.probs_offset()));
  }
}

}  // namespace

FeatureMatrix assemble_features(const PretrainedAnalog& encoder, const nn::NetworkParams& model,
                                const Matrix& inputs, std::span<const int> labels, std::size_t n_classes) {
  if (labels.size() != inputs.rows()) throw ShapeError("assemble_features: label count mismatch");
  auto fwd = nn::forward(model, inputs);
  FeatureMatrix out;
  out.layout = {encoder.output_dim(), fwd.hidden.cols(), n_classes};
  out.values = Matrix(inputs.rows(), out.layout.total());
  std::vector<std::size_t> rows(inputs.rows());
  std::iota(rows.begin(), rows.end(), 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw ShapeError("assemble_features: label out of range");
  }
  write_feature_rows(out, rows, encoder.encode(inputs), fwd.hidden, nn::softmax_rows(fwd.logits), labels);
  return out;
}

FeatureMatrix assemble_features_by_fold(const PretrainedAnalog& encoder, std::span<const nn::NetworkParams> models,
                                        const Matrix& inputs, std::span<const int> labels, std::size_t n_classes) {
  if (models.empty()) throw ConfigError("assemble_features_by_fold: no models");
  if (labels.size() != inputs.rows()) throw ShapeError("assemble_features_by_fold: label count mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw ShapeError("assemble_features_by_fold: label out of range");
    }
  }
  const std::size_t k = models.size();
  FeatureMatrix out;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> rows;
    for (std::size_t i = f; i < inputs.rows(); i += k) rows.push_back(i);
    if (rows.empty()) continue;
    const Matrix x = gather_rows(inputs, rows);
    std::vector<int> y;
    for (auto i : rows) y.push_back(labels[i]);
    auto fwd = nn::forward(models[f], x);
    if (out.values.empty()) {
      out.layout = {encoder.output_dim(), fwd.hidden.cols(), n_classes};
      out.values = Matrix(inputs.rows(), out.layout.total());
    }
    write_feature_rows(out, rows, encoder.encode(x), fwd.hidden, nn::softmax_rows(fwd.logits), y);
  }
  return out;
}

KFoldFeatures extract_features_kfold(const data::TrainingView& view, std::size_t k, const NetSpec& net,
                                     const TrainConfig& config, const PretrainedAnalog& encoder) {
  if (k < 2) throw ConfigError("extract_features_kfold: K must be at least 2");
  std::vector<std::vector<std::size_t>> held_out(k), train_idx(k);
  for (std::size_t i = 0; i < view.size(); ++i) {
    const int f = view.folds()[i];
    if (f < 0 || static_cast<std::size_t>(f) >= k) {
      throw ConfigError("extract_features_kfold: fold id " + std::to_string(f) + " outside [0, K)");
    }
    held_out[static_cast<std::size_t>(f)].push_back(i);
    for (std::size_t other = 0; other < k; ++other) {
      if (other != static_cast<std::size_t>(f)) train_idx[other].push_back(i);
    }
  }
  for (std::size_t f = 0; f < k; ++f) {
    if (held_out[f].empty()) throw ConfigError("extract_features_kfold: fold " + std::to_string(f) + " has no held-out examples");
    if (train_idx[f].empty()) throw ConfigError("extract_features_kfold: fold " + std::to_string(f) + " has no training examples");
  }

  KFoldFeatures out;
  const std::size_t h_dim = net.hidden.empty() ? view.input_dim() : net.hidden.back();
  out.features.layout = {encoder.output_dim(), h_dim, view.n_classes()};
  out.features.values = Matrix(view.size(), out.features.layout.total());
  out.source_fold.assign(view.size(), -1);
  for (std::size_t f = 0; f < k; ++f) {
    TrainConfig fold_cfg = config;
    fold_cfg.seed = config.seed + f;
    auto model = train_erm(view.subset(train_idx[f]), net, fold_cfg).params;

    std::vector<char> seen(view.size(), 0);
    for (auto i : train_idx[f]) seen[i] = 1;
    for (auto i : held_out[f]) {
      if (seen[i]) throw Error("extract_features_kfold: held-out example used in training");
    }

    const Matrix x = gather_rows(view.inputs(), held_out[f]);
    std::vector<int> labels;
    for (auto i : held_out[f]) labels.push_back(view.labels()[i]);
    auto fwd = nn::forward(model, x);
    write_feature_rows(out.features, held_out[f], encoder.encode(x), fwd.hidden, nn::softmax_rows(fwd.logits),
                       labels);
    for (auto i : held_out[f]) out.source_fold[i] = static_cast<int>(f);
    out.fold_models.push_back(std::move(model));
    out.trained_on.push_back(std::move(train_idx[f]));
  }
  return out;
}

void save_features(const std::filesystem::path& stem, const FeatureMatrix& features,
                   const std::vector<std::pair<std::string, std::string>>& extra) {
  io::write_f64(stem.string() + ".bin", features.values.values());
  io::Manifest m;
  m.set("n", static_cast<std::uint64_t>(features.size()));
  m.set("dim", static_cast<std::uint64_t>(features.layout.total()));
  m.set("g_dim", static_cast<std::uint64_t>(features.layout.g_dim));
  m.set("h_dim", static_cast<std::uint64_t>(features.layout.h_dim));
  m.set("n_classes", static_cast<std::uint64_t>(features.layout.n_classes));
  m.set("blocks", "g_repr,h_repr,y_onehot,pred_probs");
  for (const auto& [k, v] : extra) m.set(k, v);
  m.write(stem.string() + ".manifest");
}

FeatureMatrix load_features(const std::filesystem::path& stem) {
  auto m = io::Manifest::read(stem.string() + ".manifest");
  FeatureMatrix f;
  f.layout = {m.get_uint("g_dim"), m.get_uint("h_dim"), m.get_uint("n_classes")};
  const auto n = m.get_uint("n");
  if (m.get_uint("dim") != f.layout.total()) throw ConfigError("feature manifest: dim disagrees with block layout");
  const auto flat = io::read_f64(stem.string() + ".bin");
  if (flat.size() != n * f.layout.total()) throw ShapeError("feature file size disagrees with manifest");
  f.values = Matrix(n, f.layout.total());
  std::copy(flat.begin(), flat.end(), f.values.values().begin());
  return f;
}

void export_features_csv(const std::filesystem::path& path, const FeatureMatrix& features) {
  const auto& lay = features.layout;
  std::string out;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < lay.g_dim; ++k) names.push_back("g_" + std::to_string(k));
  for (std::size_t k = 0; k < lay.h_dim; ++k) names.push_back("h_" + std::to_string(k));
  for (std::size_t k = 0; k < lay.n_classes; ++k) names.push_back("y_" + std::to_string(k));
  for (std::size_t k = 0; k < lay.n_classes; ++k) names.push_back("p_" + std::to_string(k));
  for (std::size_t k = 0; k < names.size(); ++k) out += (k ? "," : "") + names[k];
  out += "\n";
  for (std::size_t i = 0; i < features.size(); ++i) {
    auto row = features.values.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) out += (k ? "," : "") + io::format_double(row[k]);
    out += "\n";
  }
  io::write_text(path, out);
}

}  // namespace agro::erm
