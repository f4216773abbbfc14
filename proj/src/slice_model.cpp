#include "agro/slice_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "agro/error.hpp"
#include "agro/io.hpp"
#include "agro/kernels.hpp"

namespace agro::slice {

namespace {

constexpr double kEmptySliceMass = 1e-10;

double log_sum_exp(std::span<const double> v) {
  double mx = -INFINITY;
  for (double x : v) mx = std::max(mx, x);
  if (mx == -INFINITY) return -INFINITY;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

struct Workspace {
  Matrix inv_var;
  std::vector<double> log_norm;  // per slice: log p_S - 0.5 (d log 2pi + sum log var)
  Matrix log_label;
  Matrix log_pred;
};

Workspace prepare(const SliceModelParams& p) {
  Workspace w;
  w.inv_var = Matrix(p.k, p.dim);
  w.log_norm.resize(p.k);
  w.log_label = Matrix(p.k, p.n_classes);
  w.log_pred = Matrix(p.k, p.n_classes);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t j = 0; j < p.k; ++j) {
    double log_det = 0.0;
    for (std::size_t d = 0; d < p.dim; ++d) {
      w.inv_var(j, d) = 1.0 / p.var(j, d);
      log_det += std::log(p.var(j, d));
    }
    w.log_norm[j] = std::log(p.p_s[j]) - 0.5 * (static_cast<double>(p.dim) * log2pi + log_det);
    for (std::size_t c = 0; c < p.n_classes; ++c) {
      w.log_label(j, c) = std::log(p.p_label(j, c));
      w.log_pred(j, c) = std::log(p.p_pred(j, c));
    }
  }
  return w;
}

// Log of p_S[j] N(z; mu_j, var_j) p_label[j][y]^gamma p_pred[j][yhat]^gamma
// for every slice j.
void log_terms(const SliceModelParams& p, const Workspace& w, std::span<const double> z, int y, int yhat,
               std::span<double> out) {
  for (std::size_t j = 0; j < p.k; ++j) {
    double t = w.log_norm[j] - 0.5 * kernels::weighted_sq_dist(z, p.mu.row(j), w.inv_var.row(j));
    if (p.gamma != 0.0) {
      t += p.gamma * (w.log_label(j, static_cast<std::size_t>(y)) + w.log_pred(j, static_cast<std::size_t>(yhat)));
    }
    out[j] = t;
  }
}

// Fills resp and per-example log-likelihoods; returns the total.
double e_step(const SliceModelParams& p, const Matrix& z, std::span<const int> y, std::span<const int> yhat,
              Matrix& resp, std::vector<double>& point_ll) {
  const auto w = prepare(p);
  std::vector<double> terms(p.k);
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    log_terms(p, w, z.row(i), y[i], yhat[i], terms);
    const double lse = log_sum_exp(terms);
    point_ll[i] = lse;
    total += lse;
    auto r = resp.row(i);
    if (lse == -INFINITY) {
      std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(p.k));
      continue;
    }
    for (std::size_t j = 0; j < p.k; ++j) r[j] = std::exp(terms[j] - lse);
  }
  return total;
}

std::vector<double> global_variance(const Matrix& z, double floor) {
  const std::size_t n = z.rows(), d = z.cols();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, z.row(i), mean);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = z.row(i);
    for (std::size_t k = 0; k < d; ++k) var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
  }
  for (double& v : var) v = std::max(v / static_cast<double>(n), floor);
  return var;
}

std::vector<double> smoothed_histogram(std::span<const int> labels, std::size_t n_classes) {
  std::vector<double> h(n_classes, 1.0);
  for (int c : labels) h[static_cast<std::size_t>(c)] += 1.0;
  const double total = static_cast<double>(labels.size() + n_classes);
  for (double& v : h) v /= total;
  return h;
}

std::vector<std::size_t> choose_distinct(const Matrix& z, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> order(z.rows());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x736c696365ULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen;
  for (auto i : order) {
    if (chosen.size() == k) break;
    const bool dup = std::any_of(chosen.begin(), chosen.end(), [&](std::size_t c) {
      return std::equal(z.row(c).begin(), z.row(c).end(), z.row(i).begin());
    });
    if (!dup) chosen.push_back(i);
  }
  // Fewer distinct rows than slices: fall back to repeats.
  for (std::size_t pos = 0; chosen.size() < k; ++pos) chosen.push_back(order[pos]);
  return chosen;
}

void m_step(SliceModelParams& p, const Matrix& z, std::span<const int> y, std::span<const int> yhat,
            const Matrix& resp, const std::vector<double>& point_ll, const std::vector<double>& global_var,
            bool& reseeded) {
  const std::size_t n = z.rows();
  std::vector<double> mass(p.k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p.k; ++j) mass[j] += resp(i, j);
  }
  p.mu.fill(0.0);
  p.var.fill(0.0);
  p.p_label.fill(0.0);
  p.p_pred.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p.k; ++j) {
      const double r = resp(i, j);
      if (r == 0.0) continue;
      kernels::axpy(r, z.row(i), p.mu.row(j));
      p.p_label(j, static_cast<std::size_t>(y[i])) += r;
      p.p_pred(j, static_cast<std::size_t>(yhat[i])) += r;
    }
  }
  for (std::size_t j = 0; j < p.k; ++j) {
    if (mass[j] < kEmptySliceMass) continue;
    for (double& v : p.mu.row(j)) v /= mass[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto x = z.row(i);
    for (std::size_t j = 0; j < p.k; ++j) {
      const double r = resp(i, j);
      if (r == 0.0) continue;
      auto mu = p.mu.row(j);
      auto var = p.var.row(j);
      for (std::size_t d = 0; d < p.dim; ++d) var[d] += r * (x[d] - mu[d]) * (x[d] - mu[d]);
    }
  }
  for (std::size_t j = 0; j < p.k; ++j) {
    if (mass[j] < kEmptySliceMass) {
      // Re-seed an empty slice at the worst-explained example.
      reseeded = true;
      const auto worst = static_cast<std::size_t>(
          std::min_element(point_ll.begin(), point_ll.end()) - point_ll.begin());
      std::copy(z.row(worst).begin(), z.row(worst).end(), p.mu.row(j).begin());
      std::copy(global_var.begin(), global_var.end(), p.var.row(j).begin());
      for (std::size_t c = 0; c < p.n_classes; ++c) {
        p.p_label(j, c) = (c == static_cast<std::size_t>(y[worst]) ? 2.0 : 1.0) / static_cast<double>(p.n_classes + 1);
        p.p_pred(j, c) = (c == static_cast<std::size_t>(yhat[worst]) ? 2.0 : 1.0) / static_cast<double>(p.n_classes + 1);
      }
      mass[j] = 1.0;
      continue;
    }
    for (std::size_t d = 0; d < p.dim; ++d) p.var(j, d) = std::max(p.var(j, d) / mass[j], p.var_floor);
    for (std::size_t c = 0; c < p.n_classes; ++c) {
      p.p_label(j, c) /= mass[j];
      p.p_pred(j, c) /= mass[j];
    }
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  for (std::size_t j = 0; j < p.k; ++j) p.p_s[j] = mass[j] / total;
}

}  // namespace

void SliceConfig::validate() const {
  if (k < 1) throw ConfigError("slices.k must be at least 1");
  if (gamma < 0.0) throw ConfigError("slices.gamma must be nonnegative");
  if (!(var_floor > 0.0)) throw ConfigError("slices.var_floor must be positive");
  if (init == SliceInit::confusion && !(confusion_noise > 0.0)) {
    throw ConfigError("slices.confusion_noise must be positive");
  }
  if (tol < 0.0) throw ConfigError("slices.tol must be nonnegative");
}

Matrix Projection::apply(const Matrix& z) const {
  if (identity()) return z;
  Matrix out(z.rows(), components.rows());
  std::vector<double> centered(z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) centered[k] = r[k] - mean[k];
    for (std::size_t c = 0; c < components.rows(); ++c) out(i, c) = kernels::dot(components.row(c), centered);
  }
  return out;
}

std::vector<double> Projection::apply(std::span<const double> z) const {
  if (identity()) return {z.begin(), z.end()};
  if (z.size() != mean.size()) throw ShapeError("projection: input dim mismatch");
  std::vector<double> centered(z.size()), out(components.rows());
  for (std::size_t k = 0; k < z.size(); ++k) centered[k] = z[k] - mean[k];
  for (std::size_t c = 0; c < components.rows(); ++c) out[c] = kernels::dot(components.row(c), centered);
  return out;
}

Projection fit_pca(const Matrix& z, std::size_t dim) {
  const std::size_t n = z.rows(), d = z.cols();
  Projection proj;
  proj.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, z.row(i), proj.mean);
  for (double& m : proj.mean) m /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  Eigen::VectorXd c(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) c(static_cast<Eigen::Index>(k)) = z(i, k) - proj.mean[k];
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const std::size_t out_dim = std::min(dim, d);
  proj.components = Matrix(out_dim, d);
  // Eigenvalues come back ascending.
  for (std::size_t r = 0; r < out_dim; ++r) {
    const auto col = static_cast<Eigen::Index>(d - 1 - r);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t k = 0; k < d; ++k) proj.components(r, k) = v(static_cast<Eigen::Index>(k));
  }
  return proj;
}

int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  return best;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = argmax(m.row(i));
  return out;
}

SliceFit fit_em(const Matrix& z_raw, std::span<const int> y, const Matrix& yhat_probs, const SliceConfig& config) {
  config.validate();
  const std::size_t n = z_raw.rows();
  if (n < config.k) throw ConfigError("fit_em: fewer examples than slices");
  if (y.size() != n || yhat_probs.rows() != n) throw ShapeError("fit_em: inputs disagree on example count");
  for (double v : z_raw.values()) {
    if (!std::isfinite(v)) throw NumericError("fit_em: non-finite embedding");
  }
  const std::size_t n_classes = yhat_probs.cols();
  for (int c : y) {
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) throw ShapeError("fit_em: label out of range");
  }
  const auto yhat = argmax_rows(yhat_probs);

  SliceFit fit;
  auto& p = fit.params;
  p.k = config.k;
  p.input_dim = z_raw.cols();
  p.n_classes = n_classes;
  p.gamma = config.gamma;
  p.var_floor = config.var_floor;
  const bool use_pca = config.pca == PcaMode::on || (config.pca == PcaMode::automatic && z_raw.cols() > config.pca_dim);
  if (use_pca) p.pca = fit_pca(z_raw, config.pca_dim);
  const Matrix z = p.pca.apply(z_raw);
  p.dim = z.cols();

  const auto gvar = global_variance(z, config.var_floor);
  fit.init_indices = choose_distinct(z, p.k, config.seed);
  p.p_s.assign(p.k, 1.0 / static_cast<double>(p.k));
  p.mu = Matrix(p.k, p.dim);
  p.var = Matrix(p.k, p.dim);
  p.p_label = Matrix(p.k, n_classes);
  p.p_pred = Matrix(p.k, n_classes);
  const auto h_label = smoothed_histogram(y, n_classes);
  const auto h_pred = smoothed_histogram(yhat, n_classes);
  for (std::size_t j = 0; j < p.k; ++j) {
    std::copy(z.row(fit.init_indices[j]).begin(), z.row(fit.init_indices[j]).end(), p.mu.row(j).begin());
    std::copy(gvar.begin(), gvar.end(), p.var.row(j).begin());
    std::copy(h_label.begin(), h_label.end(), p.p_label.row(j).begin());
    std::copy(h_pred.begin(), h_pred.end(), p.p_pred.row(j).begin());
  }

  fit.responsibilities = Matrix(n, p.k);
  std::vector<double> point_ll(n);
  if (config.init == SliceInit::confusion) {
    fit.init_indices.clear();
    const std::size_t cells = n_classes * n_classes;
    std::mt19937_64 rng(config.seed ^ 0x636f6e66ULL);
    std::uniform_real_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = fit.responsibilities.row(i);
      for (std::size_t j = 0; j < p.k; ++j) {
        const std::size_t cell = j % cells;
        const double base = cell / n_classes == static_cast<std::size_t>(y[i]) ? yhat_probs(i, cell % n_classes) : 0.0;
        r[j] = base + config.confusion_noise * noise(rng);
      }
      double total = 0.0;
      for (double v : r) total += v;
      for (double& v : r) v /= total;
    }
    m_step(p, z, y, yhat, fit.responsibilities, point_ll, gvar, fit.reseeded);
  }
  for (std::size_t it = 0;; ++it) {
    const double ll = e_step(p, z, y, yhat, fit.responsibilities, point_ll);
    if (!std::isfinite(ll)) throw NumericError("fit_em: log-likelihood is not finite at iteration " + std::to_string(it));
    fit.loglik_trace.push_back(ll);
    if (it > 0 && std::abs(ll - fit.loglik_trace[it - 1]) < config.tol) break;
    if (it == config.max_iters) break;
    m_step(p, z, y, yhat, fit.responsibilities, point_ll, gvar, fit.reseeded);
    ++fit.iterations;
  }
  return fit;
}

SlicePosterior predict_slice_probs(const SliceModelParams& params, std::span<const double> z, int y, int yhat) {
  if (z.size() != params.input_dim) throw ShapeError("predict_slice_probs: embedding dim mismatch");
  const auto zp = params.pca.apply(z);
  const auto w = prepare(params);
  std::vector<double> terms(params.k);
  log_terms(params, w, zp, y, yhat, terms);
  const double lse = log_sum_exp(terms);
  SlicePosterior post;
  post.probs.resize(params.k);
  if (lse == -INFINITY) {
    post.underflow = true;
    std::fill(post.probs.begin(), post.probs.end(), 1.0 / static_cast<double>(params.k));
    return post;
  }
  for (std::size_t j = 0; j < params.k; ++j) post.probs[j] = std::exp(terms[j] - lse);
  return post;
}

Matrix predict_slice_probs(const SliceModelParams& params, const Matrix& z, std::span<const int> y,
                           const Matrix& yhat_probs) {
  const auto yhat = argmax_rows(yhat_probs);
  Matrix out(z.rows(), params.k);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto post = predict_slice_probs(params, z.row(i), y[i], yhat[i]);
    std::copy(post.probs.begin(), post.probs.end(), out.row(i).begin());
  }
  return out;
}

double log_likelihood(const SliceModelParams& params, const Matrix& z_projected, std::span<const int> y,
                      std::span<const int> yhat) {
  Matrix resp(z_projected.rows(), params.k);
  std::vector<double> point_ll(z_projected.rows());
  return e_step(params, z_projected, y, yhat, resp, point_ll);
}

void save_slice_model(const std::filesystem::path& stem, const SliceFit& fit) {
  const auto& p = fit.params;
  std::vector<double> flat(p.p_s);
  for (const Matrix* m : {&p.mu, &p.var, &p.p_label, &p.p_pred}) {
    flat.insert(flat.end(), m->values().begin(), m->values().end());
  }
  if (!p.pca.identity()) {
    flat.insert(flat.end(), p.pca.mean.begin(), p.pca.mean.end());
    flat.insert(flat.end(), p.pca.components.values().begin(), p.pca.components.values().end());
  }
  io::write_f64(stem.string() + ".bin", flat);
  io::Manifest m;
  m.set("format_version", std::uint64_t{1});
  m.set("k", static_cast<std::uint64_t>(p.k));
  m.set("d", static_cast<std::uint64_t>(p.dim));
  m.set("input_dim", static_cast<std::uint64_t>(p.input_dim));
  m.set("n_classes", static_cast<std::uint64_t>(p.n_classes));
  m.set("gamma", p.gamma);
  m.set("var_floor", p.var_floor);
  m.set("pca_dim", static_cast<std::uint64_t>(p.pca.identity() ? 0 : p.pca.components.rows()));
  m.set("iters", static_cast<std::uint64_t>(fit.iterations));
  m.set("final_loglik", fit.loglik_trace.empty() ? 0.0 : fit.loglik_trace.back());
  m.set("reseeded", fit.reseeded ? "true" : "false");
  m.write(stem.string() + ".manifest");
}

SliceModelParams load_slice_model(const std::filesystem::path& stem) {
  auto m = io::Manifest::read(stem.string() + ".manifest");
  SliceModelParams p;
  p.k = m.get_uint("k");
  p.dim = m.get_uint("d");
  p.input_dim = m.get_uint("input_dim");
  p.n_classes = m.get_uint("n_classes");
  p.gamma = m.get_double("gamma");
  p.var_floor = m.get_double("var_floor");
  const std::size_t pca_dim = m.get_uint("pca_dim");
  const auto flat = io::read_f64(stem.string() + ".bin");
  std::size_t expected = p.k + 2 * p.k * p.dim + 2 * p.k * p.n_classes;
  if (pca_dim) expected += p.input_dim + pca_dim * p.input_dim;
  if (flat.size() != expected) throw ShapeError("slice model file size disagrees with manifest");
  std::size_t pos = 0;
  auto take = [&](std::span<double> dst) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), dst.size(), dst.begin());
    pos += dst.size();
  };
  p.p_s.resize(p.k);
  take(p.p_s);
  p.mu = Matrix(p.k, p.dim);
  p.var = Matrix(p.k, p.dim);
  p.p_label = Matrix(p.k, p.n_classes);
  p.p_pred = Matrix(p.k, p.n_classes);
  take(p.mu.values());
  take(p.var.values());
  take(p.p_label.values());
  take(p.p_pred.values());
  if (pca_dim) {
    p.pca.mean.resize(p.input_dim);
    take(p.pca.mean);
    p.pca.components = Matrix(pca_dim, p.input_dim);
    take(p.pca.components.values());
  }
  return p;
}

std::vector<SliceSummary> summarize(const Matrix& responsibilities, std::span<const int> y,
                                    std::span<const int> yhat, std::size_t n_classes) {
  const std::size_t k = responsibilities.cols();
  const auto assign = argmax_rows(responsibilities);
  std::vector<SliceSummary> rows(k);
  std::vector<std::vector<std::size_t>> pair_counts(k, std::vector<std::size_t>(n_classes * n_classes, 0));
  std::vector<std::size_t> errors(k, 0);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    const auto j = static_cast<std::size_t>(assign[i]);
    ++rows[j].size;
    ++pair_counts[j][static_cast<std::size_t>(y[i]) * n_classes + static_cast<std::size_t>(yhat[i])];
    errors[j] += y[i] != yhat[i];
  }
  for (std::size_t j = 0; j < k; ++j) {
    rows[j].slice = j;
    if (rows[j].size == 0) continue;
    const auto& pc = pair_counts[j];
    const auto best = static_cast<std::size_t>(std::max_element(pc.begin(), pc.end()) - pc.begin());
    rows[j].top_y = static_cast<int>(best / n_classes);
    rows[j].top_yhat = static_cast<int>(best % n_classes);
    rows[j].top_pair_share = static_cast<double>(pc[best]) / static_cast<double>(rows[j].size);
    rows[j].error_rate = static_cast<double>(errors[j]) / static_cast<double>(rows[j].size);
  }
  return rows;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<SliceSummary>& rows) {
  std::string out = "slice,size,top_y,top_yhat,top_pair_share,error_rate\n";
  for (const auto& r : rows) {
    out += std::to_string(r.slice) + "," + std::to_string(r.size) + "," + std::to_string(r.top_y) + "," +
           std::to_string(r.top_yhat) + "," + io::format_double(r.top_pair_share) + "," +
           io::format_double(r.error_rate) + "\n";
  }
  io::write_text(path, out);
}

}  // namespace agro::slice
