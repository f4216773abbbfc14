#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"

#include "agro/error.hpp"
#include "agro/slice_model.hpp"
#include "support.hpp"

using namespace agro;

namespace {

struct Blobs {
  Matrix z;
  std::vector<int> y, yhat, truth;
  Matrix yhat_probs;
};

// One isotropic blob per (y, yhat) pair given, centers far apart.
Blobs make_blobs(const std::vector<std::pair<int, int>>& pairs, std::size_t per, double sep, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Blobs b;
  const std::size_t n = pairs.size() * per;
  b.z = Matrix(n, 2);
  b.yhat_probs = Matrix(n, 2);
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    const double cx = sep * static_cast<double>(c % 2), cy = sep * static_cast<double>(c / 2);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = c * per + i;
      b.z(r, 0) = cx + d(rng);
      b.z(r, 1) = cy + d(rng);
      b.y.push_back(pairs[c].first);
      b.yhat.push_back(pairs[c].second);
      b.yhat_probs(r, static_cast<std::size_t>(pairs[c].second)) = 1.0;
      b.truth.push_back(static_cast<int>(c));
    }
  }
  return b;
}

slice::SliceConfig cfg(std::size_t k, double gamma, std::uint64_t seed) {
  slice::SliceConfig c;
  c.k = k;
  c.gamma = gamma;
  c.pca = slice::PcaMode::off;
  c.seed = seed;
  c.tol = 0.0;
  c.max_iters = 30;
  return c;
}

// Diagonal GMM written out from scratch: the same initial means, shared
// floored variances and uniform prior, no label terms.
std::vector<double> gmm_trace(const Matrix& z, std::vector<std::size_t> init, std::size_t iters, double floor) {
  const std::size_t n = z.rows(), d = z.cols(), k = init.size();
  std::vector<double> mean(d, 0), gv(d, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) mean[c] += z(i, c) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) gv[c] += (z(i, c) - mean[c]) * (z(i, c) - mean[c]);
  for (auto& v : gv) v = std::max(v / static_cast<double>(n), floor);

  std::vector<std::vector<double>> mu(k), var(k, gv);
  std::vector<double> pi(k, 1.0 / static_cast<double>(k));
  for (std::size_t j = 0; j < k; ++j) mu[j].assign(z.row(init[j]).begin(), z.row(init[j]).end());

  std::vector<double> trace;
  Matrix r(n, k);
  for (std::size_t it = 0; it <= iters; ++it) {
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> t(k);
      for (std::size_t j = 0; j < k; ++j) {
        double s = std::log(pi[j]);
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = z(i, c) - mu[j][c];
          s += -0.5 * std::log(2 * M_PI * var[j][c]) - 0.5 * diff * diff / var[j][c];
        }
        t[j] = s;
      }
      const double mx = *std::max_element(t.begin(), t.end());
      double se = 0;
      for (double v : t) se += std::exp(v - mx);
      const double lse = mx + std::log(se);
      ll += lse;
      for (std::size_t j = 0; j < k; ++j) r(i, j) = std::exp(t[j] - lse);
    }
    trace.push_back(ll);
    if (it == iters) break;
    for (std::size_t j = 0; j < k; ++j) {
      double m = 0;
      std::vector<double> s(d, 0), ss(d, 0);
      for (std::size_t i = 0; i < n; ++i) {
        m += r(i, j);
        for (std::size_t c = 0; c < d; ++c) s[c] += r(i, j) * z(i, c);
      }
      for (std::size_t c = 0; c < d; ++c) mu[j][c] = s[c] / m;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) ss[c] += r(i, j) * (z(i, c) - mu[j][c]) * (z(i, c) - mu[j][c]);
      for (std::size_t c = 0; c < d; ++c) var[j][c] = std::max(ss[c] / m, floor);
      pi[j] = m / static_cast<double>(n);
    }
  }
  return trace;
}

}  // namespace

TEST_CASE("single slice takes everything") {
  const auto b = make_blobs({{0, 0}, {1, 1}, {1, 0}}, 20, 6.0, 1);
  const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, cfg(1, 1.0, 0));
  for (double v : fit.responsibilities.values()) CHECK(v == 1.0);
  const double ones = static_cast<double>(std::count(b.y.begin(), b.y.end(), 1));
  CHECK(fit.params.p_label(0, 1) == doctest::Approx(ones / 60.0));
  double mx = 0;
  for (std::size_t i = 0; i < 60; ++i) mx += b.z(i, 0) / 60.0;
  CHECK(fit.params.mu(0, 0) == doctest::Approx(mx));

  const auto post = slice::predict_slice_probs(fit.params, std::vector<double>{0.3, 0.1}, 0, 1);
  CHECK(post.probs == std::vector<double>{1.0});
}

TEST_CASE("two separated blobs are recovered") {
  const auto b = make_blobs({{0, 0}, {1, 1}}, 150, 10.0, 2);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, cfg(2, 1.0, s));
    const auto hard = slice::argmax_rows(fit.responsibilities);
    CHECK(testing::adjusted_rand_index(hard, b.truth) >= 0.99);
  }
}

TEST_CASE("gamma zero is a plain gaussian mixture") {
  // Blobs share labels so nothing but geometry can separate them.
  auto b = make_blobs({{0, 0}, {0, 0}, {0, 0}}, 60, 3.0, 3);
  for (std::size_t i = 0; i < b.y.size(); ++i) b.y[i] = static_cast<int>(i % 2);
  const auto c = cfg(3, 0.0, 7);
  const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, c);
  const auto oracle = gmm_trace(b.z, fit.init_indices, c.max_iters, c.var_floor);
  REQUIRE(fit.loglik_trace.size() == oracle.size());
  for (std::size_t t = 0; t < oracle.size(); ++t) CHECK(std::abs(fit.loglik_trace[t] - oracle[t]) <= 1e-6);
}

TEST_CASE("log-likelihood never decreases") {
  std::mt19937_64 rng(4);
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto z = testing::random_matrix(200, 3, rng);
    std::vector<int> y(200);
    Matrix p(200, 2);
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < 200; ++i) {
      y[i] = u(rng) < 0.5;
      p(i, 0) = u(rng);
      p(i, 1) = 1 - p(i, 0);
    }
    for (auto init : {slice::SliceInit::points, slice::SliceInit::confusion}) {
      auto c = cfg(4, 1.0, s);
      c.init = init;
      const auto fit = slice::fit_em(z, y, p, c);
      for (std::size_t t = 1; t < fit.loglik_trace.size(); ++t)
        CHECK(fit.loglik_trace[t] >= fit.loglik_trace[t - 1] - 1e-8);
    }
  }
}

TEST_CASE("slices are homogeneous in error type") {
  const auto b = make_blobs({{0, 0}, {0, 1}, {1, 1}, {1, 0}}, 100, 8.0, 5);
  const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, cfg(4, 1.0, 1));
  for (const auto& row : slice::summarize(fit.responsibilities, b.y, b.yhat, 2)) {
    if (row.size) CHECK(row.top_pair_share >= 0.9);
  }
}

TEST_CASE("posterior symmetry and concentration") {
  slice::SliceModelParams p;
  p.k = 2;
  p.dim = p.input_dim = 1;
  p.n_classes = 2;
  p.p_s = {0.5, 0.5};
  p.mu = Matrix(2, 1);
  p.mu(0, 0) = -1;
  p.mu(1, 0) = 1;
  p.var = Matrix(2, 1, 1.0);
  p.p_label = Matrix(2, 2, 0.5);
  p.p_pred = Matrix(2, 2, 0.5);
  auto post = slice::predict_slice_probs(p, std::vector<double>{0.0}, 0, 0);
  CHECK(post.probs[0] == doctest::Approx(0.5));
  CHECK(post.probs[1] == doctest::Approx(0.5));

  p.var = Matrix(2, 1, 0.01);
  p.p_label(1, 0) = 0.9;
  p.p_label(1, 1) = 0.1;
  p.p_label(0, 0) = 0.1;
  p.p_label(0, 1) = 0.9;
  post = slice::predict_slice_probs(p, std::vector<double>{1.0}, 0, 0);
  CHECK(post.probs[1] > 0.999);
  CHECK_FALSE(post.underflow);
  CHECK_THROWS_AS(slice::predict_slice_probs(p, std::vector<double>{1.0, 2.0}, 0, 0), ShapeError);
}

TEST_CASE("confusion init starts slices on (y, yhat) cells") {
  const auto b = make_blobs({{0, 0}, {0, 1}, {1, 0}, {1, 1}}, 50, 0.5, 6);
  auto c = cfg(4, 1.0, 2);
  c.init = slice::SliceInit::confusion;
  c.max_iters = 0;
  const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, c);
  const auto hard = slice::argmax_rows(fit.responsibilities);
  CHECK(testing::adjusted_rand_index(hard, b.truth) >= 0.99);
  c.confusion_noise = 0.0;
  CHECK_THROWS_AS(slice::fit_em(b.z, b.y, b.yhat_probs, c), ConfigError);
}

TEST_CASE("pca keeps the leading axis") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d;
  Matrix z(300, 3);
  for (std::size_t i = 0; i < 300; ++i) {
    z(i, 0) = 10 * d(rng);
    z(i, 1) = 0.1 * d(rng);
    z(i, 2) = 0.1 * d(rng);
  }
  const auto pr = slice::fit_pca(z, 1);
  CHECK(pr.output_dim(3) == 1);
  CHECK(std::abs(pr.components(0, 0)) > 0.99);
}

TEST_CASE("slice model files round trip") {
  const auto dir = testing::temp_dir("slice_io");
  const auto b = make_blobs({{0, 0}, {1, 1}}, 30, 8.0, 8);
  const auto fit = slice::fit_em(b.z, b.y, b.yhat_probs, cfg(2, 1.0, 0));
  slice::save_slice_model(dir / "s", fit);
  const auto back = slice::load_slice_model(dir / "s");
  CHECK(back.k == fit.params.k);
  CHECK(back.mu == fit.params.mu);
  CHECK(back.var == fit.params.var);
  CHECK(back.p_label == fit.params.p_label);
  const auto a = slice::predict_slice_probs(fit.params, b.z, b.y, b.yhat_probs);
  CHECK(slice::predict_slice_probs(back, b.z, b.y, b.yhat_probs) == a);
  std::filesystem::remove_all(dir);
}
