#include <cmath>
#include <random>

#include "doctest.h"

#include "agro/error.hpp"
#include "agro/grouper.hpp"
#include "support.hpp"

using namespace agro;

namespace {

grouper::GrouperConfig small_cfg(std::size_t hidden = 16) {
  grouper::GrouperConfig c;
  c.hidden = hidden;
  c.seed = 11;
  return c;
}

void zero_out(nn::NetworkParams& net) {
  for (auto b : net.blocks()) std::fill(b.begin(), b.end(), 0.0);
}

}  // namespace

TEST_CASE("zero weights give uniform groups") {
  std::mt19937_64 rng(1);
  const auto f = testing::random_matrix(20, 5, rng);
  auto g = grouper::init_grouper(f, 4, small_cfg());
  zero_out(g.net);
  const auto p = grouper::group_probs(g, f);
  for (double v : p.values()) CHECK(v == doctest::Approx(0.25));
  CHECK(grouper::mean_entropy(p) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("rows are distributions and m = 1 is trivial") {
  std::mt19937_64 rng(2);
  const auto f = testing::random_matrix(50, 6, rng, 3.0);
  for (std::size_t m : {1u, 3u, 8u}) {
    const auto g = grouper::init_grouper(f, m, small_cfg());
    CHECK(g.groups() == m);
    const auto p = grouper::group_probs(g, f);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0;
      for (double v : p.row(i)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      if (m == 1) CHECK(p(i, 0) == 1.0);
    }
  }
  const auto g = grouper::init_grouper(f, 3, small_cfg());
  CHECK_THROWS_AS(grouper::group_probs(g, testing::random_matrix(4, 5, rng)), ShapeError);
}

TEST_CASE("kl vanishes at its own output") {
  std::mt19937_64 rng(3);
  const auto f = testing::random_matrix(30, 4, rng);
  const auto g = grouper::init_grouper(f, 3, small_cfg());
  const auto x = g.standardizer.apply(f);
  const auto target = grouper::group_probs(g, f);
  const auto r = grouper::kl_loss_and_grad(g.net, x, target);
  CHECK(std::abs(r.mean_kl) <= 1e-12);
  for (double v : r.grad.flatten()) CHECK(std::abs(v) <= 1e-12);
  CHECK(grouper::mean_kl(g.net, x, target) == doctest::Approx(r.mean_kl).epsilon(1e-9));
}

TEST_CASE("kl gradient matches finite differences") {
  std::mt19937_64 rng(4);
  const auto f = testing::random_matrix(12, 3, rng);
  auto g = grouper::init_grouper(f, 4, small_cfg(6));
  for (auto& b : g.net.biases)
    for (auto& v : b) v = 0.3;
  const auto x = g.standardizer.apply(f);
  Matrix t(12, 4);
  std::uniform_real_distribution<double> u(0.05, 1);
  for (std::size_t i = 0; i < 12; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += (t(i, j) = u(rng));
    for (std::size_t j = 0; j < 4; ++j) t(i, j) /= s;
  }
  const auto r = grouper::kl_loss_and_grad(g.net, x, t);
  const double eps = 1e-5;
  auto flat = g.net.flatten();
  const auto grad = r.grad.flatten();
  for (std::size_t k = 0; k < flat.size(); ++k) {
    auto hi = g.net, lo = g.net;
    auto fh = flat, fl = flat;
    fh[k] += eps;
    fl[k] -= eps;
    hi.assign(fh);
    lo.assign(fl);
    const double fd = (grouper::mean_kl(hi, x, t) - grouper::mean_kl(lo, x, t)) / (2 * eps);
    CHECK(std::abs(fd - grad[k]) <= 1e-6 * (1 + std::abs(fd)));
  }
}

TEST_CASE("pretraining fits separable one-hot targets") {
  std::mt19937_64 rng(5);
  const auto f = testing::random_matrix(400, 2, rng);
  Matrix t(400, 4);
  std::vector<int> want(400);
  for (std::size_t i = 0; i < 400; ++i) {
    want[i] = (f(i, 0) > 0) * 2 + (f(i, 1) > 0);
    t(i, static_cast<std::size_t>(want[i])) = 1.0;
  }
  const auto g = grouper::init_grouper(f, 4, small_cfg(32));
  const auto res = grouper::pretrain_kl(g, f, t, 60, 32, 0.5, 1);
  const auto p = grouper::group_probs(res.grouper, f);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    const auto row = p.row(i);
    agree += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == want[i];
  }
  CHECK(static_cast<double>(agree) / 400.0 >= 0.9);
  REQUIRE(res.kl_trace.size() == 61);
  CHECK(res.kl_trace.back() < 0.5 * res.kl_trace.front());
  CHECK_THROWS_AS(grouper::pretrain_kl(g, f, Matrix(400, 3), 1, 32, 0.5, 1), ConfigError);
}

TEST_CASE("share helpers") {
  Matrix p(4, 2);
  p(0, 0) = 1;
  p(1, 0) = 0.6;
  p(1, 1) = 0.4;
  p(2, 1) = 1;
  p(3, 0) = 0.5;
  p(3, 1) = 0.5;
  CHECK(grouper::argmax_shares(p) == std::vector<double>{0.75, 0.25});
  const auto soft = grouper::soft_shares(p);
  CHECK(soft[0] == doctest::Approx(0.525));
  CHECK(soft[1] == doctest::Approx(0.475));
}

TEST_CASE("standardizer moments") {
  Matrix f(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    f(i, 0) = static_cast<double>(i);
    f(i, 1) = 7.0;  // constant column is only centered
  }
  const auto s = grouper::Standardizer::fit(f);
  CHECK(s.mean()[0] == doctest::Approx(1.5));
  CHECK(s.scale()[1] == 1.0);
  const auto z = s.apply(f);
  double m = 0, v = 0;
  for (std::size_t i = 0; i < 4; ++i) m += z(i, 0) / 4;
  for (std::size_t i = 0; i < 4; ++i) v += (z(i, 0) - m) * (z(i, 0) - m) / 4;
  CHECK(std::abs(m) <= 1e-12);
  CHECK(v == doctest::Approx(1.0));
  CHECK(z(2, 1) == 0.0);
  CHECK(grouper::Standardizer::identity(2).apply(f) == f);
}

TEST_CASE("grouper files round trip") {
  const auto dir = testing::temp_dir("grouper_io");
  std::mt19937_64 rng(6);
  const auto f = testing::random_matrix(20, 3, rng);
  const auto g = grouper::init_grouper(f, 5, small_cfg());
  grouper::save_grouper(dir / "g", g);
  const auto back = grouper::load_grouper(dir / "g");
  CHECK(back == g);
  CHECK(grouper::group_probs(back, f) == grouper::group_probs(g, f));
  CHECK_THROWS_AS(grouper::load_grouper(dir / "missing"), MissingInputError);
  std::filesystem::remove_all(dir);
}
