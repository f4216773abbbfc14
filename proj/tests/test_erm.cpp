#include <cmath>
#include <random>
#include <set>

#include "doctest.h"

#include "agro/erm.hpp"
#include "agro/error.hpp"
#include "support.hpp"

using namespace agro;

namespace {

// Two classes at +-margin/2 along the first axis plus small noise.
data::TrainingView separable(std::size_t n, double margin, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  Matrix x(n, 2);
  std::vector<int> y(n), folds(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    x(i, 0) = (y[i] ? 0.5 : -0.5) * margin + noise(rng);
    x(i, 1) = noise(rng);
  }
  return data::TrainingView(std::move(x), std::move(y), std::move(folds), 2);
}

erm::TrainConfig quick(std::size_t epochs) {
  erm::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr = 0.1;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("sampler covers every index once per epoch") {
  erm::MinibatchSampler s(10, 4, 1);
  for (int e = 0; e < 3; ++e) {
    const auto batches = s.next_epoch();
    REQUIRE(batches.size() == 3);
    CHECK(batches.back().size() == 2);
    std::set<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    CHECK(seen.size() == 10);
  }
}

TEST_CASE("erm fits a separable toy") {
  const auto v = separable(200, 2.0, 1);
  const auto r = erm::train_erm(v, erm::NetSpec{}, quick(20));
  CHECK(r.checkpoints.size() == 20);
  CHECK(erm::accuracy(r.params, v) >= 0.99);
}

TEST_CASE("zero epochs returns the init") {
  const auto v = separable(20, 2.0, 1);
  const auto r = erm::train_erm(v, erm::NetSpec{}, quick(0));
  CHECK(r.checkpoints.empty());
  CHECK(r.params == nn::init_network(erm::NetSpec{}.layer_sizes(2, 2), 5));
}

TEST_CASE("erm is deterministic") {
  const auto v = separable(64, 1.0, 2);
  CHECK(erm::train_erm(v, erm::NetSpec{}, quick(3)).params == erm::train_erm(v, erm::NetSpec{}, quick(3)).params);
}

TEST_CASE("pretrained analog is linear and fixed") {
  const erm::PretrainedAnalog enc(5, 3, 17);
  const std::vector<double> x{1, -2, 0.5, 3, 0};
  std::vector<double> x2(x);
  for (auto& v : x2) v *= 2;
  const auto g = enc.encode(x), g2 = enc.encode(x2);
  CHECK(g == enc.encode(x));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g2[i] - 2 * g[i]) <= 1e-12);
}

TEST_CASE("zero-width encoder drops the block") {
  const auto v = separable(10, 2.0, 3);
  const auto model = nn::init_network(erm::NetSpec{}.layer_sizes(2, 2), 1);
  const auto f = erm::assemble_features(erm::PretrainedAnalog(2, 0, 1), model, v.inputs(), v.labels(), 2);
  CHECK(f.layout.g_dim == 0);
  CHECK(f.values.cols() == 32 + 4);
}

TEST_CASE("k-fold features never come from a model that saw the row") {
  const std::size_t n = 6;
  Matrix x(n, 2);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d;
  for (auto& v : x.values()) v = d(rng);
  std::vector<int> y{0, 1, 0, 1, 0, 1}, folds{0, 1, 2, 3, 4, 5};
  const data::TrainingView clean(x, y, folds, 2);
  const erm::PretrainedAnalog enc(2, 2, 9);
  const auto cfg = quick(5);
  const auto base = erm::extract_features_kfold(clean, n, erm::NetSpec{}, cfg, enc);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& seen = base.trained_on[static_cast<std::size_t>(base.source_fold[i])];
    CHECK(std::find(seen.begin(), seen.end(), i) == seen.end());
  }

  // Flip one label: its own row must not move, the others must.
  const std::size_t j = 2;
  auto poisoned_y = y;
  poisoned_y[j] = 1 - poisoned_y[j];
  const auto poisoned = erm::extract_features_kfold(clean.with_labels(poisoned_y), n, erm::NetSpec{}, cfg, enc);
  const auto pb = base.features.pred_probs(), pp = poisoned.features.pred_probs();
  CHECK(pb(j, 0) == pp(j, 0));
  CHECK(pb(j, 1) == pp(j, 1));
  bool others_moved = false;
  for (std::size_t i = 0; i < n; ++i)
    if (i != j && pb(i, 0) != pp(i, 0)) others_moved = true;
  CHECK(others_moved);
}

TEST_CASE("k-fold prediction rows are distributions") {
  const auto v0 = separable(60, 1.0, 6);
  const auto folds = data::kfold_assign(60, 3, 1);
  const data::TrainingView v(v0.inputs(), std::vector<int>(v0.labels().begin(), v0.labels().end()), folds, 2);
  const auto kf = erm::extract_features_kfold(v, 3, erm::NetSpec{}, quick(2), erm::PretrainedAnalog(2, 4, 1));
  const auto p = kf.features.pred_probs();
  for (std::size_t i = 0; i < p.rows(); ++i) CHECK(p(i, 0) + p(i, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(erm::extract_features_kfold(v, 1, erm::NetSpec{}, quick(1), erm::PretrainedAnalog(2, 4, 1)),
                  ConfigError);
}

TEST_CASE("constant inputs give constant representations") {
  const std::size_t n = 12;
  Matrix x(n, 3, 0.7);
  std::vector<int> y(n), folds = data::kfold_assign(n, 3, 2);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 2);
  const data::TrainingView v(x, y, folds, 2);
  const auto kf = erm::extract_features_kfold(v, 3, erm::NetSpec{}, quick(2), erm::PretrainedAnalog(3, 2, 1));
  const auto& f = kf.features;
  // Within a fold the model is shared, so the whole [g | h] block matches.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      if (kf.source_fold[i] != kf.source_fold[k]) continue;
      for (std::size_t c = 0; c < f.layout.label_offset(); ++c) CHECK(std::abs(f.values(i, c) - f.values(k, c)) <= 1e-9);
    }
  }
}

TEST_CASE("feature files round trip") {
  const auto dir = testing::temp_dir("erm_feat");
  const auto v = separable(8, 2.0, 1);
  const auto model = nn::init_network(erm::NetSpec{}.layer_sizes(2, 2), 1);
  const auto f = erm::assemble_features(erm::PretrainedAnalog(2, 3, 1), model, v.inputs(), v.labels(), 2);
  erm::save_features(dir / "f", f);
  const auto back = erm::load_features(dir / "f");
  CHECK(back.layout == f.layout);
  CHECK(back.values == f.values);
  std::filesystem::remove_all(dir);
}
