#include <cmath>
#include <random>

#include "doctest.h"

#include "agro/error.hpp"
#include "agro/eval.hpp"
#include "support.hpp"

using namespace agro;

namespace {

// Linear net whose logits are input columns [2c, 2c + 1].
nn::NetworkParams reader(std::size_t c) {
  auto p = nn::init_network(std::vector<std::size_t>{4, 2}, 0);
  p.assign(std::vector<double>(p.parameter_count(), 0.0));
  p.weights[0](0, 2 * c) = 1.0;
  p.weights[0](1, 2 * c + 1) = 1.0;
  return p;
}

}  // namespace

TEST_CASE("perfect predictions") {
  const std::vector<int> y{0, 1, 1, 0, 1}, g{0, 1, 2, 0, 3};
  const auto m = eval::evaluate_predictions(y, y, std::span<const int>(g), 4);
  CHECK(m.avg_accuracy == 1.0);
  CHECK(m.worst_group_accuracy == 1.0);
  CHECK(m.per_group.size() == 4);
  const auto blind = eval::evaluate_predictions(y, y, std::nullopt, 4);
  CHECK(blind.per_group.empty());
  CHECK(std::isnan(blind.worst_group_accuracy));
}

TEST_CASE("worst group rule") {
  std::vector<data::GroupAccuracy> t(4);
  const double acc[] = {0.9, 0.5, 0.7};
  for (int g = 0; g < 3; ++g) {
    t[g].group = g;
    t[g].count = 10;
    t[g].correct = static_cast<std::size_t>(acc[g] * 10);
    t[g].accuracy = acc[g];
  }
  t[3].group = 3;
  t[3].accuracy = std::nan("");
  auto [w, id] = eval::worst_group(t);
  CHECK(w == 0.5);
  CHECK(id == 1);
  t[2].accuracy = 0.5;
  CHECK(eval::worst_group(t).second == 1);
  std::vector<data::GroupAccuracy> empty(2);
  for (auto& e : empty) e.accuracy = std::nan("");
  CHECK(eval::worst_group(empty).second == -1);
}

TEST_CASE("predicted-group score on a hand case") {
  // group 0 holds 30% of examples at accuracy 0.2, group 1 the rest at 0.9
  std::vector<int> y(100, 0), pred(100, 1), g(100, 1);
  for (int i = 0; i < 30; ++i) g[i] = 0;
  for (int i = 0; i < 6; ++i) pred[i] = 0;
  for (int i = 30; i < 93; ++i) pred[i] = 0;
  CHECK(eval::predicted_group_score(pred, y, g, 2, 0.3) == doctest::Approx(0.2));
  CHECK(eval::predicted_group_score(pred, y, g, 2, 0.31) == doctest::Approx(0.69));
  CHECK(eval::predicted_group_score(pred, y, g, 2, 1.0) == doctest::Approx(0.69));
  // empty groups are skipped
  CHECK(eval::predicted_group_score(pred, y, g, 5, 0.3) == doctest::Approx(0.2));
  CHECK_THROWS_AS(eval::predicted_group_score(pred, y, g, 1, 0.3), ShapeError);
  CHECK_THROWS_AS(eval::predicted_group_score(pred, y, g, 2, 0.0), ConfigError);
}

TEST_CASE("selection between two checkpoints") {
  // A: 0.2 on the 30% group, 0.9 elsewhere. B: 0.6 and 0.7.
  const std::size_t n = 100;
  Matrix x(n, 4);
  std::vector<int> groups(n, 1);
  for (std::size_t i = 0; i < 30; ++i) groups[i] = 0;
  auto set = [&](std::size_t c, std::size_t i, bool right) { x(i, 2 * c + (right ? 0 : 1)) = 1.0; };
  for (std::size_t i = 0; i < n; ++i) {
    set(0, i, i < 30 ? i < 6 : i < 93);
    set(1, i, i < 30 ? i < 18 : i < 79);
  }
  const data::TrainingView dev(x, std::vector<int>(n, 0), std::vector<int>(n, 0), 2);
  const std::vector<nn::NetworkParams> ckpts{reader(0), reader(1)};

  const auto s = eval::select_predicted_groups(ckpts, dev, groups, 2, 0.3);
  CHECK(s.scores[0] == doctest::Approx(0.2));
  CHECK(s.scores[1] == doctest::Approx(0.6));
  CHECK(s.index == 1);
  CHECK(s.mode == eval::SelectionMode::predicted_groups);

  // alpha = 1 pools everything: plain average accuracy
  const auto full = eval::select_predicted_groups(ckpts, dev, groups, 2, 1.0);
  const auto avg = eval::select_average(ckpts, dev);
  CHECK(full.scores == avg.scores);
  CHECK(full.index == 0);

  const std::vector<nn::NetworkParams> same{reader(1), reader(1), reader(1)};
  CHECK(eval::select_predicted_groups(same, dev, groups, 2, 0.3).index == 0);
  CHECK(eval::select_oracle_worst_group(ckpts, dev, groups, 2).index == 1);
  CHECK_THROWS_AS(eval::select_average(std::vector<nn::NetworkParams>{}, dev), ConfigError);
}

TEST_CASE("score never beats the average") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> bit(0, 1), grp(0, 5);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 20 + rep % 50;
    std::vector<int> y(n), pred(n), g(n);
    std::size_t right = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = bit(rng);
      pred[i] = bit(rng);
      g[i] = grp(rng);
      right += pred[i] == y[i];
    }
    const double avg = static_cast<double>(right) / static_cast<double>(n);
    CHECK(eval::predicted_group_score(pred, y, g, 6, u(rng)) <= avg + 1e-9);
  }
}

TEST_CASE("argmax ties go to the earliest") {
  CHECK(eval::argmax_earliest(std::vector<double>{0.1, 0.5, 0.5}) == 1);
  CHECK(eval::argmax_earliest(std::vector<double>{0.3}) == 0);
}

TEST_CASE("selection mode names") {
  for (auto m : {eval::SelectionMode::average, eval::SelectionMode::predicted_groups,
                 eval::SelectionMode::oracle_worst_group})
    CHECK(eval::parse_selection_mode(eval::to_string(m)) == m);
  CHECK_THROWS_AS(eval::parse_selection_mode("best"), ConfigError);
}

TEST_CASE("report json round trip") {
  eval::MetricsReport r;
  r.method = "agro";
  r.dev = eval::evaluate_predictions(std::vector<int>{0, 1, 1}, std::vector<int>{0, 1, 0},
                                     std::span<const int>(std::vector<int>{0, 1, 2}), 4);
  r.test = r.dev;
  r.ood_accuracy = 0.625;
  r.selection_mode = eval::SelectionMode::predicted_groups;
  r.selected_checkpoint = 7;
  r.selection_score = 0.4;
  r.extra["collapse"] = 1.0;
  const auto dir = testing::temp_dir("eval_io");
  eval::write_report(dir / "m.json", r);
  const auto back = eval::read_report(dir / "m.json");
  CHECK(back.method == "agro");
  CHECK(back.dev.avg_accuracy == r.dev.avg_accuracy);
  CHECK(back.dev.worst_group == 2);
  CHECK(back.selected_checkpoint == 7);
  CHECK(back.extra.at("collapse") == 1.0);
  CHECK(eval::report_json(back) == eval::report_json(r));
  CHECK_THROWS_AS(eval::read_report(dir / "absent.json"), MissingInputError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("seed summaries use the sample deviation") {
  const auto s = eval::summarize_values(std::vector<double>{1, 2, 3});
  CHECK(s.mean == 2.0);
  CHECK(s.stddev == doctest::Approx(1.0));
  CHECK(s.n == 3);
  CHECK(eval::summarize_values(std::vector<double>{4}).stddev == 0.0);
  std::vector<eval::MetricsReport> rs(2);
  rs[0].ood_accuracy = 0.5;
  rs[1].ood_accuracy = 0.7;
  CHECK(eval::summarize_seeds(rs).at("ood_accuracy").mean == doctest::Approx(0.6));
}
