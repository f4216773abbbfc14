#include <cmath>
#include <set>

#include "doctest.h"

#include "agro/data.hpp"
#include "agro/error.hpp"
#include "support.hpp"

using namespace agro;

namespace {

data::GeneratorConfig small(double rho, std::size_t n = 10000) {
  data::GeneratorConfig c;
  c.n_train = n;
  c.n_dev = c.n_test = c.n_ood = 400;
  c.spurious = {data::SpuriousAttribute{rho, 4, 2.0}};
  c.seed = 3;
  return c;
}

std::vector<std::size_t> counts(const data::Split& s, std::size_t n_groups) {
  std::vector<std::size_t> c(n_groups, 0);
  for (const auto& e : s.examples) c[static_cast<std::size_t>(e.true_group)]++;
  return c;
}

}  // namespace

TEST_CASE("group codes") {
  CHECK(data::group_code(0, std::vector<int>{0}) == 0);
  CHECK(data::group_code(1, std::vector<int>{1}) == 3);
  CHECK(data::group_code(1, std::vector<int>{1, 0}) == 6);
  CHECK(data::group_code(2, std::vector<int>{}) == 2);
}

TEST_CASE("config validation and derived sizes") {
  auto c = small(0.9);
  CHECK(c.group_count() == 4);
  CHECK(c.input_dim() == c.d_core + 4 + c.d_noise);
  c.spurious[0].correlation = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small(0.9);
  c.n_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("generation is a function of the config") {
  const auto a = data::generate(small(0.9, 500));
  const auto b = data::generate(small(0.9, 500));
  REQUIRE(a.train.size() == 500);
  for (std::size_t i = 0; i < 500; ++i) {
    CHECK(a.train.examples[i].x == b.train.examples[i].x);
    CHECK(a.train.examples[i].y == b.train.examples[i].y);
  }
  auto other = small(0.9, 500);
  other.seed = 4;
  CHECK(data::generate(other).train.examples[0].x != a.train.examples[0].x);
}

TEST_CASE("perfect correlation leaves the disagreement cells empty") {
  const auto b = data::generate(small(1.0, 2000));
  const auto c = counts(b.train, 4);
  CHECK(c[0] == 0);
  CHECK(c[2] == 0);
  CHECK(c[1] + c[3] == 2000);
}

TEST_CASE("no correlation fills the cells evenly") {
  const std::size_t n = 10000;
  const auto c = counts(data::generate(small(0.5, n)).train, 4);
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (auto v : c) CHECK(std::abs(static_cast<double>(v) - n / 4.0) <= 4 * sigma);
}

TEST_CASE("benchmark correlation gives about 250 per minority cell") {
  const auto c = counts(data::generate(small(0.95)).train, 4);
  for (std::size_t g : {0u, 2u}) {
    CHECK(c[g] >= 175);
    CHECK(c[g] <= 325);
  }
}

TEST_CASE("ood split reverses the correlation") {
  auto cfg = small(0.95, 200);
  cfg.n_ood = 4000;
  const auto c = counts(data::generate(cfg).ood, 4);
  CHECK(c[0] + c[2] > 3 * (c[1] + c[3]));
}

TEST_CASE("fold assignment") {
  auto sizes = [](const std::vector<int>& f, std::size_t k) {
    std::vector<std::size_t> s(k, 0);
    for (int v : f) s[static_cast<std::size_t>(v)]++;
    return s;
  };
  CHECK(sizes(data::kfold_assign(10, 5, 1), 5) == std::vector<std::size_t>(5, 2));
  auto s = sizes(data::kfold_assign(7, 3, 1), 3);
  std::multiset<std::size_t> ms(s.begin(), s.end());
  CHECK(ms == std::multiset<std::size_t>{2, 2, 3});
  CHECK(data::kfold_assign(50, 5, 9) == data::kfold_assign(50, 5, 9));
  CHECK_THROWS_AS(data::kfold_assign(3, 5, 0), ConfigError);
}

TEST_CASE("group accuracy table") {
  // Group 0: 2 of 3 right; group 1: 1 of 3 right.
  const std::vector<int> pred{0, 0, 1, 1, 0, 0}, y{0, 0, 0, 1, 1, 1}, g{0, 0, 0, 1, 1, 1};
  const auto t = data::group_accuracy_table(pred, y, g, 3);
  CHECK(t[0].accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(t[1].accuracy == doctest::Approx(1.0 / 3.0));
  CHECK(t[2].count == 0);
  CHECK(std::isnan(t[2].accuracy));

  const auto b = data::generate(small(0.9, 300));
  std::vector<int> labels;
  for (const auto& e : b.train.examples) labels.push_back(e.y);
  for (const auto& row : data::group_accuracy_table(labels, b.train, 4)) {
    if (row.count) CHECK(row.accuracy == 1.0);
  }
}

TEST_CASE("majority-attribute predictions on a fully correlated set") {
  const auto b = data::generate(small(1.0, 400));
  std::vector<int> pred;
  for (const auto& e : b.train.examples) pred.push_back(e.y);  // a == y everywhere
  const auto t = data::group_accuracy_table(pred, b.train, 4);
  CHECK(t[1].accuracy == 1.0);
  CHECK(t[3].accuracy == 1.0);
  CHECK(t[0].count == 0);
  CHECK(t[2].count == 0);
}

TEST_CASE("split csv and config round trip") {
  const auto dir = testing::temp_dir("data_io");
  const auto b = data::generate(small(0.9, 50));
  data::write_split_csv(dir / "train.csv", b.train);
  const auto back = data::read_split_csv(dir / "train.csv");
  REQUIRE(back.size() == b.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back.examples[i].x == b.train.examples[i].x);
    CHECK(back.examples[i].y == b.train.examples[i].y);
    CHECK(back.examples[i].true_group == b.train.examples[i].true_group);
    CHECK(back.examples[i].fold == b.train.examples[i].fold);
  }
  data::write_config(dir / "gen.cfg", b.config);
  const auto c = data::read_config(dir / "gen.cfg");
  CHECK(c.n_train == b.config.n_train);
  CHECK(c.spurious[0].correlation == b.config.spurious[0].correlation);
  CHECK(c.seed == b.config.seed);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training view carries no groups and subsets keep rows") {
  const auto b = data::generate(small(0.9, 40));
  const data::TrainingView v(b.train, 2);
  CHECK(v.size() == 40);
  const std::vector<std::size_t> idx{3, 1};
  const auto s = v.subset(idx);
  CHECK(s.size() == 2);
  CHECK(s.labels()[0] == v.labels()[3]);
  CHECK(s.inputs()(1, 0) == v.inputs()(1, 0));
}
