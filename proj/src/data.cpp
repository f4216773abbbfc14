#include "agro/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "agro/error.hpp"
#include "agro/io.hpp"

namespace agro::data {

namespace {

enum class SplitKind : std::uint64_t { train = 1, dev = 2, test = 3, ood = 4 };

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x5eedu};
  return std::mt19937_64(seq);
}

// Per-class sign patterns for one feature block. Two classes are antipodal;
// more classes get seeded random sign vectors.
std::vector<std::vector<double>> class_patterns(std::size_t n_classes, std::size_t dim,
                                                std::mt19937_64& rng) {
  std::vector<std::vector<double>> patterns(n_classes, std::vector<double>(dim, 0.0));
  if (n_classes == 2) {
    for (std::size_t k = 0; k < dim; ++k) {
      patterns[0][k] = -1.0;
      patterns[1][k] = 1.0;
    }
    return patterns;
  }
  std::bernoulli_distribution coin(0.5);
  for (auto& p : patterns) {
    for (double& v : p) v = coin(rng) ? 1.0 : -1.0;
  }
  return patterns;
}

struct Structure {
  std::vector<std::vector<double>> core;
  std::vector<std::vector<std::vector<double>>> spurious;
};

Structure make_structure(const GeneratorConfig& cfg) {
  auto rng = make_rng(cfg.seed, 0);
  Structure s;
  s.core = class_patterns(cfg.n_classes, cfg.d_core, rng);
  for (const auto& attr : cfg.spurious) s.spurious.push_back(class_patterns(cfg.n_classes, attr.dim, rng));
  return s;
}

Split generate_split(const GeneratorConfig& cfg, const Structure& structure, std::size_t n, bool reversed,
                     SplitKind kind) {
  auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(kind));
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(cfg.n_classes) - 1);
  std::uniform_int_distribution<int> other_dist(0, static_cast<int>(cfg.n_classes) - 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Split split;
  split.examples.reserve(n);
  const std::size_t k = cfg.spurious.size();
  std::vector<int> agree(k);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.x.reserve(cfg.input_dim());
    const int clean_y = class_dist(rng);
    const auto& core = structure.core[static_cast<std::size_t>(clean_y)];
    for (std::size_t d = 0; d < cfg.d_core; ++d) {
      ex.x.push_back(cfg.core_signal_strength * core[d] + normal(rng));
    }
    std::vector<int> attr_class(k);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& attr = cfg.spurious[j];
      const double rho = reversed ? 1.0 - attr.correlation : attr.correlation;
      int c = clean_y;
      if (unit(rng) >= rho) {
        c = other_dist(rng);
        if (c >= clean_y) ++c;
      }
      attr_class[j] = c;
      const auto& pattern = structure.spurious[j][static_cast<std::size_t>(c)];
      for (std::size_t d = 0; d < attr.dim; ++d) ex.x.push_back(attr.strength * pattern[d] + normal(rng));
    }
    for (std::size_t d = 0; d < cfg.d_noise; ++d) ex.x.push_back(normal(rng));

    int y = clean_y;
    if (cfg.label_noise > 0.0 && unit(rng) < cfg.label_noise) {
      y = other_dist(rng);
      if (y >= clean_y) ++y;
    }
    ex.y = y;
    for (std::size_t j = 0; j < k; ++j) agree[j] = attr_class[j] == y ? 1 : 0;
    ex.true_group = group_code(y, agree);
    split.examples.push_back(std::move(ex));
  }
  if (n >= 2) {
    auto folds = kfold_assign(n, std::min(cfg.folds, n), cfg.seed ^ (static_cast<std::uint64_t>(kind) << 40));
    for (std::size_t i = 0; i < n; ++i) split.examples[i].fold = folds[i];
  }
  return split;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& where) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw ConfigError(where + ": cannot parse '" + s + "'");
  return v;
}

}  // namespace

std::size_t GeneratorConfig::input_dim() const {
  std::size_t d = d_core + d_noise;
  for (const auto& a : spurious) d += a.dim;
  return d;
}

std::size_t GeneratorConfig::group_count() const { return n_classes << spurious.size(); }

void GeneratorConfig::validate() const {
  if (n_classes < 2) throw ConfigError("data.n_classes must be at least 2");
  if (d_core < 1) throw ConfigError("data.d_core must be at least 1");
  if (folds < 2) throw ConfigError("data.folds must be at least 2");
  if (label_noise < 0.0 || label_noise > 1.0) throw ConfigError("data.label_noise must lie in [0,1]");
  if (spurious.size() > 16) throw ConfigError("at most 16 spurious attributes are supported");
  for (const auto& a : spurious) {
    if (!(a.correlation >= 0.0 && a.correlation <= 1.0)) {
      throw ConfigError("spurious correlation must lie in [0,1]");
    }
  }
}

int group_code(int y, std::span<const int> agreements) {
  int g = y;
  for (int a : agreements) g = g * 2 + a;
  return g;
}

DatasetBundle generate(const GeneratorConfig& config) {
  config.validate();
  const auto structure = make_structure(config);
  DatasetBundle b;
  b.config = config;
  b.train = generate_split(config, structure, config.n_train, false, SplitKind::train);
  b.dev = generate_split(config, structure, config.n_dev, false, SplitKind::dev);
  b.test = generate_split(config, structure, config.n_test, false, SplitKind::test);
  b.ood = generate_split(config, structure, config.n_ood, true, SplitKind::ood);
  return b;
}

std::vector<int> kfold_assign(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("K-fold needs K >= 2");
  if (k > n) throw ConfigError("K-fold needs K <= n (K=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> folds(n);
  for (std::size_t pos = 0; pos < n; ++pos) folds[perm[pos]] = static_cast<int>(pos % k);
  return folds;
}

std::vector<GroupAccuracy> group_accuracy_table(std::span<const int> predictions, std::span<const int> labels,
                                                std::span<const int> groups, std::size_t n_groups) {
  if (predictions.size() != labels.size() || labels.size() != groups.size()) {
    throw ShapeError("group_accuracy_table: lengths disagree");
  }
  std::vector<GroupAccuracy> table(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) table[g].group = static_cast<int>(g);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto g = static_cast<std::size_t>(groups[i]);
    if (g >= n_groups) throw ShapeError("group id out of range");
    ++table[g].count;
    if (predictions[i] == labels[i]) ++table[g].correct;
  }
  for (auto& row : table) {
    row.accuracy = row.count == 0 ? std::nan("")
                                  : static_cast<double>(row.correct) / static_cast<double>(row.count);
  }
  return table;
}

std::vector<GroupAccuracy> group_accuracy_table(std::span<const int> predictions, const Split& split,
                                                std::size_t n_groups) {
  std::vector<int> labels, groups;
  for (const auto& ex : split.examples) {
    labels.push_back(ex.y);
    groups.push_back(ex.true_group);
  }
  return group_accuracy_table(predictions, labels, groups, n_groups);
}

TrainingView::TrainingView(const Split& split, std::size_t n_classes) : n_classes_(n_classes) {
  const std::size_t d = split.examples.empty() ? 0 : split.examples.front().x.size();
  inputs_ = Matrix(split.size(), d);
  labels_.reserve(split.size());
  folds_.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& ex = split.examples[i];
    if (ex.x.size() != d) throw ShapeError("examples disagree on input dim");
    std::copy(ex.x.begin(), ex.x.end(), inputs_.row(i).begin());
    labels_.push_back(ex.y);
    folds_.push_back(ex.fold);
  }
}

TrainingView::TrainingView(Matrix inputs, std::vector<int> labels, std::vector<int> folds, std::size_t n_classes)
    : inputs_(std::move(inputs)), labels_(std::move(labels)), folds_(std::move(folds)), n_classes_(n_classes) {
  if (inputs_.rows() != labels_.size() || folds_.size() != labels_.size()) {
    throw ShapeError("TrainingView: inputs, labels and folds disagree on size");
  }
}

TrainingView TrainingView::subset(std::span<const std::size_t> indices) const {
  std::vector<int> labels, folds;
  for (auto i : indices) {
    labels.push_back(labels_[i]);
    folds.push_back(folds_[i]);
  }
  return TrainingView(gather_rows(inputs_, indices), std::move(labels), std::move(folds), n_classes_);
}

TrainingView TrainingView::with_labels(std::vector<int> labels) const {
  return TrainingView(inputs_, std::move(labels), folds_, n_classes_);
}

std::vector<int> true_groups(const Split& split) {
  std::vector<int> g;
  g.reserve(split.size());
  for (const auto& ex : split.examples) g.push_back(ex.true_group);
  return g;
}

void write_split_csv(const std::filesystem::path& path, const Split& split) {
  const std::size_t d = split.examples.empty() ? 0 : split.examples.front().x.size();
  std::string out;
  for (std::size_t k = 0; k < d; ++k) out += "x_" + std::to_string(k) + ",";
  out += "y,true_group,fold\n";
  for (const auto& ex : split.examples) {
    for (double v : ex.x) {
      out += io::format_double(v);
      out += ',';
    }
    out += std::to_string(ex.y) + "," + std::to_string(ex.true_group) + "," + std::to_string(ex.fold) + "\n";
  }
  io::write_text(path, out);
}

Split read_split_csv(const std::filesystem::path& path) {
  io::require_exists(path);
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[header.size() - 3] != "y" || header[header.size() - 2] != "true_group" ||
      header.back() != "fold") {
    throw ConfigError(path.string() + ": header must end with y,true_group,fold");
  }
  const std::size_t d = header.size() - 3;
  Split split;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != header.size()) throw ConfigError(where + ": wrong number of columns");
    Example ex;
    for (std::size_t k = 0; k < d; ++k) ex.x.push_back(parse_number<double>(cells[k], where));
    ex.y = parse_number<int>(cells[d], where);
    ex.true_group = parse_number<int>(cells[d + 1], where);
    ex.fold = parse_number<int>(cells[d + 2], where);
    split.examples.push_back(std::move(ex));
  }
  return split;
}

void write_config(const std::filesystem::path& path, const GeneratorConfig& c) {
  io::Manifest m;
  m.set("n_train", static_cast<std::uint64_t>(c.n_train));
  m.set("n_dev", static_cast<std::uint64_t>(c.n_dev));
  m.set("n_test", static_cast<std::uint64_t>(c.n_test));
  m.set("n_ood", static_cast<std::uint64_t>(c.n_ood));
  m.set("n_classes", static_cast<std::uint64_t>(c.n_classes));
  m.set("d_core", static_cast<std::uint64_t>(c.d_core));
  m.set("d_noise", static_cast<std::uint64_t>(c.d_noise));
  m.set("core_signal_strength", c.core_signal_strength);
  m.set("label_noise", c.label_noise);
  m.set("folds", static_cast<std::uint64_t>(c.folds));
  m.set("seed", c.seed);
  m.set("spurious_count", static_cast<std::uint64_t>(c.spurious.size()));
  for (std::size_t j = 0; j < c.spurious.size(); ++j) {
    const std::string p = "spurious_" + std::to_string(j) + "_";
    m.set(p + "correlation", c.spurious[j].correlation);
    m.set(p + "dim", static_cast<std::uint64_t>(c.spurious[j].dim));
    m.set(p + "strength", c.spurious[j].strength);
  }
  m.write(path);
}

GeneratorConfig read_config(const std::filesystem::path& path) {
  auto m = io::Manifest::read(path);
  GeneratorConfig c;
  c.n_train = m.get_uint("n_train");
  c.n_dev = m.get_uint("n_dev");
  c.n_test = m.get_uint("n_test");
  c.n_ood = m.get_uint("n_ood");
  c.n_classes = m.get_uint("n_classes");
  c.d_core = m.get_uint("d_core");
  c.d_noise = m.get_uint("d_noise");
  c.core_signal_strength = m.get_double("core_signal_strength");
  c.label_noise = m.get_double("label_noise");
  c.folds = m.get_uint("folds");
  c.seed = m.get_uint("seed");
  c.spurious.clear();
  const auto count = m.get_uint("spurious_count");
  for (std::size_t j = 0; j < count; ++j) {
    const std::string p = "spurious_" + std::to_string(j) + "_";
    c.spurious.push_back({m.get_double(p + "correlation"), m.get_uint(p + "dim"), m.get_double(p + "strength")});
  }
  return c;
}

}  // namespace agro::data
