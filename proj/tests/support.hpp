#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>
#include <fstream>
#include <iterator>
#include <unistd.h>

#include "agro/matrix.hpp"
#include "agro/nn.hpp"

namespace agro::testing {

// Adjusted Rand index between two labelings.
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cells[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double index = 0, sr = 0, sc = 0;
  for (const auto& [k, v] : cells) index += c2(v);
  for (const auto& [k, v] : rows) sr += c2(v);
  for (const auto& [k, v] : cols) sc += c2(v);
  const double total = c2(static_cast<double>(a.size()));
  const double expected = sr * sc / total;
  const double max_index = (sr + sc) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

struct OracleWeights {
  std::vector<std::size_t> worst_set;  // sorted ids
  std::vector<double> q;
};

// Exhaustive version of the worst-set rule: among all subsets S such that
// every member outranks every non-member (higher loss, or equal loss and a
// smaller id), take the smallest whose mass reaches alpha * total.
inline OracleWeights oracle_group_weights(const std::vector<double>& L, const std::vector<double>& p, double alpha,
                                          bool primary, double w_min, double w_max) {
  const std::size_t m = L.size();
  auto outranks = [&](std::size_t g, std::size_t h) { return L[g] > L[h] || (L[g] == L[h] && g < h); };
  double total = 0;
  for (double v : p) total += v;
  std::vector<std::size_t> best;
  bool found = false;
  for (std::uint32_t mask = 1; mask < (1u << m); ++mask) {
    bool prefix = true;
    double mass = 0;
    std::vector<std::size_t> members;
    for (std::size_t g = 0; g < m; ++g) {
      if (!(mask >> g & 1u)) continue;
      members.push_back(g);
      mass += p[g];
      for (std::size_t h = 0; h < m; ++h) {
        if (!(mask >> h & 1u) && !outranks(g, h)) prefix = false;
      }
    }
    if (!prefix) continue;
    const bool covers = total == 0 ? members.size() == 1 : mass >= alpha * total;
    if (covers && (!found || members.size() < best.size())) {
      best = members;
      found = true;
    }
  }
  OracleWeights out;
  out.worst_set = best;
  out.q.assign(m, primary ? w_min : w_max);
  for (auto g : best) out.q[g] = primary ? 1.0 / alpha : alpha;
  return out;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("agro_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace agro::testing
