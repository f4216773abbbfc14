#include "agro/robust.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "agro/error.hpp"
#include "agro/io.hpp"

namespace agro::robust {

namespace {

constexpr std::uint64_t kRoundSeedStride = 0x100000001b3ULL;

std::uint64_t round_seed(std::uint64_t seed, std::size_t round) {
  return seed ^ (static_cast<std::uint64_t>(round) * kRoundSeedStride);
}

std::string snapshot(std::span<const double> v) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  os << ']';
  return os.str();
}

nn::Batch make_batch(const data::TrainingView& view, std::span<const std::size_t> idx) {
  nn::Batch b;
  b.inputs = gather_rows(view.inputs(), idx);
  b.labels.reserve(idx.size());
  for (auto i : idx) b.labels.push_back(view.labels()[i]);
  b.example_weights.assign(idx.size(), 0.0);
  return b;
}

void check_finite_losses(std::span<const double> losses, const GroupStats& stats, std::span<const double> q) {
  for (double l : losses) {
    if (!std::isfinite(l)) {
      throw NumericError("non-finite loss in robust training; q=" + snapshot(q) +
                         " L_hat=" + snapshot(stats.loss_hat));
    }
  }
}

}  // namespace

double ema(double v_new, double v_old, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("EMA coefficient must lie in (0, 1)");
  return gamma * v_new + (1.0 - gamma) * v_old;
}

WeightVector compute_group_weights(std::span<const double> losses, std::span<const double> proportions,
                                   double alpha, WeightMode mode, double w_min, double w_max) {
  if (losses.size() != proportions.size()) throw ShapeError("group weights: loss/proportion length mismatch");
  if (losses.empty()) throw ConfigError("group weights: no groups");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  const std::size_t m = losses.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
  double total = 0.0;
  for (double p : proportions) {
    if (p < 0.0) throw ConfigError("group proportions must be nonnegative");
    total += p;
  }
  WeightVector out;
  if (total == 0.0) {
    out.worst_set.push_back(order.front());
  } else {
    const double target = alpha * total;
    double cum = 0.0;
    for (auto g : order) {
      out.worst_set.push_back(g);
      cum += proportions[g];
      if (cum >= target) break;
    }
  }
  const double in_set = mode == WeightMode::primary ? 1.0 / alpha : alpha;
  const double outside = mode == WeightMode::primary ? w_min : w_max;
  out.q.assign(m, outside);
  for (auto g : out.worst_set) out.q[g] = in_set;
  return out;
}

void AgroConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("agro.alpha must lie in (0, 1]");
  if (m < 1) throw ConfigError("agro.m must be at least 1");
  if (rounds < 1) throw ConfigError("agro.rounds must be at least 1");
  if (!(gamma_ema > 0.0 && gamma_ema < 1.0)) throw ConfigError("agro.gamma_ema must lie in (0, 1)");
  if (!(lr_theta > 0.0)) throw ConfigError("agro.lr_theta must be positive");
  if (!(lr_phi > 0.0)) throw ConfigError("agro.lr_phi must be positive");
  if (weight_decay < 0.0 || weight_decay_phi < 0.0) throw ConfigError("agro weight decay must be nonnegative");
  if (w_min < 0.0 || w_max < 0.0) throw ConfigError("agro group weights must be nonnegative");
}

void GroupStats::update(std::span<const double> batch_loss, std::span<const double> batch_prop,
                        std::span<const char> present) {
  for (std::size_t g = 0; g < loss_hat.size(); ++g) {
    if (present[g]) loss_hat[g] = ema(batch_loss[g], loss_hat[g], gamma_ema);
    prop_hat[g] = ema(batch_prop[g], prop_hat[g], gamma_ema);
  }
}

BatchGroupStats hard_batch_stats(std::span<const double> losses, std::span<const int> groups, std::size_t m,
                                 GroupLoss mode) {
  if (losses.size() != groups.size()) throw ShapeError("hard_batch_stats: length mismatch");
  BatchGroupStats s;
  s.loss.assign(m, 0.0);
  s.mass.assign(m, 0.0);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto g = static_cast<std::size_t>(groups[i]);
    if (g >= m) throw ShapeError("group id out of range");
    s.loss[g] += losses[i];
    s.mass[g] += 1.0;
  }
  s.prop.resize(m);
  s.present.resize(m);
  const double n = static_cast<double>(losses.size());
  for (std::size_t g = 0; g < m; ++g) {
    s.present[g] = s.mass[g] > 0.0;
    s.prop[g] = s.mass[g] / n;
    if (mode == GroupLoss::mean && s.present[g]) s.loss[g] /= s.mass[g];
  }
  return s;
}

BatchGroupStats soft_batch_stats(std::span<const double> losses, const Matrix& probs, GroupLoss mode) {
  if (losses.size() != probs.rows()) throw ShapeError("soft_batch_stats: length mismatch");
  const std::size_t m = probs.cols();
  BatchGroupStats s;
  s.loss.assign(m, 0.0);
  s.mass.assign(m, 0.0);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    auto p = probs.row(i);
    for (std::size_t g = 0; g < m; ++g) {
      s.loss[g] += p[g] * losses[i];
      s.mass[g] += p[g];
    }
  }
  const double n = static_cast<double>(losses.size());
  const double total_mass = std::accumulate(s.mass.begin(), s.mass.end(), 0.0);
  if (std::abs(total_mass - n) > 1e-9 * std::max(1.0, n)) {
    throw Error("soft group mass " + std::to_string(total_mass) + " differs from batch size " + std::to_string(n));
  }
  s.prop.resize(m);
  s.present.resize(m);
  for (std::size_t g = 0; g < m; ++g) {
    s.present[g] = s.mass[g] > 0.0;
    s.prop[g] = s.mass[g] / n;
    if (mode == GroupLoss::mean && s.present[g]) s.loss[g] /= s.mass[g];
  }
  return s;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
  const std::size_t m = rows.empty() ? 0 : rows.front().q.size();
  std::string out = "step,round,mode";
  for (const char* name : {"L_hat_", "p_hat_", "q_"}) {
    for (std::size_t g = 0; g < m; ++g) out += "," + std::string(name) + std::to_string(g);
  }
  out += ",batch_loss\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.round) + "," +
           (r.mode == WeightMode::primary ? "primary" : "adversary");
    for (const auto* v : {&r.loss_hat, &r.prop_hat, &r.q}) {
      for (double x : *v) out += "," + io::format_double(x);
    }
    out += "," + io::format_double(r.batch_loss) + "\n";
  }
  io::write_text(path, out);
}

RobustTrainResult gdro_train(const data::TrainingView& view, std::span<const int> groups, const erm::NetSpec& net,
                             const AgroConfig& config, std::size_t epochs, const nn::NetworkParams* init) {
  config.validate();
  if (groups.size() != view.size()) throw ShapeError("gdro_train: one group id per example required");
  if (view.size() == 0) throw ConfigError("gdro_train: empty training view");
  RobustTrainResult r;
  r.params = init ? *init : nn::init_network(net.layer_sizes(view.input_dim(), view.n_classes()), config.seed);
  r.stats = GroupStats(config.m, config.gamma_ema);
  erm::MinibatchSampler sampler(view.size(), config.effective_batch_size(), round_seed(config.seed, 0));
  std::size_t step = 0;
  std::vector<int> batch_groups;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& idx : sampler.next_epoch()) {
      auto batch = make_batch(view, idx);
      batch_groups.clear();
      for (auto i : idx) batch_groups.push_back(groups[i]);
      const auto logits = nn::forward(r.params, batch.inputs).logits;
      const auto losses = nn::weighted_ce_loss(logits, batch.labels, batch.example_weights).per_example;
      check_finite_losses(losses, r.stats, {});
      const auto bs = hard_batch_stats(losses, batch_groups, config.m, config.group_loss);
      r.stats.update(bs.loss, bs.prop, bs.present);
      const auto wv = compute_group_weights(r.stats.loss_hat, r.stats.prop_hat, config.alpha, WeightMode::primary,
                                            config.w_min, config.w_max);
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double weighted = 0.0;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        batch.example_weights[i] = wv.q[static_cast<std::size_t>(batch_groups[i])] * inv_b;
        weighted += batch.example_weights[i] * losses[i];
      }
      r.batch_weighted_losses.push_back(weighted);
      r.trace.push_back({step++, 0, WeightMode::primary, r.stats.loss_hat, r.stats.prop_hat, wv.q, weighted});
      const auto grads = nn::backward(r.params, batch);
      nn::sgd_step_inplace(r.params, grads, config.lr_theta, config.weight_decay, nn::Direction::descend);
    }
    r.checkpoints.push_back(r.params);
  }
  return r;
}

RobustTrainResult agro_primary_epochs(nn::NetworkParams theta, const Matrix& probs, const data::TrainingView& view,
                                      GroupStats& stats, const AgroConfig& config, std::size_t epochs,
                                      std::size_t round) {
  config.validate();
  if (probs.rows() != view.size()) throw ShapeError("agro_primary_epochs: one probability row per example required");
  if (probs.cols() != stats.loss_hat.size()) throw ShapeError("agro_primary_epochs: group count mismatch");
  RobustTrainResult r;
  r.params = std::move(theta);
  erm::MinibatchSampler sampler(view.size(), config.effective_batch_size(), round_seed(config.seed, round));
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& idx : sampler.next_epoch()) {
      auto batch = make_batch(view, idx);
      const Matrix p = gather_rows(probs, idx);
      const auto logits = nn::forward(r.params, batch.inputs).logits;
      const auto losses = nn::weighted_ce_loss(logits, batch.labels, batch.example_weights).per_example;
      check_finite_losses(losses, stats, {});
      const auto bs = soft_batch_stats(losses, p, config.group_loss);
      stats.update(bs.loss, bs.prop, bs.present);
      const auto wv = compute_group_weights(stats.loss_hat, stats.prop_hat, config.alpha, WeightMode::primary,
                                            config.w_min, config.w_max);
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double weighted = 0.0;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double w = 0.0;
        auto row = p.row(i);
        for (std::size_t g = 0; g < row.size(); ++g) w += wv.q[g] * row[g];
        batch.example_weights[i] = w * inv_b;
        weighted += batch.example_weights[i] * losses[i];
      }
      if (!std::isfinite(weighted)) {
        throw NumericError("non-finite weighted loss; q=" + snapshot(wv.q) + " L_hat=" + snapshot(stats.loss_hat));
      }
      r.batch_weighted_losses.push_back(weighted);
      r.trace.push_back({step++, round, WeightMode::primary, stats.loss_hat, stats.prop_hat, wv.q, weighted});
      const auto grads = nn::backward(r.params, batch);
      nn::sgd_step_inplace(r.params, grads, config.lr_theta, config.weight_decay, nn::Direction::descend);
    }
    r.checkpoints.push_back(r.params);
  }
  r.stats = stats;
  return r;
}

RobustTrainResult agro_primary_epochs(nn::NetworkParams theta, const grouper::Grouper& frozen_grouper,
                                      const Matrix& features, const data::TrainingView& view, GroupStats& stats,
                                      const AgroConfig& config, std::size_t epochs, std::size_t round) {
  return agro_primary_epochs(std::move(theta), grouper::group_probs(frozen_grouper, features), view, stats, config,
                             epochs, round);
}

AdversaryResult agro_adversary_epochs(const nn::NetworkParams& frozen_theta, grouper::Grouper grouper,
                                      const Matrix& features, const data::TrainingView& view,
                                      const AgroConfig& config, std::size_t epochs, std::size_t round,
                                      bool full_batch) {
  config.validate();
  if (features.rows() != view.size()) throw ShapeError("agro_adversary_epochs: one feature row per example required");
  // theta is frozen, so per-example losses are fixed for the whole round.
  const std::vector<double> zero_w(view.size(), 0.0);
  const auto losses =
      nn::weighted_ce_loss(nn::forward(frozen_theta, view.inputs()).logits, view.labels(), zero_w).per_example;
  const Matrix inputs = grouper.standardizer.apply(features);
  const std::size_t m = grouper.groups();

  AdversaryResult r;
  erm::MinibatchSampler sampler(view.size(), full_batch ? view.size() : config.effective_batch_size(),
                                round_seed(config.seed, round) ^ 0xad5e12a7ULL);
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<double> epoch_mass(m, 0.0);
    std::size_t epoch_count = 0;
    for (const auto& idx : sampler.next_epoch()) {
      const Matrix x = gather_rows(inputs, idx);
      std::vector<double> l;
      l.reserve(idx.size());
      for (auto i : idx) l.push_back(losses[i]);
      const auto trace = nn::forward_trace(grouper.net, x);
      const Matrix p = nn::softmax_rows(trace.activations.back());
      const auto bs = soft_batch_stats(l, p, config.group_loss);
      const auto wv = compute_group_weights(bs.loss, bs.prop, config.alpha, WeightMode::adversary, config.w_min,
                                            config.w_max);
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double objective = 0.0;
      // d objective / d logit_ig = P_ig (a_ig - sum_h P_ih a_ih), a_ig = q_g l_i / |B|.
      Matrix dlogits(idx.size(), m);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto pr = p.row(i);
        double mean_a = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
          const double a = wv.q[g] * l[i] * inv_b;
          objective += a * pr[g];
          mean_a += pr[g] * a;
          epoch_mass[g] += pr[g];
        }
        for (std::size_t g = 0; g < m; ++g) dlogits(i, g) = pr[g] * (wv.q[g] * l[i] * inv_b - mean_a);
      }
      epoch_count += idx.size();
      r.objective.push_back(objective);
      r.trace.push_back({step++, round, WeightMode::adversary, bs.loss, bs.prop, wv.q, objective});
      const auto grads = nn::backprop(grouper.net, trace, dlogits);
      nn::sgd_step_inplace(grouper.net, grads, config.lr_phi, config.weight_decay_phi, nn::Direction::ascend);
    }
    double max_share = 0.0;
    for (double mass : epoch_mass) max_share = std::max(max_share, mass / static_cast<double>(epoch_count));
    r.epoch_max_share.push_back(max_share);
    if (max_share > config.collapse_threshold) r.collapse_warning = true;
  }
  r.grouper = std::move(grouper);
  return r;
}

nn::NetworkParams agro_round0(const data::TrainingView& view, const Matrix& features,
                              const AgroPipelineConfig& config, std::vector<TraceRow>* trace) {
  auto gcfg = config.grouper;
  gcfg.seed = config.grouper.seed + 7919;
  const auto random_grouper = grouper::init_grouper(features, config.agro.m, gcfg);
  GroupStats stats(config.agro.m, config.agro.gamma_ema);
  auto theta = nn::init_network(config.net.layer_sizes(view.input_dim(), view.n_classes()), config.agro.seed);
  auto r = agro_primary_epochs(std::move(theta), random_grouper, features, view, stats, config.agro,
                               config.agro.t1_epochs, 0);
  if (trace) *trace = std::move(r.trace);
  return r.params;
}

slice::SliceFit fit_slices(const erm::FeatureMatrix& features, std::span<const int> labels,
                           const slice::SliceConfig& config) {
  return slice::fit_em(features.embedding(), labels, features.pred_probs(), config);
}

grouper::PretrainResult pretrain_grouper(const erm::FeatureMatrix& features, const Matrix& responsibilities,
                                         const AgroPipelineConfig& config) {
  auto g = grouper::init_grouper(features.values, config.agro.m, config.grouper);
  if (!config.pretrain_grouper) {
    grouper::PretrainResult r;
    r.grouper = std::move(g);
    return r;
  }
  return grouper::pretrain_kl(std::move(g), features.values, responsibilities, config.grouper.pretrain_epochs,
                              config.grouper.pretrain_batch_size, config.grouper.pretrain_lr, config.grouper.seed);
}

AgroRounds agro_rounds(nn::NetworkParams theta, grouper::Grouper grouper, const Matrix& features,
                       const data::TrainingView& view, const AgroConfig& config) {
  config.validate();
  AgroRounds r;
  r.theta = std::move(theta);
  r.grouper = std::move(grouper);
  for (std::size_t round = 1; round <= config.rounds; ++round) {
    auto adv = agro_adversary_epochs(r.theta, r.grouper, features, view, config, config.t2_epochs, round);
    r.grouper = adv.grouper;
    r.adversary.push_back(std::move(adv));
    GroupStats stats(config.m, config.gamma_ema);
    r.primary = agro_primary_epochs(r.theta, r.grouper, features, view, stats, config, config.primary_epochs, round);
    r.theta = r.primary.params;
  }
  return r;
}

AgroResult agro_train(const data::TrainingView& view, const AgroPipelineConfig& config,
                      const erm::PretrainedAnalog& encoder) {
  config.agro.validate();
  AgroResult r;
  r.features = erm::extract_features_kfold(view, config.folds, config.net, config.fold_train, encoder);
  const Matrix& f = r.features.features.values;
  r.round0_theta = agro_round0(view, f, config);

  auto slice_cfg = config.slices;
  slice_cfg.k = config.agro.m;
  r.slices = fit_slices(r.features.features, view.labels(), slice_cfg);
  r.pretrained = pretrain_grouper(r.features.features, r.slices.responsibilities, config);

  auto rounds = agro_rounds(r.round0_theta, r.pretrained.grouper, f, view, config.agro);
  r.adversary = std::move(rounds.adversary);
  r.primary = std::move(rounds.primary);
  r.theta = std::move(rounds.theta);
  r.grouper = std::move(rounds.grouper);
  return r;
}

}  // namespace agro::robust
