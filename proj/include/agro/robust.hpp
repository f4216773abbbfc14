#pragma once

// Online greedy group-robust training. gdro_train works on hard group ids;
// the AGRO routines work on soft assignments produced by a grouper and
// alternate a primary round (minimize the up-weighted worst-group loss over
// the task model) with an adversary round (maximize the converse weighting
// over the grouper).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "agro/data.hpp"
#include "agro/erm.hpp"
#include "agro/grouper.hpp"
#include "agro/nn.hpp"
#include "agro/slice_model.hpp"

namespace agro::robust {

// gamma * v_new + (1 - gamma) * v_old; gamma in (0, 1).
double ema(double v_new, double v_old, double gamma);

enum class WeightMode { primary, adversary };

struct WeightVector {
  std::vector<double> q;
  std::vector<std::size_t> worst_set;  // in loss-descending order
};

// Groups are ranked by loss, descending, ties to the smaller id. The worst
// set is the shortest prefix whose proportion mass reaches alpha * sum(p);
// when every proportion is zero it is the first-ranked group alone.
// primary: q = 1/alpha on the worst set, w_min elsewhere.
// adversary: q = alpha on the worst set, w_max elsewhere.
WeightVector compute_group_weights(std::span<const double> losses, std::span<const double> proportions,
                                   double alpha, WeightMode mode, double w_min, double w_max);

// How a minibatch's per-group loss statistic is formed from member losses:
// sum is sum_i P_ig l_i, mean divides that by the group's mass sum_i P_ig.
enum class GroupLoss { sum, mean };

struct AgroConfig {
  double alpha = 0.2;
  std::size_t m = 4;
  std::size_t t1_epochs = 3;
  std::size_t t2_epochs = 1;
  std::size_t primary_epochs = 20;  // final primary round, matched to ERM
  std::size_t rounds = 1;
  double w_min = 0.1;
  double w_max = 1.0;
  double gamma_ema = 0.5;
  double lr_theta = 0.05;
  double lr_phi = 0.05;
  double weight_decay = 1e-4;      // task model
  double weight_decay_phi = 0.0;   // grouper
  std::size_t batch_size = 0;      // 0: 16 * m
  GroupLoss group_loss = GroupLoss::sum;
  double collapse_threshold = 0.98;
  std::uint64_t seed = 0;

  std::size_t effective_batch_size() const { return batch_size ? batch_size : 16 * m; }
  void validate() const;
};

// EMA-smoothed per-group losses and proportions carried across minibatches.
struct GroupStats {
  std::vector<double> loss_hat;
  std::vector<double> prop_hat;
  double gamma_ema = 0.5;

  GroupStats() = default;
  GroupStats(std::size_t m, double gamma) : loss_hat(m, 0.0), prop_hat(m, 0.0), gamma_ema(gamma) {}

  // Groups absent from the batch (present[g] == 0) keep their loss_hat.
  void update(std::span<const double> batch_loss, std::span<const double> batch_prop,
              std::span<const char> present);
};

struct BatchGroupStats {
  std::vector<double> loss;     // per-group statistic, see GroupLoss
  std::vector<double> prop;     // mass / |B|
  std::vector<double> mass;     // sum_i P_ig
  std::vector<char> present;    // mass > 0
};

BatchGroupStats hard_batch_stats(std::span<const double> losses, std::span<const int> groups, std::size_t m,
                                 GroupLoss mode);
BatchGroupStats soft_batch_stats(std::span<const double> losses, const Matrix& probs, GroupLoss mode);

struct TraceRow {
  std::size_t step = 0;
  std::size_t round = 0;
  WeightMode mode = WeightMode::primary;
  std::vector<double> loss_hat;
  std::vector<double> prop_hat;
  std::vector<double> q;
  double batch_loss = 0.0;
};

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);

struct RobustTrainResult {
  nn::NetworkParams params;
  std::vector<nn::NetworkParams> checkpoints;  // one per epoch
  std::vector<TraceRow> trace;
  std::vector<double> batch_weighted_losses;
  GroupStats stats;
};

// Greedy G-DRO over known hard groups (ids in [0, m)). Per-example weight is
// q(g_i) / |B|. Starts from init when given.
RobustTrainResult gdro_train(const data::TrainingView& view, std::span<const int> groups, const erm::NetSpec& net,
                             const AgroConfig& config, std::size_t epochs, const nn::NetworkParams* init = nullptr);

// Primary round: grouper frozen, soft groups P = group_probs(grouper,
// features). Per-example weight is sum_g q(g) P_ig / |B|; stats are carried
// in and out.
RobustTrainResult agro_primary_epochs(nn::NetworkParams theta, const grouper::Grouper& frozen_grouper,
                                      const Matrix& features, const data::TrainingView& view, GroupStats& stats,
                                      const AgroConfig& config, std::size_t epochs, std::size_t round);

// Same, with P supplied directly.
RobustTrainResult agro_primary_epochs(nn::NetworkParams theta, const Matrix& probs, const data::TrainingView& view,
                                      GroupStats& stats, const AgroConfig& config, std::size_t epochs,
                                      std::size_t round);

struct AdversaryResult {
  grouper::Grouper grouper;
  std::vector<TraceRow> trace;
  std::vector<double> objective;        // weighted loss per step, before the update
  std::vector<double> epoch_max_share;  // largest soft group share per epoch
  bool collapse_warning = false;
};

// Adversary round: task model frozen, per-batch (non-EMA) group statistics,
// gradient ascent on sum_g q(g) sum_i P_ig l_i / |B|. full_batch uses one
// batch per epoch. Flags collapse when a whole epoch's largest soft group
// share exceeds config.collapse_threshold.
AdversaryResult agro_adversary_epochs(const nn::NetworkParams& frozen_theta, grouper::Grouper grouper,
                                      const Matrix& features, const data::TrainingView& view,
                                      const AgroConfig& config, std::size_t epochs, std::size_t round,
                                      bool full_batch = false);

// Everything the end-to-end procedure needs besides the data.
struct AgroPipelineConfig {
  AgroConfig agro;
  erm::NetSpec net;
  erm::TrainConfig fold_train;  // K-fold feature models (weak ERM)
  std::size_t folds = 5;
  std::size_t g_dim = 16;
  slice::SliceConfig slices;
  grouper::GrouperConfig grouper;
  bool pretrain_grouper = true;  // false: adversary starts from a random grouper
};

struct AgroResult {
  nn::NetworkParams round0_theta;
  erm::KFoldFeatures features;
  slice::SliceFit slices;
  grouper::PretrainResult pretrained;
  std::vector<AdversaryResult> adversary;  // one per round
  RobustTrainResult primary;               // final primary round
  nn::NetworkParams theta;
  grouper::Grouper grouper;
};

// Stage helpers shared by agro_train and the file-based pipeline.
nn::NetworkParams agro_round0(const data::TrainingView& view, const Matrix& features,
                              const AgroPipelineConfig& config, std::vector<TraceRow>* trace = nullptr);
slice::SliceFit fit_slices(const erm::FeatureMatrix& features, std::span<const int> labels,
                           const slice::SliceConfig& config);
grouper::PretrainResult pretrain_grouper(const erm::FeatureMatrix& features, const Matrix& responsibilities,
                                         const AgroPipelineConfig& config);

struct AgroRounds {
  std::vector<AdversaryResult> adversary;  // one per round
  RobustTrainResult primary;               // last primary round
  nn::NetworkParams theta;
  grouper::Grouper grouper;
};

// Rounds 1..R starting from theta (after round 0) and an initial grouper:
// each round runs the adversary for T2 epochs, then the primary for
// primary_epochs with freshly reset group statistics.
AgroRounds agro_rounds(nn::NetworkParams theta, grouper::Grouper grouper, const Matrix& features,
                       const data::TrainingView& view, const AgroConfig& config);

// Round 0 primary from a random grouper for T1 epochs; K-fold features;
// slice model; grouper KL pretraining; then per round an adversary round of
// T2 epochs followed by a primary round of primary_epochs.
AgroResult agro_train(const data::TrainingView& view, const AgroPipelineConfig& config,
                      const erm::PretrainedAnalog& encoder);

}  // namespace agro::robust
