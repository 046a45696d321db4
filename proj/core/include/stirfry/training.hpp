#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stirfry/dtw.hpp"
#include "stirfry/tensor.hpp"
#include "stirfry/trajectory.hpp"
#include "stirfry/transducer.hpp"

namespace stirfry {

struct TrainConfig {
  ModelConfig model;
  int epochs = 120;
  int batch_size = 2;
  double base_lr = 1e-3;
  int warmup_epochs = 5;       // linear warm-up, then base * warmup/epoch decay
  double sdtw_gamma = 0.1;
  double grad_clip = 5.0;      // global-norm clip; <= 0 disables
  std::uint64_t seed = 7;
  std::vector<double> train_scales = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
                                      1.1, 1.2, 1.3, 1.4, 1.5};
  std::vector<double> val_scales = {0.65, 0.75};
  double test_scale = 0.85;
  bool scale_orientations = false;  // for augment_scales

  void validate() const;
};

TrainConfig train_config_from_json_text(const std::string& text);
std::string train_config_to_json_text(const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean teacher-forced soft-DTW divergence
  double val_ndtw = 0.0;    // mean autoregressive normalized DTW
};

struct MetricReport {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double best_val_ndtw = 0.0;
  double final_test_ndtw = -1.0;  // < 0 when no test pair was evaluated
  double wall_seconds = 0.0;      // reported separately from the metric files
  bool diverged = false;
};

/// Teacher-forced training loss between a predicted and a target normalized
/// sequence: soft-DTW divergence (nonnegative, zero iff equal) divided by
/// the summed lengths. `target_self` is soft_dtw(target, target), constant
/// per pair and precomputable.
Tensor sdtw_divergence_loss(const Tensor& pred, const Tensor& target,
                            double target_self, double gamma);

double lr_schedule(const TrainConfig& cfg, int epoch);

/// Scales every pair about its per-sequence rest pose for each factor.
Dataset augment_scales(const Dataset& dataset, const std::vector<double>& scales,
                       bool scale_orientations = false);

struct TrainOutcome {
  ModelParams best_params;  // best validation checkpoint
  NormPair stats;
  MetricReport report;
  AdamState adam;     // optimizer state at the last completed epoch
  int last_epoch = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains on the manifest's train split (teacher forcing, soft-DTW
/// divergence, Adam with warm-up/decay), validating after every epoch with
/// full autoregressive rollouts on the val split. Normalization statistics
/// come from the train split only. Throws nothing on divergence: the report
/// is marked and the best checkpoint so far is returned.
TrainOutcome train(ModelParams params, const Dataset& dataset,
                   const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                   const AdamState* resume_adam = nullptr, int start_epoch = 0);

struct EvalReport {
  double ndtw = 0.0;
  Vec6 rmse{};
  PoseSeq generated;
};

/// Full autoregressive rollout on the pair's leader, scored against its
/// follower with the normalized-DTW metric plus per-dimension RMSE.
EvalReport evaluate(ModelParams& params, const NormPair& stats, const DemoPair& pair);

}  // namespace stirfry
