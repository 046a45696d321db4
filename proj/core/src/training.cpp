#include "stirfry/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace stirfry {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor seq_to_tensor(const PoseSeq& seq, const NormStats& stats, bool requires_grad = false) {
  const int n = static_cast<int>(seq.size());
  std::vector<double> data(static_cast<std::size_t>(n) * kPoseDim);
  for (int i = 0; i < n; ++i) {
    const Vec6 p = apply_norm(seq.poses[static_cast<std::size_t>(i)], stats);
    for (int d = 0; d < kPoseDim; ++d)
      data[static_cast<std::size_t>(i) * kPoseDim + d] = p[static_cast<std::size_t>(d)];
  }
  return Tensor::from_data({n, kPoseDim}, std::move(data), requires_grad);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  require(base_lr > 0.0, "TrainConfig: base_lr must be positive");
  require(warmup_epochs >= 1 && warmup_epochs < epochs,
          "TrainConfig: warm-up must be shorter than the run");
  require(sdtw_gamma > 0.0, "TrainConfig: sdtw_gamma must be positive");
  for (double s : train_scales) require(s > 0.0, "TrainConfig: scales must be positive");
  for (double s : val_scales) require(s > 0.0, "TrainConfig: scales must be positive");
  require(test_scale > 0.0, "TrainConfig: scales must be positive");
}

TrainConfig train_config_from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("train config parse error: ") + e.what());
  }
  TrainConfig cfg;
  if (j.contains("model"))
    cfg.model = model_config_from_json_text(j["model"].dump());
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
  cfg.sdtw_gamma = j.value("sdtw_gamma", cfg.sdtw_gamma);
  cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("train_scales")) cfg.train_scales = j["train_scales"].get<std::vector<double>>();
  if (j.contains("val_scales")) cfg.val_scales = j["val_scales"].get<std::vector<double>>();
  cfg.test_scale = j.value("test_scale", cfg.test_scale);
  cfg.scale_orientations = j.value("scale_orientations", cfg.scale_orientations);
  cfg.validate();
  return cfg;
}

std::string train_config_to_json_text(const TrainConfig& cfg) {
  nlohmann::json j;
  j["model"] = nlohmann::json::parse(model_config_to_json_text(cfg.model));
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["base_lr"] = cfg.base_lr;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["sdtw_gamma"] = cfg.sdtw_gamma;
  j["grad_clip"] = cfg.grad_clip;
  j["seed"] = cfg.seed;
  j["train_scales"] = cfg.train_scales;
  j["val_scales"] = cfg.val_scales;
  j["test_scale"] = cfg.test_scale;
  j["scale_orientations"] = cfg.scale_orientations;
  return j.dump(2);
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  if (epoch <= cfg.warmup_epochs)
    return cfg.base_lr * static_cast<double>(epoch) / cfg.warmup_epochs;
  return cfg.base_lr * static_cast<double>(cfg.warmup_epochs) / epoch;
}

Tensor sdtw_divergence_loss(const Tensor& pred, const Tensor& target,
                            double target_self, double gamma) {
  const double norm = 1.0 / static_cast<double>(pred.extent(0) + target.extent(0));
  Tensor cross = soft_dtw(pred, target, gamma);
  Tensor self = soft_dtw(pred, pred, gamma);
  Tensor div = sub(cross, scale(self, 0.5));
  div = add_scalar(div, -0.5 * target_self);
  return scale(div, norm);
}

Dataset augment_scales(const Dataset& dataset, const std::vector<double>& scales,
                       bool scale_orientations) {
  for (double s : scales) require(s > 0.0, "augment_scales: scales must be positive");
  Dataset out;
  for (const DemoPair& pair : dataset.pairs) {
    for (double s : scales) {
      DemoPair scaled;
      scaled.left = scale_about_rest(pair.left, s, scale_orientations);
      scaled.right = scale_about_rest(pair.right, s, scale_orientations);
      scaled.scale = pair.scale * s;
      scaled.split = pair.split;
      out.pairs.push_back(std::move(scaled));
    }
  }
  return out;
}

TrainOutcome train(ModelParams params, const Dataset& dataset, const TrainConfig& cfg,
                   const EpochCallback& on_epoch, const AdamState* resume_adam,
                   int start_epoch) {
  cfg.validate();
  const auto t_begin = std::chrono::steady_clock::now();

  const auto train_pairs = dataset.split("train");
  const auto val_pairs = dataset.split("val");
  require(!train_pairs.empty(), "train: dataset has no train split");
  require(!val_pairs.empty(), "train: dataset has no val split");

  NormPair stats;
  {
    std::vector<PoseSeq> lefts, rights;
    for (const DemoPair* p : train_pairs) {
      lefts.push_back(p->left);
      rights.push_back(p->right);
    }
    stats.left = fit_norm_stats(lefts);
    stats.right = fit_norm_stats(rights);
  }

  struct Prepared {
    Tensor left, right;
    double self_sdtw;
    const DemoPair* src;
  };
  std::vector<Prepared> prepared;
  for (const DemoPair* p : train_pairs) {
    Prepared item;
    item.left = seq_to_tensor(p->left, stats.left);
    item.right = seq_to_tensor(p->right, stats.right);
    item.self_sdtw = soft_dtw_value(item.right.data(), item.right.extent(0),
                                    item.right.data(), item.right.extent(0),
                                    kPoseDim, cfg.sdtw_gamma);
    item.src = p;
    prepared.push_back(std::move(item));
  }

  std::vector<Tensor> learnable = params.parameters();
  AdamState adam = resume_adam ? *resume_adam : AdamState::init(learnable, cfg.base_lr);

  TrainOutcome outcome;
  outcome.stats = stats;
  outcome.report.best_val_ndtw = std::numeric_limits<double>::infinity();
  outcome.best_params = params.clone();

  Rng rng(cfg.seed + static_cast<std::uint64_t>(start_epoch) * 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = start_epoch + 1; epoch <= start_epoch + cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg, epoch);
    adam.lr = lr;
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    bool nan_hit = false;
    std::size_t done = 0;
    while (done < order.size() && !nan_hit) {
      const std::size_t batch =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                order.size() - done);
      zero_grad(learnable);
      for (std::size_t b = 0; b < batch; ++b) {
        const Prepared& item = prepared[order[done + b]];
        Tape tape;
        DropoutCtx dc{cfg.model.dropout, &rng};
        Tensor pred = teacher_forced_forward(params, item.left, item.right, &dc);
        Tensor loss =
            sdtw_divergence_loss(pred, item.right, item.self_sdtw, cfg.sdtw_gamma);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          nan_hit = true;
          break;
        }
        epoch_loss += value;
        tape.backward(scale(loss, 1.0 / static_cast<double>(batch)));
      }
      if (nan_hit) break;
      clip_grad_norm(learnable, cfg.grad_clip);
      adam_step(learnable, adam);
      done += batch;
    }
    if (nan_hit) {
      outcome.report.diverged = true;
      break;
    }
    epoch_loss /= static_cast<double>(prepared.size());

    // autoregressive validation, never teacher-forced
    double val_sum = 0.0;
    for (const DemoPair* p : val_pairs) {
      const PoseSeq gen = rollout_autoregressive(params, p->left, stats);
      val_sum += normalized_dtw(gen, p->right, stats.right);
    }
    const double val_ndtw = val_sum / static_cast<double>(val_pairs.size());

    EpochMetrics em{epoch, lr, epoch_loss, val_ndtw};
    outcome.report.epochs.push_back(em);
    if (val_ndtw < outcome.report.best_val_ndtw) {
      outcome.report.best_val_ndtw = val_ndtw;
      outcome.report.best_epoch = epoch;
      outcome.best_params = params.clone();
    }
    outcome.last_epoch = epoch;
    if (on_epoch) on_epoch(em);
  }

  outcome.adam = std::move(adam);
  outcome.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return outcome;
}

EvalReport evaluate(ModelParams& params, const NormPair& stats, const DemoPair& pair) {
  EvalReport report;
  report.generated = rollout_autoregressive(params, pair.left, stats);
  report.ndtw = normalized_dtw(report.generated, pair.right, stats.right);
  const std::size_t n = std::min(report.generated.size(), pair.right.size());
  Vec6 acc{};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < 6; ++d) {
      const double e = report.generated.poses[i][d] - pair.right.poses[i][d];
      acc[d] += e * e;
    }
  for (std::size_t d = 0; d < 6; ++d)
    report.rmse[d] = std::sqrt(acc[d] / static_cast<double>(n));
  return report;
}

}  // namespace stirfry
