#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "relab/data.hpp"
#include "relab/metalearn.hpp"
#include "relab/metrics.hpp"
#include "relab/model.hpp"
#include "relab/numerics.hpp"

namespace relab {

enum class RenormGranularity { PerBatch, PerEpoch };
enum class Resample { None, Oversample, Undersample };

struct TrainConfig {
  // Model sizes (input dim and class count come from the data).
  std::size_t dense_units = 512;
  std::size_t hidden_units = 128;

  double lr_theta = 1e-3;
  double lr_meta = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;
  double epsilon_w = kEpsilonW;
  bool learn_labels = true;
  bool learn_weights = true;
  std::size_t pretrain_epochs = 0;
  RenormGranularity renorm = RenormGranularity::PerBatch;
  bool meta_dropout = false;
  double val_fraction = 0.1;

  void validate() const {
    if (lr_theta < 0.0) throw std::invalid_argument("TrainConfig: lr_theta must be nonnegative");
    if (lr_meta < 0.0) throw std::invalid_argument("TrainConfig: lr_meta must be nonnegative");
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw std::invalid_argument("TrainConfig: dropout_rate must be in [0,1)");
    }
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw std::invalid_argument("TrainConfig: val_fraction must be in [0,1)");
    }
  }
};

struct RoundRecord {
  std::size_t round = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_wa = 0.0;
  double val_ua = 0.0;
  std::vector<double> mean_w_per_class;  // grouped by gold label
  std::size_t label_flips = 0;           // samples whose dominant label left gold
};

using TrainHistory = std::vector<RoundRecord>;

// One Adam pass over theta with (L, w) frozen. Returns the epoch mean loss.
inline double train_epoch_theta(ModelParams& params, const LabelState& label_state,
                                const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                                AdamState& adam_state) {
  if (label_state.size() != ds.size()) {
    throw std::invalid_argument("train_epoch_theta: label state does not cover dataset");
  }
  Rng shuffle_rng = rng.split("shuffle");
  Rng dropout_rng = rng.split("dropout");
  double loss_sum = 0.0;
  std::size_t batch_id = 0;
  for (const Batch& batch : batch_iter(ds, cfg.batch_size, /*shuffle=*/true, shuffle_rng)) {
    auto [y, cache] =
        forward(params, batch, cfg.dropout_rate, &dropout_rng, /*train_mode=*/true);
    Matrix dlogits(batch.size, params.dims.classes);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const std::size_t n = batch.sample_indices[b];
      const std::vector<double>& l = label_state.logits[n];
      const double w = label_state.weights[n];
      const double loss = sample_loss(y.row(b), l, w);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train_epoch_theta: non-finite loss in batch " +
                                 std::to_string(batch_id));
      }
      loss_sum += loss;
      // d(mean batch loss)/dlogits = (y - s) / (w * B)
      const std::vector<double> s = soft_labels(l);
      for (std::size_t c = 0; c < params.dims.classes; ++c) {
        dlogits.at(b, c) = (y.at(b, c) - s[c]) / (w * static_cast<double>(batch.size));
      }
    }
    if (cfg.lr_theta > 0.0) {
      BackwardResult back = backward(params, cache, dlogits);
      adam_step(params.flat, back.grads.flat, adam_state, cfg.lr_theta, cfg.beta1, cfg.beta2,
                cfg.adam_eps);
    }
    ++batch_id;
  }
  return loss_sum / static_cast<double>(ds.size());
}

// One plain-gradient pass over (L, w) with theta frozen. Returns the epoch
// mean loss measured before the updates.
inline double train_epoch_meta(const ModelParams& params, LabelState& label_state,
                               const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  if (label_state.size() != ds.size()) {
    throw std::invalid_argument("train_epoch_meta: label state does not cover dataset");
  }
  Rng shuffle_rng = rng.split("meta-shuffle");
  Rng dropout_rng = rng.split("meta-dropout");
  const bool update_w = cfg.learn_weights && cfg.lr_meta > 0.0;
  const bool update_l = cfg.learn_labels && cfg.lr_meta > 0.0;
  double loss_sum = 0.0;
  std::size_t batch_id = 0;
  for (const Batch& batch : batch_iter(ds, cfg.batch_size, /*shuffle=*/true, shuffle_rng)) {
    auto [y, cache] = forward(params, batch, cfg.meta_dropout ? cfg.dropout_rate : 0.0,
                              &dropout_rng, /*train_mode=*/cfg.meta_dropout);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const std::size_t n = batch.sample_indices[b];
      std::vector<double>& l = label_state.logits[n];
      const double w = label_state.weights[n];
      const double loss = sample_loss(y.row(b), l, w);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train_epoch_meta: non-finite loss in batch " +
                                 std::to_string(batch_id));
      }
      loss_sum += loss;
      if (!update_w && !update_l) continue;
      const MetaGrads mg = meta_grads(y.row(b), l, w);
      if (update_l) {
        for (std::size_t c = 0; c < l.size(); ++c) l[c] -= cfg.lr_meta * mg.dl[c];
      }
      if (update_w) label_state.weights[n] -= cfg.lr_meta * mg.dw;
    }
    if (update_w && cfg.renorm == RenormGranularity::PerBatch) {
      renormalize_weights(label_state, cfg.epsilon_w);
    }
    ++batch_id;
  }
  if (update_w && cfg.renorm == RenormGranularity::PerEpoch) {
    renormalize_weights(label_state, cfg.epsilon_w);
  }
  return loss_sum / static_cast<double>(ds.size());
}

// Validation loss against gold one-hot labels with unit weights, plus
// accuracy, all in eval mode.
struct ValScores {
  double loss = 0.0;
  double wa = 0.0;
  double ua = 0.0;
};

inline ValScores validate_model(const ModelParams& params, const Dataset& ds,
                                std::size_t batch_size) {
  Rng dummy(0);
  double loss_sum = 0.0;
  std::vector<std::size_t> golds, preds;
  for (const Batch& batch : batch_iter(ds, batch_size, /*shuffle=*/false, dummy)) {
    auto [y, cache] = forward(params, batch);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const std::size_t gold = ds.utterances[batch.sample_indices[b]].gold_label;
      loss_sum -= std::log(std::max(y.at(b, gold), kLogFloor));
      golds.push_back(gold);
      const auto row = y.row(b);
      std::size_t best = 0;
      for (std::size_t c = 1; c < row.size(); ++c) {
        if (row[c] > row[best]) best = c;
      }
      preds.push_back(best);
    }
  }
  ValScores scores;
  scores.loss = loss_sum / static_cast<double>(ds.size());
  const ConfusionMatrix conf = confusion(golds, preds, ds.num_classes());
  scores.wa = wa(conf);
  scores.ua = ua(conf);
  return scores;
}

struct StopDecision {
  bool stop = false;
  std::size_t best = 0;  // round index of the minimum validation loss
};

// Stop once the minimum validation loss is `patience` or more rounds old.
// Ties go to the earliest round.
inline StopDecision early_stop_check(const std::vector<double>& val_losses,
                                     std::size_t patience) {
  if (val_losses.empty()) throw std::invalid_argument("early_stop_check: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < val_losses[best]) best = i;
  }
  return {val_losses.size() - 1 - best >= patience, best};
}

struct FitResult {
  ModelParams best_params;
  LabelState label_state;
  LabelState initial_label_state;
  TrainHistory history;
  std::size_t best_round = 0;
};

// Called after each alternation round, e.g. to persist label-state snapshots.
using RoundCallback = std::function<void(const RoundRecord&, const LabelState&)>;

// Algorithm: optional theta-only pretraining with its own early stop, then
// alternating rounds of one theta epoch and one meta epoch. Validation uses
// gold one-hot labels and unit weights; the best-validation parameters win.
inline FitResult alternating_fit(const Dataset& ds_train, const Dataset& ds_val,
                                 const TrainConfig& cfg,
                                 const RoundCallback& on_round = nullptr) {
  cfg.validate();
  if (ds_train.num_classes() != ds_val.num_classes() ||
      (ds_val.size() > 0 && ds_train.feat_dim() != ds_val.feat_dim())) {
    throw std::invalid_argument("alternating_fit: train/val dimension mismatch");
  }
  const ModelDims dims{ds_train.feat_dim(), cfg.dense_units, cfg.hidden_units,
                       ds_train.num_classes()};
  Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  ModelParams params = ModelParams::init(dims, init_rng);
  AdamState adam_state(params.flat.size());
  LabelState label_state = init_label_state(ds_train.gold_labels(), ds_train.num_classes());
  const LabelState initial_state = label_state;

  FitResult result;
  result.initial_label_state = initial_state;

  // Pretraining: theta only, frozen initial label state, own early stop.
  if (cfg.pretrain_epochs > 0) {
    std::vector<double> pre_losses;
    ModelParams pre_best = params;
    std::size_t best = 0;
    for (std::size_t e = 0; e < cfg.pretrain_epochs; ++e) {
      Rng epoch_rng = root.split("pretrain").split(e);
      train_epoch_theta(params, initial_state, ds_train, cfg, epoch_rng, adam_state);
      pre_losses.push_back(validate_model(params, ds_val, cfg.batch_size).loss);
      const StopDecision d = early_stop_check(pre_losses, cfg.patience);
      if (pre_losses.size() - 1 == d.best) pre_best = params;
      best = d.best;
      if (d.stop) break;
    }
    (void)best;
    params = pre_best;
    adam_state = AdamState(params.flat.size());
  }

  std::vector<double> val_losses;
  ModelParams best_params = params;
  for (std::size_t round = 0; round < cfg.max_epochs; ++round) {
    Rng round_rng = root.split("round").split(round);
    Rng theta_rng = round_rng.split("theta");
    Rng meta_rng = round_rng.split("meta");
    const double train_loss =
        train_epoch_theta(params, label_state, ds_train, cfg, theta_rng, adam_state);
    train_epoch_meta(params, label_state, ds_train, cfg, meta_rng);

    const ValScores scores = validate_model(params, ds_val, cfg.batch_size);
    RoundRecord rec;
    rec.round = round;
    rec.train_loss = train_loss;
    rec.val_loss = scores.loss;
    rec.val_wa = scores.wa;
    rec.val_ua = scores.ua;
    {
      const auto means = class_mean_weights(label_state, ds_train.gold_labels());
      for (const auto& m : means) rec.mean_w_per_class.push_back(m.value_or(0.0));
      for (std::size_t n = 0; n < label_state.size(); ++n) {
        if (dominant_class(label_state.logits[n]) != ds_train.utterances[n].gold_label) {
          rec.label_flips += 1;
        }
      }
    }
    result.history.push_back(rec);
    if (on_round) on_round(rec, label_state);

    val_losses.push_back(scores.loss);
    const StopDecision d = early_stop_check(val_losses, cfg.patience);
    if (val_losses.size() - 1 == d.best) best_params = params;
    result.best_round = d.best;
    if (d.stop) break;
  }

  result.best_params = std::move(best_params);
  result.label_state = std::move(label_state);
  return result;
}

// Predictions for a whole dataset in order.
inline std::vector<std::size_t> predict_dataset(const ModelParams& params, const Dataset& ds,
                                                std::size_t batch_size) {
  Rng dummy(0);
  std::vector<std::size_t> preds(ds.size(), 0);
  for (const Batch& batch : batch_iter(ds, batch_size, /*shuffle=*/false, dummy)) {
    const auto p = predict(params, batch);
    for (std::size_t b = 0; b < batch.size; ++b) preds[batch.sample_indices[b]] = p[b];
  }
  return preds;
}

inline EvalReport evaluate_model(const ModelParams& params, const Dataset& ds,
                                 std::size_t batch_size) {
  const auto preds = predict_dataset(params, ds, batch_size);
  return make_report(confusion(ds.gold_labels(), preds, ds.num_classes()));
}

struct CrossvalResult {
  std::vector<EvalReport> folds;
  EvalReport pooled;
};

// Leave-one-speaker-out cross-validation. Per fold: fit normalization on the
// training side only, hold out a stratified validation split, fit, evaluate
// on the fold's speaker. Folds are independent; `jobs` > 1 runs them on
// threads with per-fold rng streams, giving results identical to serial runs.
inline CrossvalResult crossval(const Dataset& ds, const TrainConfig& cfg,
                               Resample resample = Resample::None, std::size_t jobs = 1) {
  cfg.validate();
  const std::vector<Fold> folds = make_speaker_folds(ds);
  CrossvalResult result;
  result.folds.resize(folds.size());

  auto run_fold = [&](std::size_t k) {
    Rng fold_rng = Rng(cfg.seed).split("fold").split(k);
    Dataset train = subset(ds, folds[k].train);
    Dataset test = subset(ds, folds[k].test);
    const NormStats stats = fit_normalization(train);
    train = apply_normalization(train, stats);
    test = apply_normalization(test, stats);

    Rng split_rng = fold_rng.split("val-split");
    auto [train_idx, val_idx] = stratified_split(train, cfg.val_fraction, split_rng);
    Dataset fold_val = subset(train, val_idx);
    Dataset fold_train = subset(train, train_idx);
    if (resample == Resample::Oversample) {
      Rng rs = fold_rng.split("resample");
      fold_train = oversample(fold_train, rs);
    } else if (resample == Resample::Undersample) {
      Rng rs = fold_rng.split("resample");
      fold_train = undersample(fold_train, rs);
    }
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = fold_rng.seed();
    const FitResult fit = alternating_fit(fold_train, fold_val, fold_cfg);
    EvalReport rep = evaluate_model(fit.best_params, test, cfg.batch_size);
    rep.label_updates = label_update_matrix(fit.initial_label_state, fit.label_state);
    rep.class_mean_weights = class_mean_weights(fit.label_state, fold_train.gold_labels());
    rep.grouping = "gold";
    result.folds[k] = std::move(rep);
  };

  if (jobs <= 1) {
    for (std::size_t k = 0; k < folds.size(); ++k) run_fold(k);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t j = 0; j < std::min(jobs, folds.size()); ++j) {
      workers.emplace_back([&, j]() {
        for (std::size_t k = j; k < folds.size(); k += std::min(jobs, folds.size())) {
          run_fold(k);
        }
      });
    }
    for (auto& w : workers) w.join();
  }

  ConfusionMatrix pooled(ds.num_classes());
  for (const auto& rep : result.folds) {
    for (std::size_t i = 0; i < pooled.counts.size(); ++i) {
      pooled.counts[i] += rep.confusion.counts[i];
    }
  }
  result.pooled = make_report(pooled);
  return result;
}

// History file: one line per round, tab-separated
// round, train_loss, val_loss, val_wa, val_ua.
inline void save_history(const TrainHistory& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_history: cannot open " + path);
  char buf[160];
  for (const RoundRecord& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\t%.4f\t%.4f\n", r.round, r.train_loss,
                  r.val_loss, r.val_wa, r.val_ua);
    out << buf;
  }
}

}  // namespace relab
