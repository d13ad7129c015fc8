#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "relab/data.hpp"
#include "relab/metrics.hpp"
#include "relab/trainer.hpp"

namespace relab {

// Flat run configuration shared by all subcommands. Sourced from a JSON
// config file; command-line flags override individual keys.
struct RunConfig {
  TrainConfig train;
  Resample resample = Resample::None;
  std::size_t jobs = 1;

  std::string manifest;        // training / evaluation dataset
  std::string test_manifest;   // optional fixed test set for `train`
  double test_fraction = 0.2;  // stratified holdout when test_manifest is absent
  std::string out_dir = "out";
  std::string checkpoint;      // for `eval`
  std::string norm_stats;      // optional stats file for `eval`
  bool snapshot_rounds = true; // per-round label-state snapshots from `train`

  // gen-synth
  SynthSpec synth;

  // report
  std::string initial_snapshot;
  std::string final_snapshot;
  std::string grouping = "gold";  // or "dominant"
};

namespace detail {

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "seed", "out", "jobs", "manifest", "test_manifest", "test_fraction", "checkpoint",
      "norm_stats", "snapshot_rounds", "resample",
      // training
      "dense_units", "hidden_units", "lr", "lr_meta", "beta1", "beta2", "adam_eps", "batch_size",
      "max_epochs", "patience", "dropout", "epsilon_w", "learn_labels", "learn_weights",
      "pretrain_epochs", "renorm_granularity", "meta_dropout", "val_fraction",
      // gen-synth
      "num_classes", "num_samples", "frames_min", "frames_max", "feat_dim", "class_sep",
      "class_std", "flip_rate", "proportions", "num_speakers",
      // report
      "initial_snapshot", "final_snapshot", "grouping"};
  return keys;
}

inline Resample parse_resample(const std::string& s) {
  if (s == "none") return Resample::None;
  if (s == "oversample") return Resample::Oversample;
  if (s == "undersample") return Resample::Undersample;
  throw std::invalid_argument("config: resample must be none|oversample|undersample, got " + s);
}

inline bool parse_onoff(const std::string& s, const std::string& key) {
  if (s == "on" || s == "true") return true;
  if (s == "off" || s == "false") return false;
  throw std::invalid_argument("config: " + key + " must be on|off, got " + s);
}

}  // namespace detail

// Applies a flat JSON object onto a RunConfig. Unknown keys are rejected.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  for (const auto& [key, value] : j.items()) {
    if (!detail::known_config_keys().count(key)) {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    if (key == "seed") {
      cfg.train.seed = value.get<std::uint64_t>();
      cfg.synth.seed = cfg.train.seed;
    } else if (key == "out") {
      cfg.out_dir = value.get<std::string>();
    } else if (key == "jobs") {
      cfg.jobs = value.get<std::size_t>();
    } else if (key == "manifest") {
      cfg.manifest = value.get<std::string>();
    } else if (key == "test_manifest") {
      cfg.test_manifest = value.get<std::string>();
    } else if (key == "test_fraction") {
      cfg.test_fraction = value.get<double>();
    } else if (key == "checkpoint") {
      cfg.checkpoint = value.get<std::string>();
    } else if (key == "norm_stats") {
      cfg.norm_stats = value.get<std::string>();
    } else if (key == "snapshot_rounds") {
      cfg.snapshot_rounds = value.get<bool>();
    } else if (key == "resample") {
      cfg.resample = detail::parse_resample(value.get<std::string>());
    } else if (key == "dense_units") {
      cfg.train.dense_units = value.get<std::size_t>();
    } else if (key == "hidden_units") {
      cfg.train.hidden_units = value.get<std::size_t>();
    } else if (key == "lr") {
      cfg.train.lr_theta = value.get<double>();
    } else if (key == "lr_meta") {
      cfg.train.lr_meta = value.get<double>();
    } else if (key == "beta1") {
      cfg.train.beta1 = value.get<double>();
    } else if (key == "beta2") {
      cfg.train.beta2 = value.get<double>();
    } else if (key == "adam_eps") {
      cfg.train.adam_eps = value.get<double>();
    } else if (key == "batch_size") {
      cfg.train.batch_size = value.get<std::size_t>();
    } else if (key == "max_epochs") {
      cfg.train.max_epochs = value.get<std::size_t>();
    } else if (key == "patience") {
      cfg.train.patience = value.get<std::size_t>();
    } else if (key == "dropout") {
      cfg.train.dropout_rate = value.get<double>();
    } else if (key == "epsilon_w") {
      cfg.train.epsilon_w = value.get<double>();
    } else if (key == "learn_labels") {
      cfg.train.learn_labels =
          value.is_boolean() ? value.get<bool>()
                             : detail::parse_onoff(value.get<std::string>(), key);
    } else if (key == "learn_weights") {
      cfg.train.learn_weights =
          value.is_boolean() ? value.get<bool>()
                             : detail::parse_onoff(value.get<std::string>(), key);
    } else if (key == "pretrain_epochs") {
      cfg.train.pretrain_epochs = value.get<std::size_t>();
    } else if (key == "renorm_granularity") {
      const std::string g = value.get<std::string>();
      if (g == "per-batch") {
        cfg.train.renorm = RenormGranularity::PerBatch;
      } else if (g == "per-epoch") {
        cfg.train.renorm = RenormGranularity::PerEpoch;
      } else {
        throw std::invalid_argument("config: renorm_granularity must be per-batch|per-epoch");
      }
    } else if (key == "meta_dropout") {
      cfg.train.meta_dropout = value.get<bool>();
    } else if (key == "val_fraction") {
      cfg.train.val_fraction = value.get<double>();
    } else if (key == "num_classes") {
      cfg.synth.num_classes = value.get<std::size_t>();
    } else if (key == "num_samples") {
      cfg.synth.num_samples = value.get<std::size_t>();
    } else if (key == "frames_min") {
      cfg.synth.frames_min = value.get<std::size_t>();
    } else if (key == "frames_max") {
      cfg.synth.frames_max = value.get<std::size_t>();
    } else if (key == "feat_dim") {
      cfg.synth.feat_dim = value.get<std::size_t>();
    } else if (key == "class_sep") {
      cfg.synth.class_sep = value.get<double>();
    } else if (key == "class_std") {
      cfg.synth.class_std = value.get<double>();
    } else if (key == "flip_rate") {
      cfg.synth.flip_rate = value.get<double>();
    } else if (key == "proportions") {
      cfg.synth.proportions = value.get<std::vector<double>>();
    } else if (key == "num_speakers") {
      cfg.synth.num_speakers = value.get<std::size_t>();
    } else if (key == "initial_snapshot") {
      cfg.initial_snapshot = value.get<std::string>();
    } else if (key == "final_snapshot") {
      cfg.final_snapshot = value.get<std::string>();
    } else if (key == "grouping") {
      cfg.grouping = value.get<std::string>();
      if (cfg.grouping != "gold" && cfg.grouping != "dominant") {
        throw std::invalid_argument("config: grouping must be gold|dominant");
      }
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    apply_config_json(cfg, j);
  }
  return cfg;
}

inline void save_norm_stats(const NormStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_norm_stats: cannot open " + path);
  char buf[64];
  for (std::size_t j = 0; j < stats.mean.size(); ++j) {
    std::snprintf(buf, sizeof(buf), "%.17g\t%.17g\n", stats.mean[j], stats.std[j]);
    out << buf;
  }
}

inline NormStats load_norm_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_norm_stats: cannot open " + path);
  NormStats stats;
  double m = 0.0, s = 0.0;
  while (in >> m >> s) {
    stats.mean.push_back(m);
    stats.std.push_back(s);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void cmd_gen_synth(const RunConfig& cfg) {
  const Dataset ds = gen_synthetic(cfg.synth);
  std::filesystem::create_directories(cfg.out_dir);
  save_manifest(ds, std::filesystem::path(cfg.out_dir) / "manifest.tsv");
  std::vector<std::size_t> counts(ds.num_classes(), 0);
  std::size_t flips = 0;
  for (const auto& u : ds.utterances) {
    counts[u.gold_label] += 1;
    if (u.true_label && *u.true_label != u.gold_label) ++flips;
  }
  std::cout << "wrote " << ds.size() << " utterances to " << cfg.out_dir << "\n";
  for (std::size_t c = 0; c < counts.size(); ++c) {
    std::cout << ds.class_names[c] << ": " << counts[c] << "\n";
  }
  std::cout << "flipped labels: " << flips << "\n";
}

struct TrainArtifacts {
  FitResult fit;
  EvalReport test_report;
};

// Shared by cmd_train and tests: split (or load) the test set, normalize,
// fit, and evaluate, writing all artifacts under cfg.out_dir.
inline TrainArtifacts run_training(const RunConfig& cfg) {
  Dataset full = load_manifest(cfg.manifest);
  Dataset train_pool, test;
  if (!cfg.test_manifest.empty()) {
    train_pool = std::move(full);
    test = load_manifest(cfg.test_manifest);
    if (test.class_names != train_pool.class_names) {
      throw std::runtime_error("train: class name mismatch between manifests");
    }
  } else {
    Rng split_rng = Rng(cfg.train.seed).split("test-split");
    auto [train_idx, test_idx] = stratified_split(full, cfg.test_fraction, split_rng);
    train_pool = subset(full, train_idx);
    test = subset(full, test_idx);
  }

  const NormStats stats = fit_normalization(train_pool);
  train_pool = apply_normalization(train_pool, stats);
  test = apply_normalization(test, stats);

  Rng val_rng = Rng(cfg.train.seed).split("val-split");
  auto [train_idx, val_idx] = stratified_split(train_pool, cfg.train.val_fraction, val_rng);
  Dataset val = subset(train_pool, val_idx);
  Dataset train = subset(train_pool, train_idx);
  if (cfg.resample == Resample::Oversample) {
    Rng rs = Rng(cfg.train.seed).split("resample");
    train = oversample(train, rs);
  } else if (cfg.resample == Resample::Undersample) {
    Rng rs = Rng(cfg.train.seed).split("resample");
    train = undersample(train, rs);
  }

  const std::filesystem::path out(cfg.out_dir);
  std::filesystem::create_directories(out);
  std::filesystem::path snap_dir = out / "label_states";
  RoundCallback on_round = nullptr;
  if (cfg.snapshot_rounds) {
    std::filesystem::create_directories(snap_dir);
    on_round = [snap_dir](const RoundRecord& rec, const LabelState& state) {
      char name[48];
      std::snprintf(name, sizeof(name), "round_%04zu.bin", rec.round);
      save_label_state(state, (snap_dir / name).string());
    };
  }

  TrainArtifacts art;
  art.fit = alternating_fit(train, val, cfg.train, on_round);
  art.test_report = evaluate_model(art.fit.best_params, test, cfg.train.batch_size);
  art.test_report.label_updates =
      label_update_matrix(art.fit.initial_label_state, art.fit.label_state);
  art.test_report.class_mean_weights =
      class_mean_weights(art.fit.label_state, train.gold_labels());
  art.test_report.grouping = "gold";

  save_checkpoint(art.fit.best_params, (out / "model.ckpt").string());
  save_norm_stats(stats, (out / "norm_stats.tsv").string());
  save_label_state(art.fit.initial_label_state, (out / "label_state_initial.bin").string());
  save_label_state(art.fit.label_state, (out / "label_state_final.bin").string());
  save_history(art.fit.history, (out / "history.tsv").string());
  report_serialize(art.test_report, (out / "report.json").string());
  return art;
}

inline void cmd_train(const RunConfig& cfg) {
  const TrainArtifacts art = run_training(cfg);
  std::cout << "rounds: " << art.fit.history.size() << " best: " << art.fit.best_round << "\n";
  std::cout << "test WA: " << art.test_report.wa << " UA: " << art.test_report.ua << "\n";
  std::cout << "artifacts in " << cfg.out_dir << "\n";
}

inline CrossvalResult run_crossval(const RunConfig& cfg) {
  const Dataset ds = load_manifest(cfg.manifest);
  CrossvalResult res = crossval(ds, cfg.train, cfg.resample, cfg.jobs);
  const std::filesystem::path out(cfg.out_dir);
  std::filesystem::create_directories(out);
  for (std::size_t k = 0; k < res.folds.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "fold_%02zu.json", k);
    report_serialize(res.folds[k], (out / name).string());
  }
  report_serialize(res.pooled, (out / "pooled.json").string());
  return res;
}

inline void cmd_crossval(const RunConfig& cfg) {
  const CrossvalResult res = run_crossval(cfg);
  std::cout << res.folds.size() << " folds; pooled WA: " << res.pooled.wa
            << " UA: " << res.pooled.ua << "\n";
  std::cout << "reports in " << cfg.out_dir << "\n";
}

inline EvalReport run_eval(const RunConfig& cfg) {
  const ModelParams params = load_checkpoint(cfg.checkpoint);
  Dataset ds = load_manifest(cfg.manifest);
  if (ds.feat_dim() != params.dims.feat || ds.num_classes() != params.dims.classes) {
    throw std::runtime_error("eval: checkpoint dims (D=" + std::to_string(params.dims.feat) +
                             ",C=" + std::to_string(params.dims.classes) +
                             ") do not match dataset (D=" + std::to_string(ds.feat_dim()) +
                             ",C=" + std::to_string(ds.num_classes()) + ")");
  }
  if (!cfg.norm_stats.empty()) {
    ds = apply_normalization(ds, load_norm_stats(cfg.norm_stats));
  }
  EvalReport rep = evaluate_model(params, ds, cfg.train.batch_size);
  std::filesystem::create_directories(cfg.out_dir);
  report_serialize(rep, (std::filesystem::path(cfg.out_dir) / "eval_report.json").string());
  return rep;
}

inline void cmd_eval(const RunConfig& cfg) {
  const EvalReport rep = run_eval(cfg);
  std::cout << "WA: " << rep.wa << " UA: " << rep.ua << "\n";
  std::cout << "report in " << cfg.out_dir << "\n";
}

inline EvalReport run_report(const RunConfig& cfg) {
  const LabelState initial = load_label_state(cfg.initial_snapshot);
  const LabelState final_state = load_label_state(cfg.final_snapshot);
  if (initial.size() != final_state.size() || initial.classes != final_state.classes) {
    throw std::runtime_error("report: snapshot shapes do not match");
  }
  EvalReport rep;
  rep.confusion = ConfusionMatrix(initial.classes);
  rep.label_updates = label_update_matrix(initial, final_state);
  std::vector<std::size_t> reference(initial.size());
  for (std::size_t n = 0; n < initial.size(); ++n) {
    reference[n] = dominant_class(cfg.grouping == "gold" ? initial.logits[n]
                                                         : final_state.logits[n]);
  }
  rep.class_mean_weights = class_mean_weights(final_state, reference);
  rep.grouping = cfg.grouping;
  std::filesystem::create_directories(cfg.out_dir);
  report_serialize(rep, (std::filesystem::path(cfg.out_dir) / "analysis.json").string());
  return rep;
}

inline void cmd_report(const RunConfig& cfg) {
  run_report(cfg);
  std::cout << "analysis in " << cfg.out_dir << "\n";
}

}  // namespace relab
