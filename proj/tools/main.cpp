// relab: trains an attention-pooled BLSTM sequence classifier that jointly
// learns per-sample corrected label distributions and contribution weights.

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "relab/commands.hpp"

namespace {

struct FlagOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  std::optional<std::string> manifest;
  std::optional<std::string> test_manifest;
  std::optional<std::string> checkpoint;
  std::optional<std::string> norm_stats;
  std::optional<std::string> learn_labels;
  std::optional<std::string> learn_weights;
  std::optional<std::size_t> pretrain_epochs;
  std::optional<std::string> resample;
  std::optional<double> lr;
  std::optional<double> lr_meta;
  std::optional<std::size_t> patience;
  std::optional<std::size_t> max_epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> dropout;
  std::optional<std::size_t> dense_units;
  std::optional<std::size_t> hidden_units;
  std::optional<double> val_fraction;
  std::optional<double> test_fraction;
  // gen-synth
  std::optional<std::size_t> num_classes;
  std::optional<std::size_t> num_samples;
  std::optional<std::size_t> frames_min;
  std::optional<std::size_t> frames_max;
  std::optional<std::size_t> feat_dim;
  std::optional<double> class_sep;
  std::optional<double> class_std;
  std::optional<double> flip_rate;
  std::optional<std::size_t> num_speakers;
  std::optional<std::vector<double>> proportions;
  // report
  std::optional<std::string> initial_snapshot;
  std::optional<std::string> final_snapshot;
  std::optional<std::string> grouping;
};

void add_common_flags(CLI::App* cmd, std::string& config_path, FlagOverrides& f) {
  cmd->add_option("--config", config_path, "JSON config file");
  cmd->add_option("--seed", f.seed, "master random seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--jobs", f.jobs, "parallel fold workers (crossval)");
}

void add_train_flags(CLI::App* cmd, FlagOverrides& f) {
  cmd->add_option("--manifest", f.manifest, "dataset manifest");
  cmd->add_option("--test-manifest", f.test_manifest, "fixed test manifest");
  cmd->add_option("--test-fraction", f.test_fraction, "stratified test holdout fraction");
  cmd->add_option("--learn-labels", f.learn_labels, "on|off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--learn-weights", f.learn_weights, "on|off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--pretrain-epochs", f.pretrain_epochs, "theta-only pretraining epochs");
  cmd->add_option("--resample", f.resample, "none|oversample|undersample")
      ->check(CLI::IsMember({"none", "oversample", "undersample"}));
  cmd->add_option("--lr", f.lr, "Adam learning rate for theta");
  cmd->add_option("--lr-meta", f.lr_meta, "learning rate for (L, w)");
  cmd->add_option("--patience", f.patience, "early-stopping patience in rounds");
  cmd->add_option("--max-epochs", f.max_epochs, "maximum alternation rounds");
  cmd->add_option("--batch-size", f.batch_size, "mini-batch size");
  cmd->add_option("--dropout", f.dropout, "dropout rate");
  cmd->add_option("--dense-units", f.dense_units, "ReLU layer width");
  cmd->add_option("--hidden-units", f.hidden_units, "LSTM units per direction");
  cmd->add_option("--val-fraction", f.val_fraction, "validation holdout fraction");
}

relab::RunConfig build_config(const std::string& config_path, const FlagOverrides& f) {
  relab::RunConfig cfg = relab::load_run_config(config_path);
  nlohmann::json j;
  if (f.seed) j["seed"] = *f.seed;
  if (f.out) j["out"] = *f.out;
  if (f.jobs) j["jobs"] = *f.jobs;
  if (f.manifest) j["manifest"] = *f.manifest;
  if (f.test_manifest) j["test_manifest"] = *f.test_manifest;
  if (f.test_fraction) j["test_fraction"] = *f.test_fraction;
  if (f.checkpoint) j["checkpoint"] = *f.checkpoint;
  if (f.norm_stats) j["norm_stats"] = *f.norm_stats;
  if (f.learn_labels) j["learn_labels"] = *f.learn_labels;
  if (f.learn_weights) j["learn_weights"] = *f.learn_weights;
  if (f.pretrain_epochs) j["pretrain_epochs"] = *f.pretrain_epochs;
  if (f.resample) j["resample"] = *f.resample;
  if (f.lr) j["lr"] = *f.lr;
  if (f.lr_meta) j["lr_meta"] = *f.lr_meta;
  if (f.patience) j["patience"] = *f.patience;
  if (f.max_epochs) j["max_epochs"] = *f.max_epochs;
  if (f.batch_size) j["batch_size"] = *f.batch_size;
  if (f.dropout) j["dropout"] = *f.dropout;
  if (f.dense_units) j["dense_units"] = *f.dense_units;
  if (f.hidden_units) j["hidden_units"] = *f.hidden_units;
  if (f.val_fraction) j["val_fraction"] = *f.val_fraction;
  if (f.num_classes) j["num_classes"] = *f.num_classes;
  if (f.num_samples) j["num_samples"] = *f.num_samples;
  if (f.frames_min) j["frames_min"] = *f.frames_min;
  if (f.frames_max) j["frames_max"] = *f.frames_max;
  if (f.feat_dim) j["feat_dim"] = *f.feat_dim;
  if (f.class_sep) j["class_sep"] = *f.class_sep;
  if (f.class_std) j["class_std"] = *f.class_std;
  if (f.flip_rate) j["flip_rate"] = *f.flip_rate;
  if (f.num_speakers) j["num_speakers"] = *f.num_speakers;
  if (f.proportions) j["proportions"] = *f.proportions;
  if (f.initial_snapshot) j["initial_snapshot"] = *f.initial_snapshot;
  if (f.final_snapshot) j["final_snapshot"] = *f.final_snapshot;
  if (f.grouping) j["grouping"] = *f.grouping;
  relab::apply_config_json(cfg, j);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relab: BLSTM-attention classifier with learned label correction and "
               "sample reweighting"};
  app.require_subcommand(1);

  std::string config_path;
  FlagOverrides f;

  CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic noisy-label dataset");
  add_common_flags(gen, config_path, f);
  gen->add_option("--num-classes", f.num_classes, "number of classes");
  gen->add_option("--num-samples", f.num_samples, "number of utterances");
  gen->add_option("--frames-min", f.frames_min, "minimum frames per utterance");
  gen->add_option("--frames-max", f.frames_max, "maximum frames per utterance");
  gen->add_option("--feat-dim", f.feat_dim, "feature dimension");
  gen->add_option("--class-sep", f.class_sep, "class mean separation");
  gen->add_option("--class-std", f.class_std, "within-class std");
  gen->add_option("--flip-rate", f.flip_rate, "label flip probability");
  gen->add_option("--num-speakers", f.num_speakers, "speakers, round-robin");
  gen->add_option("--proportions", f.proportions, "class proportions (sum to 1)");

  CLI::App* train = app.add_subcommand("train", "train on a manifest with a held-out test split");
  add_common_flags(train, config_path, f);
  add_train_flags(train, f);

  CLI::App* cv = app.add_subcommand("crossval", "leave-one-speaker-out cross-validation");
  add_common_flags(cv, config_path, f);
  add_train_flags(cv, f);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common_flags(ev, config_path, f);
  ev->add_option("--manifest", f.manifest, "dataset manifest");
  ev->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  ev->add_option("--norm-stats", f.norm_stats, "normalization stats from training");
  ev->add_option("--batch-size", f.batch_size, "mini-batch size");

  CLI::App* rep = app.add_subcommand("report", "label-update matrix and class mean weights");
  add_common_flags(rep, config_path, f);
  rep->add_option("--initial-snapshot", f.initial_snapshot, "initial label-state snapshot");
  rep->add_option("--final-snapshot", f.final_snapshot, "final label-state snapshot");
  rep->add_option("--grouping", f.grouping, "gold|dominant")
      ->check(CLI::IsMember({"gold", "dominant"}));

  CLI11_PARSE(app, argc, argv);

  try {
    const relab::RunConfig cfg = build_config(config_path, f);
    if (gen->parsed()) {
      relab::cmd_gen_synth(cfg);
    } else if (train->parsed()) {
      relab::cmd_train(cfg);
    } else if (cv->parsed()) {
      relab::cmd_crossval(cfg);
    } else if (ev->parsed()) {
      relab::cmd_eval(cfg);
    } else if (rep->parsed()) {
      relab::cmd_report(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
