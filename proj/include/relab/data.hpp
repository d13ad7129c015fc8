#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "relab/model.hpp"
#include "relab/numerics.hpp"

namespace relab {

struct Utterance {
  std::string id;
  std::string speaker;
  std::size_t gold_label = 0;
  Matrix features;  // T x D
  std::optional<std::size_t> true_label;  // synthetic data only
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Utterance> utterances;
  std::optional<NormStats> norm;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t size() const { return utterances.size(); }
  std::size_t feat_dim() const {
    return utterances.empty() ? 0 : utterances.front().features.cols;
  }
  std::vector<std::size_t> gold_labels() const {
    std::vector<std::size_t> out;
    out.reserve(utterances.size());
    for (const auto& u : utterances) out.push_back(u.gold_label);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Feature files: CSV (D comma-separated floats per frame line) or binary
// (".bin": u32 T, u32 D, then T*D little-endian 32-bit floats).
// ---------------------------------------------------------------------------

inline Matrix load_features(const std::filesystem::path& path) {
  if (path.extension() == ".bin") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_features: cannot open " + path.string());
    std::uint32_t t = 0, d = 0;
    in.read(reinterpret_cast<char*>(&t), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    if (!in) throw std::runtime_error("load_features: truncated header in " + path.string());
    Matrix m(t, d);
    std::vector<float> buf(static_cast<std::size_t>(t) * d);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error("load_features: truncated data in " + path.string());
    std::copy(buf.begin(), buf.end(), m.data.begin());
    return m;
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_features: cannot open " + path.string());
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++n;
    }
    if (cols == 0) {
      cols = n;
    } else if (n != cols) {
      throw std::runtime_error("load_features: ragged rows in " + path.string());
    }
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

inline void save_features(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_features: cannot open " + path.string());
  char buf[64];
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.9g", m.at(r, c));
      out << (c ? "," : "") << buf;
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Manifest: header "#classes: a,b,c" then per utterance
// "<id>\t<speaker>\t<label>\t<feature path>[\t<true_label>]".
// ---------------------------------------------------------------------------

inline Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("#classes:", 0) != 0) {
    throw std::runtime_error("load_manifest: missing #classes header in " + path.string());
  }
  Dataset ds;
  {
    std::stringstream ss(line.substr(9));
    std::string name;
    while (std::getline(ss, name, ',')) {
      while (!name.empty() && name.front() == ' ') name.erase(name.begin());
      if (!name.empty()) ds.class_names.push_back(name);
    }
  }
  const std::filesystem::path base = path.parent_path();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4 && fields.size() != 5) {
      throw std::runtime_error("load_manifest: malformed row: " + line);
    }
    Utterance u;
    u.id = fields[0];
    u.speaker = fields[1];
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), fields[2]);
    if (it == ds.class_names.end()) {
      throw std::runtime_error("load_manifest: unknown label '" + fields[2] + "' for id " + u.id);
    }
    u.gold_label = static_cast<std::size_t>(it - ds.class_names.begin());
    const std::filesystem::path fpath = base / fields[3];
    if (!std::filesystem::exists(fpath)) {
      throw std::runtime_error("load_manifest: missing feature file for id " + u.id + ": " +
                               fpath.string());
    }
    u.features = load_features(fpath);
    if (u.features.rows == 0) {
      throw std::runtime_error("load_manifest: empty feature file for id " + u.id);
    }
    if (fields.size() == 5) {
      auto tit = std::find(ds.class_names.begin(), ds.class_names.end(), fields[4]);
      if (tit == ds.class_names.end()) {
        throw std::runtime_error("load_manifest: unknown true label '" + fields[4] + "' for id " +
                                 u.id);
      }
      u.true_label = static_cast<std::size_t>(tit - ds.class_names.begin());
    }
    if (!ds.utterances.empty() && u.features.cols != ds.feat_dim()) {
      throw std::runtime_error("load_manifest: inconsistent feature dimension for id " + u.id);
    }
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

// Writes the manifest plus one feature CSV per utterance under
// <dir>/features/.
inline void save_manifest(const Dataset& ds, const std::filesystem::path& manifest_path) {
  const std::filesystem::path base = manifest_path.parent_path();
  std::filesystem::create_directories(base / "features");
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + manifest_path.string());
  out << "#classes: ";
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    out << (c ? "," : "") << ds.class_names[c];
  }
  out << "\n";
  for (const auto& u : ds.utterances) {
    const std::string rel = "features/" + u.id + ".csv";
    save_features(u.features, base / rel);
    out << u.id << "\t" << u.speaker << "\t" << ds.class_names[u.gold_label] << "\t" << rel;
    if (u.true_label) out << "\t" << ds.class_names[*u.true_label];
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Normalization: stats pooled over all frames of the training set.
// ---------------------------------------------------------------------------

inline NormStats fit_normalization(const Dataset& train) {
  const std::size_t d = train.feat_dim();
  if (d == 0) throw std::invalid_argument("fit_normalization: empty dataset");
  NormStats stats;
  stats.mean.assign(d, 0.0);
  stats.std.assign(d, 0.0);
  std::size_t frames = 0;
  for (const auto& u : train.utterances) {
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      const auto row = u.features.row(t);
      for (std::size_t j = 0; j < d; ++j) stats.mean[j] += row[j];
    }
    frames += u.features.rows;
  }
  if (frames == 0) throw std::invalid_argument("fit_normalization: no frames");
  for (std::size_t j = 0; j < d; ++j) stats.mean[j] /= static_cast<double>(frames);
  for (const auto& u : train.utterances) {
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      const auto row = u.features.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        const double dev = row[j] - stats.mean[j];
        stats.std[j] += dev * dev;
      }
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    stats.std[j] = std::max(std::sqrt(stats.std[j] / static_cast<double>(frames)), 1e-8);
  }
  return stats;
}

inline Dataset apply_normalization(const Dataset& ds, const NormStats& stats) {
  if (!ds.utterances.empty() && ds.feat_dim() != stats.mean.size()) {
    throw std::invalid_argument("apply_normalization: dimension mismatch");
  }
  Dataset out = ds;
  for (auto& u : out.utterances) {
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      auto row = u.features.row(t);
      for (std::size_t j = 0; j < row.size(); ++j) {
        row[j] = (row[j] - stats.mean[j]) / stats.std[j];
      }
    }
  }
  out.norm = stats;
  return out;
}

// ---------------------------------------------------------------------------
// Folds and splits
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Leave-one-speaker-out folds, ordered by first appearance of the speaker.
inline std::vector<Fold> make_speaker_folds(const Dataset& ds) {
  std::vector<std::string> speakers;
  for (const auto& u : ds.utterances) {
    if (std::find(speakers.begin(), speakers.end(), u.speaker) == speakers.end()) {
      speakers.push_back(u.speaker);
    }
  }
  if (speakers.size() < 2) {
    throw std::invalid_argument("make_speaker_folds: need at least two speakers");
  }
  std::vector<Fold> folds(speakers.size());
  for (std::size_t k = 0; k < speakers.size(); ++k) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      (ds.utterances[i].speaker == speakers[k] ? folds[k].test : folds[k].train).push_back(i);
    }
  }
  return folds;
}

// Stratified holdout: per class, round(fraction * count) samples (>= 1 when
// the class has >= 2 members) move to the holdout side.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const Dataset& ds, double fraction, Rng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.utterances[i].gold_label].push_back(i);
  std::vector<std::size_t> keep, hold;
  for (auto& [cls, idx] : by_class) {
    rng.shuffle(idx);
    std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (k == 0 && idx.size() >= 2 && fraction > 0.0) k = 1;
    if (k >= idx.size()) k = idx.size() - 1;
    for (std::size_t i = 0; i < idx.size(); ++i) (i < k ? hold : keep).push_back(idx[i]);
  }
  std::sort(keep.begin(), keep.end());
  std::sort(hold.begin(), hold.end());
  return {keep, hold};
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.class_names = ds.class_names;
  out.norm = ds.norm;
  out.utterances.reserve(indices.size());
  for (std::size_t i : indices) out.utterances.push_back(ds.utterances[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Class-imbalance baselines
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.utterances[i].gold_label].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) {
      throw std::invalid_argument("resample: class " + std::to_string(c) + " is empty");
    }
  }
  return by_class;
}

// Duplicate minority-class samples (with replacement) until every class has
// the majority count. Duplicates keep the original features; ids get a
// "#dupN" suffix.
inline Dataset oversample(const Dataset& ds, Rng& rng) {
  const auto by_class = indices_by_class(ds);
  std::size_t max_count = 0;
  for (const auto& v : by_class) max_count = std::max(max_count, v.size());
  Dataset out = ds;
  std::size_t dup = 0;
  for (const auto& v : by_class) {
    for (std::size_t k = v.size(); k < max_count; ++k) {
      Utterance copy = ds.utterances[v[rng.below(v.size())]];
      copy.id += "#dup" + std::to_string(dup++);
      out.utterances.push_back(std::move(copy));
    }
  }
  return out;
}

// Subsample majority classes (without replacement) down to the minority
// count; original dataset order is preserved.
inline Dataset undersample(const Dataset& ds, Rng& rng) {
  const auto by_class = indices_by_class(ds);
  std::size_t min_count = ds.size();
  for (const auto& v : by_class) min_count = std::min(min_count, v.size());
  std::vector<std::size_t> chosen;
  for (auto v : by_class) {
    rng.shuffle(v);
    v.resize(min_count);
    chosen.insert(chosen.end(), v.begin(), v.end());
  }
  std::sort(chosen.begin(), chosen.end());
  return subset(ds, chosen);
}

// ---------------------------------------------------------------------------
// Synthetic data: per-class Gaussian frame distributions with optional label
// flips; the hidden true label is recorded.
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::size_t num_classes = 4;
  std::size_t num_samples = 100;
  std::size_t frames_min = 5;
  std::size_t frames_max = 15;
  std::size_t feat_dim = 10;
  double class_sep = 2.0;     // distance of each class mean from the origin
  double class_std = 1.0;     // within-class per-dimension std
  double flip_rate = 0.0;
  std::vector<double> proportions;  // empty = uniform
  std::size_t num_speakers = 4;
  std::uint64_t seed = 0;
};

inline Dataset gen_synthetic(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("gen_synthetic: need >= 2 classes");
  if (spec.frames_min < 1 || spec.frames_max < spec.frames_min) {
    throw std::invalid_argument("gen_synthetic: bad frame range");
  }
  if (spec.flip_rate < 0.0 || spec.flip_rate > 1.0) {
    throw std::invalid_argument("gen_synthetic: flip_rate out of range");
  }
  std::vector<double> props = spec.proportions;
  if (props.empty()) {
    props.assign(spec.num_classes, 1.0 / static_cast<double>(spec.num_classes));
  }
  if (props.size() != spec.num_classes) {
    throw std::invalid_argument("gen_synthetic: proportions length mismatch");
  }
  double psum = 0.0;
  for (double p : props) psum += p;
  if (std::abs(psum - 1.0) > 1e-9) {
    throw std::invalid_argument("gen_synthetic: proportions must sum to 1");
  }

  Rng rng(spec.seed);
  Rng mean_rng = rng.split("class-means");
  Rng frame_rng = rng.split("frames");
  Rng label_rng = rng.split("labels");

  // Class means: class_sep times a random unit direction.
  std::vector<std::vector<double>> means(spec.num_classes);
  for (auto& mu : means) {
    mu = mean_rng.normal_vec(spec.feat_dim);
    double norm = std::sqrt(detail::dot(mu, mu));
    if (norm < 1e-12) norm = 1.0;
    for (double& v : mu) v *= spec.class_sep / norm;
  }

  Dataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    ds.class_names.push_back("class" + std::to_string(c));
  }
  char idbuf[32];
  for (std::size_t n = 0; n < spec.num_samples; ++n) {
    Utterance u;
    std::snprintf(idbuf, sizeof(idbuf), "synth-%05zu", n);
    u.id = idbuf;
    u.speaker = "spk" + std::to_string(n % std::max<std::size_t>(spec.num_speakers, 1));
    // True class from the class proportions.
    double r = label_rng.uniform();
    std::size_t cls = spec.num_classes - 1;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      if (r < props[c]) {
        cls = c;
        break;
      }
      r -= props[c];
    }
    u.true_label = cls;
    const std::size_t frames =
        spec.frames_min + label_rng.below(spec.frames_max - spec.frames_min + 1);
    u.features = Matrix(frames, spec.feat_dim);
    for (std::size_t t = 0; t < frames; ++t) {
      auto row = u.features.row(t);
      for (std::size_t j = 0; j < spec.feat_dim; ++j) {
        row[j] = means[cls][j] + frame_rng.normal(0.0, spec.class_std);
      }
    }
    u.gold_label = cls;
    if (spec.flip_rate > 0.0 && label_rng.uniform() < spec.flip_rate) {
      const std::size_t shift = 1 + label_rng.below(spec.num_classes - 1);
      u.gold_label = (cls + shift) % spec.num_classes;
    }
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Batch batch;
  batch.size = indices.size();
  batch.feat = ds.feat_dim();
  batch.sample_indices = indices;
  batch.lengths.reserve(indices.size());
  for (std::size_t i : indices) {
    batch.lengths.push_back(ds.utterances[i].features.rows);
    batch.t_max = std::max(batch.t_max, ds.utterances[i].features.rows);
  }
  batch.features.assign(batch.size * batch.t_max * batch.feat, 0.0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const Matrix& f = ds.utterances[indices[b]].features;
    for (std::size_t t = 0; t < f.rows; ++t) {
      const auto row = f.row(t);
      std::copy(row.begin(), row.end(), batch.frame(b, t).begin());
    }
  }
  return batch;
}

// One epoch's batches; covers every utterance exactly once.
inline std::vector<Batch> batch_iter(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                     Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    batches.push_back(
        make_batch(ds, std::vector<std::size_t>(order.begin() + static_cast<long>(start),
                                                order.begin() + static_cast<long>(end))));
  }
  return batches;
}

}  // namespace relab
