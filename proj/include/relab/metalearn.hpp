#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relab/numerics.hpp"

namespace relab {

inline constexpr double kEpsilonW = 1e-3;   // weight floor before renormalization
inline constexpr double kLogFloor = 1e-12;  // clamp on y inside the loss

// Per-sample learnable pair: label logits l_n and contribution weight w_n.
struct LabelState {
  std::size_t classes = 0;
  std::vector<std::vector<double>> logits;  // N x C
  std::vector<double> weights;              // N

  std::size_t size() const { return weights.size(); }
};

// Argmax with ties broken toward the lowest index.
inline std::size_t dominant_class(std::span<const double> l) {
  if (l.empty()) throw std::invalid_argument("dominant_class: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < l.size(); ++i) {
    if (l[i] > l[best]) best = i;
  }
  return best;
}

inline std::size_t dominant_class(const std::vector<double>& l) {
  return dominant_class(std::span<const double>(l));
}

inline std::vector<double> soft_labels(std::span<const double> l) { return softmax(l); }

inline std::vector<double> soft_labels(const std::vector<double>& l) {
  return softmax(std::span<const double>(l));
}

// One-hot logit init plus class-proportional weights:
// w_n = count(class of n) * N / sum_c count_c^2, so mean(w) = 1 exactly.
inline LabelState init_label_state(const std::vector<std::size_t>& gold_labels,
                                   std::size_t num_classes) {
  const std::size_t n = gold_labels.size();
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t g : gold_labels) {
    if (g >= num_classes) throw std::invalid_argument("init_label_state: label out of range");
    counts[g] += 1;
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) {
      throw std::invalid_argument("init_label_state: class " + std::to_string(c) +
                                  " has no samples");
    }
  }
  double denom = 0.0;  // sum over samples of their class count, divided by N
  for (std::size_t c = 0; c < num_classes; ++c) {
    denom += static_cast<double>(counts[c]) * static_cast<double>(counts[c]);
  }
  denom /= static_cast<double>(n);

  LabelState state;
  state.classes = num_classes;
  state.logits.resize(n);
  state.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    state.logits[i].assign(num_classes, 0.0);
    state.logits[i][gold_labels[i]] = 1.0;
    state.weights[i] = static_cast<double>(counts[gold_labels[i]]) / denom;
  }
  return state;
}

// Weighted cross-entropy of the corrected label distribution:
// -(sum_c s_c log y_c) / w with s = softmax(l).
inline double sample_loss(std::span<const double> y, std::span<const double> l, double w) {
  if (y.size() != l.size()) throw std::invalid_argument("sample_loss: y/l length mismatch");
  if (w < kEpsilonW) throw std::invalid_argument("sample_loss: w below epsilon_w");
  const std::vector<double> s = soft_labels(l);
  double ce = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c) {
    ce -= s[c] * std::log(std::max(y[c], kLogFloor));
  }
  return ce / w;
}

inline double sample_loss(const std::vector<double>& y, const std::vector<double>& l, double w) {
  return sample_loss(std::span<const double>(y), std::span<const double>(l), w);
}

struct MetaGrads {
  std::vector<double> dl;
  double dw = 0.0;
};

// Analytic gradients of sample_loss w.r.t. l and w:
//   dl_k = -(1/w) * s_k * (log y_k - sum_c s_c log y_c)
//   dw   = (sum_c s_c log y_c) / w^2
// Gradient descent on w therefore raises w for high-loss samples.
inline MetaGrads meta_grads(std::span<const double> y, std::span<const double> l, double w) {
  if (y.size() != l.size()) throw std::invalid_argument("meta_grads: y/l length mismatch");
  if (w < kEpsilonW) throw std::invalid_argument("meta_grads: w below epsilon_w");
  const std::vector<double> s = soft_labels(l);
  const std::size_t n = y.size();
  std::vector<double> logy(n);
  double mean_logy = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    logy[c] = std::log(std::max(y[c], kLogFloor));
    mean_logy += s[c] * logy[c];
  }
  MetaGrads out;
  out.dl.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    out.dl[k] = -(1.0 / w) * s[k] * (logy[k] - mean_logy);
  }
  out.dw = mean_logy / (w * w);
  return out;
}

inline MetaGrads meta_grads(const std::vector<double>& y, const std::vector<double>& l, double w) {
  return meta_grads(std::span<const double>(y), std::span<const double>(l), w);
}

// Clamp every weight to >= epsilon_w, then scale so the mean is exactly 1.
// A scale below 1 may push clamped weights back under the floor, so iterate
// clamp-and-scale to its fixed point; the loop ends on a pure scale, which
// keeps the mean at exactly 1 with every weight at or above the floor.
inline void renormalize_weights(LabelState& state, double epsilon_w = kEpsilonW) {
  for (double w : state.weights) {
    if (!std::isfinite(w)) throw std::runtime_error("renormalize_weights: non-finite weight");
  }
  for (int iter = 0; iter < 10000; ++iter) {
    double sum = 0.0;
    for (double& w : state.weights) {
      w = std::max(w, epsilon_w);
      sum += w;
    }
    if (!std::isfinite(sum) || sum <= 0.0) {
      throw std::runtime_error("renormalize_weights: non-finite weight sum");
    }
    const double scale = static_cast<double>(state.size()) / sum;
    bool floored = false;
    for (double& w : state.weights) {
      w *= scale;
      floored = floored || w < epsilon_w;
    }
    if (!floored) return;
  }
  throw std::runtime_error("renormalize_weights: did not converge");
}

// ---------------------------------------------------------------------------
// Snapshot file: text header "RLS <C> <N>", then per sample a record of
// (1 + C + 1) little-endian 32-bit floats: sample index, logits, weight.
// ---------------------------------------------------------------------------

inline void save_label_state(const LabelState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_label_state: cannot open " + path);
  out << "RLS " << state.classes << " " << state.size() << "\n";
  for (std::size_t i = 0; i < state.size(); ++i) {
    std::vector<float> rec;
    rec.reserve(state.classes + 2);
    rec.push_back(static_cast<float>(i));
    for (double v : state.logits[i]) rec.push_back(static_cast<float>(v));
    rec.push_back(static_cast<float>(state.weights[i]));
    out.write(reinterpret_cast<const char*>(rec.data()),
              static_cast<std::streamsize>(rec.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("save_label_state: write failed for " + path);
}

inline LabelState load_label_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_label_state: cannot open " + path);
  std::string magic;
  std::size_t classes = 0, n = 0;
  in >> magic >> classes >> n;
  if (magic != "RLS" || classes == 0) {
    throw std::runtime_error("load_label_state: malformed header in " + path);
  }
  in.ignore(1);  // newline
  LabelState state;
  state.classes = classes;
  state.logits.resize(n);
  state.weights.resize(n);
  std::vector<float> rec(classes + 2);
  for (std::size_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()),
            static_cast<std::streamsize>(rec.size() * sizeof(float)));
    if (!in) throw std::runtime_error("load_label_state: truncated file " + path);
    state.logits[i].assign(rec.begin() + 1, rec.begin() + 1 + static_cast<long>(classes));
    state.weights[i] = rec[classes + 1];
  }
  return state;
}

}  // namespace relab
