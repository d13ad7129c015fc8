#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "relab/metalearn.hpp"

namespace relab {

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::int64_t> counts;  // row = gold, col = predicted

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t c) : classes(c), counts(c * c, 0) {}

  std::int64_t& at(std::size_t gold, std::size_t pred) { return counts[gold * classes + pred]; }
  std::int64_t at(std::size_t gold, std::size_t pred) const {
    return counts[gold * classes + pred];
  }
  std::int64_t total() const {
    std::int64_t t = 0;
    for (std::int64_t v : counts) t += v;
    return t;
  }
  std::int64_t row_sum(std::size_t r) const {
    std::int64_t t = 0;
    for (std::size_t c = 0; c < classes; ++c) t += at(r, c);
    return t;
  }
  std::int64_t col_sum(std::size_t c) const {
    std::int64_t t = 0;
    for (std::size_t r = 0; r < classes; ++r) t += at(r, c);
    return t;
  }
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& golds,
                                 const std::vector<std::size_t>& preds, std::size_t classes) {
  if (golds.size() != preds.size()) throw std::invalid_argument("confusion: length mismatch");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] >= classes || preds[i] >= classes) {
      throw std::invalid_argument("confusion: class index out of range");
    }
    m.at(golds[i], preds[i]) += 1;
  }
  return m;
}

// Weighted accuracy: overall fraction correct, as a percentage.
inline double wa(const ConfusionMatrix& m) {
  const std::int64_t total = m.total();
  if (total == 0) throw std::invalid_argument("wa: empty confusion matrix");
  std::int64_t trace = 0;
  for (std::size_t c = 0; c < m.classes; ++c) trace += m.at(c, c);
  return 100.0 * static_cast<double>(trace) / static_cast<double>(total);
}

// Unweighted accuracy: macro mean of per-class recall, as a percentage.
// Classes with no gold samples are excluded from the mean.
inline double ua(const ConfusionMatrix& m) {
  double sum = 0.0;
  std::size_t populated = 0;
  for (std::size_t c = 0; c < m.classes; ++c) {
    const std::int64_t n = m.row_sum(c);
    if (n == 0) continue;
    sum += static_cast<double>(m.at(c, c)) / static_cast<double>(n);
    ++populated;
  }
  if (populated == 0) throw std::invalid_argument("ua: no class has samples");
  return 100.0 * sum / static_cast<double>(populated);
}

struct ClassPRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Per-class precision/recall/F1 as percentages; 0/0 cases are 0.
inline std::vector<ClassPRF> prf(const ConfusionMatrix& m) {
  std::vector<ClassPRF> out(m.classes);
  for (std::size_t c = 0; c < m.classes; ++c) {
    const double tp = static_cast<double>(m.at(c, c));
    const double col = static_cast<double>(m.col_sum(c));
    const double row = static_cast<double>(m.row_sum(c));
    const double p = col > 0.0 ? tp / col : 0.0;
    const double r = row > 0.0 ? tp / row : 0.0;
    out[c].precision = 100.0 * p;
    out[c].recall = 100.0 * r;
    out[c].f1 = (p + r) > 0.0 ? 100.0 * 2.0 * p * r / (p + r) : 0.0;
  }
  return out;
}

// Entry (i,j): of the samples whose initial dominant label was i, the
// percentage whose final dominant label is j. Empty rows stay all-zero.
inline std::vector<double> label_update_matrix(const LabelState& initial,
                                               const LabelState& final_state) {
  if (initial.size() != final_state.size() || initial.classes != final_state.classes) {
    throw std::invalid_argument("label_update_matrix: state mismatch");
  }
  const std::size_t c = initial.classes;
  std::vector<double> counts(c * c, 0.0);
  std::vector<double> row_totals(c, 0.0);
  for (std::size_t n = 0; n < initial.size(); ++n) {
    const std::size_t i = dominant_class(initial.logits[n]);
    const std::size_t j = dominant_class(final_state.logits[n]);
    counts[i * c + j] += 1.0;
    row_totals[i] += 1.0;
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (row_totals[i] == 0.0) continue;
    for (std::size_t j = 0; j < c; ++j) counts[i * c + j] *= 100.0 / row_totals[i];
  }
  return counts;
}

// Mean contribution weight per reference class; absent when a class is empty.
inline std::vector<std::optional<double>> class_mean_weights(
    const LabelState& state, const std::vector<std::size_t>& reference_labels) {
  if (reference_labels.size() != state.size()) {
    throw std::invalid_argument("class_mean_weights: label/state size mismatch");
  }
  std::vector<double> sums(state.classes, 0.0);
  std::vector<std::size_t> counts(state.classes, 0);
  for (std::size_t n = 0; n < state.size(); ++n) {
    const std::size_t c = reference_labels[n];
    if (c >= state.classes) throw std::invalid_argument("class_mean_weights: label out of range");
    sums[c] += state.weights[n];
    counts[c] += 1;
  }
  std::vector<std::optional<double>> out(state.classes);
  for (std::size_t c = 0; c < state.classes; ++c) {
    if (counts[c] > 0) out[c] = sums[c] / static_cast<double>(counts[c]);
  }
  return out;
}

struct EvalReport {
  ConfusionMatrix confusion;
  double wa = 0.0;
  double ua = 0.0;
  std::vector<ClassPRF> per_class;
  std::optional<std::vector<double>> label_updates;  // C x C percentages
  std::optional<std::vector<std::optional<double>>> class_mean_weights;
  std::optional<std::string> grouping;  // "gold" or "dominant"
};

inline EvalReport make_report(const ConfusionMatrix& conf) {
  EvalReport r;
  r.confusion = conf;
  r.wa = wa(conf);
  r.ua = ua(conf);
  r.per_class = prf(conf);
  return r;
}

namespace detail {
inline double round2(double v) { return std::round(v * 100.0) / 100.0; }
}  // namespace detail

// JSON report with percentages at 2 decimals. Optional sections are omitted
// when absent.
inline void report_serialize(const EvalReport& report, const std::string& path) {
  nlohmann::ordered_json j;
  const std::size_t c = report.confusion.classes;
  std::vector<std::vector<std::int64_t>> conf(c, std::vector<std::int64_t>(c));
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < c; ++k) conf[i][k] = report.confusion.at(i, k);
  }
  j["confusion"] = conf;
  j["wa"] = detail::round2(report.wa);
  j["ua"] = detail::round2(report.ua);
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  for (const auto& p : report.per_class) {
    per_class.push_back({{"precision", detail::round2(p.precision)},
                         {"recall", detail::round2(p.recall)},
                         {"f1", detail::round2(p.f1)}});
  }
  j["per_class"] = per_class;
  if (report.label_updates) {
    std::vector<std::vector<double>> lu(c, std::vector<double>(c));
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        lu[i][k] = detail::round2((*report.label_updates)[i * c + k]);
      }
    }
    j["label_updates"] = lu;
  }
  if (report.class_mean_weights) {
    nlohmann::ordered_json w = nlohmann::ordered_json::array();
    for (const auto& v : *report.class_mean_weights) {
      if (v) {
        w.push_back(detail::round2(*v));
      } else {
        w.push_back(nullptr);
      }
    }
    j["class_mean_weights"] = w;
  }
  if (report.grouping) j["grouping"] = *report.grouping;

  std::ofstream out(path);
  if (!out) throw std::runtime_error("report_serialize: cannot open " + path);
  out << j.dump(2) << "\n";
}

inline EvalReport report_load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("report_load: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("report_load: malformed JSON in " + path + ": " + e.what());
  }
  if (!j.contains("confusion") || !j.contains("wa") || !j.contains("ua") ||
      !j.contains("per_class")) {
    throw std::runtime_error("report_load: missing required keys in " + path);
  }
  EvalReport r;
  const auto& conf = j["confusion"];
  const std::size_t c = conf.size();
  r.confusion = ConfusionMatrix(c);
  for (std::size_t i = 0; i < c; ++i) {
    if (conf[i].size() != c) throw std::runtime_error("report_load: ragged confusion matrix");
    for (std::size_t k = 0; k < c; ++k) r.confusion.at(i, k) = conf[i][k].get<std::int64_t>();
  }
  r.wa = j["wa"].get<double>();
  r.ua = j["ua"].get<double>();
  for (const auto& p : j["per_class"]) {
    r.per_class.push_back(
        {p.at("precision").get<double>(), p.at("recall").get<double>(), p.at("f1").get<double>()});
  }
  if (j.contains("label_updates")) {
    std::vector<double> lu;
    for (const auto& row : j["label_updates"]) {
      for (const auto& v : row) lu.push_back(v.get<double>());
    }
    r.label_updates = std::move(lu);
  }
  if (j.contains("class_mean_weights")) {
    std::vector<std::optional<double>> w;
    for (const auto& v : j["class_mean_weights"]) {
      if (v.is_null()) {
        w.emplace_back(std::nullopt);
      } else {
        w.emplace_back(v.get<double>());
      }
    }
    r.class_mean_weights = std::move(w);
  }
  if (j.contains("grouping")) r.grouping = j["grouping"].get<std::string>();
  return r;
}

}  // namespace relab
