#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "relab/metrics.hpp"
#include "relab/numerics.hpp"

using namespace relab;

namespace {

// brute-force per-sample tally oracle
struct Tally {
  double wa = 0.0;
  double ua = 0.0;
};

Tally tally_oracle(const std::vector<std::size_t>& golds, const std::vector<std::size_t>& preds,
                   std::size_t classes) {
  Tally t;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] == preds[i]) ++correct;
  }
  t.wa = 100.0 * static_cast<double>(correct) / static_cast<double>(golds.size());
  double recall_sum = 0.0;
  std::size_t populated = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t n = 0, hit = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
      if (golds[i] == c) {
        ++n;
        if (preds[i] == c) ++hit;
      }
    }
    if (n > 0) {
      recall_sum += static_cast<double>(hit) / static_cast<double>(n);
      ++populated;
    }
  }
  t.ua = 100.0 * recall_sum / static_cast<double>(populated);
  return t;
}

}  // namespace

TEST_CASE("confusion matrix construction") {
  const ConfusionMatrix diag = confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (i != j) CHECK(diag.at(i, j) == 0);
    }
  }
  CHECK(diag.total() == 4);

  const ConfusionMatrix empty = confusion({}, {}, 3);
  CHECK(empty.total() == 0);

  CHECK_THROWS_AS(confusion({0, 1}, {0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(confusion({0, 5}, {0, 1}, 2), std::invalid_argument);
}

TEST_CASE("wa and ua hand cases") {
  ConfusionMatrix m(2);
  m.at(0, 0) = 3;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 1;
  CHECK(wa(m) == Catch::Approx(100.0 * 4.0 / 6.0).margin(1e-9));
  CHECK(ua(m) == Catch::Approx(62.5).margin(1e-9));

  ConfusionMatrix perfect(3);
  for (std::size_t c = 0; c < 3; ++c) perfect.at(c, c) = 5;
  CHECK(wa(perfect) == 100.0);
  CHECK(ua(perfect) == 100.0);

  ConfusionMatrix wrong(2);
  wrong.at(0, 1) = 2;
  wrong.at(1, 0) = 2;
  CHECK(wa(wrong) == 0.0);
  CHECK(ua(wrong) == 0.0);

  CHECK_THROWS_AS(wa(ConfusionMatrix(2)), std::invalid_argument);
  CHECK_THROWS_AS(ua(ConfusionMatrix(2)), std::invalid_argument);
}

TEST_CASE("balanced classes make wa equal ua") {
  Rng rng(12);
  std::vector<std::size_t> golds, preds;
  for (std::size_t c = 0; c < 3; ++c) {
    for (int i = 0; i < 20; ++i) {
      golds.push_back(c);
      preds.push_back(rng.below(3));
    }
  }
  const ConfusionMatrix m = confusion(golds, preds, 3);
  CHECK(wa(m) == Catch::Approx(ua(m)).margin(1e-9));
}

TEST_CASE("prf hand case and zero conventions") {
  ConfusionMatrix m(2);
  m.at(0, 0) = 3;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 1;
  const auto p = prf(m);
  CHECK(p[0].precision == Catch::Approx(75.0).margin(1e-9));
  CHECK(p[0].recall == Catch::Approx(75.0).margin(1e-9));
  CHECK(p[0].f1 == Catch::Approx(75.0).margin(1e-9));
  CHECK(p[1].precision == Catch::Approx(50.0).margin(1e-9));
  CHECK(p[1].recall == Catch::Approx(50.0).margin(1e-9));
  CHECK(p[1].f1 == Catch::Approx(50.0).margin(1e-9));

  ConfusionMatrix never_predicted(2);
  never_predicted.at(0, 0) = 2;
  never_predicted.at(1, 0) = 2;
  const auto q = prf(never_predicted);
  CHECK(q[1].precision == 0.0);
  CHECK(q[1].recall == 0.0);
  CHECK(q[1].f1 == 0.0);

  ConfusionMatrix diag(3);
  for (std::size_t c = 0; c < 3; ++c) diag.at(c, c) = 2;
  for (const auto& e : prf(diag)) {
    CHECK(e.precision == 100.0);
    CHECK(e.recall == 100.0);
    CHECK(e.f1 == 100.0);
  }
}

TEST_CASE("metrics agree with brute-force tallies on random instances") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t classes = 2 + rng.below(4);
    const std::size_t n = 5 + rng.below(60);
    std::vector<std::size_t> golds(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      golds[i] = rng.below(classes);
      preds[i] = rng.below(classes);
    }
    // guarantee every class has at least one gold sample
    for (std::size_t c = 0; c < classes && c < n; ++c) golds[c] = c;
    const ConfusionMatrix m = confusion(golds, preds, classes);
    const Tally t = tally_oracle(golds, preds, classes);
    CHECK(wa(m) == Catch::Approx(t.wa).margin(1e-9));
    CHECK(ua(m) == Catch::Approx(t.ua).margin(1e-9));
  }
}

TEST_CASE("metrics are invariant to sample permutation") {
  Rng rng(78);
  std::vector<std::size_t> golds, preds;
  for (int i = 0; i < 50; ++i) {
    golds.push_back(rng.below(3));
    preds.push_back(rng.below(3));
  }
  const ConfusionMatrix before = confusion(golds, preds, 3);
  std::vector<std::size_t> order(golds.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::size_t> g2, p2;
  for (std::size_t i : order) {
    g2.push_back(golds[i]);
    p2.push_back(preds[i]);
  }
  const ConfusionMatrix after = confusion(g2, p2, 3);
  CHECK(before.counts == after.counts);
}

TEST_CASE("label update matrix") {
  LabelState initial;
  initial.classes = 3;
  initial.logits = {{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 1}};
  initial.weights.assign(6, 1.0);

  // identity case
  const std::vector<double> same = label_update_matrix(initial, initial);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(same[i * 3 + j] == (i == j ? 100.0 : 0.0));
    }
  }

  // two flips: one class0 -> class1, one class2 -> class0
  LabelState fin = initial;
  fin.logits[1] = {0, 2, 0};
  fin.logits[4] = {3, 0, 1};
  const std::vector<double> lu = label_update_matrix(initial, fin);
  CHECK(lu[0 * 3 + 0] == Catch::Approx(50.0));
  CHECK(lu[0 * 3 + 1] == Catch::Approx(50.0));
  CHECK(lu[1 * 3 + 1] == Catch::Approx(100.0));
  CHECK(lu[2 * 3 + 0] == Catch::Approx(50.0));
  CHECK(lu[2 * 3 + 2] == Catch::Approx(50.0));
  // rows sum to 100
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 3; ++j) row += lu[i * 3 + j];
    CHECK(row == Catch::Approx(100.0).margin(0.01));
  }
}

TEST_CASE("class mean weights") {
  LabelState s;
  s.classes = 3;
  s.logits = {{1, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  s.weights = {2.0, 4.0, 1.0};
  const auto means = class_mean_weights(s, {0, 0, 1});
  REQUIRE(means[0].has_value());
  CHECK(*means[0] == Catch::Approx(3.0));
  CHECK(*means[1] == Catch::Approx(1.0));
  CHECK(!means[2].has_value());  // empty class -> absent

  s.weights = {1.0, 1.0, 1.0};
  for (const auto& m : class_mean_weights(s, {0, 0, 1})) {
    if (m) CHECK(*m == Catch::Approx(1.0));
  }
}

TEST_CASE("report serialization round-trip") {
  ConfusionMatrix m(2);
  m.at(0, 0) = 3;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 1;
  EvalReport rep = make_report(m);
  rep.label_updates = std::vector<double>{100.0, 0.0, 33.333333, 66.666667};
  rep.class_mean_weights = std::vector<std::optional<double>>{1.25, std::nullopt};
  rep.grouping = "gold";

  const auto path = std::filesystem::temp_directory_path() / "relab_report_test.json";
  report_serialize(rep, path.string());
  const EvalReport back = report_load(path.string());
  CHECK(back.confusion.counts == rep.confusion.counts);
  CHECK(back.wa == Catch::Approx(rep.wa).margin(0.005));
  CHECK(back.ua == Catch::Approx(rep.ua).margin(0.005));
  REQUIRE(back.per_class.size() == 2);
  CHECK(back.per_class[0].f1 == Catch::Approx(rep.per_class[0].f1).margin(0.005));
  REQUIRE(back.label_updates.has_value());
  CHECK((*back.label_updates)[2] == Catch::Approx(33.33).margin(0.005));
  REQUIRE(back.class_mean_weights.has_value());
  CHECK(!(*back.class_mean_weights)[1].has_value());
  CHECK(back.grouping == "gold");

  // optional fields stay absent through a round-trip
  EvalReport bare = make_report(m);
  report_serialize(bare, path.string());
  const EvalReport bare_back = report_load(path.string());
  CHECK(!bare_back.label_updates.has_value());
  CHECK(!bare_back.class_mean_weights.has_value());
  CHECK(!bare_back.grouping.has_value());

  {
    std::ofstream bad(path);
    bad << "{\"wa\": 5}";
  }
  CHECK_THROWS_AS(report_load(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}
