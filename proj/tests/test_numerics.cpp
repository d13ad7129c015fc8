#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "relab/numerics.hpp"

using namespace relab;

TEST_CASE("softmax basic cases") {
  const std::vector<double> uniform = softmax(std::vector<double>{0, 0, 0, 0});
  for (double v : uniform) CHECK(v == Catch::Approx(0.25).margin(1e-15));

  const std::vector<double> two = softmax(std::vector<double>{3.7, 3.7});
  CHECK(two[0] == Catch::Approx(0.5).margin(1e-15));

  // hand oracle: exp(0)=1, exp(ln 3)=3 -> [1/4, 3/4]
  const std::vector<double> hand = softmax(std::vector<double>{0.0, std::log(3.0)});
  CHECK(hand[0] == Catch::Approx(0.25).margin(1e-12));
  CHECK(hand[1] == Catch::Approx(0.75).margin(1e-12));

  CHECK_THROWS_AS(softmax(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("softmax sums to one and is shift invariant") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::vector<double> v = rng.normal_vec(n, 0.0, 3.0);
    const std::vector<double> p = softmax(v);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == Catch::Approx(1.0).margin(1e-12));
    std::vector<double> shifted = v;
    for (double& x : shifted) x += 17.25;
    const std::vector<double> q = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
  }
}

TEST_CASE("adam zero gradient is a fixed point from fresh state") {
  std::vector<double> params{1.0, -2.0, 3.0};
  const std::vector<double> before = params;
  AdamState state(params.size());
  adam_step(params, {0.0, 0.0, 0.0}, state, 0.1);
  CHECK(params == before);
  CHECK(state.step == 1);
}

TEST_CASE("adam first step magnitude approaches lr as eps goes to zero") {
  // closed form: mhat/(sqrt(vhat)) = g/|g| at step 1, so |update| = lr.
  std::vector<double> params{0.0, 0.0};
  AdamState state(2);
  const double lr = 0.05;
  adam_step(params, {0.3, -0.7}, state, lr, 0.9, 0.999, 1e-16);
  CHECK(params[0] == Catch::Approx(-lr).epsilon(1e-9));
  CHECK(params[1] == Catch::Approx(lr).epsilon(1e-9));
}

TEST_CASE("adam determinism and shape checks") {
  std::vector<double> a{1.0, 2.0}, b{1.0, 2.0};
  AdamState sa(2), sb(2);
  for (int i = 0; i < 5; ++i) {
    adam_step(a, {0.1, -0.2}, sa, 1e-2);
    adam_step(b, {0.1, -0.2}, sb, 1e-2);
  }
  CHECK(a == b);
  CHECK(sa.step == 5);

  AdamState bad(3);
  CHECK_THROWS_AS(adam_step(a, {0.1, -0.2}, bad, 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(adam_step(a, {0.1}, sa, 1e-2), std::invalid_argument);
}

TEST_CASE("finite differences on known functions") {
  const auto sum = [](const std::vector<double>& p) {
    return std::accumulate(p.begin(), p.end(), 0.0);
  };
  for (double g : finite_diff_grad(sum, {0.3, -1.2, 4.0})) {
    CHECK(g == Catch::Approx(1.0).margin(1e-8));
  }

  const auto sumsq = [](const std::vector<double>& p) {
    double s = 0.0;
    for (double x : p) s += x * x;
    return s;
  };
  const std::vector<double> g = finite_diff_grad(sumsq, {1.0, 2.0});
  CHECK(g[0] == Catch::Approx(2.0).margin(1e-6));
  CHECK(g[1] == Catch::Approx(4.0).margin(1e-6));

  const auto constant = [](const std::vector<double>&) { return 3.5; };
  for (double gc : finite_diff_grad(constant, {1.0, -1.0})) {
    CHECK(std::abs(gc) <= 1e-10);
  }

  const auto bad = [](const std::vector<double>& p) { return std::log(p[0]); };
  CHECK_THROWS_AS(finite_diff_grad(bad, {-1.0}), std::runtime_error);
}

TEST_CASE("rng reproducibility and splitting") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(9);
  Rng s1 = base.split("dropout");
  Rng s2 = base.split("shuffle");
  CHECK(s1.next_u64() != s2.next_u64());
  CHECK(base.split("dropout").next_u64() == base.split("dropout").next_u64());

  Rng z(5);
  const std::vector<double> zeros = z.normal_vec(7, 2.5, 0.0);
  for (double v : zeros) CHECK(v == 2.5);
}

TEST_CASE("rng normal sample statistics") {
  Rng rng(2024);
  const std::size_t n = 100000;
  const std::vector<double> xs = rng.normal_vec(n, 0.0, 1.0);
  double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  CHECK(std::abs(mean) <= 0.02);
  CHECK(std::abs(std::sqrt(var) - 1.0) <= 0.02);
}
