#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "helpers.hpp"
#include "otmkit/otmkit.hpp"

using namespace otmkit;
using otmkit::testing::random_cost;
using otmkit::testing::random_simplex;

namespace {

// Independent oracle: the 2x2 transport polytope is the segment
// P(t) = [[t, a0-t], [b0-t, a1-b0+t]] for t in [max(0, b0-a1), min(a0, b0)];
// the linear objective is minimized at an endpoint.
double oracle_2x2(const Vector& a, const Vector& b, const Matrix& c) {
  double lo = std::max(0.0, b(0) - a(1));
  double hi = std::min(a(0), b(0));
  auto value = [&](double t) {
    return t * c(0, 0) + (a(0) - t) * c(0, 1) + (b(0) - t) * c(1, 0) +
           (a(1) - b(0) + t) * c(1, 1);
  };
  return std::min(value(lo), value(hi));
}

// Independent oracle for general small instances: successive shortest paths
// on the bipartite flow network (Bellman-Ford potentials), a different
// algorithm family than the simplex under test.
double oracle_min_cost_flow(const Vector& a, const Vector& b, const Matrix& c) {
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  std::vector<double> supply(a.data(), a.data() + n);
  std::vector<double> demand(b.data(), b.data() + m);
  Matrix flow = Matrix::Zero(n, m);
  double total = 0.0;

  double remaining = 0.0;
  for (double s : supply) remaining += s;
  while (remaining > 1e-15) {
    // Bellman-Ford over residual graph: nodes 0..n-1 rows, n..n+m-1 cols
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(n + m, inf);
    std::vector<int> prev(n + m, -1);
    for (int i = 0; i < n; ++i)
      if (supply[i] > 1e-15) dist[i] = 0.0;
    for (int pass = 0; pass < n + m + 1; ++pass) {
      bool changed = false;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          if (dist[i] + c(i, j) < dist[n + j] - 1e-15) {
            dist[n + j] = dist[i] + c(i, j);
            prev[n + j] = i;
            changed = true;
          }
          if (flow(i, j) > 1e-15 && dist[n + j] - c(i, j) < dist[i] - 1e-15) {
            dist[i] = dist[n + j] - c(i, j);
            prev[i] = n + j;
            changed = true;
          }
        }
      if (!changed) break;
    }
    int best = -1;
    for (int j = 0; j < m; ++j)
      if (demand[j] > 1e-15 && (best < 0 || dist[n + j] < dist[n + best]))
        best = j;
    REQUIRE(best >= 0);

    // bottleneck along the augmenting path
    double push = demand[best];
    for (int node = n + best; prev[node] != -1;) {
      int p = prev[node];
      if (node >= n) {
        // forward arc p -> node
        node = p;
      } else {
        push = std::min(push, flow(node, p - n));
        node = p;
      }
    }
    {
      int node = n + best;
      int source = node;
      while (prev[source] != -1) source = prev[source];
      push = std::min(push, supply[source]);
    }
    int node = n + best;
    while (prev[node] != -1) {
      int p = prev[node];
      if (node >= n) {
        flow(p, node - n) += push;
      } else {
        flow(node, p - n) -= push;
      }
      node = p;
    }
    supply[node] -= push;
    demand[best] -= push;
    remaining -= push;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) total += flow(i, j) * c(i, j);
  return total;
}

}  // namespace

TEST_CASE("exact_ot solves the stated examples") {
  Vector one = Vector::Ones(1);
  Matrix c1(1, 1);
  c1 << 0.7;
  auto single = ot::exact_ot(one, one, c1);
  CHECK(single.value == 0.7);
  CHECK(single.plan(0, 0) == 1.0);

  Vector half = Vector::Constant(2, 0.5);
  Matrix swap(2, 2);
  swap << 0, 1, 1, 0;
  auto identity = ot::exact_ot(half, half, swap);
  CHECK(identity.value == 0.0);
  CHECK(identity.plan(0, 0) == 0.5);
  CHECK(identity.plan(1, 1) == 0.5);

  // frozen from the endpoint-enumeration oracle below
  Vector a(2), b(2);
  a << 0.3, 0.7;
  b << 0.6, 0.4;
  CHECK(oracle_2x2(a, b, swap) == Catch::Approx(0.3).margin(1e-15));
  CHECK(ot::exact_ot(a, b, swap).value == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("exact_ot rejects malformed problems") {
  Vector a = Vector::Constant(2, 0.5);
  Matrix c(2, 3);
  c.setZero();
  CHECK_THROWS_AS(ot::exact_ot(a, a, c), DimensionMismatch);
  Vector bad(2);
  bad << 0.7, 0.7;
  Matrix c2 = Matrix::Zero(2, 2);
  CHECK_THROWS_AS(ot::exact_ot(bad, a, c2), MarginalNotNormalized);
  c2(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(ot::exact_ot(a, a, c2), NonFiniteCost);
}

TEST_CASE("exact_ot agrees with an independent min-cost-flow oracle") {
  CounterRng rng(71);
  for (int trial = 0; trial < 30; ++trial) {
    int n = 2 + rng.next_int(4);
    int m = 2 + rng.next_int(4);
    Vector a = random_simplex(n, rng);
    Vector b = random_simplex(m, rng);
    Matrix c = random_cost(n, m, rng, 0.0);
    double expected = oracle_min_cost_flow(a, b, c);
    double got = ot::exact_ot(a, b, c).value;
    CHECK(std::abs(got - expected) <= 1e-9);
  }
}

TEST_CASE("exact_ot plans are feasible vertices with bounded values") {
  CounterRng rng(72);
  for (int trial = 0; trial < 25; ++trial) {
    int n = 1 + rng.next_int(5);
    int m = 1 + rng.next_int(5);
    Vector a = random_simplex(n, rng);
    Vector b = random_simplex(m, rng);
    Matrix c = random_cost(n, m, rng);
    auto sol = ot::exact_ot(a, b, c);
    CHECK((sol.plan.rowwise().sum() - a).lpNorm<1>() <= 1e-12);
    CHECK((sol.plan.colwise().sum().transpose() - b).lpNorm<1>() <= 1e-12);
    CHECK(sol.plan.minCoeff() >= 0.0);
    CHECK(sol.value >= c.minCoeff() - 1e-12);
    CHECK(sol.value <= c.maxCoeff() + 1e-12);
    double product = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) product += a(i) * b(j) * c(i, j);
    CHECK(sol.value <= product + 1e-12);
  }
}

TEST_CASE("exact path is deterministic bit for bit") {
  CounterRng rng(73);
  Vector a = random_simplex(4, rng);
  Vector b = random_simplex(4, rng);
  Matrix c = random_cost(4, 4, rng);
  auto s1 = ot::exact_ot(a, b, c);
  auto s2 = ot::exact_ot(a, b, c);
  REQUIRE(std::memcmp(s1.plan.data(), s2.plan.data(),
                      sizeof(double) * 16) == 0);
  REQUIRE(s1.value == s2.value);
}

TEST_CASE("sinkhorn single cell and maximum-entropy limit") {
  Vector one = Vector::Ones(1);
  Matrix c1(1, 1);
  c1 << 0.42;
  auto single = ot::sinkhorn(one, one, c1, 0.5);
  CHECK(single.value == Catch::Approx(0.42).margin(1e-12));  // H(plan) = 0
  CHECK(single.plan(0, 0) == Catch::Approx(1.0).margin(1e-12));

  Vector half = Vector::Constant(2, 0.5);
  Matrix swap(2, 2);
  swap << 0, 1, 1, 0;
  // closed-form limit: the maximum-entropy coupling alpha (x) beta
  auto blurred = ot::sinkhorn(half, half, swap, 1e4);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(blurred.plan(i, j) == Catch::Approx(0.25).margin(1e-4));

  auto sharp = ot::sinkhorn(half, half, swap, 1e-3);
  CHECK(std::abs(sharp.value - 0.0) <= 1e-2);
}

TEST_CASE("sinkhorn reports rather than throws on the iteration cap") {
  CounterRng rng(74);
  Vector a = random_simplex(3, rng);
  Vector b = random_simplex(3, rng);
  Matrix c = random_cost(3, 3, rng);
  ot::SinkhornControl control;
  control.max_iter = 2;
  auto sol = ot::sinkhorn(a, b, c, 1e-3, control);
  CHECK_FALSE(sol.converged);
  CHECK(sol.iterations <= 2);

  Matrix bad = c;
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ot::sinkhorn(a, b, bad, 0.1), NonFiniteCost);
}

TEST_CASE("sinkhorn excludes zero-mass marginal entries") {
  Vector a(3);
  a << 0.5, 0.5, 0.0;
  Vector b(2);
  b << 0.4, 0.6;
  CounterRng rng(75);
  Matrix c = random_cost(3, 2, rng);
  auto sol = ot::sinkhorn(a, b, c, 0.05);
  REQUIRE(sol.converged);
  CHECK(sol.plan.row(2).isZero());
  CHECK(sol.duals->f(2) == 0.0);
  CHECK(sol.duals->row_active[2] == 0);
  CHECK(sol.duals->row_active[0] == 1);
  // mean-zero gauge over active rows
  CHECK(std::abs(sol.duals->f.sum()) <= 1e-9);
  // value reconstructable from the plan
  double h = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      if (sol.plan(i, j) > 0.0)
        h -= sol.plan(i, j) * std::log(sol.plan(i, j));
  double recon = (sol.plan.array() * c.array()).sum() - 0.05 * h;
  CHECK(std::abs(recon - sol.value) <=
        1e-9 * std::max(1.0, std::abs(sol.value)));
}

TEST_CASE("sinkhorn marginal feasibility at the default tolerance") {
  CounterRng rng(76);
  for (int trial = 0; trial < 10; ++trial) {
    int n = 2 + rng.next_int(4);
    int m = 2 + rng.next_int(4);
    Vector a = random_simplex(n, rng);
    Vector b = random_simplex(m, rng);
    Matrix c = random_cost(n, m, rng);
    double eps = (trial % 2 == 0) ? 0.1 : 1e-3;
    auto sol = ot::sinkhorn(a, b, c, eps);
    REQUIRE(sol.converged);
    double violation =
        (sol.plan.rowwise().sum() - a).lpNorm<1>() +
        (sol.plan.colwise().sum().transpose() - b).lpNorm<1>();
    CHECK(violation <= 1e-7);
  }
}

TEST_CASE("optimal transport is 1-Lipschitz in the cost matrix") {
  CounterRng rng(77);
  for (int trial = 0; trial < 12; ++trial) {
    int n = 2 + rng.next_int(3);
    int m = 2 + rng.next_int(3);
    Vector a = random_simplex(n, rng);
    Vector b = random_simplex(m, rng);
    Matrix c1 = random_cost(n, m, rng);
    Matrix c2 = random_cost(n, m, rng);
    double gap = (c1 - c2).cwiseAbs().maxCoeff();
    double exact = std::abs(ot::exact_ot(a, b, c1).value -
                            ot::exact_ot(a, b, c2).value);
    CHECK(exact <= gap + 1e-9);
    double entropic = std::abs(ot::sinkhorn(a, b, c1, 0.05).value -
                               ot::sinkhorn(a, b, c2, 0.05).value);
    CHECK(entropic <= gap + 1e-9);
  }
}

TEST_CASE("entropic value converges to the exact value as epsilon shrinks") {
  CounterRng rng(78);
  for (int trial = 0; trial < 6; ++trial) {
    int n = 3 + rng.next_int(3);
    Vector a = random_simplex(n, rng);
    Vector b = random_simplex(n, rng);
    Matrix c = random_cost(n, n, rng);
    double exact = ot::exact_ot(a, b, c).value;
    double mean_c = c.mean();
    double prev_gap = std::numeric_limits<double>::infinity();
    // near-degenerate instances can need tens of thousands of iterations at
    // the smallest epsilon; give the cap room beyond the default
    ot::SinkhornControl control;
    control.max_iter = 200000;
    for (double scale : {1e-1, 1e-2, 1e-3}) {
      auto sol = ot::sinkhorn(a, b, c, scale * mean_c, control);
      REQUIRE(sol.converged);
      double gap = std::abs(sol.value - exact);
      CHECK(gap < prev_gap);
      prev_gap = gap;
    }
    CHECK(prev_gap <= 5e-2 * c.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("solve_restricted matches the dense solve") {
  // support restriction is a no-op when mass already sits inside
  Vector a(3);
  a << 0.5, 0.5, 0.0;
  Vector b(2);
  b << 0.0, 1.0;
  Matrix c(3, 2);
  c << 0, 1, 1, 0, 2, 2;
  auto restricted = ot::solve_restricted(a, b, c, {0, 1}, {1}, 0.0);
  CHECK(restricted.solution.value ==
        Catch::Approx(ot::exact_ot(a, b, c).value).margin(1e-12));
  CHECK(restricted.rows == std::vector<int>{0, 1});
  Matrix embedded = restricted.embed_plan(3, 2);
  CHECK(embedded.rows() == 3);
  CHECK((embedded.rowwise().sum() - a).lpNorm<1>() <= 1e-12);

  CounterRng rng(79);
  for (int trial = 0; trial < 8; ++trial) {
    Vector aa = random_simplex(6, rng);
    aa(1) = 0.0;
    aa(4) = 0.0;
    aa /= aa.sum();
    Vector bb = random_simplex(6, rng);
    Matrix cc = random_cost(6, 6, rng);
    std::vector<int> rows{0, 2, 3, 5}, cols{0, 1, 2, 3, 4, 5};
    auto r = ot::solve_restricted(aa, bb, cc, rows, cols, 0.0);
    CHECK(std::abs(r.solution.value - ot::exact_ot(aa, bb, cc).value) <= 1e-9);

    // full index sets: identical to the dense path
    std::vector<int> all{0, 1, 2, 3, 4, 5};
    auto full = ot::solve_restricted(aa, bb, cc, all, all, 0.0);
    auto dense = ot::exact_ot(aa, bb, cc);
    CHECK(full.solution.value == dense.value);
    CHECK(full.solution.plan == dense.plan);
  }

  Vector mass_outside(3);
  mass_outside << 0.5, 0.25, 0.25;
  Vector target(2);
  target << 0.5, 0.5;
  Matrix cm = Matrix::Zero(3, 2);
  CHECK_THROWS_AS(
      ot::solve_restricted(mass_outside, target, cm, {0, 1}, {0, 1}, 0.0),
      SupportViolation);
}
