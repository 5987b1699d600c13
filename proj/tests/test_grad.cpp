#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "otmkit/otmkit.hpp"

using namespace otmkit;
using otmkit::testing::random_chain;
using otmkit::testing::random_cost;

namespace {

MarkovChain single_state() {
  Matrix k(1, 1);
  k << 1.0;
  return validate_chain(k, Vector::Ones(1));
}

otm::DiscountParams entropic_params(double delta, double epsilon) {
  otm::DiscountParams p;
  p.delta = delta;
  p.epsilon = epsilon;
  p.depth = otm::kInfiniteDepth;
  p.tol = 1e-10;
  p.sinkhorn_tol = 1e-11;
  return p;
}

}  // namespace

TEST_CASE("backward single-state closed form") {
  Matrix c1(1, 1);
  c1 << 0.7;
  auto fp = otm::dwl_infinity(single_state(), single_state(), c1,
                              entropic_params(0.3, 0.05));
  Matrix upstream(1, 1);
  upstream << 2.5;
  auto grads = grad::backward(fp, upstream);
  CHECK(grads.d_C(0, 0) == Catch::Approx(2.5).margin(1e-12));
  CHECK(grads.d_mX(0, 0) == 0.0);  // centered dual of a 1-point solve is 0

  upstream.setZero();
  auto zero = grad::backward(fp, upstream);
  CHECK(zero.d_C.isZero());
  CHECK(zero.d_mX.isZero());
  CHECK(zero.d_mY.isZero());
}

TEST_CASE("backward rejects exact-path and unconverged inputs") {
  CounterRng rng(201);
  auto x = random_chain(3, rng, 0.05);
  auto y = random_chain(3, rng, 0.05);
  Matrix c = random_cost(3, 3, rng);
  Matrix upstream = Matrix::Ones(3, 3);

  auto exact = otm::dwl_infinity(x, y, c, entropic_params(0.5, 0.0));
  CHECK_THROWS_AS(grad::backward(exact, upstream), EpsilonZero);

  auto params = entropic_params(0.05, 0.05);
  params.max_iter = 1;
  params.tol = 1e-16;
  auto unconverged = otm::dwl_infinity(x, y, c, params);
  REQUIRE_FALSE(unconverged.converged);
  CHECK_THROWS_AS(grad::backward(unconverged, upstream), NotConverged);
}

TEST_CASE("backward system is strictly diagonally dominant") {
  CounterRng rng(202);
  auto x = random_chain(4, rng, 0.05);
  auto y = random_chain(3, rng, 0.05);
  Matrix c = random_cost(4, 3, rng);
  auto fp = otm::dwl_infinity(x, y, c, entropic_params(0.4, 0.05));
  REQUIRE(fp.converged);
  auto cache = grad::build_backward_cache(fp);
  const double delta = 0.4;
  for (Eigen::Index r = 0; r < cache.plans.rows(); ++r) {
    double row_sum = cache.plans.row(r).sum();
    double diag = 1.0 - (1.0 - delta) * cache.plans(r, r);
    double off = (1.0 - delta) * (row_sum - cache.plans(r, r));
    CHECK(diag - off >= delta * row_sum - 1e-9);
    CHECK(diag - off > 0.0);
    CHECK(std::abs(row_sum - 1.0) <= 1e-7);
  }
}

TEST_CASE("structural backward equals the materialized tensor products") {
  CounterRng rng(203);
  auto x = random_chain(3, rng, 0.05);
  auto y = random_chain(2, rng, 0.05);
  Matrix c = random_cost(3, 2, rng);
  const double delta = 0.45;
  auto fp = otm::dwl_infinity(x, y, c, entropic_params(delta, 0.06));
  REQUIRE(fp.converged);
  auto cache = grad::build_backward_cache(fp);
  CounterRng dirs(204);
  Matrix upstream = random_cost(3, 2, dirs, -0.5);
  auto grads = grad::backward(cache, upstream);

  // F and G sparsity follows the indicator definitions exactly
  Matrix big_f = cache.materialize_F();
  Matrix big_g = cache.materialize_G();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 3; ++k)
        for (int k2 = 0; k2 < 3; ++k2)
          if (k != i) CHECK(big_f(i * 2 + j, k * 3 + k2) == 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int l = 0; l < 2; ++l)
        for (int l2 = 0; l2 < 2; ++l2)
          if (l != j) CHECK(big_g(i * 2 + j, l * 2 + l2) == 0.0);

  Vector vec_up(6);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) vec_up(i * 2 + j) = upstream(i, j);
  Matrix kt = Matrix::Identity(6, 6) - (1.0 - delta) * cache.plans.transpose();
  Vector w = kt.partialPivLu().solve(vec_up);
  Vector d_mx_flat = (1.0 - delta) * big_f.transpose() * w;
  Vector d_my_flat = (1.0 - delta) * big_g.transpose() * w;
  for (int k = 0; k < 3; ++k)
    for (int k2 = 0; k2 < 3; ++k2)
      CHECK(grads.d_mX(k, k2) ==
            Catch::Approx(d_mx_flat(k * 3 + k2)).margin(1e-12));
  for (int l = 0; l < 2; ++l)
    for (int l2 = 0; l2 < 2; ++l2)
      CHECK(grads.d_mY(l, l2) ==
            Catch::Approx(d_my_flat(l * 2 + l2)).margin(1e-12));
}

TEST_CASE("LU and Neumann solvers agree") {
  CounterRng rng(205);
  auto x = random_chain(4, rng, 0.05);
  auto y = random_chain(4, rng, 0.05);
  Matrix c = random_cost(4, 4, rng);
  auto fp = otm::dwl_infinity(x, y, c, entropic_params(0.3, 0.05));
  REQUIRE(fp.converged);
  auto cache = grad::build_backward_cache(fp);
  Matrix upstream = fp.final_ot.plan;
  auto lu = grad::backward(cache, upstream, /*force_neumann=*/false);
  auto neumann = grad::backward(cache, upstream, /*force_neumann=*/true);
  CHECK((lu.d_C - neumann.d_C).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((lu.d_mX - neumann.d_mX).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((lu.d_mY - neumann.d_mY).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("sinkhorn_vjp pullbacks") {
  Vector one = Vector::Ones(1);
  Matrix c1(1, 1);
  c1 << 0.9;
  auto single = ot::sinkhorn(one, one, c1, 0.2);
  auto vjp = grad::sinkhorn_vjp(single, 1.0);
  CHECK(vjp.d_cost(0, 0) == Catch::Approx(1.0).margin(1e-12));
  auto zero = grad::sinkhorn_vjp(single, 0.0);
  CHECK(zero.d_cost.isZero());
  CHECK(zero.d_alpha.isZero());

  auto exact = ot::exact_ot(one, one, c1);
  CHECK_THROWS_AS(grad::sinkhorn_vjp(exact, 1.0), ExactPathUnsupported);

  // finite differences of the entropic value match the plan entrywise
  Vector half = Vector::Constant(2, 0.5);
  Matrix swap(2, 2);
  swap << 0, 1, 1, 0;
  const double eps = 0.1;
  ot::SinkhornControl tight;
  tight.tol = 1e-12;
  auto sol = ot::sinkhorn(half, half, swap, eps, tight);
  auto pull = grad::sinkhorn_vjp(sol, 1.0);
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      Matrix plus = swap, minus = swap;
      plus(i, j) += h;
      minus(i, j) -= h;
      double fd = (ot::sinkhorn(half, half, plus, eps, tight).value -
                   ot::sinkhorn(half, half, minus, eps, tight).value) /
                  (2.0 * h);
      CHECK(std::abs(fd - pull.d_cost(i, j)) <=
            1e-3 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("full_gradient single-state closed forms") {
  Matrix c1(1, 1);
  c1 << 0.8;
  auto bundle = grad::full_gradient(single_state(), single_state(), c1,
                                    entropic_params(0.5, 0.05));
  CHECK(bundle.d_C(0, 0) == Catch::Approx(1.0).margin(1e-12));
  CHECK(bundle.d_mX(0, 0) == 0.0);
  CHECK(bundle.d_mY(0, 0) == 0.0);
  CHECK(bundle.d_nuX(0) == 0.0);  // 0-dimensional tangent freedom
  CHECK(bundle.d_nuY(0) == 0.0);

  CHECK_THROWS_AS(grad::full_gradient(single_state(), single_state(), c1,
                                      entropic_params(0.5, 0.0)),
                  EpsilonZero);
  auto finite_depth = entropic_params(0.5, 0.05);
  finite_depth.depth = 3;
  CHECK_THROWS_AS(grad::full_gradient(single_state(), single_state(), c1,
                                      finite_depth),
                  PreconditionViolated);
}

TEST_CASE("full_gradient matches finite differences on random instances") {
  CounterRng rng(206);
  auto x = random_chain(3, rng, 0.08);
  auto y = random_chain(2, rng, 0.08);
  Matrix c = random_cost(3, 2, rng, 0.5);
  auto params = entropic_params(0.5, 0.05 * c.mean());
  auto report = grad::finite_difference_check(x, y, c, params, 4,
                                              {1e-4, 1e-5, 1e-6}, 99);
  INFO("worst relative error " << report.worst());
  CHECK(report.worst() <= 1e-3);
}

TEST_CASE("symmetric instances have opposite initial-distribution gradients") {
  CounterRng rng(207);
  auto x = random_chain(3, rng, 0.08, 2);
  MarkovChain y = x;  // identical chain, identical labels
  Matrix c = cost_matrix(x, y, {CostMetric::euclidean, 1.0});
  auto bundle =
      grad::full_gradient(x, y, c, entropic_params(0.5, 0.05 * (c.mean() + 0.1)));
  CounterRng dirs(208);
  for (int d = 0; d < 4; ++d) {
    Vector xi(3);
    for (int i = 0; i < 3; ++i) xi(i) = dirs.next_gaussian();
    xi.array() -= xi.mean();
    double lhs = bundle.d_nuX.dot(xi);
    double rhs = -bundle.d_nuY.dot(xi);
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("gauge shifts leave tangent directional derivatives unchanged") {
  CounterRng rng(209);
  auto x = random_chain(3, rng, 0.08);
  auto y = random_chain(3, rng, 0.08);
  Matrix c = random_cost(3, 3, rng);
  auto fp = otm::dwl_infinity(x, y, c, entropic_params(0.4, 0.05));
  REQUIRE(fp.converged);
  auto cache = grad::build_backward_cache(fp);
  Matrix upstream = fp.final_ot.plan;
  auto base = grad::backward(cache, upstream);

  auto shifted_cache = cache;
  shifted_cache.cell_f[4].array() += 0.37;  // constant into f of one cell
  shifted_cache.cell_g[4].array() -= 0.37;  // and out of g: a pure gauge move
  auto shifted = grad::backward(shifted_cache, upstream);

  CounterRng dirs(210);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix xi(3, 3);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) xi(i, j) = dirs.next_gaussian();
      xi.row(i).array() -= xi.row(i).mean();
    }
    double a = (base.d_mX.array() * xi.array()).sum();
    double b = (shifted.d_mX.array() * xi.array()).sum();
    CHECK(std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)));
    double ag = (base.d_mY.array() * xi.array()).sum();
    double bg = (shifted.d_mY.array() * xi.array()).sum();
    CHECK(std::abs(ag - bg) <= 1e-9 * std::max(1.0, std::abs(ag)));
  }
  // d_C is untouched by dual gauge entirely
  CHECK((base.d_C - shifted.d_C).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("finite_difference_check degenerate directions") {
  Matrix c1(1, 1);
  c1 << 0.6;
  // on a single state every tangent space is zero-dimensional except C
  auto report = grad::finite_difference_check(single_state(), single_state(),
                                              c1, entropic_params(0.5, 0.05),
                                              2, {1e-5}, 3);
  CHECK(report.max_rel_err.at("mX") == 0.0);
  CHECK(report.max_rel_err.at("nuX") == 0.0);
  CHECK(report.max_rel_err.at("C") <= 1e-6);  // both sides equal 1
}
