#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "otmkit/chains.hpp"
#include "otmkit/core.hpp"
#include "otmkit/otm.hpp"

namespace otmkit::grad {

// Flattening convention throughout: cell (i, j) -> row index i*m + j.
// P rows are the per-cell plans, so the pullback of an upstream sensitivity
// is a solve against K^T with K = I - (1-delta) P.
struct BackwardCache {
  int n = 0, m = 0;
  double delta = 0.0;
  double epsilon = 0.0;
  Matrix plans;                 // (n*m) x (n*m); row (i,j) = flatten(P_ij)
  std::vector<Vector> cell_f;   // per cell, length n (zeros at excluded rows)
  std::vector<Vector> cell_g;   // per cell, length m
  Matrix final_plan;
  Vector final_f, final_g;

  // F^{kk'}_{(ij)} = f_{ij}^{k'} 1[i = k], as an (n*m) x (n*n) matrix.
  Matrix materialize_F() const {
    Matrix f = Matrix::Zero(static_cast<Eigen::Index>(n) * m,
                            static_cast<Eigen::Index>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        for (int k2 = 0; k2 < n; ++k2)
          f(i * m + j, i * n + k2) = cell_f[static_cast<std::size_t>(i) * m + j](k2);
    return f;
  }

  Matrix materialize_G() const {
    Matrix g = Matrix::Zero(static_cast<Eigen::Index>(n) * m,
                            static_cast<Eigen::Index>(m) * m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        for (int l2 = 0; l2 < m; ++l2)
          g(i * m + j, j * m + l2) = cell_g[static_cast<std::size_t>(i) * m + j](l2);
    return g;
  }
};

struct KernelGradients {
  Matrix d_C;   // n x m
  Matrix d_mX;  // n x n
  Matrix d_mY;  // m x m
};

struct GradientBundle {
  Matrix d_C;
  Matrix d_mX;
  Matrix d_mY;
  Vector d_nuX;
  Vector d_nuY;
};

inline BackwardCache build_backward_cache(const otm::FixedPointResult& result) {
  if (!result.converged)
    throw NotConverged("backward pass needs a converged fixed point");
  if (!(result.params.epsilon > 0.0))
    throw EpsilonZero(
        "exact-path gradients are undefined at plan degeneracy; rerun with "
        "epsilon > 0");
  if (!(result.params.delta > 0.0))
    throw PreconditionViolated("backward pass requires delta > 0");
  const int n = result.n, m = result.m;
  if (static_cast<int>(result.cell_solutions.size()) != n * m)
    throw PreconditionViolated("result does not carry the full cell grid");

  BackwardCache cache;
  cache.n = n;
  cache.m = m;
  cache.delta = result.params.delta;
  cache.epsilon = result.params.epsilon;
  cache.plans.resize(static_cast<Eigen::Index>(n) * m,
                     static_cast<Eigen::Index>(n) * m);
  cache.cell_f.resize(static_cast<std::size_t>(n) * m);
  cache.cell_g.resize(static_cast<std::size_t>(n) * m);
  // Partials w.r.t. a marginal are defined only up to an additive constant
  // (mass must stay balanced); store both potentials in the centered gauge so
  // reported kernel gradients vanish where the spec's closed forms say so.
  auto center_active = [](const Vector& v, const std::vector<char>& active) {
    Vector out = v;
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (active.empty() || active[i]) {
        sum += v(i);
        ++count;
      }
    if (count == 0) return out;
    double mean = sum / count;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (active.empty() || active[i]) out(i) -= mean;
    return out;
  };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const auto& sol = result.cell(i, j);
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < m; ++l)
          cache.plans(i * m + j, k * m + l) = sol.plan(k, l);
      cache.cell_f[static_cast<std::size_t>(i) * m + j] =
          center_active(sol.duals->f, sol.duals->row_active);
      cache.cell_g[static_cast<std::size_t>(i) * m + j] =
          center_active(sol.duals->g, sol.duals->col_active);
    }
  cache.final_plan = result.final_ot.plan;
  cache.final_f = center_active(result.final_ot.duals->f,
                                result.final_ot.duals->row_active);
  cache.final_g = center_active(result.final_ot.duals->g,
                                result.final_ot.duals->col_active);
  return cache;
}

namespace detail {

inline constexpr int kDenseSolveLimit = 1200;  // nm above this uses Neumann

// Strict diagonal dominance of K = I - (1-delta) P with margin delta per row
// (each plan row sums to 1); this is what makes the solve well-posed.
inline void check_diagonal_dominance(const BackwardCache& cache) {
  const auto nm = cache.plans.rows();
  for (Eigen::Index r = 0; r < nm; ++r) {
    double row_sum = cache.plans.row(r).sum();
    double diag = 1.0 - (1.0 - cache.delta) * cache.plans(r, r);
    double off = (1.0 - cache.delta) * (row_sum - cache.plans(r, r));
    if (diag - off < cache.delta * row_sum - 1e-9)
      throw PreconditionViolated(
          "backward system lost strict diagonal dominance");
  }
}

// Solve K^T w = rhs, K = I - (1-delta) P. Dense LU at desk scale, truncated
// Neumann series sum_t ((1-delta) P^T)^t rhs beyond it (truncation error
// bounded by the same contraction rate).
inline Vector solve_kt(const BackwardCache& cache, const Vector& rhs,
                       bool force_neumann = false, bool force_lu = false) {
  const auto nm = cache.plans.rows();
  const double lam = 1.0 - cache.delta;
  if (!force_neumann && (force_lu || nm <= kDenseSolveLimit)) {
    Matrix kt = Matrix::Identity(nm, nm) - lam * cache.plans.transpose();
    return kt.partialPivLu().solve(rhs);
  }
  int terms = std::max(
      1, static_cast<int>(std::ceil(std::log(1e-14) / std::log1p(-cache.delta))));
  Vector w = rhs;
  for (int t = 0; t < terms; ++t) {
    Vector pw = (w.transpose() * cache.plans).transpose();  // P^T w
    w = rhs + lam * pw;
  }
  return w;
}

}  // namespace detail

// Pullbacks of an upstream sensitivity d loss / d C^{eps,delta,(inf)} through
// the fixed point: with K = I - (1-delta) P and w = K^{-T} vec(upstream),
//   d_C = delta * w,
//   d_mX[k][k'] = (1-delta) * sum_j w[(k,j)] f_{kj}[k'],
//   d_mY[l][l'] = (1-delta) * sum_i w[(i,l)] g_{il}[l'].
// Row = output cell, column = input cell; the orientation is pinned by the
// finite-difference contract.
inline KernelGradients backward(const BackwardCache& cache,
                                const Matrix& upstream,
                                bool force_neumann = false) {
  const int n = cache.n, m = cache.m;
  if (upstream.rows() != n || upstream.cols() != m)
    throw DimensionMismatch("upstream must be n x m");
  detail::check_diagonal_dominance(cache);

  Vector rhs(static_cast<Eigen::Index>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) rhs(i * m + j) = upstream(i, j);
  Vector w = detail::solve_kt(cache, rhs, force_neumann);

  KernelGradients out;
  out.d_C.resize(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.d_C(i, j) = cache.delta * w(i * m + j);

  const double lam = 1.0 - cache.delta;
  out.d_mX = Matrix::Zero(n, n);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < m; ++j) {
      double wk = w(k * m + j);
      if (wk == 0.0) continue;
      out.d_mX.row(k) +=
          lam * wk * cache.cell_f[static_cast<std::size_t>(k) * m + j].transpose();
    }
  out.d_mY = Matrix::Zero(m, m);
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < m; ++l) {
      double wl = w(i * m + l);
      if (wl == 0.0) continue;
      out.d_mY.row(l) +=
          lam * wl * cache.cell_g[static_cast<std::size_t>(i) * m + l].transpose();
    }
  return out;
}

inline KernelGradients backward(const otm::FixedPointResult& result,
                                const Matrix& upstream) {
  return backward(build_backward_cache(result), upstream);
}

struct VjpResult {
  Matrix d_cost;
  Vector d_alpha;
  Vector d_beta;
};

// Standard entropic-OT differentiation: the value gradient w.r.t. the cost is
// the primal plan; w.r.t. the marginals, the dual potentials up to gauge
// (centered, so only tangent directions are meaningful).
inline VjpResult sinkhorn_vjp(const ot::OtSolution& solution, double upstream) {
  if (!(solution.epsilon > 0.0) || !solution.duals)
    throw ExactPathUnsupported("sinkhorn_vjp needs an entropic solution");
  if (!solution.converged)
    throw NotConverged("sinkhorn_vjp needs a converged solution");
  VjpResult out;
  out.d_cost = upstream * solution.plan;
  const Vector& f = solution.duals->f;
  const Vector& g = solution.duals->g;
  out.d_alpha = upstream * (f.array() - f.mean()).matrix();
  out.d_beta = upstream * (g.array() - g.mean()).matrix();
  return out;
}

// Gradient of the depth-infinity entropic discounted WL distance w.r.t. all
// inputs: chain rule through the final transport value (upstream = its plan)
// and the fixed-point pullbacks; initial-distribution gradients come from the
// final solve's duals.
inline GradientBundle full_gradient(const MarkovChain& x, const MarkovChain& y,
                                    const Matrix& c,
                                    const otm::DiscountParams& params,
                                    int threads = 0,
                                    const otm::FixedPointResult* precomputed =
                                        nullptr) {
  if (!(params.delta > 0.0))
    throw PreconditionViolated("full_gradient requires delta > 0");
  if (!(params.epsilon > 0.0))
    throw EpsilonZero("full_gradient requires epsilon > 0");
  if (params.depth != otm::kInfiniteDepth)
    throw PreconditionViolated("full_gradient requires depth = INFINITE");

  otm::FixedPointResult local;
  const otm::FixedPointResult* result = precomputed;
  if (result == nullptr) {
    local = otm::dwl_infinity(x, y, c, params, threads);
    result = &local;
  }
  BackwardCache cache = build_backward_cache(*result);
  VjpResult final_vjp = sinkhorn_vjp(result->final_ot, 1.0);
  KernelGradients kernels = backward(cache, final_vjp.d_cost);

  GradientBundle bundle;
  bundle.d_C = std::move(kernels.d_C);
  bundle.d_mX = std::move(kernels.d_mX);
  bundle.d_mY = std::move(kernels.d_mY);
  bundle.d_nuX = std::move(final_vjp.d_alpha);
  bundle.d_nuY = std::move(final_vjp.d_beta);
  return bundle;
}

// ---------------------------------------------------------------------------
// Finite-difference harness. Tangent directions keep the inputs feasible:
// zero row sums for kernels, zero sum for initials, unconstrained for the
// cost; each direction is scaled so central differences stay inside the
// domain at the largest step.
// ---------------------------------------------------------------------------

struct FdReport {
  // target name -> max over directions of the best-plateau relative error
  std::map<std::string, double> max_rel_err;
  int n_directions = 0;
  std::vector<double> h_list;
  std::uint64_t seed = 0;

  double worst() const {
    double w = 0.0;
    for (const auto& [k, v] : max_rel_err) w = std::max(w, v);
    return w;
  }
};

namespace detail {

inline double forward_value(const MarkovChain& x, const MarkovChain& y,
                            const Matrix& c, const otm::DiscountParams& params,
                            int threads) {
  return otm::dwl_infinity(x, y, c, params, threads).value;
}

// Random tangent at `base`: gaussian entries, zeroed where base has no mass
// (central differences must stay inside the domain), optionally projected to
// zero sum per row or globally over the surviving support, then scaled so
// base +/- h_max * dir keeps every entry nonnegative.
inline Matrix make_tangent(CounterRng& rng, const Matrix& base,
                           bool row_zero_sum, bool global_zero_sum,
                           double h_max) {
  Matrix dir(base.rows(), base.cols());
  for (Eigen::Index i = 0; i < dir.rows(); ++i)
    for (Eigen::Index j = 0; j < dir.cols(); ++j)
      dir(i, j) = base(i, j) > 0.0 ? rng.next_gaussian() : 0.0;

  auto center_support = [&](Eigen::Index row_begin, Eigen::Index row_end) {
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index i = row_begin; i < row_end; ++i)
      for (Eigen::Index j = 0; j < dir.cols(); ++j)
        if (base(i, j) > 0.0) {
          sum += dir(i, j);
          ++count;
        }
    if (count <= 1) {
      for (Eigen::Index i = row_begin; i < row_end; ++i) dir.row(i).setZero();
      return;
    }
    double mean = sum / count;
    for (Eigen::Index i = row_begin; i < row_end; ++i)
      for (Eigen::Index j = 0; j < dir.cols(); ++j)
        if (base(i, j) > 0.0) dir(i, j) -= mean;
  };
  if (row_zero_sum)
    for (Eigen::Index i = 0; i < dir.rows(); ++i) center_support(i, i + 1);
  if (global_zero_sum) center_support(0, dir.rows());

  double norm = dir.cwiseAbs().maxCoeff();
  if (norm == 0.0) return dir;
  dir /= norm;
  double scale = 1.0;
  for (Eigen::Index i = 0; i < dir.rows(); ++i)
    for (Eigen::Index j = 0; j < dir.cols(); ++j)
      if (dir(i, j) < 0.0)
        scale = std::min(scale, 0.5 * base(i, j) / (h_max * -dir(i, j)));
  return scale * dir;
}

}  // namespace detail

inline FdReport finite_difference_check(const MarkovChain& x,
                                        const MarkovChain& y, const Matrix& c,
                                        const otm::DiscountParams& params,
                                        int n_directions,
                                        std::vector<double> h_list,
                                        std::uint64_t seed, int threads = 0) {
  if (h_list.empty()) h_list = {1e-4, 1e-5, 1e-6};
  const double h_max = *std::max_element(h_list.begin(), h_list.end());
  GradientBundle bundle = full_gradient(x, y, c, params, threads);

  FdReport report;
  report.n_directions = n_directions;
  report.h_list = h_list;
  report.seed = seed;

  const char* targets[] = {"C", "mX", "mY", "nuX", "nuY"};
  for (int target = 0; target < 5; ++target) {
    CounterRng rng(seed, static_cast<std::uint64_t>(target) + 1);
    double worst = 0.0;
    for (int d = 0; d < n_directions; ++d) {
      Matrix base;
      bool row_zero_sum = false, global_zero_sum = false;
      switch (target) {
        case 0: base = c; break;
        case 1: base = x.kernel; row_zero_sum = true; break;
        case 2: base = y.kernel; row_zero_sum = true; break;
        case 3: base = x.initial; global_zero_sum = true; break;
        case 4: base = y.initial; global_zero_sum = true; break;
      }
      Matrix dir =
          detail::make_tangent(rng, base, row_zero_sum, global_zero_sum, h_max);

      double analytic = 0.0;
      switch (target) {
        case 0: analytic = (bundle.d_C.array() * dir.array()).sum(); break;
        case 1: analytic = (bundle.d_mX.array() * dir.array()).sum(); break;
        case 2: analytic = (bundle.d_mY.array() * dir.array()).sum(); break;
        case 3: analytic = (bundle.d_nuX.array() * dir.col(0).array()).sum(); break;
        case 4: analytic = (bundle.d_nuY.array() * dir.col(0).array()).sum(); break;
      }

      double best = std::numeric_limits<double>::infinity();
      bool all_zero = true;
      for (double h : h_list) {
        auto evaluate = [&](double step) {
          MarkovChain ex = x, ey = y;
          Matrix ec = c;
          switch (target) {
            case 0: ec = c + step * dir; break;
            case 1: ex.kernel = x.kernel + step * dir; break;
            case 2: ey.kernel = y.kernel + step * dir; break;
            case 3: ex.initial = x.initial + step * dir.col(0); break;
            case 4: ey.initial = y.initial + step * dir.col(0); break;
          }
          return detail::forward_value(ex, ey, ec, params, threads);
        };
        double fd = (evaluate(h) - evaluate(-h)) / (2.0 * h);
        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-12});
        double rel = std::abs(fd - analytic) / denom;
        if (std::abs(fd) > 0.0 || std::abs(analytic) > 0.0) all_zero = false;
        best = std::min(best, rel);
      }
      if (all_zero) best = 0.0;
      worst = std::max(worst, best);
    }
    report.max_rel_err[targets[target]] = worst;
  }
  return report;
}

}  // namespace otmkit::grad
