#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "otmkit/chains.hpp"
#include "otmkit/core.hpp"
#include "otmkit/ot.hpp"
#include "otmkit/otm.hpp"

// Slow, independent cross-checks for the fast paths. Everything here is
// deliberately plain: no scheduling, no warm starts, no restriction.
namespace otmkit::reference {

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  long n_paths = 0;
  std::uint64_t seed = 0;
};

namespace detail {

struct CdfTable {
  std::vector<double> cum;  // rows * cols cumulative, row-major
  int cols = 0;

  static CdfTable from_matrix(const Matrix& m) {
    CdfTable t;
    t.cols = static_cast<int>(m.cols());
    t.cum.resize(m.rows() * m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        acc += m(i, j);
        t.cum[i * m.cols() + j] = acc;
      }
    }
    return t;
  }

  int sample_row(int row, double u) const {
    const double* begin = cum.data() + static_cast<std::size_t>(row) * cols;
    const double* end = begin + cols;
    const double* it = std::lower_bound(begin, end, u * *(end - 1));
    int j = static_cast<int>(it - begin);
    return std::min(j, cols - 1);
  }
};

}  // namespace detail

// Monte-Carlo estimate of the expected discounted cost of a fixed
// time-homogeneous coupling policy. Per-path payoff is the depth-h truncation
//   sum_{t<h} delta (1-delta)^t C(X_t, Y_t) + (1-delta)^h C(X_h, Y_h),
// whose bias against the infinite sum is bounded by (1-delta)^h ||C||_inf.
// Counter-based RNG keyed by (seed, path index): deterministic replays,
// thread-count independent.
inline McEstimate simulate_discounted_cost(const otm::CouplingPolicy& policy,
                                           const Matrix& cost, double delta,
                                           int horizon_truncation, long n_paths,
                                           std::uint64_t seed,
                                           int threads = 0) {
  if (!(delta > 0.0 && delta <= 1.0))
    throw PreconditionViolated("delta must lie in (0, 1]");
  if (n_paths < 1) throw PreconditionViolated("n_paths must be >= 1");
  if (horizon_truncation < 0)
    throw PreconditionViolated("horizon_truncation must be >= 0");
  const int n = policy.n, m = policy.m;
  if (cost.rows() != n || cost.cols() != m)
    throw DimensionMismatch("cost shape does not match the policy");
  const int nm = n * m;
  if (policy.joint_kernel.rows() != nm || policy.joint_kernel.cols() != nm ||
      policy.joint_initial.size() != nm)
    throw DimensionMismatch("policy matrices have inconsistent shapes");
  for (int r = 0; r < nm; ++r) {
    if (std::abs(policy.joint_kernel.row(r).sum() - 1.0) > 1e-6 ||
        policy.joint_kernel.row(r).minCoeff() < -1e-12)
      throw InvalidPolicy("joint kernel row " + std::to_string(r) +
                          " is not a probability distribution");
  }
  if (std::abs(policy.joint_initial.sum() - 1.0) > 1e-6 ||
      policy.joint_initial.minCoeff() < -1e-12)
    throw InvalidPolicy("joint initial is not a probability distribution");

  auto kernel_cdf = detail::CdfTable::from_matrix(policy.joint_kernel);
  auto initial_cdf =
      detail::CdfTable::from_matrix(policy.joint_initial.transpose());

  auto path_payoff = [&](long path) {
    CounterRng rng(seed, static_cast<std::uint64_t>(path) + 1);
    int cell = initial_cdf.sample_row(0, rng.next_double());
    double payoff = 0.0;
    double weight = 1.0;  // (1-delta)^t
    for (int t = 0; t < horizon_truncation; ++t) {
      payoff += delta * weight * cost(cell / m, cell % m);
      weight *= 1.0 - delta;
      cell = kernel_cdf.sample_row(cell, rng.next_double());
    }
    payoff += weight * cost(cell / m, cell % m);
    return payoff;
  };

  // Fixed-size blocks summed in index order keep the reduction independent of
  // the thread count.
  const long block = 4096;
  const long blocks = (n_paths + block - 1) / block;
  std::vector<double> sums(blocks, 0.0), sq_sums(blocks, 0.0);
  parallel_for(static_cast<int>(blocks), threads, [&](int lo, int hi) {
    for (int b = lo; b < hi; ++b) {
      double s = 0.0, s2 = 0.0;
      long begin = static_cast<long>(b) * block;
      long end = std::min(n_paths, begin + block);
      for (long p = begin; p < end; ++p) {
        double v = path_payoff(p);
        s += v;
        s2 += v * v;
      }
      sums[b] = s;
      sq_sums[b] = s2;
    }
  });
  double total = 0.0, total_sq = 0.0;
  for (long b = 0; b < blocks; ++b) {
    total += sums[b];
    total_sq += sq_sums[b];
  }

  McEstimate est;
  est.n_paths = n_paths;
  est.seed = seed;
  est.mean = total / static_cast<double>(n_paths);
  if (n_paths > 1) {
    double var = (total_sq - n_paths * est.mean * est.mean) /
                 static_cast<double>(n_paths - 1);
    est.std_error = std::sqrt(std::max(0.0, var) / static_cast<double>(n_paths));
  }
  return est;
}

// Horizon such that the geometric tail bound (1-delta)^h ||C||_inf drops
// below one percent of the target precision.
inline int horizon_for_tail(double delta, double cost_sup,
                            double target_precision) {
  if (delta >= 1.0 || cost_sup <= 0.0) return 1;
  double bound = 0.01 * target_precision / cost_sup;
  if (bound >= 1.0) return 1;
  return std::max(1, static_cast<int>(
                         std::ceil(std::log(bound) / std::log1p(-delta))));
}

struct LowerBoundCheck {
  double lhs = 0.0;  // otm_general_p value
  double rhs = 0.0;  // sum_t p(t) * wl_depth_t value
  bool holds = false;
};

// The depth-wise WL values lower-bound the general OTM distance:
// d_OTM(p) >= sum_t p(t) d_WL^t. One forward recursion yields every level.
inline LowerBoundCheck lower_bound_check(const MarkovChain& x,
                                         const MarkovChain& y, const Matrix& c,
                                         const otm::HorizonDistribution& p,
                                         double epsilon = 0.0) {
  p.validate();
  LowerBoundCheck out;
  out.lhs = otm::otm_general_p(x, y, c, p, epsilon).value;

  const int big_k = static_cast<int>(p.probs.size()) - 1;
  Matrix cur = c;
  ot::SinkhornControl control;
  out.rhs = p.probs[0] * ot::solve_ot(x.initial, y.initial, cur, epsilon).value;
  for (int t = 1; t <= big_k; ++t) {
    Matrix next(x.size(), y.size());
    for (int i = 0; i < x.size(); ++i)
      for (int j = 0; j < y.size(); ++j)
        next(i, j) = ot::solve_ot(x.kernel.row(i).transpose(),
                                  y.kernel.row(j).transpose(), cur, epsilon)
                         .value;
    cur = std::move(next);
    if (p.probs[t] > 0.0)
      out.rhs +=
          p.probs[t] *
          ot::solve_ot(x.initial, y.initial, cur, epsilon, control).value;
  }
  out.holds = out.lhs >= out.rhs - 1e-9;
  return out;
}

// The unoptimized discounted recursion, kept as the oracle for the sparse and
// scheduled paths: plain loops, fully converged subproblems, bit-deterministic.
inline double naive_dense_recursion(const MarkovChain& x, const MarkovChain& y,
                                    const Matrix& c,
                                    const otm::DiscountParams& params) {
  if (params.depth < 0)
    throw PreconditionViolated("naive recursion needs a finite depth");
  otm::detail::check_discount_range(params.delta);
  Matrix cur = c;
  for (int l = 0; l < params.depth; ++l) {
    Matrix next(x.size(), y.size());
    for (int i = 0; i < x.size(); ++i)
      for (int j = 0; j < y.size(); ++j)
        next(i, j) =
            params.delta * c(i, j) +
            (1.0 - params.delta) *
                ot::solve_ot(x.kernel.row(i).transpose(),
                             y.kernel.row(j).transpose(), cur, params.epsilon)
                    .value;
    cur = std::move(next);
  }
  return ot::solve_ot(x.initial, y.initial, cur, params.epsilon).value;
}

}  // namespace otmkit::reference
