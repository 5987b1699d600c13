#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "otmkit/chains.hpp"
#include "otmkit/core.hpp"
#include "otmkit/ot.hpp"

namespace otmkit::otm {

inline constexpr int kInfiniteDepth = -1;

enum class InitKind { delta_C, C, zero };

struct DiscountParams {
  double delta = 0.5;
  double epsilon = 0.0;
  int depth = kInfiniteDepth;  // finite >= 0, or kInfiniteDepth
  double tol = 0.0;            // fixed-point residual (inf-norm); 0 => default
  int max_iter = 100000;       // sweep cap
  int schedule = 0;            // Sinkhorn iteration-cap growth step; 0 = off
  InitKind init = InitKind::delta_C;  // infinite-depth starting matrix
  double sinkhorn_tol = 1e-9;
  int sinkhorn_max_iter = 10000;
};

// Finite-support horizon distribution p(0..K).
struct HorizonDistribution {
  std::vector<double> probs;

  void validate() const {
    if (probs.empty()) throw PreconditionViolated("horizon distribution is empty");
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw PreconditionViolated("horizon probabilities must be >= 0");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw PreconditionViolated("horizon probabilities must sum to 1");
  }
};

// Truncated geometric horizon: mass delta*(1-delta)^t for t < k, remainder
// (1-delta)^k at t = k.
inline HorizonDistribution truncated_geometric(double delta, int k) {
  if (!(delta >= 0.0 && delta <= 1.0))
    throw PreconditionViolated("delta must lie in [0, 1]");
  if (k < 0) throw PreconditionViolated("k must be >= 0");
  HorizonDistribution p;
  p.probs.resize(k + 1);
  for (int t = 0; t < k; ++t) p.probs[t] = delta * std::pow(1.0 - delta, t);
  p.probs[k] = std::pow(1.0 - delta, k);
  return p;
}

struct FixedPointResult {
  Matrix cost_final;
  double value = 0.0;
  int iterations = 0;
  double residual = 0.0;
  std::vector<ot::OtSolution> cell_solutions;  // row-major (i*m + j); may be empty
  ot::OtSolution final_ot;
  bool converged = true;
  DiscountParams params;
  int n = 0, m = 0;
  std::uint64_t cell_work = 0;  // sum of subproblem areas handed to the solver
  std::vector<double> residual_trace;

  const ot::OtSolution& cell(int i, int j) const {
    return cell_solutions[static_cast<std::size_t>(i) * m + j];
  }
};

struct CouplingPolicy {
  Matrix joint_kernel;   // (n*m) x (n*m), row (i*m+j) = flattened plan P_ij
  Vector joint_initial;  // flattened optimal coupling of the initials
  int n = 0, m = 0;
};

struct WlInfinityResult {
  double value = 0.0;
  double gap = 0.0;
  int iterations = 0;
  bool converged = false;
  Matrix cost_final;
  std::vector<double> min_trace, max_trace;
};

struct SweepRecord {
  int sweep = 0;
  double residual = 0.0;
  double min_entry = 0.0, max_entry = 0.0;
  int sinkhorn_cap = 0;
  bool all_converged = true;
};

// Observer sees every accepted iterate; used by diagnostics and tests.
using SweepObserver = std::function<void(const SweepRecord&, const Matrix&)>;

namespace detail {

inline double default_tol(const Matrix& c, double requested) {
  if (requested > 0.0) return requested;
  double scale = c.cwiseAbs().maxCoeff();
  return scale > 0.0 ? 1e-8 * scale : 1e-16;
}

// Iteration count after which the contraction rate bound certifies that the
// iterate sits within tol of the fixed point.
inline int rate_bound_cap(const Matrix& c, double delta, double epsilon,
                          double tol) {
  if (delta >= 1.0) return 1;
  double scale = 2.0 * c.cwiseAbs().maxCoeff() +
                 epsilon * std::log(static_cast<double>(c.rows() * c.cols()));
  if (scale <= 0.0) return 1;
  double ratio = tol * delta / scale;
  if (ratio >= 1.0) return 1;
  return std::max(1, static_cast<int>(
                         std::ceil(std::log(ratio) / std::log(1.0 - delta))));
}

// One cell-wise pass: out = coef_c * C_base + coef_ot * OT^eps(m_i, m_j; cur).
// Cells are independent; warm-started per-cell potentials carry across sweeps.
class SweepEngine {
 public:
  SweepEngine(const MarkovChain& x, const MarkovChain& y, const Matrix& base,
              double epsilon, double sinkhorn_tol, int sinkhorn_max_iter,
              bool sparse, int threads)
      : x_(x),
        y_(y),
        base_(base),
        epsilon_(epsilon),
        sinkhorn_tol_(sinkhorn_tol),
        sinkhorn_max_iter_(sinkhorn_max_iter),
        sparse_(sparse),
        threads_(threads),
        n_(x.size()),
        m_(y.size()) {
    if (base_.rows() != n_ || base_.cols() != m_)
      throw DimensionMismatch("cost matrix shape does not match the chains");
    if (!base_.allFinite() || base_.minCoeff() < 0.0)
      throw NonFiniteCost("cost matrix must be finite and nonnegative");
    warm_.resize(static_cast<std::size_t>(n_) * m_);
    if (sparse_) {
      supp_x_.resize(n_);
      supp_y_.resize(m_);
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k < n_; ++k)
          if (x_.kernel(i, k) > 0.0) supp_x_[i].push_back(k);
      for (int j = 0; j < m_; ++j)
        for (int l = 0; l < m_; ++l)
          if (y_.kernel(j, l) > 0.0) supp_y_[j].push_back(l);
    }
  }

  struct SweepOutput {
    Matrix next;
    bool all_converged = true;
    std::uint64_t work = 0;
  };

  // iter_cap <= 0 means "no cap" (full sinkhorn_max_iter budget per cell).
  SweepOutput sweep(const Matrix& cur, double coef_c, double coef_ot,
                    int iter_cap, std::vector<ot::OtSolution>* cells_out) {
    SweepOutput out;
    out.next.resize(n_, m_);
    const int total = n_ * m_;
    std::vector<char> conv(total, 1);
    std::vector<std::uint32_t> area(total, 0);
    if (cells_out) cells_out->assign(total, {});

    parallel_for(total, threads_, [&](int lo, int hi) {
      for (int r = lo; r < hi; ++r) {
        int i = r / m_;
        int j = r % m_;
        ot::SinkhornControl control;
        control.tol = sinkhorn_tol_;
        control.max_iter = iter_cap > 0
                               ? std::min(iter_cap, sinkhorn_max_iter_)
                               : sinkhorn_max_iter_;
        if (epsilon_ > 0.0 && warm_[r]) control.warm = &*warm_[r];

        Vector alpha = x_.kernel.row(i).transpose();
        Vector beta = y_.kernel.row(j).transpose();
        ot::OtSolution sol;
        if (sparse_) {
          auto restricted = ot::solve_restricted(alpha, beta, cur, supp_x_[i],
                                                 supp_y_[j], epsilon_, control);
          area[r] = static_cast<std::uint32_t>(restricted.rows.size() *
                                               restricted.cols.size());
          if (epsilon_ > 0.0) warm_[r] = *restricted.solution.duals;
          sol = std::move(restricted.solution);
          // forward value only; plans stay in restricted coordinates
        } else {
          sol = ot::solve_ot(alpha, beta, cur, epsilon_, control);
          area[r] = static_cast<std::uint32_t>(n_ * m_);
          if (epsilon_ > 0.0) warm_[r] = *sol.duals;
        }
        conv[r] = sol.converged ? 1 : 0;
        out.next(i, j) = coef_c * base_(i, j) + coef_ot * sol.value;
        if (cells_out) (*cells_out)[r] = std::move(sol);
      }
    });

    for (int r = 0; r < total; ++r) {
      out.all_converged = out.all_converged && conv[r];
      out.work += area[r];
    }
    return out;
  }

  ot::OtSolution final_ot(const Matrix& cost) const {
    ot::SinkhornControl control;
    control.tol = sinkhorn_tol_;
    control.max_iter = sinkhorn_max_iter_;
    return ot::solve_ot(x_.initial, y_.initial, cost, epsilon_, control);
  }

  int n() const { return n_; }
  int m() const { return m_; }

 private:
  const MarkovChain& x_;
  const MarkovChain& y_;
  Matrix base_;
  double epsilon_;
  double sinkhorn_tol_;
  int sinkhorn_max_iter_;
  bool sparse_;
  int threads_;
  int n_, m_;
  std::vector<std::optional<ot::DualPair>> warm_;
  std::vector<std::vector<int>> supp_x_, supp_y_;
};

inline void check_discount_range(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0))
    throw PreconditionViolated("delta must lie in [0, 1]");
}

// Shared finite-depth recursion: C^(0) = C,
// C^(l+1) = delta*C + (1-delta)*OT_cellwise(C^(l)), value = OT(nu_x, nu_y; C^(k)).
inline FixedPointResult run_depth_k(const MarkovChain& x, const MarkovChain& y,
                                    const Matrix& c, DiscountParams params,
                                    bool sparse, int threads,
                                    const SweepObserver* observer) {
  check_discount_range(params.delta);
  if (params.depth < 0) throw PreconditionViolated("depth must be finite and >= 0");
  if (params.epsilon < 0.0) throw PreconditionViolated("epsilon must be >= 0");

  SweepEngine engine(x, y, c, params.epsilon, params.sinkhorn_tol,
                     params.sinkhorn_max_iter, sparse, threads);
  FixedPointResult result;
  result.params = params;
  result.n = x.size();
  result.m = y.size();

  Matrix cur = c;
  bool all_converged = true;
  for (int l = 1; l <= params.depth; ++l) {
    bool last = (l == params.depth);
    bool store = last && !sparse;
    auto sweep = engine.sweep(cur, params.delta, 1.0 - params.delta,
                              /*iter_cap=*/0,
                              store ? &result.cell_solutions : nullptr);
    result.residual = (sweep.next - cur).cwiseAbs().maxCoeff();
    result.residual_trace.push_back(result.residual);
    result.cell_work += sweep.work;
    all_converged = all_converged && sweep.all_converged;
    cur = std::move(sweep.next);
    if (observer && *observer) {
      SweepRecord rec{l, result.residual, cur.minCoeff(), cur.maxCoeff(), 0,
                      sweep.all_converged};
      (*observer)(rec, cur);
    }
  }

  result.iterations = params.depth;
  result.cost_final = std::move(cur);
  result.final_ot = engine.final_ot(result.cost_final);
  all_converged = all_converged && result.final_ot.converged;
  result.value = result.final_ot.value;
  result.converged = all_converged;
  return result;
}

}  // namespace detail

// Depth-k WL distance: k cell-wise OT sweeps over the cost matrix, then one
// OT between the initial distributions. Exact OT at epsilon = 0, entropic
// otherwise.
inline FixedPointResult wl_depth_k(const MarkovChain& x, const MarkovChain& y,
                                   const Matrix& c, int k, double epsilon = 0.0,
                                   int threads = 0) {
  DiscountParams params;
  params.delta = 0.0;
  params.epsilon = epsilon;
  params.depth = k;
  return detail::run_depth_k(x, y, c, params, /*sparse=*/false, threads,
                             nullptr);
}

// Depth-k delta-discounted WL distance. delta = 0 reduces exactly to
// wl_depth_k (same code path).
inline FixedPointResult dwl_depth_k(const MarkovChain& x, const MarkovChain& y,
                                    const Matrix& c,
                                    const DiscountParams& params,
                                    int threads = 0,
                                    const SweepObserver* observer = nullptr) {
  return detail::run_depth_k(x, y, c, params, /*sparse=*/false, threads,
                             observer);
}

// Sparse-kernel variant: every cell solve is restricted to
// supp(m^X_i) x supp(m^Y_j). Forward value only, no backward cache.
inline FixedPointResult dwl_depth_k_sparse(const MarkovChain& x,
                                           const MarkovChain& y,
                                           const Matrix& c,
                                           const DiscountParams& params,
                                           int threads = 0) {
  return detail::run_depth_k(x, y, c, params, /*sparse=*/true, threads,
                             nullptr);
}

// Depth-infinity discounted WL distance: iterate the discounted update to its
// unique fixed point. Stops on the inf-norm residual or on the analytic
// rate-bound iteration cap, whichever comes first; a final full-tolerance
// sweep recomputes and stores every cell's plan and duals for the backward
// pass.
inline FixedPointResult dwl_infinity(const MarkovChain& x, const MarkovChain& y,
                                     const Matrix& c,
                                     const DiscountParams& params,
                                     int threads = 0,
                                     const SweepObserver* observer = nullptr) {
  detail::check_discount_range(params.delta);
  if (!(params.delta > 0.0))
    throw PreconditionViolated(
        "dwl_infinity requires delta > 0 (the delta = 0 fixed point is not "
        "unique; use wl_infinity)");
  if (params.depth != kInfiniteDepth)
    throw PreconditionViolated("dwl_infinity requires depth = INFINITE");
  if (params.epsilon < 0.0) throw PreconditionViolated("epsilon must be >= 0");

  detail::SweepEngine engine(x, y, c, params.epsilon, params.sinkhorn_tol,
                             params.sinkhorn_max_iter, /*sparse=*/false,
                             threads);
  FixedPointResult result;
  result.params = params;
  result.n = x.size();
  result.m = y.size();

  const double tol = detail::default_tol(c, params.tol);
  const int cap = detail::rate_bound_cap(c, params.delta, params.epsilon, tol);

  Matrix cur;
  switch (params.init) {
    case InitKind::delta_C: cur = params.delta * c; break;
    case InitKind::C: cur = c; break;
    case InitKind::zero: cur = Matrix::Zero(x.size(), y.size()); break;
  }

  bool loop_converged = false;
  int sweeps = 0;
  int sinkhorn_cap = params.schedule > 0 ? 1 : 0;
  while (true) {
    auto sweep = engine.sweep(cur, params.delta, 1.0 - params.delta,
                              sinkhorn_cap, nullptr);
    ++sweeps;
    double residual = (sweep.next - cur).cwiseAbs().maxCoeff();
    result.residual_trace.push_back(residual);
    result.cell_work += sweep.work;
    cur = std::move(sweep.next);
    if (observer && *observer) {
      SweepRecord rec{sweeps, residual, cur.minCoeff(), cur.maxCoeff(),
                      sinkhorn_cap, sweep.all_converged};
      (*observer)(rec, cur);
    }
    if (params.schedule > 0) {
      if (residual <= tol && sweep.all_converged) {
        loop_converged = true;
        break;
      }
      if (!sweep.all_converged) sinkhorn_cap += params.schedule;
    } else {
      if (residual <= tol || sweeps >= cap) {
        loop_converged = true;  // residual met, or certified by the rate bound
        break;
      }
    }
    if (sweeps >= params.max_iter) break;
  }

  // Final sweep at full tolerance: the stored plans and duals must be
  // converged artifacts even when scheduling capped intermediate solves.
  auto final_sweep =
      engine.sweep(cur, params.delta, 1.0 - params.delta, /*iter_cap=*/0,
                   &result.cell_solutions);
  result.cell_work += final_sweep.work;
  result.residual = (final_sweep.next - cur).cwiseAbs().maxCoeff();
  result.residual_trace.push_back(result.residual);
  result.cost_final = std::move(final_sweep.next);
  result.iterations = sweeps + 1;

  result.final_ot = engine.final_ot(result.cost_final);
  result.value = result.final_ot.value;
  result.converged =
      loop_converged && final_sweep.all_converged && result.final_ot.converged;
  if (!result.converged && log_level() >= 1)
    std::fprintf(stderr, "[otmkit] dwl_infinity not converged: residual=%g\n",
                 result.residual);
  return result;
}

// Depth-infinity WL diagnostic (delta = 0): under irreducibility and
// aperiodicity the iterates converge to a constant matrix; we iterate until
// the max-min gap closes and report the mean. The min/max envelopes are
// monotone along the way.
inline WlInfinityResult wl_infinity(const MarkovChain& x, const MarkovChain& y,
                                    const Matrix& c, double tol = 1e-6,
                                    int max_iter = 100000, int threads = 0) {
  auto sx = structure_check(x);
  auto sy = structure_check(y);
  if (!sx.irreducible || !sx.aperiodic || !sy.irreducible || !sy.aperiodic)
    throw PreconditionViolated(
        "wl_infinity requires both chains irreducible and aperiodic");
  if (!(tol > 0.0)) throw PreconditionViolated("tol must be > 0");

  detail::SweepEngine engine(x, y, c, /*epsilon=*/0.0, 1e-9, 10000,
                             /*sparse=*/false, threads);
  WlInfinityResult result;
  Matrix cur = c;
  result.min_trace.push_back(cur.minCoeff());
  result.max_trace.push_back(cur.maxCoeff());
  int k = 0;
  while (true) {
    double gap = cur.maxCoeff() - cur.minCoeff();
    if (gap <= tol) {
      result.converged = true;
      break;
    }
    if (k >= max_iter) {
      result.converged = false;
      break;
    }
    auto sweep = engine.sweep(cur, 0.0, 1.0, 0, nullptr);
    cur = std::move(sweep.next);
    ++k;
    result.min_trace.push_back(cur.minCoeff());
    result.max_trace.push_back(cur.maxCoeff());
  }
  result.iterations = k;
  result.gap = cur.maxCoeff() - cur.minCoeff();
  result.value = cur.mean();
  result.cost_final = std::move(cur);
  return result;
}

// General finite-support OTM distance via the backward recursion
// V_K = p(K) C, V_t = p(t) C + OT_cellwise(V_{t+1}), value = OT(nu_x, nu_y; V_0).
inline FixedPointResult otm_general_p(const MarkovChain& x, const MarkovChain& y,
                                      const Matrix& c,
                                      const HorizonDistribution& p,
                                      double epsilon = 0.0, int threads = 0) {
  p.validate();
  if (epsilon < 0.0) throw PreconditionViolated("epsilon must be >= 0");
  const int big_k = static_cast<int>(p.probs.size()) - 1;

  DiscountParams params;
  params.epsilon = epsilon;
  params.depth = big_k;
  detail::SweepEngine engine(x, y, c, epsilon, params.sinkhorn_tol,
                             params.sinkhorn_max_iter, /*sparse=*/false,
                             threads);
  FixedPointResult result;
  result.params = params;
  result.n = x.size();
  result.m = y.size();

  Matrix v = p.probs[big_k] * c;
  for (int t = big_k - 1; t >= 0; --t) {
    bool store = (t == 0);
    auto sweep = engine.sweep(v, p.probs[t], 1.0,
                              /*iter_cap=*/0,
                              store ? &result.cell_solutions : nullptr);
    result.cell_work += sweep.work;
    result.residual = (sweep.next - v).cwiseAbs().maxCoeff();
    v = std::move(sweep.next);
    result.converged = result.converged && sweep.all_converged;
  }
  result.iterations = big_k;
  result.cost_final = std::move(v);
  result.final_ot = engine.final_ot(result.cost_final);
  result.converged = result.converged && result.final_ot.converged;
  result.value = result.final_ot.value;
  return result;
}

struct OtcEntry {
  double delta = 0.0;
  double value = 0.0;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

struct OtcEstimate {
  std::vector<OtcEntry> entries;  // one per schedule delta, decreasing
  double estimate = 0.0;          // value at the smallest delta
  bool trend_nondecreasing = true;  // as delta decreases
  bool all_converged = true;
};

inline double stationarity_residual(const MarkovChain& chain) {
  return (chain.kernel.transpose() * chain.initial - chain.initial).lpNorm<1>();
}

// OTC estimate as the small-delta limit of the discounted distance. Both
// chains must be stationary-initialized; the raw per-delta sequence is
// reported without extrapolation.
inline OtcEstimate otc_estimate(const MarkovChain& x, const MarkovChain& y,
                                const Matrix& c,
                                const std::vector<double>& delta_schedule,
                                double epsilon = 0.0, int threads = 0,
                                const DiscountParams* base_params = nullptr) {
  if (delta_schedule.empty())
    throw PreconditionViolated("delta schedule is empty");
  for (std::size_t i = 0; i < delta_schedule.size(); ++i) {
    if (delta_schedule[i] < 1e-4)
      throw PreconditionViolated("delta schedule entries must be >= 1e-4");
    if (i > 0 && !(delta_schedule[i] < delta_schedule[i - 1]))
      throw PreconditionViolated("delta schedule must be strictly decreasing");
  }
  if (stationarity_residual(x) > 1e-8 || stationarity_residual(y) > 1e-8)
    throw NotStationary(
        "otc_estimate requires stationary initial distributions (balance "
        "residual <= 1e-8)");

  OtcEstimate out;
  double prev = -std::numeric_limits<double>::infinity();
  for (double delta : delta_schedule) {
    DiscountParams params = base_params ? *base_params : DiscountParams{};
    params.delta = delta;
    params.epsilon = epsilon;
    params.depth = kInfiniteDepth;
    auto fp = dwl_infinity(x, y, c, params, threads);
    OtcEntry entry{delta, fp.value, fp.iterations, fp.residual, fp.converged};
    out.entries.push_back(entry);
    out.all_converged = out.all_converged && fp.converged;
    if (entry.value < prev - 1e-9) out.trend_nondecreasing = false;
    prev = entry.value;
    out.estimate = entry.value;
  }
  return out;
}

// Time-homogeneous optimal coupling assembled from the fixed point's per-cell
// plans: joint kernel row (i,j) is the flattened plan P_ij, the joint initial
// is the flattened optimal coupling of the two initial distributions.
inline CouplingPolicy extract_optimal_coupling(const FixedPointResult& result,
                                               const MarkovChain& x,
                                               const MarkovChain& y) {
  if (!result.converged)
    throw NotConverged("extract_optimal_coupling needs a converged result");
  if (result.params.depth != kInfiniteDepth)
    throw PreconditionViolated("coupling extraction needs a depth-infinity run");
  const int n = x.size();
  const int m = y.size();
  if (result.n != n || result.m != m ||
      static_cast<int>(result.cell_solutions.size()) != n * m)
    throw PreconditionViolated("result does not carry a full cell grid");

  CouplingPolicy policy;
  policy.n = n;
  policy.m = m;
  policy.joint_kernel.resize(n * m, n * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const Matrix& plan = result.cell(i, j).plan;
      double row_violation =
          (plan.rowwise().sum() - x.kernel.row(i).transpose()).lpNorm<1>() +
          (plan.colwise().sum().transpose() - y.kernel.row(j).transpose())
              .lpNorm<1>();
      if (row_violation > 1e-6)
        throw PreconditionViolated(
            "cell plan marginals violate the kernels beyond 1e-6");
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < m; ++l)
          policy.joint_kernel(i * m + j, k * m + l) = plan(k, l);
    }

  const Matrix& init_plan = result.final_ot.plan;
  double init_violation =
      (init_plan.rowwise().sum() - x.initial).lpNorm<1>() +
      (init_plan.colwise().sum().transpose() - y.initial).lpNorm<1>();
  if (init_violation > 1e-6)
    throw PreconditionViolated("initial plan marginals violate the initials");
  policy.joint_initial.resize(n * m);
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < m; ++l)
      policy.joint_initial(k * m + l) = init_plan(k, l);
  return policy;
}

// One application of the discounted update, exposed for contraction and
// envelope diagnostics.
inline Matrix apply_discounted_sweep(const MarkovChain& x, const MarkovChain& y,
                                     const Matrix& base, const Matrix& cur,
                                     double delta, double epsilon = 0.0,
                                     int threads = 0) {
  detail::SweepEngine engine(x, y, base, epsilon, 1e-9, 10000, false, threads);
  return engine.sweep(cur, delta, 1.0 - delta, 0, nullptr).next;
}

}  // namespace otmkit::otm
