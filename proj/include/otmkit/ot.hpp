#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "otmkit/core.hpp"

namespace otmkit::ot {

// Dual potentials of an entropic solve. Gauge: mean of f over active rows is
// zero, g absorbs the constant. Entries at excluded (zero-mass) indices are
// reported as 0 and flagged inactive.
struct DualPair {
  Vector f;
  Vector g;
  std::string gauge = "mean-zero-f";
  std::vector<char> row_active;
  std::vector<char> col_active;
};

struct OtSolution {
  double value = 0.0;
  Matrix plan;
  std::optional<DualPair> duals;  // entropic path only
  int iterations = 0;
  bool converged = true;
  double epsilon = 0.0;
};

struct SinkhornControl {
  double tol = 1e-9;  // L1 marginal violation
  int max_iter = 10000;
  const DualPair* warm = nullptr;  // full-length potentials to start from
};

namespace detail {

inline constexpr double kMarginalTol = 1e-9;

using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_problem(const Vector& alpha, const Vector& beta,
                          const Matrix& cost) {
  if (cost.rows() != alpha.size() || cost.cols() != beta.size())
    throw DimensionMismatch("cost is " + std::to_string(cost.rows()) + "x" +
                            std::to_string(cost.cols()) + " for marginals " +
                            std::to_string(alpha.size()) + "/" +
                            std::to_string(beta.size()));
  if (!cost.allFinite())
    throw NonFiniteCost("cost matrix has non-finite entries");
  if (alpha.minCoeff() < 0.0 || beta.minCoeff() < 0.0)
    throw MarginalNotNormalized("marginals must be nonnegative");
  if (std::abs(alpha.sum() - 1.0) > kMarginalTol ||
      std::abs(beta.sum() - 1.0) > kMarginalTol)
    throw MarginalNotNormalized("marginals must sum to 1");
}

inline std::vector<int> positive_indices(const Vector& v) {
  std::vector<int> idx;
  idx.reserve(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (v(i) > 0.0) idx.push_back(static_cast<int>(i));
  return idx;
}

// ---------------------------------------------------------------------------
// Transportation simplex on the bipartite transport polytope. Northwest-corner
// start, Bland entering/leaving rules (lexicographic by (row, col)), so the
// returned plan is a deterministic optimal vertex even under degeneracy.
// ---------------------------------------------------------------------------

class TransportSimplex {
 public:
  TransportSimplex(std::vector<double> supply, std::vector<double> demand,
                   Matrix cost)
      : a_(std::move(supply)),
        b_(std::move(demand)),
        c_(std::move(cost)),
        n_(static_cast<int>(a_.size())),
        m_(static_cast<int>(b_.size())) {}

  void solve() {
    flow_ = Matrix::Zero(n_, m_);
    in_basis_.assign(static_cast<std::size_t>(n_) * m_, 0);
    northwest_corner();

    const double scale = std::max(1.0, c_.cwiseAbs().maxCoeff());
    const double tol = 1e-13 * scale;
    const long cap = 2000L + 64L * n_ * m_ * (n_ + m_);
    for (pivots_ = 0; pivots_ < cap; ++pivots_) {
      compute_duals();
      int ei = -1, ej = -1;
      for (int i = 0; i < n_ && ei < 0; ++i)
        for (int j = 0; j < m_; ++j) {
          if (in_basis_[idx(i, j)]) continue;
          if (c_(i, j) - u_[i] - v_[j] < -tol) {
            ei = i;
            ej = j;
            break;
          }
        }
      if (ei < 0) return;  // optimal
      pivot(ei, ej);
    }
    throw NotConverged("transport simplex exceeded its pivot cap");
  }

  const Matrix& flow() const { return flow_; }
  int pivots() const { return static_cast<int>(pivots_); }

 private:
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * m_ + j;
  }

  void northwest_corner() {
    std::vector<double> ra = a_, rb = b_;
    basis_.clear();
    int i = 0, j = 0;
    while (true) {
      double t = std::min(ra[i], rb[j]);
      flow_(i, j) = t;
      in_basis_[idx(i, j)] = 1;
      basis_.emplace_back(i, j);
      ra[i] -= t;
      rb[j] -= t;
      if (i == n_ - 1 && j == m_ - 1) break;
      if (j == m_ - 1) {
        ++i;
      } else if (i == n_ - 1) {
        ++j;
      } else if (ra[i] <= rb[j]) {
        ++i;  // ties advance the row, leaving a degenerate basic cell behind
      } else {
        ++j;
      }
    }
  }

  // Duals from the spanning-tree basis: u_0 = 0, propagate along basic arcs.
  void compute_duals() {
    u_.assign(n_, 0.0);
    v_.assign(m_, 0.0);
    std::vector<char> useen(n_, 0), vseen(m_, 0);
    std::vector<std::vector<int>> row_arcs(n_), col_arcs(m_);
    for (int k = 0; k < static_cast<int>(basis_.size()); ++k) {
      row_arcs[basis_[k].first].push_back(k);
      col_arcs[basis_[k].second].push_back(k);
    }
    std::vector<int> queue{0};
    useen[0] = 1;
    std::size_t head = 0;
    while (head < queue.size()) {
      int node = queue[head++];
      if (node < n_) {
        for (int k : row_arcs[node]) {
          int j = basis_[k].second;
          if (!vseen[j]) {
            vseen[j] = 1;
            v_[j] = c_(node, j) - u_[node];
            queue.push_back(n_ + j);
          }
        }
      } else {
        int j = node - n_;
        for (int k : col_arcs[j]) {
          int i = basis_[k].first;
          if (!useen[i]) {
            useen[i] = 1;
            u_[i] = c_(i, j) - v_[j];
            queue.push_back(i);
          }
        }
      }
    }
  }

  // Add the entering arc, walk the unique tree cycle, shift flow by the
  // min over minus-arcs, drop the lexicographically smallest blocking arc.
  void pivot(int ei, int ej) {
    const int nodes = n_ + m_;
    std::vector<std::vector<std::pair<int, int>>> adj(nodes);  // (next, arc)
    for (int k = 0; k < static_cast<int>(basis_.size()); ++k) {
      auto [i, j] = basis_[k];
      adj[i].emplace_back(n_ + j, k);
      adj[n_ + j].emplace_back(i, k);
    }
    std::vector<int> parent(nodes, -1), parent_arc(nodes, -1);
    std::vector<char> seen(nodes, 0);
    std::vector<int> queue{ei};
    seen[ei] = 1;
    std::size_t head = 0;
    while (head < queue.size() && !seen[n_ + ej]) {
      int u = queue[head++];
      for (auto [w, k] : adj[u]) {
        if (!seen[w]) {
          seen[w] = 1;
          parent[w] = u;
          parent_arc[w] = k;
          queue.push_back(w);
        }
      }
    }

    std::vector<int> path_arcs;  // from ei to the col node of the entering arc
    for (int w = n_ + ej; w != ei; w = parent[w])
      path_arcs.push_back(parent_arc[w]);
    std::reverse(path_arcs.begin(), path_arcs.end());

    // Signs alternate around the cycle; the first tree arc out of ei is a
    // minus arc (the entering arc itself carries the plus).
    double theta = std::numeric_limits<double>::infinity();
    int leave = -1;
    int sign = -1;
    for (int k : path_arcs) {
      if (sign < 0) {
        auto [i, j] = basis_[k];
        double f = flow_(i, j);
        if (f < theta ||
            (f == theta && (leave < 0 || basis_[k] < basis_[leave]))) {
          theta = f;
          leave = k;
        }
      }
      sign = -sign;
    }

    flow_(ei, ej) += theta;
    sign = -1;
    for (int k : path_arcs) {
      auto [i, j] = basis_[k];
      flow_(i, j) += sign * theta;
      sign = -sign;
    }
    auto [li, lj] = basis_[leave];
    flow_(li, lj) = 0.0;
    in_basis_[idx(li, lj)] = 0;
    in_basis_[idx(ei, ej)] = 1;
    basis_[leave] = {ei, ej};
  }

  std::vector<double> a_, b_;
  Matrix c_;
  int n_, m_;
  Matrix flow_;
  std::vector<std::pair<int, int>> basis_;
  std::vector<char> in_basis_;
  std::vector<double> u_, v_;
  long pivots_ = 0;
};

}  // namespace detail

// Exact optimal transport: a deterministic optimal vertex of the transport
// polytope. Zero-mass marginal entries are excluded up front and re-embedded
// as zero rows/columns of the plan.
inline OtSolution exact_ot(const Vector& alpha, const Vector& beta,
                           const Matrix& cost) {
  detail::check_problem(alpha, beta, cost);
  const int n = static_cast<int>(alpha.size());
  const int m = static_cast<int>(beta.size());
  auto rows = detail::positive_indices(alpha);
  auto cols = detail::positive_indices(beta);
  const int na = static_cast<int>(rows.size());
  const int nb = static_cast<int>(cols.size());

  std::vector<double> a(na), b(nb);
  double sa = 0.0, sb = 0.0;
  for (int i = 0; i < na; ++i) sa += (a[i] = alpha(rows[i]));
  for (int j = 0; j < nb; ++j) sb += (b[j] = beta(cols[j]));
  for (int j = 0; j < nb; ++j) b[j] *= sa / sb;  // exact feasibility

  Matrix sub(na, nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) sub(i, j) = cost(rows[i], cols[j]);

  detail::TransportSimplex simplex(std::move(a), std::move(b), std::move(sub));
  simplex.solve();

  OtSolution out;
  out.plan = Matrix::Zero(n, m);
  double value = 0.0;
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) {
      double f = simplex.flow()(i, j);
      out.plan(rows[i], cols[j]) = f;
      value += f * cost(rows[i], cols[j]);
    }
  out.value = value;
  out.iterations = simplex.pivots();
  out.converged = true;
  out.epsilon = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Log-domain Sinkhorn with soft-min updates, stable down to
// epsilon ~ 1e-4 * ||C||_inf. Plan parametrization on the active support:
// P_ij = exp((phi_i + psi_j - C_ij) / eps). The returned value follows the
// entropic objective <P, C> - eps * H(P).
// ---------------------------------------------------------------------------

namespace detail {

class LogSinkhorn {
 public:
  LogSinkhorn(const std::vector<double>& a, const std::vector<double>& b,
              RowMajorMatrix c)
      : a_(a),
        b_(b),
        c_(std::move(c)),
        ct_(c_.transpose()),
        na_(static_cast<int>(a.size())),
        nb_(static_cast<int>(b.size())),
        phi_(na_, 0.0),
        psi_(nb_, 0.0),
        row_lse_(na_, 0.0) {
    loga_.resize(na_);
    logb_.resize(nb_);
    for (int i = 0; i < na_; ++i) loga_[i] = std::log(a_[i]);
    for (int j = 0; j < nb_; ++j) logb_[j] = std::log(b_[j]);
  }

  // Full iterations at `eps` until the L1 row violation drops below `tol`
  // (columns are exact after each psi update) or `iter_cap` is exhausted.
  // Returns true on convergence. `total` accrues across calls.
  bool run(double eps, double tol, int iter_cap, int global_cap, int& total) {
    for (int it = 0; it < iter_cap; ++it) {
      double err = 0.0;
      for (int i = 0; i < na_; ++i) {
        const double* crow = c_.data() + static_cast<std::size_t>(i) * nb_;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < nb_; ++j) mx = std::max(mx, psi_[j] - crow[j]);
        double s = 0.0;
        for (int j = 0; j < nb_; ++j)
          s += std::exp((psi_[j] - crow[j] - mx) / eps);
        double lse = mx / eps + std::log(s);
        if (it > 0) err += std::abs(std::exp(phi_[i] / eps + lse) - a_[i]);
        row_lse_[i] = lse;
      }
      if (it > 0 && err <= tol) return true;
      for (int i = 0; i < na_; ++i) phi_[i] = eps * (loga_[i] - row_lse_[i]);
      for (int j = 0; j < nb_; ++j) {
        const double* ccol = ct_.data() + static_cast<std::size_t>(j) * na_;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < na_; ++i) mx = std::max(mx, phi_[i] - ccol[i]);
        double s = 0.0;
        for (int i = 0; i < na_; ++i)
          s += std::exp((phi_[i] - ccol[i] - mx) / eps);
        psi_[j] = eps * (logb_[j] - mx / eps - std::log(s));
      }
      ++total;
      if (total >= global_cap) return false;
    }
    return false;
  }

  std::vector<double>& phi() { return phi_; }
  std::vector<double>& psi() { return psi_; }
  const RowMajorMatrix& cost() const { return c_; }

 private:
  std::vector<double> a_, b_, loga_, logb_;
  RowMajorMatrix c_, ct_;
  int na_, nb_;
  std::vector<double> phi_, psi_, row_lse_;
};

}  // namespace detail

inline OtSolution sinkhorn(const Vector& alpha, const Vector& beta,
                           const Matrix& cost, double epsilon,
                           const SinkhornControl& control = {}) {
  if (!(epsilon > 0.0))
    throw PreconditionViolated("sinkhorn requires epsilon > 0");
  detail::check_problem(alpha, beta, cost);

  const int n = static_cast<int>(alpha.size());
  const int m = static_cast<int>(beta.size());
  // Zero-mass marginal entries would pin log potentials at -inf; drop them
  // from the active index set and report zero duals there.
  auto rows = detail::positive_indices(alpha);
  auto cols = detail::positive_indices(beta);
  const int na = static_cast<int>(rows.size());
  const int nb = static_cast<int>(cols.size());

  std::vector<double> a(na), b(nb);
  for (int i = 0; i < na; ++i) a[i] = alpha(rows[i]);
  for (int j = 0; j < nb; ++j) b[j] = beta(cols[j]);

  detail::RowMajorMatrix c(na, nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) c(i, j) = cost(rows[i], cols[j]);
  const double cost_range = c.maxCoeff() - c.minCoeff();

  detail::LogSinkhorn engine(a, b, std::move(c));
  bool warm = control.warm != nullptr && control.warm->f.size() == n &&
              control.warm->g.size() == m;
  if (warm) {
    for (int i = 0; i < na; ++i) engine.phi()[i] = control.warm->f(rows[i]);
    for (int j = 0; j < nb; ++j) engine.psi()[j] = control.warm->g(cols[j]);
  }

  int iterations = 0;
  // Cold starts at small epsilon crawl; anneal from a coarse epsilon down to
  // the target, then converge fully there. Warm starts skip the ladder.
  if (!warm && cost_range > 0.0 && epsilon < 0.02 * cost_range) {
    double e = 0.2 * cost_range;
    while (e > 3.0 * epsilon && iterations + 40 < control.max_iter) {
      engine.run(e, std::max(1e-3, control.tol), 40, control.max_iter,
                 iterations);
      e /= 3.0;
    }
  }
  bool converged = engine.run(epsilon, control.tol,
                              std::max(1, control.max_iter - iterations),
                              control.max_iter, iterations);

  OtSolution out;
  out.epsilon = epsilon;
  out.iterations = iterations;
  out.converged = converged;
  out.plan = Matrix::Zero(n, m);
  double value = 0.0;
  double entropy = 0.0;
  const auto& phi = engine.phi();
  const auto& psi = engine.psi();
  const auto& cc = engine.cost();
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) {
      double lp = (phi[i] + psi[j] - cc(i, j)) / epsilon;
      double p = std::exp(lp);
      out.plan(rows[i], cols[j]) = p;
      value += p * cc(i, j);
      if (p > 0.0) entropy -= p * lp;
    }
  out.value = value - epsilon * entropy;

  DualPair duals;
  duals.f = Vector::Zero(n);
  duals.g = Vector::Zero(m);
  duals.row_active.assign(n, 0);
  duals.col_active.assign(m, 0);
  double mean_phi = 0.0;
  for (int i = 0; i < na; ++i) mean_phi += phi[i];
  mean_phi /= std::max(1, na);
  for (int i = 0; i < na; ++i) {
    duals.f(rows[i]) = phi[i] - mean_phi;
    duals.row_active[rows[i]] = 1;
  }
  for (int j = 0; j < nb; ++j) {
    duals.g(cols[j]) = psi[j] + mean_phi;
    duals.col_active[cols[j]] = 1;
  }
  out.duals = std::move(duals);
  return out;
}

// Dispatch helper used by the fixed-point sweeps.
inline OtSolution solve_ot(const Vector& alpha, const Vector& beta,
                           const Matrix& cost, double epsilon,
                           const SinkhornControl& control = {}) {
  if (epsilon > 0.0) return sinkhorn(alpha, beta, cost, epsilon, control);
  return exact_ot(alpha, beta, cost);
}

struct RestrictedSolution {
  OtSolution solution;    // in restricted coordinates
  std::vector<int> rows;  // restricted row index -> original row
  std::vector<int> cols;

  Matrix embed_plan(int n, int m) const {
    Matrix full = Matrix::Zero(n, m);
    for (int i = 0; i < static_cast<int>(rows.size()); ++i)
      for (int j = 0; j < static_cast<int>(cols.size()); ++j)
        full(rows[i], cols[j]) = solution.plan(i, j);
    return full;
  }
};

// Restriction identity: solving on declared supports equals the dense solve
// as long as no marginal mass lies outside them.
inline RestrictedSolution solve_restricted(const Vector& alpha,
                                           const Vector& beta,
                                           const Matrix& cost,
                                           std::vector<int> support_rows,
                                           std::vector<int> support_cols,
                                           double epsilon,
                                           const SinkhornControl& control = {}) {
  detail::check_problem(alpha, beta, cost);
  std::vector<char> in_rows(alpha.size(), 0), in_cols(beta.size(), 0);
  for (int i : support_rows) {
    if (i < 0 || i >= alpha.size())
      throw DimensionMismatch("support row index out of range");
    in_rows[i] = 1;
  }
  for (int j : support_cols) {
    if (j < 0 || j >= beta.size())
      throw DimensionMismatch("support col index out of range");
    in_cols[j] = 1;
  }
  for (Eigen::Index i = 0; i < alpha.size(); ++i)
    if (alpha(i) > 0.0 && !in_rows[i])
      throw SupportViolation("source mass outside declared row support");
  for (Eigen::Index j = 0; j < beta.size(); ++j)
    if (beta(j) > 0.0 && !in_cols[j])
      throw SupportViolation("target mass outside declared column support");

  const int na = static_cast<int>(support_rows.size());
  const int nb = static_cast<int>(support_cols.size());
  Vector sub_a(na), sub_b(nb);
  Matrix sub_c(na, nb);
  for (int i = 0; i < na; ++i) sub_a(i) = alpha(support_rows[i]);
  for (int j = 0; j < nb; ++j) sub_b(j) = beta(support_cols[j]);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j)
      sub_c(i, j) = cost(support_rows[i], support_cols[j]);

  RestrictedSolution out;
  out.solution = solve_ot(sub_a, sub_b, sub_c, epsilon, control);
  out.rows = std::move(support_rows);
  out.cols = std::move(support_cols);
  return out;
}

}  // namespace otmkit::ot
