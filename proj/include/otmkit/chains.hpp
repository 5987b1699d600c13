#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "otmkit/core.hpp"

namespace otmkit {

// Finite Markov chain: row-stochastic kernel, initial distribution, optional
// per-state label vectors (one row per state). Immutable after validation.
struct MarkovChain {
  Matrix kernel;
  Vector initial;
  std::optional<Matrix> labels;
  bool rows_renormalized = false;
  std::vector<int> dangling_states;  // provenance from graph conversion

  int size() const { return static_cast<int>(kernel.rows()); }
  int label_dim() const {
    return labels ? static_cast<int>(labels->cols()) : 0;
  }
};

struct LabeledGraph {
  struct Edge {
    int src = 0;
    int dst = 0;
    double weight = 1.0;
  };
  int node_count = 0;
  std::vector<Edge> edges;
  std::optional<Matrix> labels;
};

enum class CostMetric { euclidean, manhattan, hamming, discrete };

struct CostSpec {
  CostMetric metric = CostMetric::euclidean;
  double scale = 1.0;
};

enum class DanglingPolicy { self_loop, uniform_jump };

struct InitialPolicy {
  enum class Kind { uniform, provided, stationary };
  Kind kind = Kind::uniform;
  Vector vec;

  static InitialPolicy uniform() { return {Kind::uniform, {}}; }
  static InitialPolicy provided(Vector v) {
    return {Kind::provided, std::move(v)};
  }
  static InitialPolicy stationary() { return {Kind::stationary, {}}; }
};

struct StructureReport {
  bool irreducible = false;
  bool aperiodic = false;
  int max_out_degree = 0;
  std::vector<int> support_sizes;
  std::vector<int> dangling_states;
};

namespace detail {

// Accept per-row deviation up to kRowSumTol: real-world graph ingestion
// produces rounding noise. Renormalize and record anything above dust level;
// larger deviations are the caller's bug, not noise.
inline constexpr double kRowSumTol = 1e-9;
inline constexpr double kRowSumDust = 1e-15;

inline void check_finite(const Matrix& a, const char* what) {
  if (!a.allFinite())
    throw NonFiniteCost(std::string(what) + " has non-finite entries");
}

inline void check_finite(const Vector& a, const char* what) {
  if (!a.allFinite())
    throw NonFiniteCost(std::string(what) + " has non-finite entries");
}

}  // namespace detail

inline MarkovChain validate_chain(Matrix kernel, Vector initial,
                                  std::optional<Matrix> labels = std::nullopt) {
  const auto n = kernel.rows();
  if (n == 0 || kernel.cols() != n)
    throw DimensionMismatch("kernel must be square and non-empty");
  if (initial.size() != n)
    throw DimensionMismatch("initial length " + std::to_string(initial.size()) +
                            " != state count " + std::to_string(n));
  if (labels && labels->rows() != n)
    throw DimensionMismatch("labels row count != state count");
  detail::check_finite(kernel, "kernel");
  detail::check_finite(initial, "initial");

  if (kernel.minCoeff() < 0.0)
    throw NegativeEntry("kernel has a negative transition probability");
  if (initial.minCoeff() < 0.0)
    throw NegativeEntry("initial distribution has a negative entry");

  bool renormalized = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = kernel.row(i).sum();
    double dev = std::abs(s - 1.0);
    if (dev > detail::kRowSumTol)
      throw RowSumViolation("kernel row " + std::to_string(i) + " sums to " +
                            std::to_string(s));
    if (dev > detail::kRowSumDust) {
      kernel.row(i) /= s;
      renormalized = true;
    }
  }
  {
    double s = initial.sum();
    double dev = std::abs(s - 1.0);
    if (dev > detail::kRowSumTol)
      throw RowSumViolation("initial distribution sums to " +
                            std::to_string(s));
    if (dev > detail::kRowSumDust) {
      initial /= s;
      renormalized = true;
    }
  }

  MarkovChain chain;
  chain.kernel = std::move(kernel);
  chain.initial = std::move(initial);
  chain.labels = std::move(labels);
  chain.rows_renormalized = renormalized;
  return chain;
}

inline void validate_graph(const LabeledGraph& g) {
  if (g.node_count <= 0) throw PreconditionViolated("graph has no nodes");
  for (const auto& e : g.edges) {
    if (e.src < 0 || e.src >= g.node_count || e.dst < 0 ||
        e.dst >= g.node_count)
      throw PreconditionViolated("edge endpoint out of range");
    if (!(e.weight > 0.0))
      throw PreconditionViolated("edge weights must be strictly positive");
  }
  if (g.labels && g.labels->rows() != g.node_count)
    throw DimensionMismatch("label row count != node count");
}

inline Vector stationary_distribution(const MarkovChain& chain);

// Random-walk kernel: row i is the weight-proportional distribution over the
// out-neighbors of i, mixed with self-loop mass lazy_prob. Dangling rows are
// patched by policy and recorded in the resulting chain.
inline MarkovChain graph_to_chain(
    const LabeledGraph& graph,
    DanglingPolicy dangling_policy = DanglingPolicy::self_loop,
    double lazy_prob = 0.0,
    InitialPolicy initial_policy = InitialPolicy::uniform()) {
  validate_graph(graph);
  if (!(lazy_prob >= 0.0 && lazy_prob < 1.0))
    throw PreconditionViolated("lazy_prob must lie in [0, 1)");

  const int n = graph.node_count;
  Matrix kernel = Matrix::Zero(n, n);
  Vector out_weight = Vector::Zero(n);
  for (const auto& e : graph.edges) {
    kernel(e.src, e.dst) += e.weight;
    out_weight(e.src) += e.weight;
  }

  std::vector<int> dangling;
  for (int i = 0; i < n; ++i) {
    if (out_weight(i) > 0.0) {
      kernel.row(i) *= (1.0 - lazy_prob) / out_weight(i);
      kernel(i, i) += lazy_prob;
    } else {
      dangling.push_back(i);
      if (dangling_policy == DanglingPolicy::self_loop) {
        kernel(i, i) = 1.0;
      } else {
        kernel.row(i).setConstant(1.0 / n);
      }
    }
  }

  Vector init;
  switch (initial_policy.kind) {
    case InitialPolicy::Kind::uniform:
      init = Vector::Constant(n, 1.0 / n);
      break;
    case InitialPolicy::Kind::provided:
      init = initial_policy.vec;
      break;
    case InitialPolicy::Kind::stationary: {
      MarkovChain tmp = validate_chain(kernel, Vector::Constant(n, 1.0 / n));
      try {
        init = stationary_distribution(tmp);
      } catch (const OtmError& e) {
        throw StationaryUnavailable(e.what());
      }
      break;
    }
  }

  MarkovChain chain =
      validate_chain(std::move(kernel), std::move(init), graph.labels);
  chain.dangling_states = std::move(dangling);
  return chain;
}

namespace detail {

inline double label_metric(CostMetric metric, const Eigen::RowVectorXd& x,
                           const Eigen::RowVectorXd& y) {
  switch (metric) {
    case CostMetric::euclidean:
      return (x - y).norm();
    case CostMetric::manhattan:
      return (x - y).lpNorm<1>();
    case CostMetric::hamming: {
      double c = 0.0;
      for (Eigen::Index k = 0; k < x.size(); ++k)
        if (x(k) != y(k)) c += 1.0;
      return c;
    }
    case CostMetric::discrete:
      return (x.array() == y.array()).all() ? 0.0 : 1.0;
  }
  return 0.0;
}

}  // namespace detail

// C_ij = scale * metric(labels_X(i), labels_Y(j)). The discrete metric falls
// back to state identity (C_ij = scale * 1[i != j]) when both chains are
// unlabeled on a shared state space.
inline Matrix cost_matrix(const MarkovChain& x, const MarkovChain& y,
                          const CostSpec& spec) {
  if (!(spec.scale > 0.0)) throw PreconditionViolated("cost scale must be > 0");
  const int n = x.size();
  const int m = y.size();
  Matrix c(n, m);

  if (!x.labels || !y.labels) {
    if (spec.metric == CostMetric::discrete && !x.labels && !y.labels &&
        n == m) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) c(i, j) = (i == j) ? 0.0 : spec.scale;
      return c;
    }
    throw MissingLabels("both chains need labels for this cost metric");
  }
  if (x.label_dim() != y.label_dim())
    throw LabelDimensionMismatch("label dims " + std::to_string(x.label_dim()) +
                                 " vs " + std::to_string(y.label_dim()));

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      c(i, j) = spec.scale * detail::label_metric(spec.metric, x.labels->row(i),
                                                  y.labels->row(j));
  return c;
}

// Direct solve of mu^T K = mu^T with sum(mu) = 1 via rank-revealing QR.
// Periodic chains keep their stationary vector here, where power iteration
// would oscillate. A rank deficiency beyond the single expected null
// direction means the chain is reducible with no canonical choice.
inline Vector stationary_distribution(const MarkovChain& chain) {
  const int n = chain.size();
  Matrix a(n + 1, n);
  a.topRows(n) = chain.kernel.transpose() - Matrix::Identity(n, n);
  a.row(n).setOnes();
  Vector b = Vector::Zero(n + 1);
  b(n) = 1.0;

  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() < n)
    throw NonUniqueStationary(
        "reducible chain: stationary distribution is not unique; supply an "
        "initial distribution explicitly");
  Vector mu = qr.solve(b);

  for (int i = 0; i < n; ++i) {
    if (mu(i) < 0.0) {
      if (mu(i) < -1e-10)
        throw NonUniqueStationary("stationary solve produced negative mass");
      mu(i) = 0.0;
    }
  }
  mu /= mu.sum();

  double residual = (chain.kernel.transpose() * mu - mu).lpNorm<1>();
  if (residual > 1e-10)
    throw NonUniqueStationary("stationary residual " + std::to_string(residual) +
                              " exceeds 1e-10");
  return mu;
}

namespace detail {

// Strongly connected components of the positive-entry digraph (iterative
// Kosaraju; n is small but recursion depth should not depend on it).
inline std::vector<int> scc_labels(const Matrix& kernel, int& scc_count) {
  const int n = static_cast<int>(kernel.rows());
  std::vector<std::vector<int>> fwd(n), rev(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (kernel(i, j) > 0.0) {
        fwd[i].push_back(j);
        rev[j].push_back(i);
      }

  std::vector<int> order;
  order.reserve(n);
  std::vector<char> seen(n, 0);
  for (int s = 0; s < n; ++s) {
    if (seen[s]) continue;
    // DFS with explicit stack; push post-order
    std::vector<std::pair<int, int>> stack{{s, 0}};
    seen[s] = 1;
    while (!stack.empty()) {
      auto& [u, idx] = stack.back();
      if (idx < static_cast<int>(fwd[u].size())) {
        int v = fwd[u][idx++];
        if (!seen[v]) {
          seen[v] = 1;
          stack.emplace_back(v, 0);
        }
      } else {
        order.push_back(u);
        stack.pop_back();
      }
    }
  }

  std::vector<int> comp(n, -1);
  scc_count = 0;
  for (int k = n - 1; k >= 0; --k) {
    int s = order[k];
    if (comp[s] != -1) continue;
    std::vector<int> stack{s};
    comp[s] = scc_count;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      for (int v : rev[u])
        if (comp[v] == -1) {
          comp[v] = scc_count;
          stack.push_back(v);
        }
    }
    ++scc_count;
  }
  return comp;
}

// Period of one SCC = gcd over internal edges (u -> v) of level(u)+1-level(v),
// with BFS levels from an arbitrary root. States with no return path are
// skipped by the caller.
inline int scc_period(const Matrix& kernel, const std::vector<int>& comp,
                      int target, int root) {
  const int n = static_cast<int>(kernel.rows());
  std::vector<int> level(n, -1);
  std::vector<int> queue{root};
  level[root] = 0;
  std::size_t head = 0;
  while (head < queue.size()) {
    int u = queue[head++];
    for (int v = 0; v < n; ++v) {
      if (kernel(u, v) > 0.0 && comp[v] == target && level[v] == -1) {
        level[v] = level[u] + 1;
        queue.push_back(v);
      }
    }
  }
  int g = 0;
  for (int u = 0; u < n; ++u) {
    if (comp[u] != target) continue;
    for (int v = 0; v < n; ++v)
      if (kernel(u, v) > 0.0 && comp[v] == target)
        g = std::gcd(g, std::abs(level[u] + 1 - level[v]));
  }
  return g == 0 ? 0 : g;
}

}  // namespace detail

inline StructureReport structure_check(const MarkovChain& chain) {
  const int n = chain.size();
  StructureReport report;
  report.support_sizes.resize(n);
  for (int i = 0; i < n; ++i) {
    int deg = 0;
    for (int j = 0; j < n; ++j)
      if (chain.kernel(i, j) > 0.0) ++deg;  // support iff strictly positive
    report.support_sizes[i] = deg;
  }
  report.max_out_degree =
      *std::max_element(report.support_sizes.begin(), report.support_sizes.end());

  int scc_count = 0;
  std::vector<int> comp = detail::scc_labels(chain.kernel, scc_count);
  report.irreducible = (scc_count == 1);

  // Aperiodic iff every state that lies on some cycle has period 1.
  report.aperiodic = true;
  std::vector<int> root(scc_count, -1);
  std::vector<int> size(scc_count, 0);
  std::vector<char> has_cycle(scc_count, 0);
  for (int i = 0; i < n; ++i) {
    if (root[comp[i]] == -1) root[comp[i]] = i;
    ++size[comp[i]];
    if (chain.kernel(i, i) > 0.0) has_cycle[comp[i]] = 1;
  }
  for (int c = 0; c < scc_count; ++c) {
    if (size[c] == 1 && !has_cycle[c]) continue;  // transient, no return path
    int period = detail::scc_period(chain.kernel, comp, c, root[c]);
    if (period != 1) {
      report.aperiodic = false;
      break;
    }
  }

  report.dangling_states = chain.dangling_states;
  return report;
}

}  // namespace otmkit
