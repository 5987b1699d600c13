#pragma once

#include <vector>

#include "otmkit/otmkit.hpp"

namespace otmkit::testing {

// Random row-stochastic chain with all entries bounded away from zero when
// floor_mass > 0 (guarantees irreducibility and aperiodicity).
inline MarkovChain random_chain(int n, CounterRng& rng, double floor_mass = 0.05,
                                int label_dim = 0) {
  Matrix kernel(n, n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      kernel(i, j) = floor_mass + rng.next_double();
      s += kernel(i, j);
    }
    kernel.row(i) /= s;
  }
  Vector initial(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    initial(i) = 0.1 + rng.next_double();
    s += initial(i);
  }
  initial /= s;
  std::optional<Matrix> labels;
  if (label_dim > 0) {
    Matrix l(n, label_dim);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < label_dim; ++d) l(i, d) = rng.next_double();
    labels = l;
  }
  return validate_chain(std::move(kernel), std::move(initial), std::move(labels));
}

// Random chain with at most max_degree nonzeros per row.
inline MarkovChain random_sparse_chain(int n, int max_degree, CounterRng& rng) {
  Matrix kernel = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    int degree = 1 + rng.next_int(max_degree);
    double s = 0.0;
    for (int d = 0; d < degree; ++d) {
      int j = rng.next_int(n);
      double w = 0.2 + rng.next_double();
      kernel(i, j) += w;
      s += w;
    }
    kernel.row(i) /= s;
  }
  Vector initial(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    initial(i) = 0.1 + rng.next_double();
    s += initial(i);
  }
  initial /= s;
  return validate_chain(std::move(kernel), std::move(initial));
}

inline Matrix random_cost(int n, int m, CounterRng& rng, double offset = 0.2) {
  Matrix c(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) c(i, j) = offset + rng.next_double();
  return c;
}

inline Vector random_simplex(int n, CounterRng& rng) {
  Vector v(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    v(i) = 0.05 + rng.next_double();
    s += v(i);
  }
  return v / s;
}

// Stationary-initialized copy of a chain.
inline MarkovChain stationary_version(const MarkovChain& chain) {
  MarkovChain out = chain;
  out.initial = stationary_distribution(chain);
  return out;
}

// Relabel the states of a chain by permutation sigma (state i -> sigma[i]).
inline MarkovChain permute_chain(const MarkovChain& chain,
                                 const std::vector<int>& sigma) {
  const int n = chain.size();
  Matrix kernel(n, n);
  Vector initial(n);
  for (int i = 0; i < n; ++i) {
    initial(sigma[i]) = chain.initial(i);
    for (int j = 0; j < n; ++j) kernel(sigma[i], sigma[j]) = chain.kernel(i, j);
  }
  MarkovChain out;
  out.kernel = std::move(kernel);
  out.initial = std::move(initial);
  if (chain.labels) {
    Matrix labels(n, chain.labels->cols());
    for (int i = 0; i < n; ++i) labels.row(sigma[i]) = chain.labels->row(i);
    out.labels = std::move(labels);
  }
  return out;
}

}  // namespace otmkit::testing
