#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrw/affinity_head.hpp"

namespace gsrw {

/// Row-stochastic, zero-diagonal transition matrix over the gallery graph.
struct TransitionMatrix {
  Eigen::MatrixXd W;

  int n() const { return static_cast<int>(W.rows()); }
};

/// lambda weights the diffusion term against the initial affinities and must
/// stay strictly below 1: at lambda = 1 the geometric series behind the
/// closed form diverges and I - lambda*W is singular for row-stochastic W.
struct RWConfig {
  double lambda = 0.95;
  std::optional<int> iterations;  // unset selects the closed form
  double tolerance = 1e-8;

  void validate() const {
    if (!(lambda >= 0.0 && lambda < 1.0))
      throw std::invalid_argument("RWConfig: lambda must lie in [0, 1)");
    if (iterations && *iterations <= 0)
      throw std::invalid_argument("RWConfig: iterations must be positive");
    if (!(tolerance > 0.0)) throw std::invalid_argument("RWConfig: tolerance must be positive");
  }
};

/// Row-softmax over the off-diagonal entries of S. The diagonal is pinned to
/// zero so the walk cannot reinforce a node through itself. Each row's
/// maximum off-diagonal entry is subtracted before exponentiation, which
/// leaves the result unchanged and keeps exp() in range.
inline TransitionMatrix normalize(const Eigen::MatrixXd& S) {
  const Eigen::Index n = S.rows();
  if (S.cols() != n) throw std::invalid_argument("normalize: S must be square");
  if (n < 2) throw std::invalid_argument("normalize: need at least 2 gallery images");
  if (!S.allFinite()) throw std::invalid_argument("normalize: non-finite entries in S");

  TransitionMatrix tm;
  tm.W = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) row_max = std::max(row_max, S(i, j));
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) denom += std::exp(S(i, j) - row_max);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) tm.W(i, j) = std::exp(S(i, j) - row_max) / denom;
  }
  return tm;
}

/// Runs t steps of y <- lambda*W*y + (1-lambda)*y0. t = 0 returns y0.
inline Eigen::VectorXd rw_iterative(const TransitionMatrix& tm,
                                    const Eigen::VectorXd& y0, double lambda, int t) {
  if (!(lambda >= 0.0 && lambda < 1.0))
    throw std::invalid_argument("rw_iterative: lambda must lie in [0, 1)");
  if (t < 0) throw std::invalid_argument("rw_iterative: t must be nonnegative");
  if (y0.size() != tm.W.rows())
    throw std::invalid_argument("rw_iterative: y0 length must match W");
  Eigen::VectorXd y = y0;
  for (int step = 0; step < t; ++step) y = lambda * (tm.W * y) + (1.0 - lambda) * y0;
  return y;
}

namespace detail {

/// Shared forward solve used by the closed form and by group_shuffle, which
/// factorizes I - lambda*W once and back-substitutes per initial vector.
inline Eigen::VectorXd solve_refined(const Eigen::PartialPivLU<Eigen::MatrixXd>& lu,
                                     const Eigen::MatrixXd& A,
                                     const Eigen::VectorXd& y0, double lambda,
                                     double residual_tolerance) {
  const Eigen::VectorXd rhs = (1.0 - lambda) * y0;
  Eigen::VectorXd y = lu.solve(rhs);
  const double residual = (A * y - rhs).lpNorm<Eigen::Infinity>();
  if (!(residual <= residual_tolerance))
    throw std::runtime_error("random-walk solve failed: residual " +
                             std::to_string(residual) + " exceeds tolerance");
  return y;
}

}  // namespace detail

/// Closed-form limit of the weighted random walk: solves
/// (I - lambda*W) y = (1 - lambda) y0. No explicit inverse is formed.
inline Eigen::VectorXd rw_closed_form(const TransitionMatrix& tm,
                                      const Eigen::VectorXd& y0, double lambda,
                                      double residual_tolerance = 1e-8) {
  if (!(lambda >= 0.0 && lambda < 1.0))
    throw std::invalid_argument("rw_closed_form: lambda must lie in [0, 1)");
  if (y0.size() != tm.W.rows())
    throw std::invalid_argument("rw_closed_form: y0 length must match W");
  const Eigen::Index n = tm.W.rows();
  const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - lambda * tm.W;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  return detail::solve_refined(lu, A, y0, lambda, residual_tolerance);
}

/// All K*K refined P2G vectors from the group-shuffling walk, entry (j, k)
/// pairing the transition matrix of group j with the initial vector of group
/// k, plus their elementwise mean.
struct RefinedAffinities {
  std::vector<Eigen::VectorXd> y_inf;  // K*K entries, j-major
  Eigen::VectorXd averaged;
  int K = 0;
  int n = 0;

  const Eigen::VectorXd& at(int j, int k) const { return y_inf[j * K + k]; }
};

/// Runs the walk for every ordered pair (j, k): transition matrix from S_j,
/// initial vector y0_k, enumerated j-major. Each I - lambda*W_j is
/// factorized once and reused across all k.
inline RefinedAffinities group_shuffle(const GroupedAffinities& ga, const RWConfig& cfg) {
  cfg.validate();
  const int K = ga.K;
  const int n = ga.n;
  if (K <= 0 || static_cast<int>(ga.y0.size()) != K || static_cast<int>(ga.S.size()) != K)
    throw std::invalid_argument("group_shuffle: malformed GroupedAffinities");
  for (int k = 0; k < K; ++k) {
    if (ga.y0[k].size() != n || ga.S[k].rows() != n || ga.S[k].cols() != n)
      throw std::invalid_argument("group_shuffle: inconsistent shapes");
  }

  RefinedAffinities out;
  out.K = K;
  out.n = n;
  out.y_inf.resize(static_cast<std::size_t>(K) * K);
  for (int j = 0; j < K; ++j) {
    const TransitionMatrix tm = normalize(ga.S[j]);
    if (cfg.iterations) {
      for (int k = 0; k < K; ++k)
        out.y_inf[j * K + k] = rw_iterative(tm, ga.y0[k], cfg.lambda, *cfg.iterations);
    } else {
      const Eigen::MatrixXd A =
          Eigen::MatrixXd::Identity(n, n) - cfg.lambda * tm.W;
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
      for (int k = 0; k < K; ++k)
        out.y_inf[j * K + k] =
            detail::solve_refined(lu, A, ga.y0[k], cfg.lambda, cfg.tolerance);
    }
  }

  // fixed j-major, then k summation order keeps the average deterministic
  out.averaged = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < K; ++j)
    for (int k = 0; k < K; ++k) out.averaged += out.y_inf[j * K + k];
  out.averaged /= static_cast<double>(K) * K;
  return out;
}

/// Reorders the gallery axis everywhere: y0 vectors by perm, S matrices on
/// both axes. perm maps new position -> old index.
inline GroupedAffinities permute_gallery(const GroupedAffinities& ga,
                                         const std::vector<int>& perm) {
  const int n = ga.n;
  if (static_cast<int>(perm.size()) != n)
    throw std::invalid_argument("permute_gallery: permutation length mismatch");
  std::vector<bool> seen(n, false);
  for (int p : perm) {
    if (p < 0 || p >= n || seen[p])
      throw std::invalid_argument("permute_gallery: not a valid permutation");
    seen[p] = true;
  }
  GroupedAffinities out;
  out.n = n;
  out.K = ga.K;
  out.y0.resize(ga.K);
  out.S.resize(ga.K);
  for (int k = 0; k < ga.K; ++k) {
    out.y0[k].resize(n);
    out.S[k].resize(n, n);
    for (int i = 0; i < n; ++i) {
      out.y0[k][i] = ga.y0[k][perm[i]];
      for (int j = 0; j < n; ++j) out.S[k](i, j) = ga.S[k](perm[i], perm[j]);
    }
  }
  return out;
}

}  // namespace gsrw
