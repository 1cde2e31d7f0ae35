#pragma once

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <vector>

#include "gsrw/affinity_head.hpp"
#include "gsrw/random_walk.hpp"

namespace gsrw {

/// Forward-pass state kept for the closed-form walk's backward pass. Holds
/// the factorization of A = I - lambda*W rather than W_hat itself; the same
/// factorization serves the forward solve and the transposed backward solve.
struct RWBackwardState {
  Eigen::MatrixXd A;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
  Eigen::VectorXd y0;
  Eigen::VectorXd y_inf;
  double lambda = 0.0;

  int n() const { return static_cast<int>(A.rows()); }
};

/// Runs the closed-form walk and captures everything rw_backward needs.
inline RWBackwardState make_rw_backward_state(const TransitionMatrix& tm,
                                              const Eigen::VectorXd& y0, double lambda) {
  if (!(lambda >= 0.0 && lambda < 1.0))
    throw std::invalid_argument("make_rw_backward_state: lambda must lie in [0, 1)");
  if (y0.size() != tm.W.rows())
    throw std::invalid_argument("make_rw_backward_state: y0 length must match W");
  RWBackwardState state;
  const Eigen::Index n = tm.W.rows();
  state.A = Eigen::MatrixXd::Identity(n, n) - lambda * tm.W;
  state.lu.compute(state.A);
  state.y0 = y0;
  state.y_inf = detail::solve_refined(state.lu, state.A, y0, lambda, 1e-8);
  state.lambda = lambda;
  return state;
}

struct RWGrads {
  Eigen::VectorXd d_y0;
  Eigen::MatrixXd d_W;
};

/// Backward pass of y_inf = W_hat y0 with W_hat = (1-lambda)(I-lambda W)^{-1}:
///   d_y0 = W_hat^T d_yinf          = (1-lambda) A^{-T} d_yinf
///   d_W  = lambda (A^{-T} d_yinf) y_inf^T, diagonal zeroed
/// The diagonal of W is pinned to zero by the normalization, so it is not a
/// free variable and carries no gradient.
inline RWGrads rw_backward(const RWBackwardState& state, const Eigen::VectorXd& d_yinf) {
  if (d_yinf.size() != state.y_inf.size())
    throw std::invalid_argument("rw_backward: d_yinf length mismatch");
  const Eigen::VectorXd check =
      state.lu.solve((1.0 - state.lambda) * state.y0);
  if ((check - state.y_inf).lpNorm<Eigen::Infinity>() > 1e-10)
    throw std::invalid_argument("rw_backward: inconsistent state (W_hat y0 != y_inf)");

  RWGrads g;
  const Eigen::VectorXd u = state.lu.transpose().solve(d_yinf);
  g.d_y0 = (1.0 - state.lambda) * u;
  if (state.lambda == 0.0) {
    g.d_W = Eigen::MatrixXd::Zero(state.n(), state.n());
  } else {
    g.d_W = state.lambda * (u * state.y_inf.transpose());
    g.d_W.diagonal().setZero();
  }
  return g;
}

/// Chain rule through the zero-diagonal row softmax of normalize():
///   d_S(i,j) = W(i,j) * (d_W(i,j) - sum_{j' != i} d_W(i,j') W(i,j'))
/// for j != i, and d_S(i,i) = 0.
inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& S, const TransitionMatrix& tm,
                                        const Eigen::MatrixXd& d_W) {
  const Eigen::Index n = S.rows();
  if (S.cols() != n || tm.W.rows() != n || tm.W.cols() != n || d_W.rows() != n ||
      d_W.cols() != n)
    throw std::invalid_argument("softmax_backward: shape mismatch");
  Eigen::MatrixXd d_S = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double weighted = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) weighted += d_W(i, j) * tm.W(i, j);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) d_S(i, j) = tm.W(i, j) * (d_W(i, j) - weighted);
  }
  return d_S;
}

/// Gradients of a loss w.r.t. the affinity head's inputs and parameters.
struct HeadGrads {
  Eigen::VectorXd d_probe;                       // d
  Eigen::MatrixXd d_gallery;                     // n x d, row i for gallery i
  Eigen::VectorXd d_norm_scale;                  // d
  Eigen::VectorXd d_norm_shift;                  // d
  std::vector<Eigen::VectorXd> d_group_weights;  // K x (d/K)
  Eigen::VectorXd d_group_biases;                // K

  static HeadGrads zero(int d, int K, int n) {
    HeadGrads g;
    g.d_probe = Eigen::VectorXd::Zero(d);
    g.d_gallery = Eigen::MatrixXd::Zero(n, d);
    g.d_norm_scale = Eigen::VectorXd::Zero(d);
    g.d_norm_shift = Eigen::VectorXd::Zero(d);
    g.d_group_weights.assign(K, Eigen::VectorXd::Zero(d / K));
    g.d_group_biases = Eigen::VectorXd::Zero(K);
    return g;
  }

  void add(const HeadGrads& o) {
    d_probe += o.d_probe;
    d_gallery += o.d_gallery;
    d_norm_scale += o.d_norm_scale;
    d_norm_shift += o.d_norm_shift;
    for (std::size_t k = 0; k < d_group_weights.size(); ++k)
      d_group_weights[k] += o.d_group_weights[k];
    d_group_biases += o.d_group_biases;
  }

  /// Parameter part packed in flatten_params order.
  Eigen::VectorXd flat_params() const {
    const int d = static_cast<int>(d_norm_scale.size());
    const int K = static_cast<int>(d_group_weights.size());
    const int m = K > 0 ? static_cast<int>(d_group_weights[0].size()) : 0;
    Eigen::VectorXd flat(2 * d + K * m + K);
    Eigen::Index at = 0;
    flat.segment(at, d) = d_norm_scale; at += d;
    flat.segment(at, d) = d_norm_shift; at += d;
    for (int k = 0; k < K; ++k) { flat.segment(at, m) = d_group_weights[k]; at += m; }
    flat.segment(at, K) = d_group_biases;
    return flat;
  }
};

/// Back-propagates per-group gradients on y0 (post-sigmoid affinities) and on
/// S (pre-sigmoid logits, diagonal ignored) through the affinity-head
/// pipeline to the probe features, gallery features and all parameters.
inline HeadGrads head_backward(const EmbeddingSet& set, const HeadParams& params,
                               const std::vector<Eigen::VectorXd>& d_y0,
                               const std::vector<Eigen::MatrixXd>& d_S) {
  params.validate();
  const int n = set.n();
  const int K = params.K;
  const int m = params.group_dim();
  if (set.d() != params.d)
    throw std::invalid_argument("head_backward: feature dimension mismatch");
  if (static_cast<int>(d_y0.size()) != K || static_cast<int>(d_S.size()) != K)
    throw std::invalid_argument("head_backward: need K gradient blocks");
  for (int k = 0; k < K; ++k)
    if (d_y0[k].size() != n || d_S[k].rows() != n || d_S[k].cols() != n)
      throw std::invalid_argument("head_backward: gradient shape mismatch");

  HeadGrads g = HeadGrads::zero(params.d, K, n);

  for (int k = 0; k < K; ++k) {
    const auto scale = params.norm_scale.segment(k * m, m).array();
    const auto shift = params.norm_shift.segment(k * m, m).array();
    const auto w = params.group_weights[k].array();
    const Eigen::VectorXd pk = set.probe.feature.segment(k * m, m);

    // accumulates the parameter gradients for one scored pair and returns
    // the gradient w.r.t. diff = a - b
    auto backprop_pair = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                             double dlogit) -> Eigen::ArrayXd {
      const Eigen::ArrayXd diff = (a - b).array();
      const Eigen::ArrayXd sq = diff.square();
      g.d_group_weights[k].array() += dlogit * (scale * sq + shift);
      g.d_group_biases[k] += dlogit;
      const Eigen::ArrayXd d_z = dlogit * w;
      g.d_norm_scale.segment(k * m, m).array() += d_z * sq;
      g.d_norm_shift.segment(k * m, m).array() += d_z;
      return 2.0 * (d_z * scale) * diff;
    };

    // probe-to-gallery pairs: upstream gradient is on the sigmoid output
    for (int i = 0; i < n; ++i) {
      const double du = d_y0[k][i];
      if (du == 0.0) continue;
      const Eigen::VectorXd gi = set.gallery[i].feature.segment(k * m, m);
      const double y = pair_score(pk, gi, params, k).affinity;
      const Eigen::ArrayXd d_diff = backprop_pair(pk, gi, du * y * (1.0 - y));
      g.d_probe.segment(k * m, m).array() += d_diff;
      g.d_gallery.row(i).segment(k * m, m).transpose().array() -= d_diff;
    }

    // gallery-to-gallery pairs: upstream gradient is on the raw logit.
    // Self-pairs have diff = 0, so they reach only the parameters; the
    // softmax path always sends a zero diagonal here.
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd gi = set.gallery[i].feature.segment(k * m, m);
      for (int j = 0; j < n; ++j) {
        if (d_S[k](i, j) == 0.0) continue;
        const Eigen::VectorXd gj = set.gallery[j].feature.segment(k * m, m);
        const Eigen::ArrayXd d_diff = backprop_pair(gi, gj, d_S[k](i, j));
        g.d_gallery.row(i).segment(k * m, m).transpose().array() += d_diff;
        g.d_gallery.row(j).segment(k * m, m).transpose().array() -= d_diff;
      }
    }
  }
  return g;
}

/// Gradient of a loss supervised on a single P2G affinity: everything is
/// zero except the supervised index.
inline Eigen::VectorXd baseline_backward(int index, double value, int n) {
  if (index < 0 || index >= n)
    throw std::invalid_argument("baseline_backward: index out of range");
  Eigen::VectorXd d_y0 = Eigen::VectorXd::Zero(n);
  d_y0[index] = value;
  return d_y0;
}

/// Central-difference gradient of a scalar function, the independent oracle
/// every analytic gradient in this library is checked against.
inline Eigen::VectorXd finite_diff_oracle(
    const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
    double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_oracle: step must be positive");
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double fp = f(probe);
    probe[i] = x[i] - step;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_oracle: non-finite function value");
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

}  // namespace gsrw
