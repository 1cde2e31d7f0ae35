#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gsrw/affinity_head.hpp"
#include "gsrw/gradients.hpp"
#include "gsrw/random_walk.hpp"
#include "gsrw/trainer.hpp"

namespace gsrw {

/// Randomized verification grid for every analytic gradient in the library.
struct GradCheckOptions {
  std::vector<int> sizes{3, 5, 8, 10};
  std::vector<int> groups{1, 2, 4};
  std::vector<double> lambdas{0.0, 0.5, 0.95};
  int trials = 2;
  std::uint64_t seed = 12345;
  double rtol = 1e-5;
  double atol = 1e-8;
  double fd_step = 1e-6;
  int group_dim = 3;
  bool inject_sign_flip = false;  // negative control: corrupts the analytic side
};

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  long compared = 0;
  bool pass = true;
};

namespace detail {

class GradCompare {
 public:
  GradCompare(double rtol, double atol) : rtol_(rtol), floor_(atol / rtol) {}

  void accumulate(const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd,
                  GradCheckResult& result) const {
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(fd[i]), floor_});
      const double rel = std::abs(analytic[i] - fd[i]) / denom;
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.compared;
    }
    result.pass = result.max_rel_err < rtol_;
  }

 private:
  double rtol_;
  double floor_;
};

inline TransitionMatrix random_transition(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd S(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) S(i, j) = dist(rng);
  return normalize(S);
}

inline Eigen::VectorXd random_probabilities(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.05, 0.95);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = dist(rng);
  return y;
}

inline Eigen::VectorXd random_normal_vector(Eigen::Index n, std::mt19937_64& rng,
                                            double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Eigen::MatrixXd random_normal_matrix(int rows, int cols, std::mt19937_64& rng,
                                            double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

/// Random head instance kept in a numerically tame range so central
/// differences at step 1e-6 stay accurate.
inline std::pair<EmbeddingSet, HeadParams> random_head_instance(int n, int K, int group_dim,
                                                                std::mt19937_64& rng) {
  const int d = K * group_dim;
  EmbeddingSet set;
  set.probe.id = "probe";
  set.probe.feature = random_normal_vector(d, rng);
  set.gallery.resize(n);
  for (int i = 0; i < n; ++i) {
    set.gallery[i].id = "g" + std::to_string(i);
    set.gallery[i].feature = random_normal_vector(d, rng);
  }
  HeadParams params = init_head_params(d, K, rng());
  std::uniform_real_distribution<double> scale_dist(0.5, 1.5);
  for (int i = 0; i < d; ++i) params.norm_scale[i] = scale_dist(rng);
  params.norm_shift = random_normal_vector(d, rng, 0.3);
  params.group_biases = random_normal_vector(K, rng, 0.3);
  return {std::move(set), params};
}

inline Eigen::VectorXd flatten_offdiag(const Eigen::MatrixXd& M) {
  const Eigen::Index n = M.rows();
  Eigen::VectorXd flat(n * (n - 1));
  Eigen::Index at = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) flat[at++] = M(i, j);
  return flat;
}

inline Eigen::MatrixXd unflatten_offdiag(const Eigen::VectorXd& flat, Eigen::Index n) {
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  Eigen::Index at = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) M(i, j) = flat[at++];
  return M;
}

inline Eigen::VectorXd flatten_full(const Eigen::MatrixXd& M) {
  return Eigen::Map<const Eigen::VectorXd>(M.data(), M.size());
}

}  // namespace detail

/// Runs the full randomized gradient-verification suite and returns one
/// aggregated result per check. Every analytic gradient is compared against
/// central finite differences; pass means max relative error < rtol with
/// differences below atol always accepted.
inline std::vector<GradCheckResult> run_gradient_checks(const GradCheckOptions& opts) {
  const detail::GradCompare compare(opts.rtol, opts.atol);
  const double flip = opts.inject_sign_flip ? -1.0 : 1.0;

  GradCheckResult r_dy0{"rw_backward d_y0"};
  GradCheckResult r_dW{"rw_backward d_W"};
  GradCheckResult r_softmax{"softmax_backward d_S"};
  GradCheckResult r_head_feat{"head_backward features"};
  GradCheckResult r_head_par{"head_backward params"};
  GradCheckResult r_xent{"loss_xent d_y"};
  GradCheckResult r_e2e_feat{"end_to_end features"};
  GradCheckResult r_e2e_par{"end_to_end params"};

  std::mt19937_64 rng(opts.seed);

  for (double lambda : opts.lambdas) {
    for (int trial = 0; trial < opts.trials; ++trial) {
      for (int n : opts.sizes) {
        // --- random-walk layer ---
        const TransitionMatrix tm = detail::random_transition(n, rng);
        const Eigen::VectorXd y0 = detail::random_probabilities(n, rng);
        const Eigen::VectorXd weight = detail::random_normal_vector(n, rng);
        const RWBackwardState state = make_rw_backward_state(tm, y0, lambda);
        const RWGrads grads = rw_backward(state, weight);

        const Eigen::VectorXd fd_y0 = finite_diff_oracle(
            [&](const Eigen::VectorXd& y) {
              return weight.dot(rw_closed_form(tm, y, lambda));
            },
            y0, opts.fd_step);
        compare.accumulate(flip * grads.d_y0, fd_y0, r_dy0);

        // off-diagonal W entries treated as free variables, diagonal pinned
        const Eigen::VectorXd fd_W = finite_diff_oracle(
            [&](const Eigen::VectorXd& w_flat) {
              TransitionMatrix perturbed;
              perturbed.W = detail::unflatten_offdiag(w_flat, n);
              const Eigen::MatrixXd A =
                  Eigen::MatrixXd::Identity(n, n) - lambda * perturbed.W;
              return weight.dot(A.partialPivLu().solve((1.0 - lambda) * y0));
            },
            detail::flatten_offdiag(tm.W), opts.fd_step);
        compare.accumulate(flip * detail::flatten_offdiag(grads.d_W), fd_W, r_dW);

        // --- softmax normalization ---
        const Eigen::MatrixXd S = detail::random_normal_matrix(n, n, rng);
        const TransitionMatrix W = normalize(S);
        const Eigen::MatrixXd d_W_up = detail::random_normal_matrix(n, n, rng);
        const Eigen::MatrixXd d_S = softmax_backward(S, W, d_W_up);
        const Eigen::VectorXd fd_S = finite_diff_oracle(
            [&](const Eigen::VectorXd& s_flat) {
              const Eigen::MatrixXd Sp =
                  Eigen::Map<const Eigen::MatrixXd>(s_flat.data(), n, n);
              return (d_W_up.array() * normalize(Sp).W.array()).sum();
            },
            detail::flatten_full(S), opts.fd_step);
        compare.accumulate(flip * detail::flatten_full(d_S), fd_S, r_softmax);

        // --- loss_xent ---
        const Eigen::VectorXd y_prob = detail::random_probabilities(n, rng);
        Eigen::VectorXd labels(n);
        std::bernoulli_distribution coin(0.4);
        for (int i = 0; i < n; ++i) labels[i] = coin(rng) ? 1.0 : 0.0;
        const XentResult xr = loss_xent(y_prob, labels);
        const Eigen::VectorXd fd_xent = finite_diff_oracle(
            [&](const Eigen::VectorXd& y) { return loss_xent(y, labels).loss; }, y_prob,
            opts.fd_step);
        compare.accumulate(flip * xr.d_y, fd_xent, r_xent);
      }

      for (int K : opts.groups) {
        const int n = 4 + static_cast<int>(rng() % 3);  // small: FD over n*d inputs
        auto [set, params] = detail::random_head_instance(n, K, opts.group_dim, rng);
        const int d = params.d;

        // --- head layer against a random linear functional of (y0, S) ---
        std::vector<Eigen::VectorXd> c(K);
        std::vector<Eigen::MatrixXd> D(K);
        for (int k = 0; k < K; ++k) {
          c[k] = detail::random_normal_vector(n, rng);
          D[k] = detail::random_normal_matrix(n, n, rng);
        }
        const HeadGrads hg = head_backward(set, params, c, D);

        auto head_loss = [&](const EmbeddingSet& s, const HeadParams& p) {
          const GroupedAffinities ga = compute_affinities(s, p);
          double loss = 0.0;
          for (int k = 0; k < K; ++k) {
            loss += c[k].dot(ga.y0[k]);
            loss += (D[k].array() * ga.S[k].array()).sum();
          }
          return loss;
        };

        Eigen::VectorXd features(d + n * d);
        features.head(d) = set.probe.feature;
        for (int i = 0; i < n; ++i) features.segment(d + i * d, d) = set.gallery[i].feature;
        auto set_from_features = [&](const Eigen::VectorXd& f) {
          EmbeddingSet s = set;
          s.probe.feature = f.head(d);
          for (int i = 0; i < n; ++i) s.gallery[i].feature = f.segment(d + i * d, d);
          return s;
        };
        const Eigen::VectorXd fd_feat = finite_diff_oracle(
            [&](const Eigen::VectorXd& f) { return head_loss(set_from_features(f), params); },
            features, opts.fd_step);
        Eigen::VectorXd analytic_feat(d + n * d);
        analytic_feat.head(d) = hg.d_probe;
        for (int i = 0; i < n; ++i)
          analytic_feat.segment(d + i * d, d) = hg.d_gallery.row(i).transpose();
        compare.accumulate(flip * analytic_feat, fd_feat, r_head_feat);

        const Eigen::VectorXd fd_par = finite_diff_oracle(
            [&](const Eigen::VectorXd& flat) {
              return head_loss(set, unflatten_params(flat, params));
            },
            flatten_params(params), opts.fd_step);
        compare.accumulate(flip * hg.flat_params(), fd_par, r_head_par);

        // --- full pipeline: head -> normalize -> group-shuffling walk ---
        for (double lambda : opts.lambdas) {
          std::vector<Eigen::VectorXd> weights(static_cast<std::size_t>(K) * K);
          for (auto& w : weights) w = detail::random_normal_vector(n, rng);

          auto pipeline_loss = [&](const EmbeddingSet& s, const HeadParams& p) {
            const GroupedAffinities ga = compute_affinities(s, p);
            RWConfig rw_cfg;
            rw_cfg.lambda = lambda;
            const RefinedAffinities refined = group_shuffle(ga, rw_cfg);
            double loss = 0.0;
            for (int j = 0; j < K; ++j)
              for (int k = 0; k < K; ++k)
                loss += weights[j * K + k].dot(refined.at(j, k));
            return loss;
          };

          // analytic composition
          const GroupedAffinities ga = compute_affinities(set, params);
          std::vector<Eigen::VectorXd> d_y0(K, Eigen::VectorXd::Zero(n));
          std::vector<Eigen::MatrixXd> d_S_total(K);
          for (int j = 0; j < K; ++j) {
            const TransitionMatrix tmj = normalize(ga.S[j]);
            Eigen::MatrixXd d_Wj = Eigen::MatrixXd::Zero(n, n);
            for (int k = 0; k < K; ++k) {
              const RWBackwardState st = make_rw_backward_state(tmj, ga.y0[k], lambda);
              const RWGrads rg = rw_backward(st, weights[j * K + k]);
              d_y0[k] += rg.d_y0;
              d_Wj += rg.d_W;
            }
            d_S_total[j] = softmax_backward(ga.S[j], tmj, d_Wj);
          }
          const HeadGrads e2e = head_backward(set, params, d_y0, d_S_total);

          const Eigen::VectorXd fd_e2e_feat = finite_diff_oracle(
              [&](const Eigen::VectorXd& f) {
                return pipeline_loss(set_from_features(f), params);
              },
              features, opts.fd_step);
          Eigen::VectorXd analytic_e2e(d + n * d);
          analytic_e2e.head(d) = e2e.d_probe;
          for (int i = 0; i < n; ++i)
            analytic_e2e.segment(d + i * d, d) = e2e.d_gallery.row(i).transpose();
          compare.accumulate(flip * analytic_e2e, fd_e2e_feat, r_e2e_feat);

          const Eigen::VectorXd fd_e2e_par = finite_diff_oracle(
              [&](const Eigen::VectorXd& flat) {
                return pipeline_loss(set, unflatten_params(flat, params));
              },
              flatten_params(params), opts.fd_step);
          compare.accumulate(flip * e2e.flat_params(), fd_e2e_par, r_e2e_par);
        }
      }
    }
  }

  return {r_dy0, r_dW, r_softmax, r_xent, r_head_feat, r_head_par, r_e2e_feat, r_e2e_par};
}

inline bool all_checks_pass(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace gsrw
