#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrw/detail/binary_io.hpp"
#include "gsrw/embeddings.hpp"

namespace gsrw {

/// Learnable parameters of the grouped pairwise affinity head.
///
/// The head scores a pair (a, b) of feature sub-vectors from group k as
///   z      = norm_scale_k .* (a - b)^2 + norm_shift_k
///   logit  = group_weights[k] . z + group_biases[k]
///   affinity = sigmoid(logit)
/// where norm_scale_k / norm_shift_k are the group's slices of the
/// per-dimension affine normalization.
struct HeadParams {
  int K = 1;
  int d = 0;
  Eigen::VectorXd norm_scale;                 // length d, strictly positive
  Eigen::VectorXd norm_shift;                 // length d
  std::vector<Eigen::VectorXd> group_weights; // K vectors of length d/K
  Eigen::VectorXd group_biases;               // length K

  int group_dim() const { return d / K; }

  void validate() const {
    if (K <= 0) throw std::invalid_argument("HeadParams: K must be positive");
    if (d <= 0) throw std::invalid_argument("HeadParams: d must be positive");
    if (d % K != 0)
      throw std::invalid_argument("HeadParams: d (" + std::to_string(d) +
                                  ") not divisible by K (" + std::to_string(K) + ")");
    if (norm_scale.size() != d || norm_shift.size() != d)
      throw std::invalid_argument("HeadParams: normalization vectors must have length d");
    if ((norm_scale.array() <= 0.0).any())
      throw std::invalid_argument("HeadParams: norm_scale must be strictly positive");
    if (static_cast<int>(group_weights.size()) != K || group_biases.size() != K)
      throw std::invalid_argument("HeadParams: need K weight vectors and K biases");
    for (const auto& w : group_weights)
      if (w.size() != group_dim())
        throw std::invalid_argument("HeadParams: weight vector length must be d/K");
  }
};

/// Small zero-mean uniform init for weights, identity normalization, zero
/// biases. Keeps initial affinities near 0.5.
inline HeadParams init_head_params(int d, int K, std::uint64_t seed) {
  if (K <= 0 || d <= 0 || d % K != 0)
    throw std::invalid_argument("init_head_params: require d > 0, K > 0, d mod K = 0");
  HeadParams params;
  params.K = K;
  params.d = d;
  params.norm_scale = Eigen::VectorXd::Ones(d);
  params.norm_shift = Eigen::VectorXd::Zero(d);
  params.group_biases = Eigen::VectorXd::Zero(K);
  const int m = d / K;
  const double bound = 1.0 / std::sqrt(static_cast<double>(m));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  params.group_weights.resize(K);
  for (int k = 0; k < K; ++k) {
    params.group_weights[k].resize(m);
    for (int i = 0; i < m; ++i) params.group_weights[k][i] = dist(rng);
  }
  return params;
}

/// Splits v into K contiguous equal-length sub-vectors; their concatenation
/// reproduces v exactly.
inline std::vector<Eigen::VectorXd> split_groups(const Eigen::VectorXd& v, int K) {
  if (K <= 0) throw std::invalid_argument("split_groups: K must be positive");
  const Eigen::Index d = v.size();
  if (d % K != 0)
    throw std::invalid_argument("split_groups: dimension " + std::to_string(d) +
                                " not divisible by K = " + std::to_string(K));
  const Eigen::Index m = d / K;
  std::vector<Eigen::VectorXd> out;
  out.reserve(K);
  for (int k = 0; k < K; ++k) out.push_back(v.segment(k * m, m));
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct PairScore {
  double logit;
  double affinity;
};

/// Scores one pair of group-k sub-vectors. Symmetric in (a, b) bitwise since
/// it depends on a - b only through the elementwise square.
inline PairScore pair_score(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                            const HeadParams& params, int k) {
  const int m = params.group_dim();
  if (a.size() != m || b.size() != m)
    throw std::invalid_argument("pair_score: sub-vector length must be d/K");
  if (k < 0 || k >= params.K) throw std::invalid_argument("pair_score: group index out of range");
  if (!a.allFinite() || !b.allFinite())
    throw std::invalid_argument("pair_score: non-finite input");
  const auto scale = params.norm_scale.segment(k * m, m).array();
  const auto shift = params.norm_shift.segment(k * m, m).array();
  const Eigen::ArrayXd sq = (a - b).array().square();
  const Eigen::ArrayXd z = scale * sq + shift;
  const double logit = (params.group_weights[k].array() * z).sum() + params.group_biases[k];
  return {logit, sigmoid(logit)};
}

/// Per-group initial P2G affinities and raw (pre-normalization) G2G scores.
/// y0 holds sigmoid affinities; S holds logits, diagonal present but ignored
/// by the transition-matrix normalization downstream.
struct GroupedAffinities {
  std::vector<Eigen::VectorXd> y0;  // K vectors of length n
  std::vector<Eigen::MatrixXd> S;   // K matrices n x n, symmetric
  int n = 0;
  int K = 0;
};

/// Per-group initial P2G affinity vectors for one probe against a gallery.
inline std::vector<Eigen::VectorXd> compute_p2g(const EmbeddingRecord& probe,
                                                const std::vector<EmbeddingRecord>& gallery,
                                                const HeadParams& params) {
  const int n = static_cast<int>(gallery.size());
  const int m = params.group_dim();
  std::vector<Eigen::VectorXd> y0(params.K);
  for (int k = 0; k < params.K; ++k) {
    const Eigen::VectorXd pk = probe.feature.segment(k * m, m);
    y0[k].resize(n);
    for (int i = 0; i < n; ++i)
      y0[k][i] = pair_score(pk, gallery[i].feature.segment(k * m, m), params, k).affinity;
  }
  return y0;
}

/// Per-group raw G2G score matrices (logits). Symmetric by construction;
/// only the upper triangle is scored and mirrored.
inline std::vector<Eigen::MatrixXd> compute_g2g(const std::vector<EmbeddingRecord>& gallery,
                                                const HeadParams& params) {
  const int n = static_cast<int>(gallery.size());
  const int m = params.group_dim();
  std::vector<Eigen::MatrixXd> S(params.K);
  for (int k = 0; k < params.K; ++k) {
    S[k].resize(n, n);
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd gi = gallery[i].feature.segment(k * m, m);
      for (int j = i; j < n; ++j) {
        const double logit =
            pair_score(gi, gallery[j].feature.segment(k * m, m), params, k).logit;
        S[k](i, j) = logit;
        S[k](j, i) = logit;
      }
    }
  }
  return S;
}

inline GroupedAffinities compute_affinities(const EmbeddingSet& set,
                                            const HeadParams& params) {
  params.validate();
  if (set.d() != params.d)
    throw std::invalid_argument("compute_affinities: feature dimension " +
                                std::to_string(set.d()) + " does not match params.d = " +
                                std::to_string(params.d));
  const int n = set.n();
  if (n < 2) throw std::invalid_argument("compute_affinities: gallery needs at least 2 images");
  for (const auto& g : set.gallery)
    if (g.feature.size() != params.d)
      throw std::invalid_argument("compute_affinities: gallery feature dimension mismatch");

  GroupedAffinities ga;
  ga.n = n;
  ga.K = params.K;
  ga.y0 = compute_p2g(set.probe, set.gallery, params);
  ga.S = compute_g2g(set.gallery, params);
  return ga;
}

/// Packs all parameter arrays into one flat vector (norm_scale, norm_shift,
/// group_weights in group order, group_biases). Used by gradient checks and
/// the trainer's update bookkeeping.
inline Eigen::VectorXd flatten_params(const HeadParams& params) {
  const int m = params.group_dim();
  Eigen::VectorXd flat(2 * params.d + params.K * m + params.K);
  Eigen::Index at = 0;
  flat.segment(at, params.d) = params.norm_scale; at += params.d;
  flat.segment(at, params.d) = params.norm_shift; at += params.d;
  for (int k = 0; k < params.K; ++k) { flat.segment(at, m) = params.group_weights[k]; at += m; }
  flat.segment(at, params.K) = params.group_biases;
  return flat;
}

/// Inverse of flatten_params; K and d are taken from `like`.
inline HeadParams unflatten_params(const Eigen::VectorXd& flat, const HeadParams& like) {
  const int m = like.group_dim();
  if (flat.size() != 2 * like.d + like.K * m + like.K)
    throw std::invalid_argument("unflatten_params: size mismatch");
  HeadParams params;
  params.K = like.K;
  params.d = like.d;
  Eigen::Index at = 0;
  params.norm_scale = flat.segment(at, like.d); at += like.d;
  params.norm_shift = flat.segment(at, like.d); at += like.d;
  params.group_weights.resize(like.K);
  for (int k = 0; k < like.K; ++k) { params.group_weights[k] = flat.segment(at, m); at += m; }
  params.group_biases = flat.segment(at, like.K);
  return params;
}

namespace detail {
constexpr char kParamsMagic[5] = {'G', 'S', 'R', 'W', 'P'};
constexpr std::uint8_t kParamsVersion = 1;
}  // namespace detail

inline void save_head_params(const HeadParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(detail::kParamsMagic, 5);
  gsrw::detail::write_u8(out, detail::kParamsVersion);
  gsrw::detail::write_u32le(out, static_cast<std::uint32_t>(params.K));
  gsrw::detail::write_u32le(out, static_cast<std::uint32_t>(params.d));
  for (Eigen::Index i = 0; i < params.d; ++i)
    gsrw::detail::write_f64le(out, params.norm_scale[i]);
  for (Eigen::Index i = 0; i < params.d; ++i)
    gsrw::detail::write_f64le(out, params.norm_shift[i]);
  for (const auto& w : params.group_weights)
    for (Eigen::Index i = 0; i < w.size(); ++i) gsrw::detail::write_f64le(out, w[i]);
  for (Eigen::Index k = 0; k < params.K; ++k)
    gsrw::detail::write_f64le(out, params.group_biases[k]);
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline HeadParams load_head_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, detail::kParamsMagic, 5) != 0)
    throw std::runtime_error(path + ": not a GSRWP parameter file");
  const auto version = gsrw::detail::read_u8(in);
  if (version != detail::kParamsVersion)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  HeadParams params;
  params.K = static_cast<int>(gsrw::detail::read_u32le(in));
  params.d = static_cast<int>(gsrw::detail::read_u32le(in));
  if (params.K <= 0 || params.d <= 0 || params.d % params.K != 0)
    throw std::runtime_error(path + ": invalid K/d header fields");
  const int m = params.group_dim();
  params.norm_scale.resize(params.d);
  for (int i = 0; i < params.d; ++i) params.norm_scale[i] = gsrw::detail::read_f64le(in);
  params.norm_shift.resize(params.d);
  for (int i = 0; i < params.d; ++i) params.norm_shift[i] = gsrw::detail::read_f64le(in);
  params.group_weights.resize(params.K);
  for (int k = 0; k < params.K; ++k) {
    params.group_weights[k].resize(m);
    for (int i = 0; i < m; ++i) params.group_weights[k][i] = gsrw::detail::read_f64le(in);
  }
  params.group_biases.resize(params.K);
  for (int k = 0; k < params.K; ++k) params.group_biases[k] = gsrw::detail::read_f64le(in);
  params.validate();
  return params;
}

}  // namespace gsrw
