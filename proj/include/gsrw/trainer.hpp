#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrw/affinity_head.hpp"
#include "gsrw/embeddings.hpp"
#include "gsrw/gradients.hpp"
#include "gsrw/random_walk.hpp"

namespace gsrw {

enum class TrainMode { gsrw, rw_only, baseline };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "gsrw") return TrainMode::gsrw;
  if (s == "rw_only") return TrainMode::rw_only;
  if (s == "baseline") return TrainMode::baseline;
  throw std::invalid_argument("unknown mode '" + s + "' (expected gsrw, rw_only or baseline)");
}

inline std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::gsrw: return "gsrw";
    case TrainMode::rw_only: return "rw_only";
    case TrainMode::baseline: return "baseline";
  }
  return "?";
}

struct TrainConfig {
  int persons_per_batch = 64;
  int images_per_person = 4;
  double lambda = 0.95;
  int K = 4;
  double lr_initial = 1e-4;
  int lr_decay_epoch = 50;
  double lr_final = 1e-5;
  int epochs = 100;
  TrainMode mode = TrainMode::gsrw;
  std::uint64_t seed = 0;

  void validate() const {
    if (persons_per_batch <= 0) throw std::invalid_argument("persons_per_batch must be positive");
    if (images_per_person < 2)
      throw std::invalid_argument("images_per_person must be at least 2 (1 probe + 1 gallery)");
    if (!(lambda >= 0.0 && lambda < 1.0))
      throw std::invalid_argument("lambda must lie in [0, 1)");
    if (K <= 0) throw std::invalid_argument("K must be positive");
    if (!(lr_initial > 0.0)) throw std::invalid_argument("lr_initial must be positive");
    if (lr_decay_epoch <= 0) throw std::invalid_argument("lr_decay_epoch must be positive");
    if (!(lr_final > 0.0)) throw std::invalid_argument("lr_final must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  }
};

/// Parses a plain key=value config file. '#' starts a comment; unknown keys
/// are rejected so typos do not silently fall back to defaults.
inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  TrainConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "persons_per_batch") cfg.persons_per_batch = std::stoi(value);
      else if (key == "images_per_person") cfg.images_per_person = std::stoi(value);
      else if (key == "lambda") cfg.lambda = std::stod(value);
      else if (key == "K" || key == "groups") cfg.K = std::stoi(value);
      else if (key == "lr_initial") cfg.lr_initial = std::stod(value);
      else if (key == "lr_decay_epoch") cfg.lr_decay_epoch = std::stoi(value);
      else if (key == "lr_final") cfg.lr_final = std::stod(value);
      else if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "mode") cfg.mode = parse_train_mode(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": unknown key '" +
                                 key + "'");
    } catch (const std::invalid_argument&) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad value for '" +
                               key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

/// One training batch: P probes sharing one gallery of P*(Q-1) records, with
/// a binary relevance vector per probe.
struct Batch {
  std::vector<EmbeddingRecord> probes;
  std::vector<EmbeddingRecord> gallery;
  std::vector<Eigen::VectorXd> labels;  // one length-|gallery| 0/1 vector per probe

  int num_probes() const { return static_cast<int>(probes.size()); }
  int gallery_size() const { return static_cast<int>(gallery.size()); }
};

/// Samples P identities without replacement, then Q images per identity
/// without replacement; the first sampled image of each identity becomes the
/// probe and the remaining Q-1 go into the shared gallery.
inline Batch sample_batch(const std::vector<EmbeddingRecord>& records, const TrainConfig& cfg,
                          std::mt19937_64& rng) {
  const int P = cfg.persons_per_batch;
  const int Q = cfg.images_per_person;

  // group record indices by identity preserving first-appearance order
  std::vector<std::string> id_order;
  std::map<std::string, std::vector<int>> by_id;
  for (int i = 0; i < static_cast<int>(records.size()); ++i) {
    auto [it, inserted] = by_id.try_emplace(records[i].id);
    if (inserted) id_order.push_back(records[i].id);
    it->second.push_back(i);
  }
  std::vector<const std::vector<int>*> eligible;
  for (const auto& id : id_order) {
    const auto& idxs = by_id.at(id);
    if (static_cast<int>(idxs.size()) >= Q) eligible.push_back(&idxs);
  }
  if (static_cast<int>(eligible.size()) < P)
    throw std::invalid_argument("sample_batch: need at least " + std::to_string(P) +
                                " identities with >= " + std::to_string(Q) +
                                " images each, have " + std::to_string(eligible.size()));

  std::vector<int> id_pick(eligible.size());
  for (std::size_t i = 0; i < id_pick.size(); ++i) id_pick[i] = static_cast<int>(i);
  std::shuffle(id_pick.begin(), id_pick.end(), rng);

  Batch batch;
  batch.probes.reserve(P);
  batch.gallery.reserve(static_cast<std::size_t>(P) * (Q - 1));
  for (int p = 0; p < P; ++p) {
    std::vector<int> imgs = *eligible[id_pick[p]];
    std::shuffle(imgs.begin(), imgs.end(), rng);
    batch.probes.push_back(records[imgs[0]]);
    for (int q = 1; q < Q; ++q) batch.gallery.push_back(records[imgs[q]]);
  }
  batch.labels.resize(P);
  for (int p = 0; p < P; ++p) {
    batch.labels[p].resize(batch.gallery_size());
    for (int i = 0; i < batch.gallery_size(); ++i)
      batch.labels[p][i] = (batch.gallery[i].id == batch.probes[p].id) ? 1.0 : 0.0;
  }
  return batch;
}

struct XentResult {
  double loss = 0.0;
  Eigen::VectorXd d_y;
  long clamped = 0;  // entries that had to be pulled off 0 or 1
};

/// Mean binary cross-entropy over the vector with its exact gradient.
/// Entries at 0 or 1 are clamped to [eps, 1-eps] and counted.
inline XentResult loss_xent(const Eigen::VectorXd& y, const Eigen::VectorXd& labels,
                            double eps = 1e-12) {
  const Eigen::Index n = y.size();
  if (labels.size() != n) throw std::invalid_argument("loss_xent: length mismatch");
  if (n == 0) throw std::invalid_argument("loss_xent: empty input");
  XentResult r;
  r.d_y.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double yi = y[i];
    if (yi < eps || yi > 1.0 - eps) {
      yi = std::clamp(yi, eps, 1.0 - eps);
      ++r.clamped;
    }
    const double l = labels[i];
    r.loss -= inv_n * (l * std::log(yi) + (1.0 - l) * std::log(1.0 - yi));
    r.d_y[i] = -inv_n * (l / yi - (1.0 - l) / (1.0 - yi));
  }
  return r;
}

/// Unreduced cross-entropy of a single probability against a binary label,
/// with d(loss)/d(probability).
inline XentResult pair_xent(double y, double label, double eps = 1e-12) {
  XentResult r;
  double yc = y;
  if (yc < eps || yc > 1.0 - eps) {
    yc = std::clamp(yc, eps, 1.0 - eps);
    r.clamped = 1;
  }
  r.loss = -(label * std::log(yc) + (1.0 - label) * std::log(1.0 - yc));
  r.d_y.resize(1);
  r.d_y[0] = -(label / yc - (1.0 - label) / (1.0 - yc));
  return r;
}

struct BatchGradients {
  double loss = 0.0;            // the scalar whose gradient is reported
  double mean_loss = 0.0;       // per-probe mean, for reporting
  Eigen::VectorXd param_grad;   // flatten_params order
  long clamp_events = 0;
};

namespace detail {

inline void check_batch(const Batch& batch, const HeadParams& params, const TrainConfig& cfg) {
  if (params.K != cfg.K)
    throw std::invalid_argument("train: params.K does not match config K");
  if (batch.num_probes() == 0 || batch.gallery_size() < 2)
    throw std::invalid_argument("train: batch needs probes and a gallery of >= 2");
  for (const auto& r : batch.probes)
    if (r.feature.size() != params.d)
      throw std::invalid_argument("train: probe feature dimension mismatch");
  for (const auto& r : batch.gallery)
    if (r.feature.size() != params.d)
      throw std::invalid_argument("train: gallery feature dimension mismatch");
}

}  // namespace detail

/// Forward and backward over one batch. The returned gradient is for
/// `loss`: in gsrw / rw_only modes the per-probe losses (averaged over their
/// K^2 / K random-walk terms) summed over probes; in baseline mode the mean
/// cross-entropy over all supervised P2G and G2G pairs, averaged over groups.
inline BatchGradients compute_batch_gradients(const Batch& batch, const HeadParams& params,
                                              const TrainConfig& cfg) {
  params.validate();
  cfg.validate();
  detail::check_batch(batch, params, cfg);

  const int P = batch.num_probes();
  const int n = batch.gallery_size();
  const int K = params.K;

  const std::vector<Eigen::MatrixXd> S = compute_g2g(batch.gallery, params);

  BatchGradients out;
  out.param_grad = Eigen::VectorXd::Zero(flatten_params(params).size());

  const EmbeddingSet gallery_only_set{batch.probes[0], batch.gallery};

  if (cfg.mode == TrainMode::baseline) {
    // direct supervision on every P2G pair and every G2G pair (self-pairs
    // included), pooled into one mean per group
    const double pair_count = static_cast<double>(P) * n + static_cast<double>(n) * n;
    double total = 0.0;
    std::vector<Eigen::MatrixXd> d_S(K, Eigen::MatrixXd::Zero(n, n));
    std::vector<std::vector<Eigen::VectorXd>> d_y0_per_probe(
        P, std::vector<Eigen::VectorXd>(K));
    std::vector<std::vector<Eigen::VectorXd>> y0_per_probe(P);

    for (int p = 0; p < P; ++p) {
      y0_per_probe[p] = compute_p2g(batch.probes[p], batch.gallery, params);
      for (int k = 0; k < K; ++k) d_y0_per_probe[p][k] = Eigen::VectorXd::Zero(n);
    }

    for (int k = 0; k < K; ++k) {
      for (int p = 0; p < P; ++p) {
        for (int i = 0; i < n; ++i) {
          const XentResult r = pair_xent(y0_per_probe[p][k][i], batch.labels[p][i]);
          total += r.loss;
          out.clamp_events += r.clamped;
          d_y0_per_probe[p][k] +=
              baseline_backward(i, r.d_y[0] / (pair_count * K), n);
        }
      }
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const double label = (batch.gallery[i].id == batch.gallery[j].id) ? 1.0 : 0.0;
          const double a = sigmoid(S[k](i, j));
          const XentResult r = pair_xent(a, label);
          total += r.loss;
          out.clamp_events += r.clamped;
          d_S[k](i, j) += r.d_y[0] * a * (1.0 - a) / (pair_count * K);
        }
      }
    }
    out.loss = total / (pair_count * K);
    out.mean_loss = out.loss;

    const std::vector<Eigen::VectorXd> zero_y0(K, Eigen::VectorXd::Zero(n));
    const std::vector<Eigen::MatrixXd> zero_S(K, Eigen::MatrixXd::Zero(n, n));
    for (int p = 0; p < P; ++p) {
      const EmbeddingSet set{batch.probes[p], batch.gallery};
      out.param_grad +=
          head_backward(set, params, d_y0_per_probe[p], zero_S).flat_params();
    }
    out.param_grad += head_backward(gallery_only_set, params, zero_y0, d_S).flat_params();
    return out;
  }

  // random-walk modes: normalize and factorize each group's transition
  // matrix once, shared across all probes
  std::vector<TransitionMatrix> W(K);
  std::vector<Eigen::MatrixXd> A(K);
  std::vector<Eigen::PartialPivLU<Eigen::MatrixXd>> lu(K);
  for (int j = 0; j < K; ++j) {
    W[j] = normalize(S[j]);
    A[j] = Eigen::MatrixXd::Identity(n, n) - cfg.lambda * W[j].W;
    lu[j].compute(A[j]);
  }

  const bool shuffle = (cfg.mode == TrainMode::gsrw);
  const double terms = shuffle ? static_cast<double>(K) * K : static_cast<double>(K);

  double loss_sum = 0.0;

  for (int p = 0; p < P; ++p) {
    const EmbeddingSet set{batch.probes[p], batch.gallery};
    const std::vector<Eigen::VectorXd> y0 = compute_p2g(batch.probes[p], batch.gallery, params);
    std::vector<Eigen::VectorXd> d_y0(K, Eigen::VectorXd::Zero(n));
    std::vector<Eigen::MatrixXd> d_W(K, Eigen::MatrixXd::Zero(n, n));
    double probe_loss = 0.0;

    for (int j = 0; j < K; ++j) {
      for (int k = 0; k < K; ++k) {
        if (!shuffle && j != k) continue;
        const Eigen::VectorXd y_inf =
            detail::solve_refined(lu[j], A[j], y0[k], cfg.lambda, 1e-8);
        XentResult r = loss_xent(y_inf, batch.labels[p]);
        probe_loss += r.loss / terms;
        out.clamp_events += r.clamped;

        const Eigen::VectorXd d_yinf = r.d_y / terms;
        const Eigen::VectorXd u = lu[j].transpose().solve(d_yinf);
        d_y0[k] += (1.0 - cfg.lambda) * u;
        if (cfg.lambda != 0.0) d_W[j] += cfg.lambda * (u * y_inf.transpose());
      }
    }
    loss_sum += probe_loss;

    // the diagonal of d_W is never read: softmax_backward only touches
    // off-diagonal entries, matching the pinned-zero diagonal of W
    std::vector<Eigen::MatrixXd> d_S_probe(K);
    for (int j = 0; j < K; ++j) d_S_probe[j] = softmax_backward(S[j], W[j], d_W[j]);
    out.param_grad += head_backward(set, params, d_y0, d_S_probe).flat_params();
  }

  out.loss = loss_sum;
  out.mean_loss = loss_sum / P;
  return out;
}

struct StepMetrics {
  double mean_loss = 0.0;
  long clamp_events = 0;
  long scale_clamps = 0;  // norm_scale entries projected back to positive
};

/// One SGD step: params <- params - lr * grad. norm_scale is projected back
/// to a small positive floor if an update drives it nonpositive.
inline StepMetrics train_step(const Batch& batch, HeadParams& params, const TrainConfig& cfg,
                              double lr) {
  const BatchGradients g = compute_batch_gradients(batch, params, cfg);
  Eigen::VectorXd flat = flatten_params(params) - lr * g.param_grad;
  HeadParams updated = unflatten_params(flat, params);
  StepMetrics metrics;
  for (Eigen::Index i = 0; i < updated.norm_scale.size(); ++i) {
    if (updated.norm_scale[i] < 1e-8) {
      updated.norm_scale[i] = 1e-8;
      ++metrics.scale_clamps;
    }
  }
  params = std::move(updated);
  metrics.mean_loss = g.mean_loss;
  metrics.clamp_events = g.clamp_events;
  return metrics;
}

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  HeadParams params;
  std::vector<EpochStats> history;
};

inline int steps_per_epoch(const std::vector<EmbeddingRecord>& records, const TrainConfig& cfg) {
  std::map<std::string, int> counts;
  for (const auto& r : records) ++counts[r.id];
  int eligible = 0;
  for (const auto& [id, c] : counts)
    if (c >= cfg.images_per_person) ++eligible;
  return std::max(1, eligible / cfg.persons_per_batch);
}

/// End-to-end training: seeded parameter init, per-epoch batches, the
/// two-phase learning-rate schedule, per-epoch mean-loss history. Fully
/// deterministic for a fixed (records, cfg, seed).
inline TrainResult train(const std::vector<EmbeddingRecord>& records, const TrainConfig& cfg) {
  cfg.validate();
  if (records.empty()) throw std::invalid_argument("train: no records");
  const int d = static_cast<int>(records.front().feature.size());
  for (const auto& r : records)
    if (r.feature.size() != d) throw std::invalid_argument("train: inconsistent feature dimensions");
  if (d % cfg.K != 0)
    throw std::invalid_argument("train: feature dimension not divisible by K");

  TrainResult result;
  result.params = init_head_params(d, cfg.K, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 rng(cfg.seed);
  const int steps = steps_per_epoch(records, cfg);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = (epoch < cfg.lr_decay_epoch) ? cfg.lr_initial : cfg.lr_final;
    double loss_accum = 0.0;
    for (int s = 0; s < steps; ++s) {
      const Batch batch = sample_batch(records, cfg, rng);
      const StepMetrics m = train_step(batch, result.params, cfg, lr);
      loss_accum += m.mean_loss;
    }
    result.history.push_back({epoch, loss_accum / steps, lr});
  }
  return result;
}

/// Supervised pair counts for the direct-supervision baseline: P*n P2G
/// pairs and n^2 G2G pairs with n = P*(Q-1) shared gallery images.
struct SupervisionCounts {
  long p2g = 0;
  long g2g = 0;
};

inline SupervisionCounts baseline_supervision_counts(int persons_per_batch,
                                                     int images_per_person) {
  const long n = static_cast<long>(persons_per_batch) * (images_per_person - 1);
  return {static_cast<long>(persons_per_batch) * n, n * n};
}

inline void save_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.precision(std::numeric_limits<double>::max_digits10);
  out << "epoch,mean_loss,lr\n";
  for (const auto& e : history) out << e.epoch << ',' << e.mean_loss << ',' << e.lr << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace gsrw
