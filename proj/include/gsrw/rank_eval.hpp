#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrw/affinity_head.hpp"
#include "gsrw/embeddings.hpp"
#include "gsrw/parallel.hpp"
#include "gsrw/random_walk.hpp"

namespace gsrw {

/// One query's ranking: order[r] is the gallery index at rank r (0-based),
/// scores are indexed by original gallery position.
struct RankingResult {
  std::vector<int> order;
  Eigen::VectorXd scores;
  std::vector<std::uint8_t> relevant;
};

/// Descending sort with ties broken by ascending original index.
inline RankingResult rank(const Eigen::VectorXd& scores,
                          const std::vector<std::uint8_t>& relevant) {
  const int n = static_cast<int>(scores.size());
  if (static_cast<int>(relevant.size()) != n)
    throw std::invalid_argument("rank: scores/relevant length mismatch");
  RankingResult r;
  r.scores = scores;
  r.relevant = relevant;
  r.order.resize(n);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return r;
}

/// Mean over relevant items of precision at their rank.
inline double average_precision(const RankingResult& result) {
  const int n = static_cast<int>(result.order.size());
  int hits = 0;
  double ap = 0.0;
  for (int pos = 0; pos < n; ++pos) {
    if (result.relevant[result.order[pos]]) {
      ++hits;
      ap += static_cast<double>(hits) / (pos + 1);
    }
  }
  if (hits == 0) throw std::invalid_argument("average_precision: no relevant items");
  return ap / hits;
}

/// cmc[r-1] = fraction of queries whose first relevant item sits at rank <= r.
inline Eigen::VectorXd cmc_curve(const std::vector<RankingResult>& results, int max_rank) {
  if (results.empty()) throw std::invalid_argument("cmc_curve: no results");
  if (max_rank <= 0) throw std::invalid_argument("cmc_curve: max_rank must be positive");
  Eigen::VectorXd cmc = Eigen::VectorXd::Zero(max_rank);
  for (const auto& result : results) {
    const int n = static_cast<int>(result.order.size());
    for (int pos = 0; pos < n; ++pos) {
      if (result.relevant[result.order[pos]]) {
        if (pos < max_rank) cmc.segment(pos, max_rank - pos).array() += 1.0;
        break;
      }
    }
  }
  return cmc / static_cast<double>(results.size());
}

namespace detail {

inline GroupedAffinities restrict_to(const GroupedAffinities& ga,
                                     const std::vector<int>& subset) {
  GroupedAffinities out;
  out.K = ga.K;
  out.n = static_cast<int>(subset.size());
  out.y0.resize(ga.K);
  out.S.resize(ga.K);
  for (int k = 0; k < ga.K; ++k) {
    out.y0[k].resize(out.n);
    out.S[k].resize(out.n, out.n);
    for (int i = 0; i < out.n; ++i) {
      out.y0[k][i] = ga.y0[k][subset[i]];
      for (int j = 0; j < out.n; ++j) out.S[k](i, j) = ga.S[k](subset[i], subset[j]);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> relevance_by_id(const EmbeddingRecord& probe,
                                                 const std::vector<EmbeddingRecord>& gallery) {
  std::vector<std::uint8_t> rel(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i)
    rel[i] = (gallery[i].id == probe.id) ? 1 : 0;
  return rel;
}

inline Eigen::VectorXd mean_initial_scores(const std::vector<Eigen::VectorXd>& y0) {
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(y0.front().size());
  for (const auto& y : y0) mean += y;
  return mean / static_cast<double>(y0.size());
}

}  // namespace detail

/// Test-time re-ranking: rank by the K-group mean of the initial P2G
/// affinities, refine the top-min(topN, n) entries with the group-shuffling
/// walk restricted to that subset, and re-rank. Entries outside the subset
/// keep their initial order but are shifted below the refined block, since
/// refined and raw scores are not on a common scale.
inline RankingResult rerank_pipeline(const EmbeddingRecord& probe,
                                     const std::vector<EmbeddingRecord>& gallery,
                                     const HeadParams& params, const RWConfig& cfg,
                                     int topN) {
  cfg.validate();
  if (topN < 2) throw std::invalid_argument("rerank_pipeline: topN must be at least 2");
  const int n = static_cast<int>(gallery.size());
  if (n < 2) throw std::invalid_argument("rerank_pipeline: gallery needs at least 2 images");

  const EmbeddingSet set{probe, gallery};
  const GroupedAffinities ga = compute_affinities(set, params);
  const Eigen::VectorXd initial = detail::mean_initial_scores(ga.y0);
  const std::vector<std::uint8_t> relevant = detail::relevance_by_id(probe, gallery);
  const RankingResult initial_rank = rank(initial, relevant);

  const int m = std::min(topN, n);
  const std::vector<int> subset(initial_rank.order.begin(), initial_rank.order.begin() + m);
  const RefinedAffinities refined = group_shuffle(detail::restrict_to(ga, subset), cfg);

  Eigen::VectorXd final_scores = initial;
  for (int i = 0; i < m; ++i) final_scores[subset[i]] = refined.averaged[i];
  if (m < n) {
    const double min_refined = refined.averaged.minCoeff();
    double max_rest = -std::numeric_limits<double>::infinity();
    for (int pos = m; pos < n; ++pos)
      max_rest = std::max(max_rest, initial[initial_rank.order[pos]]);
    const double shift = (min_refined - 1.0) - max_rest;
    for (int pos = m; pos < n; ++pos) final_scores[initial_rank.order[pos]] += shift;
  }
  return rank(final_scores, relevant);
}

struct EvalReport {
  double map = 0.0;
  Eigen::VectorXd cmc;
  int num_queries = 0;
  int skipped = 0;
  std::vector<double> per_query_ap;       // evaluated queries, input order
  std::vector<std::string> per_query_id;  // probe ids matching per_query_ap
};

/// Evaluates a query list. Gallery items sharing both identity and camera
/// label with the probe are excluded per-query (junk handling); queries left
/// with no relevant item are skipped and counted. Queries run in parallel
/// with an index-ordered aggregation, so reports are deterministic.
inline EvalReport evaluate(const std::vector<EmbeddingSet>& queries, const HeadParams& params,
                           const RWConfig& cfg, int topN, bool use_rw, int cmc_max_rank = 10) {
  if (queries.empty()) throw std::invalid_argument("evaluate: no queries");
  cfg.validate();

  struct QueryOutcome {
    bool skipped = true;
    double ap = 0.0;
    RankingResult ranking;
    std::string id;
  };
  std::vector<QueryOutcome> outcomes(queries.size());

  parallel_for(static_cast<int>(queries.size()), [&](int qi) {
    const EmbeddingSet& query = queries[qi];
    QueryOutcome& out = outcomes[qi];
    out.id = query.probe.id;

    std::vector<EmbeddingRecord> kept;
    kept.reserve(query.gallery.size());
    for (const auto& g : query.gallery) {
      const bool junk = g.id == query.probe.id && g.cam.has_value() &&
                        query.probe.cam.has_value() && *g.cam == *query.probe.cam;
      if (!junk) kept.push_back(g);
    }
    const auto relevant = detail::relevance_by_id(query.probe, kept);
    if (std::find(relevant.begin(), relevant.end(), std::uint8_t{1}) == relevant.end())
      return;  // no relevant gallery items: skipped

    if (kept.size() == 1) {
      // trivial ranking; nothing to diffuse over
      out.ranking = rank(Eigen::VectorXd::Ones(1), relevant);
    } else if (use_rw) {
      out.ranking = rerank_pipeline(query.probe, kept, params, cfg, topN);
    } else {
      const auto y0 = compute_p2g(query.probe, kept, params);
      out.ranking = rank(detail::mean_initial_scores(y0), relevant);
    }
    out.ap = average_precision(out.ranking);
    out.skipped = false;
  });

  EvalReport report;
  std::vector<RankingResult> rankings;
  for (auto& out : outcomes) {
    if (out.skipped) {
      ++report.skipped;
      continue;
    }
    report.per_query_ap.push_back(out.ap);
    report.per_query_id.push_back(out.id);
    rankings.push_back(std::move(out.ranking));
  }
  report.num_queries = static_cast<int>(rankings.size());
  if (report.num_queries == 0)
    throw std::runtime_error("evaluate: every query was skipped (no relevant items)");
  report.map =
      std::accumulate(report.per_query_ap.begin(), report.per_query_ap.end(), 0.0) /
      report.num_queries;
  report.cmc = cmc_curve(rankings, cmc_max_rank);
  return report;
}

/// Builds leave-one-out queries from one labeled record set: each record is
/// probed against all the others.
inline std::vector<EmbeddingSet> leave_one_out_queries(
    const std::vector<EmbeddingRecord>& records) {
  if (records.size() < 3)
    throw std::invalid_argument("leave_one_out_queries: need at least 3 records");
  std::vector<EmbeddingSet> queries;
  queries.reserve(records.size());
  for (std::size_t q = 0; q < records.size(); ++q) {
    EmbeddingSet set;
    set.probe = records[q];
    set.gallery.reserve(records.size() - 1);
    for (std::size_t i = 0; i < records.size(); ++i)
      if (i != q) set.gallery.push_back(records[i]);
    queries.push_back(std::move(set));
  }
  return queries;
}

}  // namespace gsrw
