#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "simtlab/error.hpp"
#include "simtlab/latency.hpp"
#include "simtlab/model.hpp"

namespace simtlab {

// TSSR interval edges. The default grid splits [0, inf) at 0.4 m for
// m = 1..9 into ten left-closed intervals: [0, 0.4), [0.4, 0.8), ...,
// [3.6, inf).
class TssrBinning {
 public:
  TssrBinning() {
    for (int m = 1; m <= 9; ++m) edges_.push_back(m * 4 / 10.0);
  }
  explicit TssrBinning(std::vector<double> edges) : edges_(std::move(edges)) {
    if (edges_.empty()) throw UsageError("TSSR binning needs at least one edge");
    for (std::size_t i = 0; i < edges_.size(); ++i) {
      if (!(edges_[i] > 0) || (i && !(edges_[i] > edges_[i - 1]))) {
        throw UsageError("TSSR bin edges must be positive and strictly increasing");
      }
    }
  }

  int num_bins() const { return static_cast<int>(edges_.size()) + 1; }
  const std::vector<double>& edges() const { return edges_; }
  double lower(int b) const { return b == 0 ? 0.0 : edges_[b - 1]; }
  double upper(int b) const { return b + 1 < num_bins() ? edges_[b] : INFINITY; }

  int bin(double value) const {
    if (std::isnan(value) || value < 0) throw UsageError("TSSR value must be non-negative");
    return static_cast<int>(std::upper_bound(edges_.begin(), edges_.end(), value) - edges_.begin());
  }

  friend bool operator==(const TssrBinning&, const TssrBinning&) = default;

 private:
  std::vector<double> edges_;
};

enum class TssrKind { Finite, Infinite, Undefined };

struct RelevanceRecord {
  int position = 0;                   // i, 1-based into the hypothesis
  std::vector<double> src_relevance;  // [j - 1] = R(y_i, x_j), j = 1..visible
  std::vector<double> tgt_relevance;  // [j] = R(y_i, y_j), j = 0 (BOS)..i-1
  double src_side = 0;
  double tgt_side = 0;
  double tssr = 0;  // meaningful when kind == Finite
  TssrKind kind = TssrKind::Undefined;
  int bin = -1;  // -1 when undefined
};

// Side maxima of absolute relevance, their ratio and its interval.
inline void finalize_record(RelevanceRecord& r, const TssrBinning& binning) {
  r.src_side = 0;
  r.tgt_side = 0;
  for (double v : r.src_relevance) r.src_side = std::max(r.src_side, std::abs(v));
  for (double v : r.tgt_relevance) r.tgt_side = std::max(r.tgt_side, std::abs(v));
  if (r.src_side > 0) {
    r.kind = TssrKind::Finite;
    r.tssr = r.tgt_side / r.src_side;
    r.bin = binning.bin(r.tssr);
  } else if (r.tgt_side > 0) {
    r.kind = TssrKind::Infinite;
    r.tssr = INFINITY;
    r.bin = binning.num_bins() - 1;
  } else {
    r.kind = TssrKind::Undefined;
    r.tssr = NAN;
    r.bin = -1;
  }
}

namespace detail {

inline void check_position(std::span<const Token> hyp, int i) {
  if (i < 1 || i > static_cast<int>(hyp.size())) throw UsageError("hypothesis position out of range");
}

inline double next_prob(const ModelParams& p, std::span<const Token> src, std::span<const Token> hyp, int i, Latency k,
                        Ablation ablate) {
  const auto dist = forward_next(p, visible_source(src, i, k), hyp.first(static_cast<std::size_t>(i - 1)), k, ablate);
  return dist.probs[hyp[i - 1]];
}

}  // namespace detail

// R(y_i, x_j) = P(y_i | y_<i, x_<=i+k-1) - P(y_i | y_<i, x_<=i+k-1 with x_j's
// word embedding zeroed). Two independent forward passes.
inline double relevance_src(const ModelParams& p, std::span<const Token> src, std::span<const Token> hyp, int i, int j,
                            Latency k) {
  detail::check_position(hyp, i);
  const int visible = k.visible(i, static_cast<int>(src.size()));
  if (j < 1 || j > visible) {
    throw UsageError("source ablation x_" + std::to_string(j) + " is outside the visible prefix of length " +
                     std::to_string(visible));
  }
  return detail::next_prob(p, src, hyp, i, k, {}) - detail::next_prob(p, src, hyp, i, k, {j, -1});
}

// R(y_i, y_j) with j = 0 ablating BOS; 0 <= j < i.
inline double relevance_tgt(const ModelParams& p, std::span<const Token> src, std::span<const Token> hyp, int i, int j,
                            Latency k) {
  detail::check_position(hyp, i);
  if (j < 0 || j >= i) throw UsageError("target ablation y_" + std::to_string(j) + " is not before position " +
                                        std::to_string(i));
  return detail::next_prob(p, src, hyp, i, k, {}) - detail::next_prob(p, src, hyp, i, k, {0, j});
}

// Test hook: source relevance through the full teacher-forced path with no
// visibility check. For j >= i + k the wait-k mask makes this exactly zero.
inline double relevance_src_unmasked(const ModelParams& p, std::span<const Token> src, std::span<const Token> hyp,
                                     int i, int j, Latency k) {
  detail::check_position(hyp, i);
  if (j < 1 || j > static_cast<int>(src.size())) throw UsageError("source index out of range");
  const auto clean = forward_train(p, src, hyp, k);
  const auto ablated = forward_train(p, src, hyp, k, {j, -1});
  return clean.dists[i - 1].probs[hyp[i - 1]] - ablated.dists[i - 1].probs[hyp[i - 1]];
}

// TSSR records by the direct definition: one pair of forward passes per
// (i, j). O(|hyp| (|src| + |hyp|)) single-step passes. Reference path.
inline std::vector<RelevanceRecord> tssr_for_sentence_naive(const ModelParams& p, std::span<const Token> src,
                                                            std::span<const Token> hyp, Latency k,
                                                            const TssrBinning& binning = {}) {
  std::vector<RelevanceRecord> out;
  const int n = static_cast<int>(src.size());
  for (int i = 1; i <= static_cast<int>(hyp.size()); ++i) {
    RelevanceRecord r;
    r.position = i;
    for (int j = 0; j < i; ++j) r.tgt_relevance.push_back(relevance_tgt(p, src, hyp, i, j, k));
    for (int j = 1; j <= k.visible(i, n); ++j) r.src_relevance.push_back(relevance_src(p, src, hyp, i, j, k));
    finalize_record(r, binning);
    out.push_back(std::move(r));
  }
  return out;
}

// TSSR records for every hypothesis position.
//
// Each ablation is applied once to a full masked pass over the hypothesis,
// which yields the ablated probability at every position simultaneously:
// |src| + |hyp| + 1 passes instead of one pair per (i, j). The wait-k mask
// makes row i of a full pass identical to the single-step pass, so the
// values equal the naive path bit for bit.
inline std::vector<RelevanceRecord> tssr_for_sentence(const ModelParams& p, std::span<const Token> src,
                                                      std::span<const Token> hyp, Latency k,
                                                      const TssrBinning& binning = {}) {
  const int n = static_cast<int>(src.size()), m = static_cast<int>(hyp.size());
  std::vector<RelevanceRecord> out(m);
  if (m == 0) return out;
  const auto clean = forward_train(p, src, hyp, k);
  std::vector<double> base(m);
  for (int i = 1; i <= m; ++i) {
    base[i - 1] = clean.dists[i - 1].probs[hyp[i - 1]];
    out[i - 1].position = i;
    out[i - 1].src_relevance.assign(k.visible(i, n), 0.0);
    out[i - 1].tgt_relevance.assign(i, 0.0);
  }
  const int max_visible = k.visible(m, n);
  for (int j = 1; j <= max_visible; ++j) {
    const auto ablated = forward_train(p, src, hyp, k, {j, -1});
    for (int i = 1; i <= m; ++i) {
      if (j <= k.visible(i, n)) out[i - 1].src_relevance[j - 1] = base[i - 1] - ablated.dists[i - 1].probs[hyp[i - 1]];
    }
  }
  for (int j = 0; j < m; ++j) {
    const auto ablated = forward_train(p, src, hyp, k, {0, j});
    for (int i = j + 1; i <= m; ++i) out[i - 1].tgt_relevance[j] = base[i - 1] - ablated.dists[i - 1].probs[hyp[i - 1]];
  }
  for (auto& r : out) finalize_record(r, binning);
  return out;
}

}  // namespace simtlab
