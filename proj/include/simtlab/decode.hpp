#pragma once

#include <span>
#include <vector>

#include "simtlab/corpus.hpp"
#include "simtlab/latency.hpp"
#include "simtlab/model.hpp"

namespace simtlab {

// A greedy wait-k translation with the statistics of every emitted token.
// Uncertainty is in nats. The closing EOS is not part of `tokens`.
struct Hypothesis {
  std::vector<Token> tokens;
  std::vector<double> confidence;
  std::vector<double> uncertainty;
  std::vector<int> read;
  Latency k;
  bool truncated = false;
};

// Reads min(i + k - 1, |src|) source tokens before emitting target position
// i, takes the argmax (ties to the lowest id), stops at EOS or after max_len
// tokens. Once the source is exhausted decoding continues on the full source.
inline Hypothesis waitk_decode(const ModelParams& p, std::span<const Token> src, Latency k, int max_len) {
  if (src.empty()) throw DataError("cannot decode an empty source");
  if (max_len < 1) throw UsageError("max_len must be positive");
  Hypothesis h;
  h.k = k;
  h.truncated = true;
  for (int i = 1; i <= max_len; ++i) {
    const SourcePrefix visible = visible_source(src, i, k);
    const auto dist = forward_next(p, visible, h.tokens, k);
    const Token next = dist.argmax();
    if (next == kEos) {
      h.truncated = false;
      break;
    }
    h.tokens.push_back(next);
    h.confidence.push_back(dist.probs[next]);
    h.uncertainty.push_back(dist.entropy());
    h.read.push_back(static_cast<int>(visible.tokens.size()));
  }
  return h;
}

struct TokenStats {
  std::vector<double> confidence;
  std::vector<double> uncertainty;
};

// Confidence and uncertainty of the reference tokens under teacher forcing
// with the wait-k mask; one entry per reference token (EOS excluded).
inline TokenStats teacher_forced_stats(const ModelParams& p, const ParallelSentence& s, Latency k) {
  const TrainOutput out = forward_train(p, s.src, s.tgt, k);
  TokenStats st;
  for (std::size_t i = 0; i < s.tgt.size(); ++i) {
    st.confidence.push_back(out.dists[i].probs[s.tgt[i]]);
    st.uncertainty.push_back(out.dists[i].entropy());
  }
  return st;
}

}  // namespace simtlab
