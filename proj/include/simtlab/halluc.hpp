#pragma once

#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#include "simtlab/corpus.hpp"
#include "simtlab/error.hpp"
#include "simtlab/latency.hpp"

namespace simtlab {

enum class LabelMode { Full, WaitK };

// How the wait-k criterion reads the alignment. `Prose`: a token is a
// hallucination iff none of its links lands in the visible source
// s <= t + k - 1. `Literal`: iff it has no link with s >= t + k, the
// inequality as printed in the GHall definition. At k = inf there is no
// latency boundary and both readings reduce to full-sentence labels.
enum class GhallSemantics { Prose, Literal };

struct HallucinationLabel {
  std::vector<bool> labels;  // one per target token, true = hallucination
  LabelMode mode = LabelMode::Full;
  Latency k = Latency::full();
};

// H(t) = 1 iff no link (., t) exists.
inline HallucinationLabel label_full(std::size_t hyp_len, const Alignment& a) {
  HallucinationLabel out;
  out.labels.assign(hyp_len, true);
  for (const auto& l : a) {
    if (l.tgt < 1 || static_cast<std::size_t>(l.tgt) > hyp_len || l.src < 1) {
      throw DataError("alignment link " + std::to_string(l.src - 1) + "-" + std::to_string(l.tgt - 1) +
                      " out of range for hypothesis length " + std::to_string(hyp_len));
    }
    out.labels[l.tgt - 1] = false;
  }
  return out;
}

inline HallucinationLabel label_waitk(std::size_t hyp_len, const Alignment& a, Latency k,
                                      GhallSemantics semantics = GhallSemantics::Prose) {
  if (k.is_full()) {
    HallucinationLabel out = label_full(hyp_len, a);
    out.mode = LabelMode::WaitK;
    return out;
  }
  HallucinationLabel out;
  out.mode = LabelMode::WaitK;
  out.k = k;
  out.labels.assign(hyp_len, true);
  for (const auto& l : a) {
    if (l.tgt < 1 || static_cast<std::size_t>(l.tgt) > hyp_len || l.src < 1) {
      throw DataError("alignment link " + std::to_string(l.src - 1) + "-" + std::to_string(l.tgt - 1) +
                      " out of range for hypothesis length " + std::to_string(hyp_len));
    }
    // Compare in 64 bits: t + k - 1 overflows int for the inf sentinel.
    const long long last_visible = static_cast<long long>(l.tgt) + k.value() - 1;
    const bool visible = l.src <= last_visible;
    if (semantics == GhallSemantics::Prose ? visible : !visible) out.labels[l.tgt - 1] = false;
  }
  return out;
}

struct HallucinationRate {
  double micro = 0;  // hallucinated tokens / all tokens
  double macro = 0;  // mean of per-sentence rates over nonempty sentences
  long tokens = 0;
  long hallucinations = 0;
};

inline HallucinationRate hallucination_rate(std::span<const HallucinationLabel> corpus) {
  HallucinationRate r;
  long sentences = 0;
  double macro_sum = 0;
  for (const auto& s : corpus) {
    long h = 0;
    for (bool b : s.labels) h += b ? 1 : 0;
    r.tokens += static_cast<long>(s.labels.size());
    r.hallucinations += h;
    if (!s.labels.empty()) {
      macro_sum += static_cast<double>(h) / static_cast<double>(s.labels.size());
      ++sentences;
    }
  }
  if (r.tokens == 0) throw DataError("hallucination rate of an empty corpus");
  r.micro = static_cast<double>(r.hallucinations) / static_cast<double>(r.tokens);
  r.macro = macro_sum / static_cast<double>(sentences);
  return r;
}

// Alignment between a source sentence and a hypothesis under the synthetic
// lexicon: token t links to the source position s with f(src[s]) == hyp[t]
// nearest to t (ties to the smaller s). Spontaneous tokens never link.
inline Alignment align_hypothesis(std::span<const Token> src, std::span<const Token> hyp, const Lexicon& lex) {
  Alignment a;
  const int n = static_cast<int>(src.size());
  for (int t = 1; t <= static_cast<int>(hyp.size()); ++t) {
    const Token y = hyp[t - 1];
    if (lex.is_spontaneous(y) || is_reserved(y)) continue;
    int best = 0;
    for (int s = 1; s <= n; ++s) {
      if (lex.map(src[s - 1]) != y) continue;
      if (best == 0 || std::abs(s - t) < std::abs(best - t)) best = s;
    }
    if (best) a.push_back({best, t});
  }
  normalize(a);
  return a;
}

}  // namespace simtlab
