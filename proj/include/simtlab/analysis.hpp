#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simtlab/decode.hpp"
#include "simtlab/error.hpp"
#include "simtlab/halluc.hpp"
#include "simtlab/relevance.hpp"

namespace simtlab {

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0, comp_ = 0;
};

inline constexpr double kNatsToBits = 1.4426950408889634;  // 1 / ln 2

struct FrequencyDistribution {
  std::map<std::string, long> counts;
  long total = 0;

  void add(const std::string& word, long n = 1) {
    counts[word] += n;
    total += n;
  }
};

// Shannon entropy of the normalized counts, in bits.
inline double freq_entropy(const FrequencyDistribution& dist) {
  if (dist.total < 1 || dist.counts.empty()) throw DataError("entropy of an empty frequency distribution");
  CompensatedSum h;
  const double total = static_cast<double>(dist.total);
  for (const auto& [word, c] : dist.counts) {
    const double p = static_cast<double>(c) / total;
    h.add(-p * std::log2(p));
  }
  return std::max(0.0, h.value());
}

struct ClassStats {
  long tokens = 0;
  std::optional<double> mean_confidence;
  std::optional<double> mean_uncertainty;  // nats
};

struct ConfUncByClass {
  ClassStats hallucination;
  ClassStats non_hallucination;
};

// Token-weighted means of confidence and uncertainty for hallucinated and
// non-hallucinated tokens. `labels[s][t]`, `confidence[s][t]` and
// `uncertainty[s][t]` must line up. An empty class has no means.
inline ConfUncByClass conf_unc_by_class(std::span<const std::vector<bool>> labels,
                                        std::span<const std::vector<double>> confidence,
                                        std::span<const std::vector<double>> uncertainty) {
  if (labels.size() != confidence.size() || labels.size() != uncertainty.size()) {
    throw DataError("labels and statistics cover different sentence counts");
  }
  CompensatedSum conf[2], unc[2];
  long count[2] = {0, 0};
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s].size() != confidence[s].size() || labels[s].size() != uncertainty[s].size()) {
      throw DataError("labels and statistics disagree on length in sentence " + std::to_string(s));
    }
    for (std::size_t t = 0; t < labels[s].size(); ++t) {
      const int c = labels[s][t] ? 0 : 1;
      conf[c].add(confidence[s][t]);
      unc[c].add(uncertainty[s][t]);
      ++count[c];
    }
  }
  ConfUncByClass out;
  ClassStats* cls[2] = {&out.hallucination, &out.non_hallucination};
  for (int c = 0; c < 2; ++c) {
    cls[c]->tokens = count[c];
    if (count[c] > 0) {
      cls[c]->mean_confidence = conf[c].value() / static_cast<double>(count[c]);
      cls[c]->mean_uncertainty = unc[c].value() / static_cast<double>(count[c]);
    }
  }
  return out;
}

// Per-bin token and hallucination counts over tokens with a defined TSSR.
struct BinCounts {
  std::vector<long> tokens;
  std::vector<long> hallucinations;
  long undefined = 0;  // tokens whose both side maxima are zero
  long undefined_hallucinations = 0;

  long total() const {
    long n = 0;
    for (long t : tokens) n += t;
    return n;
  }
  long total_hallucinations() const {
    long n = 0;
    for (long h : hallucinations) n += h;
    return n;
  }
};

inline BinCounts count_by_bin(std::span<const std::vector<bool>> labels,
                              std::span<const std::vector<RelevanceRecord>> records, int num_bins) {
  if (labels.size() != records.size()) throw DataError("labels and relevance records cover different sentence counts");
  BinCounts out;
  out.tokens.assign(num_bins, 0);
  out.hallucinations.assign(num_bins, 0);
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s].size() != records[s].size()) {
      throw DataError("labels and relevance records cover different tokens in sentence " + std::to_string(s));
    }
    for (std::size_t t = 0; t < labels[s].size(); ++t) {
      const auto& r = records[s][t];
      if (r.position != static_cast<int>(t) + 1) throw DataError("relevance record out of order in sentence " + std::to_string(s));
      if (r.kind == TssrKind::Undefined) {
        ++out.undefined;
        if (labels[s][t]) ++out.undefined_hallucinations;
        continue;
      }
      if (r.bin < 0 || r.bin >= num_bins) throw DataError("TSSR bin outside binning");
      ++out.tokens[r.bin];
      if (labels[s][t]) ++out.hallucinations[r.bin];
    }
  }
  return out;
}

// HR inside each TSSR interval; empty intervals are absent.
inline std::vector<std::optional<double>> hr_by_tssr_bin(const BinCounts& c) {
  std::vector<std::optional<double>> out(c.tokens.size());
  for (std::size_t b = 0; b < c.tokens.size(); ++b) {
    if (c.tokens[b] > 0) out[b] = static_cast<double>(c.hallucinations[b]) / static_cast<double>(c.tokens[b]);
  }
  return out;
}

inline std::vector<std::optional<double>> hr_by_tssr_bin(std::span<const std::vector<bool>> labels,
                                                         std::span<const std::vector<RelevanceRecord>> records,
                                                         int num_bins) {
  return hr_by_tssr_bin(count_by_bin(labels, records, num_bins));
}

struct FrequencyRates {
  std::optional<std::vector<double>> hallucination;
  std::optional<std::vector<double>> non_hallucination;
  std::optional<std::vector<double>> overall;
};

// Within each class the share of its tokens falling into each interval.
inline FrequencyRates freq_rate_by_tssr_bin(const BinCounts& c) {
  const auto n = c.tokens.size();
  std::vector<double> h(n), nh(n), all(n);
  long th = 0, tnh = 0, tall = 0;
  for (std::size_t b = 0; b < n; ++b) {
    th += c.hallucinations[b];
    tnh += c.tokens[b] - c.hallucinations[b];
    tall += c.tokens[b];
  }
  FrequencyRates out;
  for (std::size_t b = 0; b < n; ++b) {
    h[b] = th ? static_cast<double>(c.hallucinations[b]) / static_cast<double>(th) : 0.0;
    nh[b] = tnh ? static_cast<double>(c.tokens[b] - c.hallucinations[b]) / static_cast<double>(tnh) : 0.0;
    all[b] = tall ? static_cast<double>(c.tokens[b]) / static_cast<double>(tall) : 0.0;
  }
  if (th) out.hallucination = std::move(h);
  if (tnh) out.non_hallucination = std::move(nh);
  if (tall) out.overall = std::move(all);
  return out;
}

struct BleuStats {
  double bleu = 0;  // percentage
  double brevity_penalty = 0;
  double precisions[4] = {0, 0, 0, 0};
  long hyp_length = 0;
  long ref_length = 0;
};

// Corpus BLEU-4 with one reference per hypothesis: clipped n-gram matches
// pooled over the corpus, geometric mean of the four precisions times the
// brevity penalty. With `smooth`, precisions for n >= 2 use add-one
// smoothing (m + 1) / (c + 1).
inline BleuStats bleu(std::span<const std::vector<Token>> hyps, std::span<const std::vector<Token>> refs,
                      bool smooth = true) {
  if (hyps.empty()) throw DataError("BLEU of an empty hypothesis set");
  if (hyps.size() != refs.size()) throw DataError("BLEU needs one reference per hypothesis");
  long match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  BleuStats out;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    out.hyp_length += static_cast<long>(h.size());
    out.ref_length += static_cast<long>(r.size());
    for (int n = 1; n <= 4; ++n) {
      std::map<std::vector<Token>, long> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<Token>(r.begin() + i, r.begin() + i + n)];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<Token>(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) match[n - 1] += std::min(c, it->second);
        total[n - 1] += c;
      }
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (int n = 0; n < 4; ++n) {
    double p;
    if (smooth && n > 0) {
      p = static_cast<double>(match[n] + 1) / static_cast<double>(total[n] + 1);
    } else {
      p = total[n] ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : 0.0;
    }
    out.precisions[n] = p;
    if (p <= 0) zero = true;
    else log_sum += std::log(p) / 4.0;
  }
  if (out.hyp_length == 0) {
    out.brevity_penalty = 0;
  } else if (out.hyp_length < out.ref_length) {
    out.brevity_penalty = std::exp(1.0 - static_cast<double>(out.ref_length) / static_cast<double>(out.hyp_length));
  } else {
    out.brevity_penalty = 1.0;
  }
  out.bleu = zero ? 0.0 : 100.0 * out.brevity_penalty * std::exp(log_sum);
  return out;
}

// Everything measured for one system at one latency.
struct AnalysisReport {
  std::string system = "baseline";
  Latency k = Latency::full();
  std::vector<double> bin_edges;

  HallucinationRate hr;
  std::optional<double> entropy_hallucination_bits;
  double entropy_overall_bits = 0;
  long distinct_hallucination = 0;
  long distinct_overall = 0;
  FrequencyDistribution freq_hallucination;
  FrequencyDistribution freq_overall;

  ConfUncByClass valid;           // decoded hypotheses, uncertainty in nats
  ConfUncByClass training_subset;  // teacher-forced references, nats

  BinCounts bins;
  std::vector<std::optional<double>> hr_by_bin;
  FrequencyRates freq_rate;

  BleuStats bleu;
};

// Inputs of one analyzed run. Valid-set entries line up by sentence;
// relevance records cover the same tokens as `valid_labels`.
struct RunInputs {
  std::string system = "baseline";
  Latency k = Latency::full();
  TssrBinning binning;
  const Vocab* tgt_vocab = nullptr;
  std::span<const Hypothesis> hypotheses;
  std::span<const std::vector<Token>> references;
  std::span<const HallucinationLabel> valid_labels;
  std::span<const std::vector<RelevanceRecord>> relevance;
  std::span<const TokenStats> train_stats;
  std::span<const HallucinationLabel> train_labels;
};

inline AnalysisReport analyze_run(const RunInputs& in) {
  if (!in.tgt_vocab) throw UsageError("analysis needs the target vocabulary");
  const std::size_t n = in.hypotheses.size();
  if (in.valid_labels.size() != n || in.references.size() != n) {
    throw DataError("hypotheses, references and labels cover different sentence counts");
  }
  AnalysisReport r;
  r.system = in.system;
  r.k = in.k;
  r.bin_edges = in.binning.edges();

  std::vector<std::vector<bool>> labels(n);
  std::vector<std::vector<double>> conf(n), unc(n);
  std::vector<std::vector<Token>> hyp_tokens(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& h = in.hypotheses[s];
    if (!(h.k == in.k)) throw UsageError("hypothesis decoded with k=" + h.k.to_string() + " but analysis uses k=" + in.k.to_string());
    if (in.valid_labels[s].mode == LabelMode::WaitK && !(in.valid_labels[s].k == in.k)) {
      throw UsageError("labels computed with k=" + in.valid_labels[s].k.to_string() + " but analysis uses k=" + in.k.to_string());
    }
    if (in.valid_labels[s].labels.size() != h.tokens.size()) throw DataError("label count differs from hypothesis length in sentence " + std::to_string(s));
    labels[s] = in.valid_labels[s].labels;
    conf[s] = h.confidence;
    unc[s] = h.uncertainty;
    hyp_tokens[s] = h.tokens;
    for (std::size_t t = 0; t < h.tokens.size(); ++t) {
      const auto& w = in.tgt_vocab->token(h.tokens[t]);
      r.freq_overall.add(w);
      if (labels[s][t]) r.freq_hallucination.add(w);
    }
  }
  r.hr = hallucination_rate(in.valid_labels);
  r.entropy_overall_bits = freq_entropy(r.freq_overall);
  if (r.freq_hallucination.total > 0) r.entropy_hallucination_bits = freq_entropy(r.freq_hallucination);
  r.distinct_overall = static_cast<long>(r.freq_overall.counts.size());
  r.distinct_hallucination = static_cast<long>(r.freq_hallucination.counts.size());
  r.valid = conf_unc_by_class(labels, conf, unc);

  if (in.train_stats.size() != in.train_labels.size()) throw DataError("training-subset statistics and labels differ in size");
  std::vector<std::vector<bool>> tl;
  std::vector<std::vector<double>> tc, tu;
  for (std::size_t s = 0; s < in.train_stats.size(); ++s) {
    tl.push_back(in.train_labels[s].labels);
    tc.push_back(in.train_stats[s].confidence);
    tu.push_back(in.train_stats[s].uncertainty);
  }
  r.training_subset = conf_unc_by_class(tl, tc, tu);

  if (!in.relevance.empty()) {
    r.bins = count_by_bin(labels, in.relevance, in.binning.num_bins());
    r.hr_by_bin = hr_by_tssr_bin(r.bins);
    r.freq_rate = freq_rate_by_tssr_bin(r.bins);
  }
  r.bleu = bleu(hyp_tokens, in.references);
  return r;
}

// Run-versus-run change (b - a) per TSSR interval.
struct DeltaReport {
  Latency k = Latency::full();
  std::string system_a, system_b;
  std::vector<double> bin_edges;
  std::vector<double> overall_rate;   // share of all tokens per interval
  std::vector<double> h_rate;         // share of hallucinated tokens
  std::vector<double> nh_rate;        // share of non-hallucinated tokens
  std::vector<double> hall_freq;      // hallucinations in the interval / binned tokens
  double bleu_delta = 0;
  double hr_delta = 0;
};

inline DeltaReport delta_report(const AnalysisReport& a, const AnalysisReport& b) {
  if (a.bin_edges != b.bin_edges) throw UsageError("reports use different TSSR binnings");
  if (!(a.k == b.k)) throw UsageError("reports were measured at different k");
  const std::size_t n = a.bin_edges.size() + 1;
  if (a.bins.tokens.size() != n || b.bins.tokens.size() != n) throw DataError("report lacks TSSR bin counts");
  DeltaReport d;
  d.k = a.k;
  d.system_a = a.system;
  d.system_b = b.system;
  d.bin_edges = a.bin_edges;
  auto rate_or_zero = [n](const std::optional<std::vector<double>>& v) {
    return v ? *v : std::vector<double>(n, 0.0);
  };
  const auto oa = rate_or_zero(a.freq_rate.overall), ob = rate_or_zero(b.freq_rate.overall);
  const auto ha = rate_or_zero(a.freq_rate.hallucination), hb = rate_or_zero(b.freq_rate.hallucination);
  const auto na = rate_or_zero(a.freq_rate.non_hallucination), nb = rate_or_zero(b.freq_rate.non_hallucination);
  const double ta = static_cast<double>(std::max(1L, a.bins.total()));
  const double tb = static_cast<double>(std::max(1L, b.bins.total()));
  for (std::size_t i = 0; i < n; ++i) {
    d.overall_rate.push_back(ob[i] - oa[i]);
    d.h_rate.push_back(hb[i] - ha[i]);
    d.nh_rate.push_back(nb[i] - na[i]);
    d.hall_freq.push_back(static_cast<double>(b.bins.hallucinations[i]) / tb -
                          static_cast<double>(a.bins.hallucinations[i]) / ta);
  }
  d.bleu_delta = b.bleu.bleu - a.bleu.bleu;
  d.hr_delta = b.hr.micro - a.hr.micro;
  return d;
}

}  // namespace simtlab
