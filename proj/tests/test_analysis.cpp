#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

namespace simtlab {
namespace {

FrequencyDistribution uniform_words(int n) {
  FrequencyDistribution d;
  for (int w = 0; w < n; ++w) d.add("w" + std::to_string(w), 3);
  return d;
}

TEST(Entropy, Examples) {
  FrequencyDistribution one;
  one.add("a", 17);
  EXPECT_EQ(freq_entropy(one), 0.0);
  EXPECT_NEAR(freq_entropy(uniform_words(256)), 8.0, 1e-12);
  EXPECT_NEAR(freq_entropy(uniform_words(2)), 1.0, 1e-15);
  FrequencyDistribution skew;
  skew.add("a", 3);
  skew.add("b", 1);
  EXPECT_NEAR(freq_entropy(skew), -(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25)), 1e-15);
  EXPECT_THROW(freq_entropy(FrequencyDistribution{}), DataError);
}

TEST(Entropy, BoundedByLogOfDistinctWords) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    FrequencyDistribution d;
    const int distinct = 1 + static_cast<int>(rng.below(40));
    for (int w = 0; w < distinct; ++w) d.add("w" + std::to_string(w), 1 + static_cast<long>(rng.below(50)));
    const double h = freq_entropy(d);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log2(static_cast<double>(distinct)) + 1e-12);
  }
}

TEST(ConfUnc, ThreeTokenFixture) {
  const std::vector<std::vector<bool>> labels{{true, false}, {false}};
  const std::vector<std::vector<double>> conf{{0.2, 0.9}, {0.7}};
  const std::vector<std::vector<double>> unc{{2.0, 0.5}, {1.5}};
  const auto r = conf_unc_by_class(labels, conf, unc);
  EXPECT_EQ(r.hallucination.tokens, 1);
  EXPECT_EQ(r.non_hallucination.tokens, 2);
  EXPECT_DOUBLE_EQ(*r.hallucination.mean_confidence, 0.2);
  EXPECT_DOUBLE_EQ(*r.hallucination.mean_uncertainty, 2.0);
  EXPECT_DOUBLE_EQ(*r.non_hallucination.mean_confidence, 0.8);
  EXPECT_DOUBLE_EQ(*r.non_hallucination.mean_uncertainty, 1.0);
}

TEST(ConfUnc, EmptyClassHasNoMeans) {
  const std::vector<std::vector<bool>> labels{{false, false}};
  const std::vector<std::vector<double>> conf{{0.2, 0.9}}, unc{{2.0, 0.5}};
  const auto r = conf_unc_by_class(labels, conf, unc);
  EXPECT_EQ(r.hallucination.tokens, 0);
  EXPECT_FALSE(r.hallucination.mean_confidence.has_value());
  EXPECT_FALSE(r.hallucination.mean_uncertainty.has_value());
  const std::vector<std::vector<double>> short_conf{{0.2}};
  EXPECT_THROW(conf_unc_by_class(labels, short_conf, unc), DataError);
}

RelevanceRecord record_in(int position, int bin) {
  RelevanceRecord r;
  r.position = position;
  r.kind = TssrKind::Finite;
  r.bin = bin;
  return r;
}

struct Fixture {
  std::vector<std::vector<bool>> labels;
  std::vector<std::vector<RelevanceRecord>> records;
};

Fixture random_fixture(Rng& rng, int nbins, double h_rate) {
  Fixture f;
  for (int s = 0; s < 30; ++s) {
    const int len = 1 + static_cast<int>(rng.below(8));
    std::vector<bool> l;
    std::vector<RelevanceRecord> r;
    for (int t = 1; t <= len; ++t) {
      l.push_back(rng.bernoulli(h_rate));
      if (rng.bernoulli(0.05)) {
        RelevanceRecord u;
        u.position = t;
        r.push_back(u);
      } else {
        r.push_back(record_in(t, static_cast<int>(rng.below(nbins))));
      }
    }
    f.labels.push_back(l);
    f.records.push_back(r);
  }
  return f;
}

TEST(TssrBins, HrDecomposesOverIntervals) {
  // The binned HR is the interval HRs weighted by the share of tokens in
  // each interval.
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_fixture(rng, 10, 0.3);
    const auto c = count_by_bin(f.labels, f.records, 10);
    const auto hr = hr_by_tssr_bin(c);
    const auto rates = freq_rate_by_tssr_bin(c);
    ASSERT_TRUE(rates.overall.has_value());
    double sum = 0;
    for (int b = 0; b < 10; ++b)
      if (hr[b]) sum += (*rates.overall)[b] * *hr[b];
    EXPECT_NEAR(sum, static_cast<double>(c.total_hallucinations()) / static_cast<double>(c.total()), 1e-12);
  }
}

TEST(TssrBins, UndefinedTokensAreCountedSeparately) {
  const std::vector<std::vector<bool>> labels{{true, false, true}};
  std::vector<std::vector<RelevanceRecord>> records{{record_in(1, 2), record_in(2, 2), RelevanceRecord{}}};
  records[0][2].position = 3;
  const auto c = count_by_bin(labels, records, 10);
  EXPECT_EQ(c.total(), 2);
  EXPECT_EQ(c.undefined, 1);
  EXPECT_EQ(c.undefined_hallucinations, 1);
  EXPECT_EQ(c.tokens[2], 2);
  EXPECT_EQ(c.hallucinations[2], 1);
  EXPECT_EQ(*hr_by_tssr_bin(c)[2], 0.5);
  EXPECT_FALSE(hr_by_tssr_bin(c)[0].has_value());
}

TEST(TssrBins, RejectsMisalignedInputs) {
  const std::vector<std::vector<bool>> labels{{true, false}};
  const std::vector<std::vector<RelevanceRecord>> short_records{{record_in(1, 0)}};
  EXPECT_THROW(count_by_bin(labels, short_records, 10), DataError);
  const std::vector<std::vector<RelevanceRecord>> swapped{{record_in(2, 0), record_in(1, 0)}};
  EXPECT_THROW(count_by_bin(labels, swapped, 10), DataError);
  const std::vector<std::vector<RelevanceRecord>> outside{{record_in(1, 0), record_in(2, 10)}};
  EXPECT_THROW(count_by_bin(labels, outside, 10), DataError);
}

TEST(TssrBins, SingleIntervalCollapsesToCorpusHr) {
  Rng rng(8);
  const auto f = random_fixture(rng, 1, 0.4);
  const auto c = count_by_bin(f.labels, f.records, 1);
  EXPECT_DOUBLE_EQ(*hr_by_tssr_bin(c)[0], static_cast<double>(c.total_hallucinations()) / c.total());
  EXPECT_EQ((*freq_rate_by_tssr_bin(c).overall)[0], 1.0);
}

TEST(FreqRate, EachClassSumsToOne) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_fixture(rng, 10, 0.25);
    const auto r = freq_rate_by_tssr_bin(count_by_bin(f.labels, f.records, 10));
    for (const auto* v : {&r.hallucination, &r.non_hallucination, &r.overall}) {
      if (!v->has_value()) continue;
      double sum = 0;
      for (double x : **v) {
        EXPECT_GE(x, 0.0);
        sum += x;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(FreqRate, SingleHallucinationInTheTopInterval) {
  const std::vector<std::vector<bool>> labels{{false, true, false}};
  const std::vector<std::vector<RelevanceRecord>> records{{record_in(1, 0), record_in(2, 9), record_in(3, 4)}};
  const auto r = freq_rate_by_tssr_bin(count_by_bin(labels, records, 10));
  std::vector<double> e9(10, 0.0);
  e9[9] = 1.0;
  EXPECT_EQ(*r.hallucination, e9);
  EXPECT_EQ((*r.non_hallucination)[0], 0.5);
  EXPECT_EQ((*r.non_hallucination)[4], 0.5);
}

TEST(FreqRate, AbsentClassIsAbsent) {
  const std::vector<std::vector<bool>> labels{{false}};
  const std::vector<std::vector<RelevanceRecord>> records{{record_in(1, 3)}};
  const auto r = freq_rate_by_tssr_bin(count_by_bin(labels, records, 10));
  EXPECT_FALSE(r.hallucination.has_value());
  EXPECT_TRUE(r.non_hallucination.has_value());
}

AnalysisReport report_from(const Fixture& f, const std::string& system) {
  AnalysisReport r;
  r.system = system;
  r.k = Latency(1);
  r.bin_edges = TssrBinning().edges();
  r.bins = count_by_bin(f.labels, f.records, 10);
  r.hr_by_bin = hr_by_tssr_bin(r.bins);
  r.freq_rate = freq_rate_by_tssr_bin(r.bins);
  r.hr.micro = static_cast<double>(r.bins.total_hallucinations()) / static_cast<double>(r.bins.total());
  return r;
}

TEST(Delta, DifferenceAntisymmetryAndZeroSum) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = report_from(random_fixture(rng, 10, 0.2), "baseline");
    const auto b = report_from(random_fixture(rng, 10, 0.3), "ss");
    const auto ab = delta_report(a, b);
    const auto ba = delta_report(b, a);
    EXPECT_EQ(ab.system_a, "baseline");
    EXPECT_EQ(ab.system_b, "ss");
    double so = 0, sh = 0, sn = 0;
    for (int i = 0; i < 10; ++i) {
      EXPECT_EQ(ab.overall_rate[i], (*b.freq_rate.overall)[i] - (*a.freq_rate.overall)[i]);
      EXPECT_EQ(ab.overall_rate[i], -ba.overall_rate[i]);
      EXPECT_EQ(ab.h_rate[i], -ba.h_rate[i]);
      EXPECT_EQ(ab.hall_freq[i], -ba.hall_freq[i]);
      so += ab.overall_rate[i];
      sh += ab.h_rate[i];
      sn += ab.nh_rate[i];
    }
    EXPECT_NEAR(so, 0.0, 1e-12);
    EXPECT_NEAR(sh, 0.0, 1e-12);
    EXPECT_NEAR(sn, 0.0, 1e-12);
    EXPECT_DOUBLE_EQ(ab.hr_delta, b.hr.micro - a.hr.micro);
    EXPECT_EQ(delta_report(a, a).overall_rate, std::vector<double>(10, 0.0));
  }
}

TEST(Delta, RejectsIncomparableReports) {
  Rng rng(11);
  const auto a = report_from(random_fixture(rng, 10, 0.2), "baseline");
  auto b = a;
  b.bin_edges = {1.0, 2.0};
  EXPECT_THROW(delta_report(a, b), UsageError);
  b = a;
  b.k = Latency(3);
  EXPECT_THROW(delta_report(a, b), UsageError);
}

using Sentence = std::vector<Token>;

TEST(Bleu, IdentityIsHundred) {
  const std::vector<Sentence> refs{{4, 5, 6, 7, 8}, {9, 10, 11, 12}};
  EXPECT_NEAR(bleu(refs, refs).bleu, 100.0, 1e-12);
  EXPECT_NEAR(bleu(refs, refs, false).bleu, 100.0, 1e-12);
}

TEST(Bleu, UnsmoothedHandComputedCase) {
  // Hypothesis "a b c d" against "a b c d e": every n-gram precision is 1
  // and the brevity penalty is exp(1 - 5/4) = 0.7788.
  const std::vector<Sentence> hyp{{4, 5, 6, 7}};
  const std::vector<Sentence> ref{{4, 5, 6, 7, 8}};
  const auto s = bleu(hyp, ref, false);
  EXPECT_NEAR(s.bleu, 77.88, 0.01);
  EXPECT_NEAR(s.brevity_penalty, std::exp(-0.25), 1e-15);
  for (double p : s.precisions) EXPECT_EQ(p, 1.0);
}

TEST(Bleu, ClippedCounts) {
  // "the the the" style: unigram matches are clipped at the reference count.
  const std::vector<Sentence> hyp{{4, 4, 4, 4}};
  const std::vector<Sentence> ref{{4, 5, 6, 7}};
  const auto s = bleu(hyp, ref, false);
  EXPECT_EQ(s.precisions[0], 0.25);
  EXPECT_EQ(s.bleu, 0.0);
  EXPECT_GT(bleu(hyp, ref, true).bleu, 0.0);
}

TEST(Bleu, RangeAndErrors) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Sentence> hyps, refs;
    for (int s = 0; s < 5; ++s) {
      hyps.push_back(test::random_tokens(rng, 1 + static_cast<int>(rng.below(8)), 10));
      refs.push_back(test::random_tokens(rng, 1 + static_cast<int>(rng.below(8)), 10));
    }
    for (bool smooth : {true, false}) {
      const double b = bleu(hyps, refs, smooth).bleu;
      EXPECT_GE(b, 0.0);
      EXPECT_LE(b, 100.0 + 1e-9);
    }
  }
  EXPECT_THROW(bleu(std::vector<Sentence>{}, std::vector<Sentence>{}), DataError);
  EXPECT_THROW(bleu(std::vector<Sentence>{{4}}, std::vector<Sentence>{}), DataError);
}

}  // namespace
}  // namespace simtlab
