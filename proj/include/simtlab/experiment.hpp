#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "simtlab/analysis.hpp"
#include "simtlab/corpus.hpp"
#include "simtlab/decode.hpp"
#include "simtlab/dumps.hpp"
#include "simtlab/error.hpp"
#include "simtlab/halluc.hpp"
#include "simtlab/model.hpp"
#include "simtlab/parallel.hpp"
#include "simtlab/relevance.hpp"
#include "simtlab/rng.hpp"
#include "simtlab/train.hpp"

namespace simtlab {

namespace fs = std::filesystem;

enum class System { Baseline, ScheduledSampling };

inline std::string system_name(System s) { return s == System::Baseline ? "baseline" : "ss"; }

inline System parse_system(const std::string& s) {
  if (s == "baseline") return System::Baseline;
  if (s == "ss") return System::ScheduledSampling;
  throw UsageError("unknown system '" + s + "', expected baseline or ss");
}

// Everything one experiment depends on. Sub-seeds of the corpus, split,
// training subset, initialization and training are derived from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/default";
  int workers = 1;
  std::vector<Latency> ks{Latency(1), Latency(3), Latency(9), Latency::full()};
  std::vector<Latency> ss_ks{Latency(1), Latency(3)};
  TssrBinning binning;
  GhallSemantics ghall = GhallSemantics::Prose;
  double valid_fraction = 0.1;
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;

  enum SeedStream : std::uint64_t { kCorpus = 1, kSplit, kSubset, kInit, kTrain };
  std::uint64_t derived_seed(SeedStream stream) const { return Rng(seed).fork(stream).next(); }

  void validate() const {
    if (ks.empty()) throw UsageError("the k list is empty");
    if (workers < 1) throw UsageError("workers must be >= 1");
    if (!(valid_fraction > 0 && valid_fraction < 1)) throw UsageError("valid_fraction must lie in (0, 1)");
    for (auto k : ss_ks) {
      if (std::find(ks.begin(), ks.end(), k) == ks.end()) {
        throw UsageError("scheduled-sampling k=" + k.to_string() + " has no baseline in the k list");
      }
    }
    for (std::size_t i = 0; i < ks.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (ks[i] == ks[j]) throw UsageError("k=" + ks[i].to_string() + " is listed twice");
    corpus.validate();
    model.validate();
    train.validate();
    if (model.max_len < corpus.len_max + 2) throw UsageError("model.max_len must be at least corpus.len_max + 2");
  }
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson latency_json(Latency k) { return k.is_full() ? ojson("inf") : ojson(k.value()); }

inline Latency latency_from_json(const ojson& j) {
  if (j.is_number_integer()) return Latency(j.get<int>());
  if (j.is_string()) return Latency::parse(j.get<std::string>());
  throw UsageError("k must be a positive integer or \"inf\", got " + j.dump());
}

// Reads a JSON object field by field and rejects keys it does not know.
class ObjectReader {
 public:
  ObjectReader(const ojson& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw UsageError(where_ + " must be a JSON object");
  }
  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw UsageError("unknown config key '" + key + "' in " + where_);
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw UsageError(where_ + "." + key + " has the wrong type: " + j_.at(key).dump());
    }
  }

  const ojson* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const ojson& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

// Human-readable config. `out` and `workers` are execution settings and are
// omitted, so resolved configs do not depend on where or how a run executes.
inline detail::ojson config_to_json(const ExperimentConfig& c) {
  using detail::ojson;
  ojson j;
  j["seed"] = c.seed;
  j["k"] = ojson::array();
  for (auto k : c.ks) j["k"].push_back(detail::latency_json(k));
  j["ss_k"] = ojson::array();
  for (auto k : c.ss_ks) j["ss_k"].push_back(detail::latency_json(k));
  j["bins"] = c.binning.edges();
  j["ghall"] = c.ghall == GhallSemantics::Prose ? "prose" : "literal";
  j["valid_fraction"] = c.valid_fraction;
  j["corpus"] = {{"src_vocab_size", c.corpus.src_vocab_size},
                 {"tgt_vocab_size", c.corpus.tgt_vocab_size},
                 {"num_sentences", c.corpus.num_sentences},
                 {"len_min", c.corpus.len_min},
                 {"len_max", c.corpus.len_max},
                 {"future_dep_rate", c.corpus.future_dep_rate},
                 {"future_dep_distance", c.corpus.future_dep_distance},
                 {"spontaneous_rate", c.corpus.spontaneous_rate}};
  j["model"] = {{"num_layers", c.model.num_layers}, {"num_heads", c.model.num_heads},
                {"model_dim", c.model.model_dim},   {"ff_dim", c.model.ff_dim},
                {"dropout_rate", c.model.dropout_rate}, {"max_len", c.model.max_len}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"warmup_steps", c.train.warmup_steps},
                {"grad_clip", c.train.grad_clip},
                {"ss_epsilon_start", c.train.ss_epsilon_start},
                {"ss_epsilon_end", c.train.ss_epsilon_end},
                {"ss_decay", c.train.ss_decay == DecaySchedule::Linear ? "linear" : "inverse-sigmoid"}};
  return j;
}

inline ExperimentConfig config_from_json(const detail::ojson& j) {
  ExperimentConfig c;
  {
    detail::ObjectReader r(j, "config");
    r.get("seed", c.seed);
    r.get("out", c.out);
    r.get("workers", c.workers);
    r.get("valid_fraction", c.valid_fraction);
    if (const auto* ks = r.child("k")) {
      if (!ks->is_array()) throw UsageError("config.k must be a list");
      c.ks.clear();
      for (const auto& k : *ks) c.ks.push_back(detail::latency_from_json(k));
    }
    if (const auto* ks = r.child("ss_k")) {
      if (!ks->is_array()) throw UsageError("config.ss_k must be a list");
      c.ss_ks.clear();
      for (const auto& k : *ks) c.ss_ks.push_back(detail::latency_from_json(k));
    }
    std::vector<double> bins = c.binning.edges();
    r.get("bins", bins);
    c.binning = TssrBinning(bins);
    std::string ghall = "prose";
    r.get("ghall", ghall);
    if (ghall == "prose") c.ghall = GhallSemantics::Prose;
    else if (ghall == "literal") c.ghall = GhallSemantics::Literal;
    else throw UsageError("config.ghall must be \"prose\" or \"literal\"");
    if (const auto* cj = r.child("corpus")) {
      detail::ObjectReader cr(*cj, "corpus");
      cr.get("src_vocab_size", c.corpus.src_vocab_size);
      cr.get("tgt_vocab_size", c.corpus.tgt_vocab_size);
      cr.get("num_sentences", c.corpus.num_sentences);
      cr.get("len_min", c.corpus.len_min);
      cr.get("len_max", c.corpus.len_max);
      cr.get("future_dep_rate", c.corpus.future_dep_rate);
      cr.get("future_dep_distance", c.corpus.future_dep_distance);
      cr.get("spontaneous_rate", c.corpus.spontaneous_rate);
      cr.finish();
    }
    if (const auto* mj = r.child("model")) {
      detail::ObjectReader mr(*mj, "model");
      mr.get("num_layers", c.model.num_layers);
      mr.get("num_heads", c.model.num_heads);
      mr.get("model_dim", c.model.model_dim);
      mr.get("ff_dim", c.model.ff_dim);
      mr.get("dropout_rate", c.model.dropout_rate);
      mr.get("max_len", c.model.max_len);
      mr.finish();
    }
    if (const auto* tj = r.child("train")) {
      detail::ObjectReader tr(*tj, "train");
      tr.get("epochs", c.train.epochs);
      tr.get("batch_size", c.train.batch_size);
      tr.get("learning_rate", c.train.learning_rate);
      tr.get("warmup_steps", c.train.warmup_steps);
      tr.get("grad_clip", c.train.grad_clip);
      tr.get("ss_epsilon_start", c.train.ss_epsilon_start);
      tr.get("ss_epsilon_end", c.train.ss_epsilon_end);
      std::string decay = "linear";
      tr.get("ss_decay", decay);
      if (decay == "linear") c.train.ss_decay = DecaySchedule::Linear;
      else if (decay == "inverse-sigmoid") c.train.ss_decay = DecaySchedule::InverseSigmoid;
      else throw UsageError("train.ss_decay must be \"linear\" or \"inverse-sigmoid\"");
      tr.finish();
    }
    r.finish();
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path);
  detail::ojson j;
  try {
    j = detail::ojson::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<Latency>> ks;
  bool ghall_literal = false;
  std::optional<std::vector<double>> bins;
  std::optional<int> workers;
  std::optional<std::string> out;

  void apply(ExperimentConfig& c) const {
    if (seed) c.seed = *seed;
    if (ks) c.ks = *ks;
    if (ghall_literal) c.ghall = GhallSemantics::Literal;
    if (bins) c.binning = TssrBinning(*bins);
    if (workers) c.workers = *workers;
    if (out) c.out = *out;
  }
};

// ---------------------------------------------------------------------------
// Output layout
//
//   <out>/config.resolved.json
//   <out>/corpus/{src.vocab,tgt.vocab,lexicon.txt,train.jsonl,valid.jsonl,train_subset.jsonl}
//   <out>/runs/<system>_k<k>/{config.resolved.json,model.bin,model.json,loss.csv,
//                             hyps.jsonl,hyps.align,labels.jsonl,relevance.jsonl,report.json}
//   <out>/results/*.csv
//   <out>/manifest.json

struct Layout {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path run(System s, Latency k) const { return root / "runs" / (system_name(s) + "_k" + k.to_string()); }
  fs::path results() const { return root / "results"; }
};

namespace detail {

inline void write_json(const fs::path& path, const ojson& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline ojson read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing input " + path.string());
  try {
    return ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void require(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("missing input " + path.string());
}

inline void write_resolved(const fs::path& dir, const ExperimentConfig& c, const ojson& extra = {}) {
  fs::create_directories(dir);
  ojson j = config_to_json(c);
  j["derived_seeds"] = {{"corpus", c.derived_seed(ExperimentConfig::kCorpus)},
                        {"split", c.derived_seed(ExperimentConfig::kSplit)},
                        {"subset", c.derived_seed(ExperimentConfig::kSubset)},
                        {"init", c.derived_seed(ExperimentConfig::kInit)},
                        {"train", c.derived_seed(ExperimentConfig::kTrain)}};
  for (const auto& [key, value] : extra.items()) j[key] = value;
  write_json(dir / "config.resolved.json", j);
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

inline void log(const std::string& line) { std::cerr << line << std::endl; }

}  // namespace detail

// The generated corpus as loaded back from disk.
struct CorpusBundle {
  Vocab src_vocab;
  Vocab tgt_vocab;
  Lexicon lexicon;
  std::vector<ParallelSentence> train;
  std::vector<ParallelSentence> valid;
  std::vector<ParallelSentence> train_subset;
};

inline CorpusBundle load_corpus(const Layout& layout) {
  const auto dir = layout.corpus();
  for (const char* f : {"src.vocab", "tgt.vocab", "lexicon.txt", "train.jsonl", "valid.jsonl", "train_subset.jsonl"}) {
    detail::require(dir / f);
  }
  CorpusBundle b;
  b.src_vocab = Vocab::load((dir / "src.vocab").string());
  b.tgt_vocab = Vocab::load((dir / "tgt.vocab").string());
  b.lexicon = Lexicon::load((dir / "lexicon.txt").string(), b.src_vocab, b.tgt_vocab);
  const auto ns = b.src_vocab.size(), nt = b.tgt_vocab.size();
  b.train = load_jsonl((dir / "train.jsonl").string(), b.src_vocab, b.tgt_vocab);
  b.valid = load_jsonl((dir / "valid.jsonl").string(), b.src_vocab, b.tgt_vocab);
  b.train_subset = load_jsonl((dir / "train_subset.jsonl").string(), b.src_vocab, b.tgt_vocab);
  if (b.src_vocab.size() != ns || b.tgt_vocab.size() != nt) throw DataError("corpus contains tokens outside its vocabularies");
  for (auto* part : {&b.train, &b.valid, &b.train_subset})
    for (auto& s : *part) s.origin = Origin::Synthetic;
  return b;
}

inline void cmd_gen(const ExperimentConfig& cfg) {
  cfg.validate();
  const Layout layout{cfg.out};
  fs::create_directories(layout.corpus());
  CorpusConfig cc = cfg.corpus;
  cc.seed = cfg.derived_seed(ExperimentConfig::kCorpus);
  const SyntheticCorpus corpus = gen_corpus(cc);
  const Split parts = split(corpus.sentences, cfg.valid_fraction, cfg.derived_seed(ExperimentConfig::kSplit));
  const auto subset = sample_subset(parts.train, parts.valid.size(), cfg.derived_seed(ExperimentConfig::kSubset));
  const auto dir = layout.corpus();
  corpus.src_vocab.save((dir / "src.vocab").string());
  corpus.tgt_vocab.save((dir / "tgt.vocab").string());
  corpus.lexicon.save((dir / "lexicon.txt").string(), corpus.src_vocab, corpus.tgt_vocab);
  save_jsonl((dir / "train.jsonl").string(), parts.train, corpus.src_vocab, corpus.tgt_vocab);
  save_jsonl((dir / "valid.jsonl").string(), parts.valid, corpus.src_vocab, corpus.tgt_vocab);
  save_jsonl((dir / "train_subset.jsonl").string(), subset, corpus.src_vocab, corpus.tgt_vocab);
  detail::write_resolved(layout.root, cfg);
  detail::log("gen: " + std::to_string(parts.train.size()) + " train, " + std::to_string(parts.valid.size()) +
              " valid sentences in " + dir.string());
}

namespace detail {

struct RunModel {
  ModelParams params;
  System system;
  Latency k;
};

// Loads a trained model and refuses it when it was trained for another k.
inline RunModel load_run_model(const Layout& layout, System system, Latency k) {
  const auto dir = layout.run(system, k);
  require(dir / "model.bin");
  const auto meta = read_json(dir / "model.json");
  RunModel m;
  m.system = parse_system(meta.at("system").get<std::string>());
  m.k = Latency::parse(meta.at("k").get<std::string>());
  if (!(m.k == k)) throw UsageError("model in " + dir.string() + " was trained with k=" + m.k.to_string() + ", not k=" + k.to_string());
  if (m.system != system) throw UsageError("model in " + dir.string() + " belongs to system " + system_name(m.system));
  m.params = load_params((dir / "model.bin").string());
  return m;
}

inline std::vector<Hypothesis> load_run_hypotheses(const Layout& layout, System system, Latency k, const Vocab& tgt,
                                                   std::size_t expected) {
  const auto path = layout.run(system, k) / "hyps.jsonl";
  require(path);
  auto hyps = load_hypotheses(path.string(), tgt);
  for (const auto& h : hyps) {
    if (!(h.k == k)) throw UsageError(path.string() + " was decoded with k=" + h.k.to_string() + ", not k=" + k.to_string());
  }
  if (hyps.size() != expected) throw DataError(path.string() + " does not cover the validation set");
  return hyps;
}

inline int decode_limit(const ModelParams& p, std::size_t src_len) {
  return std::min(p.config.max_len - 1, 2 * static_cast<int>(src_len) + 2);
}

}  // namespace detail

inline void cmd_train(const ExperimentConfig& cfg, System system, Latency k) {
  cfg.validate();
  const Layout layout{cfg.out};
  const CorpusBundle data = load_corpus(layout);
  ModelConfig mc = cfg.model;
  mc.seed = cfg.derived_seed(ExperimentConfig::kInit);
  TrainConfig tc = cfg.train;
  tc.train_k = k;
  tc.scheduled_sampling = system == System::ScheduledSampling;
  tc.seed = cfg.derived_seed(ExperimentConfig::kTrain);
  const std::string tag = system_name(system) + " k=" + k.to_string();
  auto init = init_model(mc, static_cast<int>(data.src_vocab.size()), static_cast<int>(data.tgt_vocab.size()));
  const auto result = train(std::move(init), data.train, tc, data.valid, [&](const LossPoint& l) {
    detail::log("train " + tag + ": step " + std::to_string(l.step) + " eps " + detail::fmt(l.epsilon) + " train " +
                detail::fmt(l.train_loss) + " valid " + detail::fmt(l.valid_loss));
  });
  const auto dir = layout.run(system, k);
  fs::create_directories(dir);
  save_params(result.params, (dir / "model.bin").string());
  write_loss_csv((dir / "loss.csv").string(), result.curve);
  detail::write_json(dir / "model.json", {{"system", system_name(system)}, {"k", k.to_string()}});
  detail::write_resolved(dir, cfg, {{"system", system_name(system)}, {"run_k", k.to_string()}});
}

inline void cmd_decode(const ExperimentConfig& cfg, System system, Latency k) {
  const Layout layout{cfg.out};
  const CorpusBundle data = load_corpus(layout);
  const auto model = detail::load_run_model(layout, system, k);
  const auto hyps = parallel_map(data.valid.size(), cfg.workers, [&](std::size_t i) {
    const auto& s = data.valid[i];
    return waitk_decode(model.params, s.src, k, detail::decode_limit(model.params, s.src.size()));
  });
  const auto dir = layout.run(system, k);
  save_hypotheses((dir / "hyps.jsonl").string(), hyps, data.tgt_vocab);
  detail::log("decode " + system_name(system) + " k=" + k.to_string() + ": " + std::to_string(hyps.size()) + " hypotheses");
}

inline void cmd_label(const ExperimentConfig& cfg, System system, Latency k) {
  const Layout layout{cfg.out};
  const CorpusBundle data = load_corpus(layout);
  const auto hyps = detail::load_run_hypotheses(layout, system, k, data.tgt_vocab, data.valid.size());
  const auto dir = layout.run(system, k);
  std::vector<HallucinationLabel> labels;
  std::ofstream align(dir / "hyps.align");
  if (!align) throw DataError("cannot write " + (dir / "hyps.align").string());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto a = align_hypothesis(data.valid[i].src, hyps[i].tokens, data.lexicon);
    align << format_pharaoh(a) << '\n';
    labels.push_back(label_waitk(hyps[i].tokens.size(), a, k, cfg.ghall));
  }
  save_labels((dir / "labels.jsonl").string(), labels);
  long tokens = 0, hall = 0;
  for (const auto& l : labels) {
    tokens += static_cast<long>(l.labels.size());
    hall += std::count(l.labels.begin(), l.labels.end(), true);
  }
  detail::log("label " + system_name(system) + " k=" + k.to_string() + ": " + std::to_string(hall) + " of " +
              std::to_string(tokens) + " tokens hallucinated");
}

inline void cmd_tssr(const ExperimentConfig& cfg, System system, Latency k) {
  const Layout layout{cfg.out};
  const CorpusBundle data = load_corpus(layout);
  const auto model = detail::load_run_model(layout, system, k);
  const auto hyps = detail::load_run_hypotheses(layout, system, k, data.tgt_vocab, data.valid.size());
  const auto records = parallel_map(hyps.size(), cfg.workers, [&](std::size_t i) {
    return tssr_for_sentence(model.params, data.valid[i].src, hyps[i].tokens, k, cfg.binning);
  });
  save_relevance((layout.run(system, k) / "relevance.jsonl").string(), records, k);
  detail::log("tssr " + system_name(system) + " k=" + k.to_string() + ": done");
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline ojson opt_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

inline std::optional<double> opt_from(const ojson& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline ojson class_json(const ClassStats& c) {
  return {{"tokens", c.tokens}, {"confidence", opt_json(c.mean_confidence)}, {"uncertainty_nats", opt_json(c.mean_uncertainty)}};
}

inline ClassStats class_from(const ojson& j) {
  ClassStats c;
  c.tokens = j.at("tokens").get<long>();
  c.mean_confidence = opt_from(j.at("confidence"));
  c.mean_uncertainty = opt_from(j.at("uncertainty_nats"));
  return c;
}

inline ojson rates_json(const std::optional<std::vector<double>>& v) { return v ? ojson(*v) : ojson(nullptr); }

inline std::optional<std::vector<double>> rates_from(const ojson& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::vector<double>>();
}

inline ojson freq_json(const FrequencyDistribution& f) {
  ojson counts = ojson::object();
  for (const auto& [w, c] : f.counts) counts[w] = c;
  return {{"total", f.total}, {"counts", counts}};
}

inline FrequencyDistribution freq_from(const ojson& j) {
  FrequencyDistribution f;
  for (const auto& [w, c] : j.at("counts").items()) f.add(w, c.get<long>());
  if (f.total != j.at("total").get<long>()) throw DataError("frequency total does not match its counts");
  return f;
}

}  // namespace detail

inline detail::ojson report_to_json(const AnalysisReport& r) {
  using detail::ojson;
  ojson j;
  j["system"] = r.system;
  j["k"] = r.k.to_string();
  j["bin_edges"] = r.bin_edges;
  j["hr"] = {{"micro", r.hr.micro}, {"macro", r.hr.macro}, {"tokens", r.hr.tokens}, {"hallucinations", r.hr.hallucinations}};
  j["entropy_bits"] = {{"hallucination", detail::opt_json(r.entropy_hallucination_bits)},
                       {"overall", r.entropy_overall_bits},
                       {"distinct_hallucination", r.distinct_hallucination},
                       {"distinct_overall", r.distinct_overall}};
  j["conf_unc"] = {{"valid", {{"H", detail::class_json(r.valid.hallucination)}, {"NH", detail::class_json(r.valid.non_hallucination)}}},
                   {"train_subset",
                    {{"H", detail::class_json(r.training_subset.hallucination)},
                     {"NH", detail::class_json(r.training_subset.non_hallucination)}}}};
  ojson hr_bin = ojson::array();
  for (const auto& v : r.hr_by_bin) hr_bin.push_back(detail::opt_json(v));
  j["tssr"] = {{"tokens", r.bins.tokens},
               {"hallucinations", r.bins.hallucinations},
               {"undefined_tokens", r.bins.undefined},
               {"undefined_hallucinations", r.bins.undefined_hallucinations},
               {"hr_by_bin", hr_bin},
               {"freq_rate",
                {{"H", detail::rates_json(r.freq_rate.hallucination)},
                 {"NH", detail::rates_json(r.freq_rate.non_hallucination)},
                 {"overall", detail::rates_json(r.freq_rate.overall)}}}};
  j["bleu"] = {{"bleu", r.bleu.bleu},
               {"brevity_penalty", r.bleu.brevity_penalty},
               {"precisions", std::vector<double>(std::begin(r.bleu.precisions), std::end(r.bleu.precisions))},
               {"hyp_length", r.bleu.hyp_length},
               {"ref_length", r.bleu.ref_length}};
  j["word_frequency"] = {{"hallucination", detail::freq_json(r.freq_hallucination)},
                         {"overall", detail::freq_json(r.freq_overall)}};
  return j;
}

inline AnalysisReport report_from_json(const detail::ojson& j) {
  AnalysisReport r;
  try {
    r.system = j.at("system").get<std::string>();
    r.k = Latency::parse(j.at("k").get<std::string>());
    r.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    const auto& hr = j.at("hr");
    r.hr.micro = hr.at("micro").get<double>();
    r.hr.macro = hr.at("macro").get<double>();
    r.hr.tokens = hr.at("tokens").get<long>();
    r.hr.hallucinations = hr.at("hallucinations").get<long>();
    const auto& e = j.at("entropy_bits");
    r.entropy_hallucination_bits = detail::opt_from(e.at("hallucination"));
    r.entropy_overall_bits = e.at("overall").get<double>();
    r.distinct_hallucination = e.at("distinct_hallucination").get<long>();
    r.distinct_overall = e.at("distinct_overall").get<long>();
    const auto& cu = j.at("conf_unc");
    r.valid.hallucination = detail::class_from(cu.at("valid").at("H"));
    r.valid.non_hallucination = detail::class_from(cu.at("valid").at("NH"));
    r.training_subset.hallucination = detail::class_from(cu.at("train_subset").at("H"));
    r.training_subset.non_hallucination = detail::class_from(cu.at("train_subset").at("NH"));
    const auto& t = j.at("tssr");
    r.bins.tokens = t.at("tokens").get<std::vector<long>>();
    r.bins.hallucinations = t.at("hallucinations").get<std::vector<long>>();
    r.bins.undefined = t.at("undefined_tokens").get<long>();
    r.bins.undefined_hallucinations = t.at("undefined_hallucinations").get<long>();
    for (const auto& v : t.at("hr_by_bin")) r.hr_by_bin.push_back(detail::opt_from(v));
    r.freq_rate.hallucination = detail::rates_from(t.at("freq_rate").at("H"));
    r.freq_rate.non_hallucination = detail::rates_from(t.at("freq_rate").at("NH"));
    r.freq_rate.overall = detail::rates_from(t.at("freq_rate").at("overall"));
    const auto& b = j.at("bleu");
    r.bleu.bleu = b.at("bleu").get<double>();
    r.bleu.brevity_penalty = b.at("brevity_penalty").get<double>();
    const auto p = b.at("precisions").get<std::vector<double>>();
    if (p.size() != 4) throw DataError("BLEU needs four precisions");
    std::copy(p.begin(), p.end(), r.bleu.precisions);
    r.bleu.hyp_length = b.at("hyp_length").get<long>();
    r.bleu.ref_length = b.at("ref_length").get<long>();
    r.freq_hallucination = detail::freq_from(j.at("word_frequency").at("hallucination"));
    r.freq_overall = detail::freq_from(j.at("word_frequency").at("overall"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed analysis report: ") + e.what());
  }
  if (r.bins.tokens.size() != r.bin_edges.size() + 1 || r.bins.hallucinations.size() != r.bins.tokens.size()) {
    throw DataError("analysis report bin counts do not match its edges");
  }
  return r;
}

inline AnalysisReport load_report(const fs::path& path) { return report_from_json(detail::read_json(path)); }

// ---------------------------------------------------------------------------
// Result tables. Each CSV has a fixed header; `csv_headers()` lists them.

inline const std::vector<std::pair<std::string, std::string>>& csv_headers() {
  static const std::vector<std::pair<std::string, std::string>> h = {
      {"table1_hr.csv", "system,k,tokens,hallucinations,hr,hr_macro"},
      {"table2_entropy.csv", "system,k,entropy_hallucination_bits,entropy_overall_bits,distinct_hallucination,distinct_overall"},
      {"table3_conf_unc.csv", "system,k,split,class,tokens,confidence,uncertainty_nats"},
      {"fig1_word_freq.csv", "system,k,class,word,count,rate"},
      {"fig2_hr_by_bin.csv", "system,k,bin,lower,upper,tokens,hallucinations,hr"},
      {"fig3_freqrate_by_bin.csv", "system,k,bin,lower,upper,h_rate,nh_rate,overall_rate"},
      {"fig45_deltas.csv", "k,system_a,system_b,bin,lower,upper,overall_rate_delta,h_rate_delta,nh_rate_delta,hall_freq_delta"},
      {"table4_bleu_hr.csv", "k,system_a,system_b,bleu_a,bleu_b,bleu_delta,hr_a,hr_b,hr_delta"},
  };
  return h;
}

namespace detail {

inline std::ofstream open_csv(const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  std::ofstream out(dir / name);
  if (!out) throw DataError("cannot write " + (dir / name).string());
  for (const auto& [file, header] : csv_headers())
    if (file == name) out << header << '\n';
  return out;
}

inline std::string bin_bounds(const std::vector<double>& edges, std::size_t b) {
  const double lo = b == 0 ? 0.0 : edges[b - 1];
  const double hi = b < edges.size() ? edges[b] : INFINITY;
  return fmt(lo) + "," + fmt(hi);
}

}  // namespace detail

// Rewrites the per-run tables from every report under <out>/runs, ordered
// by system and then k.
inline void write_run_tables(const Layout& layout) {
  std::vector<AnalysisReport> reports;
  const auto runs = layout.root / "runs";
  if (fs::exists(runs)) {
    for (const auto& entry : fs::directory_iterator(runs)) {
      if (fs::exists(entry.path() / "report.json")) reports.push_back(load_report(entry.path() / "report.json"));
    }
  }
  std::sort(reports.begin(), reports.end(), [](const AnalysisReport& a, const AnalysisReport& b) {
    return std::make_pair(parse_system(a.system), a.k) < std::make_pair(parse_system(b.system), b.k);
  });
  const auto dir = layout.results();
  using detail::fmt;
  auto t1 = detail::open_csv(dir, "table1_hr.csv");
  auto t2 = detail::open_csv(dir, "table2_entropy.csv");
  auto t3 = detail::open_csv(dir, "table3_conf_unc.csv");
  auto f1 = detail::open_csv(dir, "fig1_word_freq.csv");
  auto f2 = detail::open_csv(dir, "fig2_hr_by_bin.csv");
  auto f3 = detail::open_csv(dir, "fig3_freqrate_by_bin.csv");
  for (const auto& r : reports) {
    const std::string key = r.system + "," + r.k.to_string() + ",";
    t1 << key << r.hr.tokens << ',' << r.hr.hallucinations << ',' << fmt(r.hr.micro) << ',' << fmt(r.hr.macro) << '\n';
    t2 << key << fmt(r.entropy_hallucination_bits) << ',' << fmt(r.entropy_overall_bits) << ',' << r.distinct_hallucination
       << ',' << r.distinct_overall << '\n';
    const std::pair<const char*, const ConfUncByClass*> splits[] = {{"valid", &r.valid}, {"train_subset", &r.training_subset}};
    for (const auto& [name, cu] : splits) {
      const std::pair<const char*, const ClassStats*> classes[] = {{"H", &cu->hallucination}, {"NH", &cu->non_hallucination}};
      for (const auto& [cls, st] : classes) {
        t3 << key << name << ',' << cls << ',' << st->tokens << ',' << fmt(st->mean_confidence) << ','
           << fmt(st->mean_uncertainty) << '\n';
      }
    }
    const std::pair<const char*, const FrequencyDistribution*> freqs[] = {{"hallucination", &r.freq_hallucination},
                                                                          {"overall", &r.freq_overall}};
    for (const auto& [cls, f] : freqs) {
      std::vector<std::pair<std::string, long>> rows(f->counts.begin(), f->counts.end());
      std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
      for (const auto& [w, c] : rows) {
        f1 << key << cls << ',' << w << ',' << c << ',' << fmt(static_cast<double>(c) / static_cast<double>(f->total)) << '\n';
      }
    }
    for (std::size_t b = 0; b < r.bins.tokens.size(); ++b) {
      const std::string lead = key + std::to_string(b) + "," + detail::bin_bounds(r.bin_edges, b) + ",";
      f2 << lead << r.bins.tokens[b] << ',' << r.bins.hallucinations[b] << ','
         << fmt(b < r.hr_by_bin.size() ? r.hr_by_bin[b] : std::nullopt) << '\n';
      auto at = [b](const std::optional<std::vector<double>>& v) { return v ? fmt((*v)[b]) : std::string(); };
      f3 << lead << at(r.freq_rate.hallucination) << ',' << at(r.freq_rate.non_hallucination) << ','
         << at(r.freq_rate.overall) << '\n';
    }
  }
}

inline void cmd_analyze(const ExperimentConfig& cfg, System system, Latency k) {
  const Layout layout{cfg.out};
  const CorpusBundle data = load_corpus(layout);
  const auto model = detail::load_run_model(layout, system, k);
  const auto dir = layout.run(system, k);
  const auto hyps = detail::load_run_hypotheses(layout, system, k, data.tgt_vocab, data.valid.size());
  detail::require(dir / "labels.jsonl");
  const auto labels = load_labels((dir / "labels.jsonl").string());
  if (labels.size() != hyps.size()) throw DataError("labels do not cover every hypothesis");
  for (const auto& l : labels) {
    if (l.mode != LabelMode::WaitK || !(l.k == k)) {
      throw UsageError("labels in " + dir.string() + " were computed for k=" + l.k.to_string() + ", not k=" + k.to_string());
    }
  }
  detail::require(dir / "relevance.jsonl");
  const auto relevance = load_relevance((dir / "relevance.jsonl").string(), cfg.binning);
  if (!(relevance.k == k)) throw UsageError("relevance dump was computed with k=" + relevance.k.to_string() + ", not k=" + k.to_string());
  if (relevance.records.size() != hyps.size()) throw DataError("relevance dump does not cover every hypothesis");

  const auto stats = parallel_map(data.train_subset.size(), cfg.workers,
                                  [&](std::size_t i) { return teacher_forced_stats(model.params, data.train_subset[i], k); });
  std::vector<HallucinationLabel> subset_labels;
  for (const auto& s : data.train_subset) subset_labels.push_back(label_waitk(s.tgt.size(), s.alignment, k, cfg.ghall));
  std::vector<std::vector<Token>> refs;
  for (const auto& s : data.valid) refs.push_back(s.tgt);

  RunInputs in;
  in.system = system_name(system);
  in.k = k;
  in.binning = cfg.binning;
  in.tgt_vocab = &data.tgt_vocab;
  in.hypotheses = hyps;
  in.references = refs;
  in.valid_labels = labels;
  in.relevance = relevance.records;
  in.train_stats = stats;
  in.train_labels = subset_labels;
  const AnalysisReport report = analyze_run(in);
  detail::write_json(dir / "report.json", report_to_json(report));
  write_run_tables(layout);
  detail::log("analyze " + in.system + " k=" + k.to_string() + ": HR " + detail::fmt(report.hr.micro) + " BLEU " +
              detail::fmt(report.bleu.bleu));
}

// Writes the delta tables for each (a, b) report pair, b measured against a.
inline void cmd_compare(const ExperimentConfig& cfg, const std::vector<std::pair<fs::path, fs::path>>& pairs) {
  if (pairs.empty()) throw UsageError("compare needs at least one pair of reports");
  const Layout layout{cfg.out};
  using detail::fmt;
  auto f45 = detail::open_csv(layout.results(), "fig45_deltas.csv");
  auto t4 = detail::open_csv(layout.results(), "table4_bleu_hr.csv");
  for (const auto& [pa, pb] : pairs) {
    const auto a = load_report(pa), b = load_report(pb);
    const auto d = delta_report(a, b);
    const std::string key = d.k.to_string() + "," + d.system_a + "," + d.system_b + ",";
    for (std::size_t i = 0; i < d.overall_rate.size(); ++i) {
      f45 << key << i << ',' << detail::bin_bounds(d.bin_edges, i) << ',' << fmt(d.overall_rate[i]) << ','
          << fmt(d.h_rate[i]) << ',' << fmt(d.nh_rate[i]) << ',' << fmt(d.hall_freq[i]) << '\n';
    }
    t4 << key << fmt(a.bleu.bleu) << ',' << fmt(b.bleu.bleu) << ',' << fmt(d.bleu_delta) << ',' << fmt(a.hr.micro) << ','
       << fmt(b.hr.micro) << ',' << fmt(d.hr_delta) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw DataError("SHA-256 is unavailable");
  }
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

// Every regular file under the output root except the manifest itself,
// sorted by relative path.
inline void write_manifest(const Layout& layout) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(layout.root)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), layout.root).generic_string();
    if (rel != "manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  detail::ojson list = detail::ojson::array();
  for (const auto& f : files) {
    list.push_back({{"path", f}, {"sha256", sha256_file(layout.root / f)}, {"bytes", fs::file_size(layout.root / f)}});
  }
  detail::write_json(layout.root / "manifest.json", {{"files", list}});
}

// The whole pipeline: corpus, one baseline per k and one scheduled-sampling
// model per ss k, then decode, label, TSSR and analysis for every run, the
// scheduled-sampling deltas and the manifest. Models train concurrently,
// one per worker; per-sentence work inside a run is spread over the workers.
inline void cmd_repro(const ExperimentConfig& cfg) {
  cfg.validate();
  const Layout layout{cfg.out};
  if (fs::exists(layout.root) && !fs::is_empty(layout.root)) {
    throw UsageError("output directory " + layout.root.string() + " is not empty");
  }
  cmd_gen(cfg);
  std::vector<std::pair<System, Latency>> runs;
  for (auto k : cfg.ks) runs.emplace_back(System::Baseline, k);
  for (auto k : cfg.ss_ks) runs.emplace_back(System::ScheduledSampling, k);
  parallel_map(runs.size(), cfg.workers, [&](std::size_t i) {
    cmd_train(cfg, runs[i].first, runs[i].second);
    return 0;
  });
  for (const auto& [system, k] : runs) {
    cmd_decode(cfg, system, k);
    cmd_label(cfg, system, k);
    cmd_tssr(cfg, system, k);
    cmd_analyze(cfg, system, k);
  }
  std::vector<std::pair<fs::path, fs::path>> pairs;
  for (auto k : cfg.ss_ks) {
    pairs.emplace_back(layout.run(System::Baseline, k) / "report.json", layout.run(System::ScheduledSampling, k) / "report.json");
  }
  if (pairs.empty()) {
    detail::open_csv(layout.results(), "fig45_deltas.csv");
    detail::open_csv(layout.results(), "table4_bleu_hr.csv");
  } else {
    cmd_compare(cfg, pairs);
  }
  write_manifest(layout);
}

}  // namespace simtlab
