#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simtlab/error.hpp"
#include "simtlab/rng.hpp"
#include "simtlab/vocab.hpp"

namespace simtlab {

// One alignment link. Both indices are 1-based; `src` indexes the source
// sentence and `tgt` the target sentence. Disk formats are 0-based Pharaoh
// and are converted when read or written.
struct AlignLink {
  int src = 0;
  int tgt = 0;
  friend auto operator<=>(const AlignLink&, const AlignLink&) = default;
};

using Alignment = std::vector<AlignLink>;

inline void normalize(Alignment& a) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
}

inline void check_bounds(const Alignment& a, std::size_t src_len, std::size_t tgt_len) {
  for (const auto& l : a) {
    if (l.src < 1 || static_cast<std::size_t>(l.src) > src_len) {
      throw DataError("alignment source index " + std::to_string(l.src - 1) + " out of range for source length " +
                      std::to_string(src_len));
    }
    if (l.tgt < 1 || static_cast<std::size_t>(l.tgt) > tgt_len) {
      throw DataError("alignment target index " + std::to_string(l.tgt - 1) + " out of range for target length " +
                      std::to_string(tgt_len));
    }
  }
}

// "s-t s-t ..." with 0-based indices.
inline Alignment parse_pharaoh(const std::string& text) {
  Alignment a;
  std::istringstream in(text);
  std::string pair;
  while (in >> pair) {
    const auto dash = pair.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 == pair.size()) {
      throw DataError("malformed alignment pair '" + pair + "'");
    }
    try {
      std::size_t used_s = 0, used_t = 0;
      const std::string s_text = pair.substr(0, dash), t_text = pair.substr(dash + 1);
      const int s = std::stoi(s_text, &used_s);
      const int t = std::stoi(t_text, &used_t);
      if (used_s != s_text.size() || used_t != t_text.size() || s < 0 || t < 0) throw std::invalid_argument(pair);
      a.push_back({s + 1, t + 1});
    } catch (const std::logic_error&) {
      throw DataError("malformed alignment pair '" + pair + "'");
    }
  }
  normalize(a);
  return a;
}

inline std::string format_pharaoh(const Alignment& a) {
  std::string out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(a[i].src - 1) + "-" + std::to_string(a[i].tgt - 1);
  }
  return out;
}

enum class Origin { Synthetic, External };

struct ParallelSentence {
  std::vector<Token> src;
  std::vector<Token> tgt;
  Alignment alignment;
  Origin origin = Origin::Synthetic;
};

// The fixed bijective map f from source content tokens onto the aligned part
// of the target vocabulary, plus the disjoint range of spontaneous target
// tokens that never align to anything.
class Lexicon {
 public:
  Lexicon() = default;
  Lexicon(std::vector<Token> map, std::vector<Token> spontaneous, std::size_t tgt_vocab_size)
      : map_(std::move(map)), spontaneous_(std::move(spontaneous)), spontaneous_flag_(tgt_vocab_size, false) {
    for (Token t : spontaneous_) spontaneous_flag_.at(t) = true;
  }

  // f(src id) -> tgt id, or kUnk when the source token has no image.
  Token map(Token src) const {
    if (src < 0 || static_cast<std::size_t>(src) >= map_.size()) return kUnk;
    return map_[src];
  }

  bool is_spontaneous(Token tgt) const {
    return tgt >= 0 && static_cast<std::size_t>(tgt) < spontaneous_flag_.size() && spontaneous_flag_[tgt];
  }

  const std::vector<Token>& spontaneous() const { return spontaneous_; }

  // Lines "map <src> <tgt>" and "spontaneous <tgt>".
  void save(const std::string& path, const Vocab& src_vocab, const Vocab& tgt_vocab) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write lexicon " + path);
    for (std::size_t s = 0; s < map_.size(); ++s) {
      if (map_[s] != kUnk) out << "map " << src_vocab.token(static_cast<Token>(s)) << ' ' << tgt_vocab.token(map_[s]) << '\n';
    }
    for (Token t : spontaneous_) out << "spontaneous " << tgt_vocab.token(t) << '\n';
  }

  static Lexicon load(const std::string& path, const Vocab& src_vocab, const Vocab& tgt_vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read lexicon " + path);
    std::vector<Token> map(src_vocab.size(), kUnk);
    std::vector<Token> spontaneous;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string kind, a, b;
      ls >> kind;
      if (kind == "map" && (ls >> a >> b) && src_vocab.contains(a) && tgt_vocab.contains(b)) {
        map[src_vocab.id(a)] = tgt_vocab.id(b);
      } else if (kind == "spontaneous" && (ls >> a) && tgt_vocab.contains(a)) {
        spontaneous.push_back(tgt_vocab.id(a));
      } else if (!kind.empty()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed lexicon entry");
      }
    }
    return Lexicon(std::move(map), std::move(spontaneous), tgt_vocab.size());
  }

 private:
  std::vector<Token> map_;
  std::vector<Token> spontaneous_;
  std::vector<bool> spontaneous_flag_;
};

struct CorpusConfig {
  std::size_t src_vocab_size = 64;
  std::size_t tgt_vocab_size = 72;
  std::size_t num_sentences = 10000;
  int len_min = 4;
  int len_max = 10;
  double future_dep_rate = 0.3;
  int future_dep_distance = 3;
  double spontaneous_rate = 0.05;
  std::uint64_t seed = 1;

  void validate() const {
    if (src_vocab_size < 8 || tgt_vocab_size < 8) throw UsageError("vocabulary sizes must be >= 8");
    if (tgt_vocab_size < src_vocab_size) throw UsageError("target vocabulary must be at least as large as the source vocabulary");
    if (len_min < 2) throw UsageError("len_min must be >= 2");
    if (len_min > len_max) throw UsageError("len_min must not exceed len_max");
    if (future_dep_distance < 1) throw UsageError("future_dep_distance must be >= 1");
    if (future_dep_rate < 0 || spontaneous_rate < 0 || future_dep_rate + spontaneous_rate > 1) {
      throw UsageError("future_dep_rate and spontaneous_rate must be non-negative and sum to at most 1");
    }
    if (spontaneous_rate > 0 && tgt_vocab_size == src_vocab_size) {
      throw UsageError("spontaneous_rate > 0 needs target vocabulary room for spontaneous tokens");
    }
  }
};

struct SyntheticCorpus {
  Vocab src_vocab;
  Vocab tgt_vocab;
  Lexicon lexicon;
  std::vector<ParallelSentence> sentences;
};

// Seeded synthetic corpus.
//
// Source content tokens are x0..x{n-1}; their images under f are a seeded
// permutation of y0..y{n-1}; the rest of the target vocabulary is the
// spontaneous range z0..z{m-1}. Per sentence the draws happen in this order:
//   1. L = len_min + below(len_max - len_min + 1)
//   2. L source tokens, each uniform over the content range
//   3. for each target position t = 1..L one uniform u, then
//        u < spontaneous_rate                      -> a uniform spontaneous token, no link
//        u < spontaneous_rate + future_dep_rate    -> f(src[min(t+d, L)]), link (min(t+d, L), t)
//        otherwise                                 -> f(src[t]), link (t, t)
// The permutation uses stream fork(1) of the seed, sentences use fork(2).
inline SyntheticCorpus gen_corpus(const CorpusConfig& config) {
  config.validate();
  SyntheticCorpus out;
  const std::size_t n_content = config.src_vocab_size - kNumReserved;
  const std::size_t n_spont = config.tgt_vocab_size - config.src_vocab_size;
  for (std::size_t i = 0; i < n_content; ++i) out.src_vocab.intern("x" + std::to_string(i));
  for (std::size_t i = 0; i < n_content; ++i) out.tgt_vocab.intern("y" + std::to_string(i));
  for (std::size_t i = 0; i < n_spont; ++i) out.tgt_vocab.intern("z" + std::to_string(i));

  const Rng root(config.seed);
  Rng perm_rng = root.fork(1);
  std::vector<Token> image(n_content);
  for (std::size_t i = 0; i < n_content; ++i) image[i] = static_cast<Token>(kNumReserved + i);
  perm_rng.shuffle(std::span<Token>(image));

  std::vector<Token> map(config.src_vocab_size, kUnk);
  for (std::size_t i = 0; i < n_content; ++i) map[kNumReserved + i] = image[i];
  std::vector<Token> spont(n_spont);
  for (std::size_t i = 0; i < n_spont; ++i) spont[i] = static_cast<Token>(kNumReserved + n_content + i);
  out.lexicon = Lexicon(map, spont, config.tgt_vocab_size);

  Rng rng = root.fork(2);
  out.sentences.reserve(config.num_sentences);
  const auto span = static_cast<std::uint64_t>(config.len_max - config.len_min + 1);
  for (std::size_t n = 0; n < config.num_sentences; ++n) {
    ParallelSentence s;
    const int len = config.len_min + static_cast<int>(rng.below(span));
    s.src.resize(len);
    for (auto& tok : s.src) tok = static_cast<Token>(kNumReserved + rng.below(n_content));
    s.tgt.resize(len);
    for (int t = 1; t <= len; ++t) {
      const double u = rng.uniform();
      if (u < config.spontaneous_rate) {
        s.tgt[t - 1] = spont[rng.below(n_spont)];
      } else if (u < config.spontaneous_rate + config.future_dep_rate) {
        const int from = std::min(t + config.future_dep_distance, len);
        s.tgt[t - 1] = map[s.src[from - 1]];
        s.alignment.push_back({from, t});
      } else {
        s.tgt[t - 1] = map[s.src[t - 1]];
        s.alignment.push_back({t, t});
      }
    }
    normalize(s.alignment);
    out.sentences.push_back(std::move(s));
  }
  return out;
}

namespace detail {

inline std::vector<Token> intern_tokens(const std::string& text, Vocab& vocab, const std::string& where) {
  std::vector<Token> ids;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    const Token id = vocab.intern(tok);
    if (is_reserved(id)) throw DataError(where + ": reserved token '" + tok + "' in content");
    ids.push_back(id);
  }
  return ids;
}

}  // namespace detail

// JSONL records {"src": "...", "tgt": "...", "align": "s-t ..."} with 0-based
// Pharaoh alignments. Tokens are interned into the given vocabularies.
inline std::vector<ParallelSentence> load_jsonl(const std::string& path, Vocab& src_vocab, Vocab& tgt_vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus " + path);
  std::vector<ParallelSentence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    ParallelSentence s;
    s.origin = Origin::External;
    try {
      const auto rec = nlohmann::json::parse(line);
      if (!rec.is_object() || !rec.contains("src") || !rec.contains("tgt") || !rec["src"].is_string() ||
          !rec["tgt"].is_string()) {
        throw DataError(where + ": record needs string fields \"src\" and \"tgt\"");
      }
      s.src = detail::intern_tokens(rec["src"].get<std::string>(), src_vocab, where);
      s.tgt = detail::intern_tokens(rec["tgt"].get<std::string>(), tgt_vocab, where);
      if (s.src.empty() || s.tgt.empty()) throw DataError(where + ": empty source or target");
      if (rec.contains("align")) {
        if (!rec["align"].is_string()) throw DataError(where + ": \"align\" must be a string");
        s.alignment = parse_pharaoh(rec["align"].get<std::string>());
        check_bounds(s.alignment, s.src.size(), s.tgt.size());
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.rfind(where, 0) == 0) throw;
      throw DataError(where + ": " + msg);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string to_jsonl_record(const ParallelSentence& s, const Vocab& src_vocab, const Vocab& tgt_vocab) {
  nlohmann::ordered_json rec;
  rec["src"] = src_vocab.join(s.src);
  rec["tgt"] = tgt_vocab.join(s.tgt);
  rec["align"] = format_pharaoh(s.alignment);
  return rec.dump();
}

inline void save_jsonl(const std::string& path, const std::vector<ParallelSentence>& sentences, const Vocab& src_vocab,
                       const Vocab& tgt_vocab) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus " + path);
  for (const auto& s : sentences) out << to_jsonl_record(s, src_vocab, tgt_vocab) << '\n';
}

// Pharaoh sidecar: one line per sentence, "s-t" pairs, 0-based.
inline std::vector<Alignment> load_pharaoh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read alignments " + path);
  std::vector<Alignment> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    try {
      out.push_back(parse_pharaoh(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void attach_alignments(std::vector<ParallelSentence>& sentences, const std::vector<Alignment>& alignments) {
  if (sentences.size() != alignments.size()) {
    throw DataError("alignment file has " + std::to_string(alignments.size()) + " lines for " +
                    std::to_string(sentences.size()) + " sentences");
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    try {
      check_bounds(alignments[i], sentences[i].src.size(), sentences[i].tgt.size());
    } catch (const DataError& e) {
      throw DataError("alignment line " + std::to_string(i + 1) + ": " + e.what());
    }
    sentences[i].alignment = alignments[i];
  }
}

struct Split {
  std::vector<ParallelSentence> train;
  std::vector<ParallelSentence> valid;
};

// Seeded disjoint split. Both parts keep the input order.
inline Split split(const std::vector<ParallelSentence>& data, double valid_fraction, std::uint64_t seed) {
  if (data.size() < 2) throw DataError("cannot split a dataset with fewer than 2 sentences");
  if (!(valid_fraction > 0 && valid_fraction < 1)) throw UsageError("valid_fraction must lie in (0, 1)");
  const auto n = data.size();
  auto n_valid = static_cast<std::size_t>(std::llround(static_cast<double>(n) * valid_fraction));
  n_valid = std::clamp<std::size_t>(n_valid, 1, n - 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<bool> is_valid(n, false);
  for (std::size_t i = 0; i < n_valid; ++i) is_valid[order[i]] = true;
  Split out;
  for (std::size_t i = 0; i < n; ++i) (is_valid[i] ? out.valid : out.train).push_back(data[i]);
  return out;
}

// n sentences drawn without replacement, kept in input order.
inline std::vector<ParallelSentence> sample_subset(const std::vector<ParallelSentence>& data, std::size_t n,
                                                   std::uint64_t seed) {
  if (n > data.size()) throw DataError("subset size exceeds dataset size");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<ParallelSentence> out;
  out.reserve(n);
  for (auto i : order) out.push_back(data[i]);
  return out;
}

}  // namespace simtlab
