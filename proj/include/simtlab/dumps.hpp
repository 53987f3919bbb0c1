#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simtlab/decode.hpp"
#include "simtlab/error.hpp"
#include "simtlab/halluc.hpp"
#include "simtlab/relevance.hpp"
#include "simtlab/vocab.hpp"

// JSONL artifacts passed between the pipeline stages. Every record carries
// the k it was produced with so that stages can refuse mismatched inputs.

namespace simtlab {

namespace detail {

using ojson = nlohmann::ordered_json;

// Fixed 10 significant digits so dumps are byte-stable across runs.
inline ojson number(double v) {
  if (std::isnan(v)) return "undef";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return ojson::parse(buf);
}

inline double parse_number(const ojson& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "undef") return NAN;
  }
  throw DataError("expected a number, got " + j.dump());
}

template <typename F>
void read_jsonl(const std::string& path, F&& on_record) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      on_record(ojson::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

inline std::vector<std::string> words(const Vocab& v, const std::vector<Token>& ids) {
  std::vector<std::string> out;
  for (Token t : ids) out.push_back(v.token(t));
  return out;
}

inline std::vector<Token> ids(const Vocab& v, const std::vector<std::string>& words) {
  std::vector<Token> out;
  for (const auto& w : words) {
    if (!v.contains(w)) throw DataError("token '" + w + "' is not in the target vocabulary");
    out.push_back(v.id(w));
  }
  return out;
}

}  // namespace detail

inline void save_hypotheses(const std::string& path, const std::vector<Hypothesis>& hyps, const Vocab& tgt) {
  auto out = detail::open_out(path);
  for (const auto& h : hyps) {
    detail::ojson j;
    j["k"] = h.k.to_string();
    j["tokens"] = detail::words(tgt, h.tokens);
    j["confidence"] = detail::ojson::array();
    j["uncertainty"] = detail::ojson::array();
    for (double c : h.confidence) j["confidence"].push_back(detail::number(c));
    for (double u : h.uncertainty) j["uncertainty"].push_back(detail::number(u));
    j["read"] = h.read;
    j["truncated"] = h.truncated;
    out << j.dump() << '\n';
  }
}

inline std::vector<Hypothesis> load_hypotheses(const std::string& path, const Vocab& tgt) {
  std::vector<Hypothesis> out;
  detail::read_jsonl(path, [&](const detail::ojson& j) {
    Hypothesis h;
    h.k = Latency::parse(j.at("k").get<std::string>());
    h.tokens = detail::ids(tgt, j.at("tokens").get<std::vector<std::string>>());
    for (const auto& c : j.at("confidence")) h.confidence.push_back(detail::parse_number(c));
    for (const auto& u : j.at("uncertainty")) h.uncertainty.push_back(detail::parse_number(u));
    h.read = j.at("read").get<std::vector<int>>();
    h.truncated = j.at("truncated").get<bool>();
    if (h.confidence.size() != h.tokens.size() || h.uncertainty.size() != h.tokens.size() ||
        h.read.size() != h.tokens.size()) {
      throw DataError("hypothesis statistics do not match its length");
    }
    out.push_back(std::move(h));
  });
  return out;
}

inline void save_labels(const std::string& path, const std::vector<HallucinationLabel>& labels) {
  auto out = detail::open_out(path);
  for (const auto& l : labels) {
    detail::ojson j;
    j["mode"] = l.mode == LabelMode::Full ? "full" : "waitk";
    j["k"] = l.k.to_string();
    std::vector<int> bits;
    for (bool b : l.labels) bits.push_back(b ? 1 : 0);
    j["labels"] = bits;
    out << j.dump() << '\n';
  }
}

inline std::vector<HallucinationLabel> load_labels(const std::string& path) {
  std::vector<HallucinationLabel> out;
  detail::read_jsonl(path, [&](const detail::ojson& j) {
    HallucinationLabel l;
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "full") l.mode = LabelMode::Full;
    else if (mode == "waitk") l.mode = LabelMode::WaitK;
    else throw DataError("unknown label mode '" + mode + "'");
    l.k = Latency::parse(j.at("k").get<std::string>());
    for (int b : j.at("labels").get<std::vector<int>>()) {
      if (b != 0 && b != 1) throw DataError("labels must be 0 or 1");
      l.labels.push_back(b == 1);
    }
    out.push_back(std::move(l));
  });
  return out;
}

// One line per sentence holding the records of all its positions.
inline void save_relevance(const std::string& path, const std::vector<std::vector<RelevanceRecord>>& records,
                           Latency k) {
  auto out = detail::open_out(path);
  for (const auto& sent : records) {
    detail::ojson j;
    j["k"] = k.to_string();
    j["positions"] = detail::ojson::array();
    for (const auto& r : sent) {
      detail::ojson p;
      p["i"] = r.position;
      p["src"] = detail::ojson::array();
      p["tgt"] = detail::ojson::array();
      for (double v : r.src_relevance) p["src"].push_back(detail::number(v));
      for (double v : r.tgt_relevance) p["tgt"].push_back(detail::number(v));
      p["tssr"] = detail::number(r.tssr);
      p["bin"] = r.bin;
      j["positions"].push_back(std::move(p));
    }
    out << j.dump() << '\n';
  }
}

struct RelevanceDump {
  Latency k = Latency::full();
  std::vector<std::vector<RelevanceRecord>> records;
};

// Bins are recomputed from the stored relevances with `binning`.
inline RelevanceDump load_relevance(const std::string& path, const TssrBinning& binning) {
  RelevanceDump out;
  bool first = true;
  detail::read_jsonl(path, [&](const detail::ojson& j) {
    const Latency k = Latency::parse(j.at("k").get<std::string>());
    if (first) out.k = k;
    else if (!(k == out.k)) throw DataError("relevance dump mixes k=" + k.to_string() + " and k=" + out.k.to_string());
    first = false;
    std::vector<RelevanceRecord> sent;
    for (const auto& p : j.at("positions")) {
      RelevanceRecord r;
      r.position = p.at("i").get<int>();
      for (const auto& v : p.at("src")) r.src_relevance.push_back(detail::parse_number(v));
      for (const auto& v : p.at("tgt")) r.tgt_relevance.push_back(detail::parse_number(v));
      if (static_cast<int>(r.tgt_relevance.size()) != r.position) throw DataError("target relevance count differs from position");
      finalize_record(r, binning);
      sent.push_back(std::move(r));
    }
    out.records.push_back(std::move(sent));
  });
  return out;
}

}  // namespace simtlab
