#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "simtlab/error.hpp"

namespace simtlab {

using Token = std::int32_t;

inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;
inline constexpr Token kUnk = 3;
inline constexpr Token kNumReserved = 4;

inline bool is_reserved(Token t) { return t >= 0 && t < kNumReserved; }

// Bijective token <-> id table. Ids 0..3 are PAD, BOS, EOS, UNK.
class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (Token i = 0; i < kNumReserved; ++i) index_.emplace(tokens_[i], i);
  }

  std::size_t size() const { return tokens_.size(); }

  Token intern(const std::string& token) {
    auto [it, inserted] = index_.emplace(token, static_cast<Token>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  Token id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(Token id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, id order, reserved entries included.
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary " + path);
    Vocab v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (n < static_cast<std::size_t>(kNumReserved)) {
        if (line != v.tokens_[n]) throw DataError(path + ": reserved token mismatch on line " + std::to_string(n + 1));
      } else if (v.contains(line)) {
        throw DataError(path + ": duplicate token '" + line + "' on line " + std::to_string(n + 1));
      } else {
        v.intern(line);
      }
      ++n;
    }
    if (n < static_cast<std::size_t>(kNumReserved)) throw DataError(path + ": truncated vocabulary");
    return v;
  }

  std::string join(const std::vector<Token>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Token> index_;
};

}  // namespace simtlab
