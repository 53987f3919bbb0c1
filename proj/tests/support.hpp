#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "simtlab/simtlab.hpp"

namespace simtlab::test {

inline ModelConfig tiny_model(int layers = 1, int max_len = 16) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.model_dim = 8;
  c.ff_dim = 12;
  c.max_len = max_len;
  c.seed = 3;
  return c;
}

inline std::vector<Token> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(kNumReserved + rng.below(static_cast<std::uint64_t>(vocab - kNumReserved)));
  return out;
}

// Adds small noise to every trainable entry so that zero-initialized biases
// and unit norm gains also take part in the tests.
inline void jitter(ModelParams& p, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto& t : p.tensors) {
    if (!t.trainable) continue;
    for (auto& v : t.value.data) v += rng.uniform(-scale, scale);
  }
}

inline std::vector<ParallelSentence> small_corpus(std::size_t n, std::uint64_t seed, int src_vocab = 16,
                                                  int tgt_vocab = 18) {
  CorpusConfig c;
  c.src_vocab_size = src_vocab;
  c.tgt_vocab_size = tgt_vocab;
  c.num_sentences = n;
  c.len_min = 3;
  c.len_max = 6;
  c.seed = seed;
  return gen_corpus(c).sentences;
}

class TempDir {
 public:
  TempDir() {
    char pattern[] = "/tmp/simtlab_test_XXXXXX";
    if (!mkdtemp(pattern)) throw std::runtime_error("mkdtemp failed");
    path_ = pattern;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace simtlab::test
