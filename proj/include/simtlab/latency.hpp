#pragma once

#include <algorithm>
#include <limits>
#include <string>

#include "simtlab/error.hpp"

namespace simtlab {

// The wait-k latency parameter. `Latency::full()` is the k = inf sentinel
// used for full-sentence translation.
class Latency {
 public:
  constexpr Latency() = default;
  constexpr explicit Latency(int k) : k_(k) {
    if (k < 1) throw UsageError("wait-k latency must be >= 1, got " + std::to_string(k));
  }
  static constexpr Latency full() {
    Latency l;
    l.k_ = kInf;
    return l;
  }

  constexpr bool is_full() const { return k_ == kInf; }
  constexpr int value() const { return k_; }

  // Number of source tokens read before emitting 1-based target position i,
  // min(i + k - 1, src_len).
  constexpr int visible(int i, int src_len) const {
    if (is_full()) return src_len;
    const long long v = static_cast<long long>(i) + k_ - 1;
    return static_cast<int>(std::min<long long>(v, src_len));
  }

  // True once position i has read past the last source token.
  constexpr bool source_complete(int i, int src_len) const {
    return is_full() || static_cast<long long>(i) + k_ - 1 >= src_len;
  }

  std::string to_string() const { return is_full() ? "inf" : std::to_string(k_); }

  static Latency parse(const std::string& s) {
    if (s == "inf" || s == "INF" || s == "full") return full();
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(s, &used);
    } catch (const std::exception&) {
      throw UsageError("cannot parse wait-k latency '" + s + "'");
    }
    if (used != s.size()) throw UsageError("cannot parse wait-k latency '" + s + "'");
    return Latency(k);
  }

  friend constexpr bool operator==(Latency a, Latency b) { return a.k_ == b.k_; }
  friend constexpr auto operator<=>(Latency a, Latency b) { return a.k_ <=> b.k_; }

 private:
  static constexpr int kInf = std::numeric_limits<int>::max();
  int k_ = 1;
};

}  // namespace simtlab
