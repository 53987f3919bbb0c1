#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "simtlab/corpus.hpp"
#include "simtlab/error.hpp"
#include "simtlab/latency.hpp"
#include "simtlab/model.hpp"
#include "simtlab/rng.hpp"

namespace simtlab {

enum class DecaySchedule { Linear, InverseSigmoid };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int warmup_steps = 0;
  Latency train_k{1};
  bool scheduled_sampling = false;
  double ss_epsilon_start = 1.0;
  double ss_epsilon_end = 0.5;
  DecaySchedule ss_decay = DecaySchedule::Linear;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 0 || batch_size < 1) throw UsageError("epochs must be >= 0 and batch_size >= 1");
    if (!(learning_rate > 0)) throw UsageError("learning_rate must be positive");
    if (!(0 <= ss_epsilon_end && ss_epsilon_end <= ss_epsilon_start && ss_epsilon_start <= 1)) {
      throw UsageError("need 0 <= ss_epsilon_end <= ss_epsilon_start <= 1");
    }
    if (!(grad_clip > 0)) throw UsageError("grad_clip must be positive");
  }
};

// Teacher-forcing probability after `step` of `total` optimizer steps.
// Linear interpolates start -> end. InverseSigmoid follows a logistic curve
// in training progress u = step / (total - 1), sigma(10 (0.5 - u)), rescaled
// to hit start at u = 0 and end at u = 1.
inline double ss_epsilon(const TrainConfig& c, long step, long total) {
  const double u = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
  double shape = 1.0 - u;
  if (c.ss_decay == DecaySchedule::InverseSigmoid) {
    auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    shape = (sig(10.0 * (0.5 - u)) - sig(-5.0)) / (sig(5.0) - sig(-5.0));
  }
  return c.ss_epsilon_end + (c.ss_epsilon_start - c.ss_epsilon_end) * shape;
}

struct SentenceLoss {
  double loss_sum = 0;
  int tokens = 0;
};

// Cross-entropy of one sentence with the given decoder inputs (BOS first)
// against targets tgt + EOS; accumulates gradients when `grads` is set.
inline SentenceLoss sentence_loss(const ModelParams& p, std::span<const Token> src, std::span<const Token> dec_inputs,
                                  std::span<const Token> tgt, Latency k, Gradients* grads, Rng* dropout) {
  const auto enc = detail::encoder_tokens(src, true);
  const auto lim = waitk_cross_limits(static_cast<int>(dec_inputs.size()), k, static_cast<int>(src.size()), true);
  PassInput in{enc, dec_inputs, lim};
  PassCache cache;
  const Matrix logits = run_pass(p, in, grads ? &cache : nullptr, dropout);
  SentenceLoss out;
  out.tokens = logits.rows;
  Matrix dlogits(grads ? logits.rows : 0, logits.cols);
  for (int r = 0; r < logits.rows; ++r) {
    const Token gold = r < static_cast<int>(tgt.size()) ? tgt[r] : kEos;
    const auto dist = softmax_row(logits, r);
    out.loss_sum -= std::log(dist.probs[gold]);
    if (grads) {
      for (int c = 0; c < logits.cols; ++c) dlogits(r, c) = dist.probs[c];
      dlogits(r, gold) -= 1.0;
    }
  }
  if (grads) backward_pass(p, cache, dlogits, *grads);
  return out;
}

// Mean token loss and its gradient over a batch, teacher-forced, inference
// mode (no dropout).
inline std::pair<double, Gradients> batch_gradients(const ModelParams& p, std::span<const ParallelSentence> batch,
                                                    Latency k) {
  Gradients g = zero_gradients(p);
  double loss = 0;
  int tokens = 0;
  for (const auto& s : batch) {
    const auto dec = detail::decoder_inputs(s.tgt);
    const auto r = sentence_loss(p, s.src, dec, s.tgt, k, &g, nullptr);
    loss += r.loss_sum;
    tokens += r.tokens;
  }
  for (auto& m : g)
    for (auto& v : m.data) v /= tokens;
  return {loss / tokens, std::move(g)};
}

// Token-weighted mean teacher-forced loss.
inline double mean_loss(const ModelParams& p, std::span<const ParallelSentence> data, Latency k) {
  double loss = 0;
  long tokens = 0;
  for (const auto& s : data) {
    const auto dec = detail::decoder_inputs(s.tgt);
    const auto r = sentence_loss(p, s.src, dec, s.tgt, k, nullptr, nullptr);
    loss += r.loss_sum;
    tokens += r.tokens;
  }
  return tokens ? loss / static_cast<double>(tokens) : 0.0;
}

class Adam {
 public:
  explicit Adam(const ModelParams& p) : m_(zero_gradients(p)), v_(zero_gradients(p)) {}

  void step(ModelParams& p, const Gradients& g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      if (!p.tensors[i].trainable) continue;
      auto& w = p.tensors[i].value.data;
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      const auto& gi = g[i].data;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = kBeta1 * m[j] + (1 - kBeta1) * gi[j];
        v[j] = kBeta2 * v[j] + (1 - kBeta2) * gi[j] * gi[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.98, kEps = 1e-9;
  Gradients m_, v_;
  long t_ = 0;
};

struct LossPoint {
  long step = 0;
  double epsilon = 1.0;
  double train_loss = 0;
  double valid_loss = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> step_losses;  // mean token loss of every optimizer step
  std::vector<LossPoint> curve;     // step 0, then one row per epoch
};

// Adam training with global-norm clipping. Batch order, dropout masks and
// scheduled-sampling coins come from three independent streams of the seed,
// so turning scheduled sampling on with epsilon = 1 replays plain teacher
// forcing exactly.
//
// Scheduled sampling mixes per token: each decoder input y_t (t >= 1) stays
// the gold token with probability epsilon, otherwise it becomes the argmax
// prediction for position t from an inference-mode pass on gold inputs.
inline TrainResult train(ModelParams params, std::span<const ParallelSentence> data, const TrainConfig& cfg,
                         std::span<const ParallelSentence> valid = {},
                         const std::function<void(const LossPoint&)>& on_epoch = nullptr) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  const Rng root(cfg.seed);
  Rng order_rng = root.fork(1), dropout_rng = root.fork(2), ss_rng = root.fork(3);
  Adam adam(params);
  const long batches_per_epoch = static_cast<long>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = batches_per_epoch * cfg.epochs;

  TrainResult result;
  auto valid_loss = [&] { return valid.empty() ? 0.0 : mean_loss(params, valid, cfg.train_k); };
  result.curve.push_back({0, cfg.scheduled_sampling ? ss_epsilon(cfg, 0, total_steps) : 1.0, 0.0, valid_loss()});
  if (on_epoch) on_epoch(result.curve.back());

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0;
    long epoch_tokens = 0;
    double eps = 1.0;
    for (long b = 0; b < batches_per_epoch; ++b, ++step) {
      eps = cfg.scheduled_sampling ? ss_epsilon(cfg, step, total_steps) : 1.0;
      Gradients g = zero_gradients(params);
      double loss = 0;
      int tokens = 0;
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, data.size());
      for (std::size_t n = begin; n < end; ++n) {
        const ParallelSentence& s = data[order[n]];
        std::vector<Token> dec = detail::decoder_inputs(s.tgt);
        if (cfg.scheduled_sampling) {
          std::vector<bool> replace(dec.size(), false);
          bool any = false;
          for (std::size_t t = 1; t < dec.size(); ++t) {
            replace[t] = !(ss_rng.uniform() < eps);
            any = any || replace[t];
          }
          if (any) {
            const auto enc = detail::encoder_tokens(s.src, true);
            const auto lim = waitk_cross_limits(static_cast<int>(dec.size()), cfg.train_k,
                                                static_cast<int>(s.src.size()), true);
            const Matrix logits = run_pass(params, PassInput{enc, dec, lim});
            std::vector<Token> mixed = dec;
            for (std::size_t t = 1; t < dec.size(); ++t)
              if (replace[t]) mixed[t] = softmax_row(logits, static_cast<int>(t) - 1).argmax();
            dec = std::move(mixed);
          }
        }
        const auto r = sentence_loss(params, s.src, dec, s.tgt, cfg.train_k, &g,
                                     params.config.dropout_rate > 0 ? &dropout_rng : nullptr);
        loss += r.loss_sum;
        tokens += r.tokens;
      }
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      double norm2 = 0;
      for (auto& m : g)
        for (auto& v : m.data) {
          v /= tokens;
          norm2 += v * v;
        }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
      if (norm > cfg.grad_clip) {
        const double s = cfg.grad_clip / norm;
        for (auto& m : g)
          for (auto& v : m.data) v *= s;
      }
      double lr = cfg.learning_rate;
      if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / cfg.warmup_steps;
      adam.step(params, g, lr);
      result.step_losses.push_back(loss / tokens);
      epoch_loss += loss;
      epoch_tokens += tokens;
    }
    result.curve.push_back({step, eps, epoch_loss / static_cast<double>(epoch_tokens), valid_loss()});
    if (on_epoch) on_epoch(result.curve.back());
  }
  result.params = std::move(params);
  return result;
}

inline void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "step,epsilon,train_loss,valid_loss\n";
  out.precision(10);
  for (const auto& p : curve) out << p.step << ',' << p.epsilon << ',' << p.train_loss << ',' << p.valid_loss << '\n';
}

}  // namespace simtlab
