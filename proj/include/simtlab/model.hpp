#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "simtlab/error.hpp"
#include "simtlab/latency.hpp"
#include "simtlab/matrix.hpp"
#include "simtlab/rng.hpp"
#include "simtlab/vocab.hpp"

namespace simtlab {

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 4;
  int model_dim = 64;
  int ff_dim = 128;
  double dropout_rate = 0.0;
  int max_len = 32;
  std::uint64_t seed = 1;

  int head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || model_dim < 1 || ff_dim < 1 || max_len < 2) {
      throw UsageError("model sizes must be positive");
    }
    if (model_dim % num_heads != 0) throw UsageError("model_dim must be divisible by num_heads");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw UsageError("dropout_rate must lie in [0, 1)");
  }
};

struct PredictiveDistribution {
  std::vector<double> probs;

  // Highest-probability token; ties go to the lowest id. PAD, BOS and UNK are
  // never emitted.
  Token argmax() const {
    Token best = kEos;
    for (Token t = kEos; t < static_cast<Token>(probs.size()); ++t) {
      if (t == kUnk) continue;
      if (probs[t] > probs[best]) best = t;
    }
    return best;
  }

  // Natural-log entropy.
  double entropy() const {
    double h = 0;
    for (double p : probs)
      if (p > 0) h -= p * std::log(p);
    return h;
  }
};

struct Tensor {
  std::string name;
  Matrix value;
  bool trainable = true;
};

// All weights of the encoder-decoder. Tensors live in one flat list so that
// optimizers, serialization and gradient checks treat them uniformly; the
// layout below names the role of each index.
class ModelParams {
 public:
  struct LayerNormIdx {
    std::size_t gain, bias;
  };
  struct AttentionIdx {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FeedForwardIdx {
    std::size_t w1, b1, w2, b2;
  };
  struct EncoderLayerIdx {
    LayerNormIdx ln1;
    AttentionIdx self;
    LayerNormIdx ln2;
    FeedForwardIdx ffn;
  };
  struct DecoderLayerIdx {
    LayerNormIdx ln1;
    AttentionIdx self;
    LayerNormIdx ln2;
    AttentionIdx cross;
    LayerNormIdx ln3;
    FeedForwardIdx ffn;
  };

  ModelConfig config;
  int src_vocab = 0;
  int tgt_vocab = 0;
  std::vector<Tensor> tensors;

  std::size_t src_embed = 0, tgt_embed = 0, positions = 0;
  std::vector<EncoderLayerIdx> encoder;
  LayerNormIdx encoder_norm{};
  std::vector<DecoderLayerIdx> decoder;
  LayerNormIdx decoder_norm{};
  std::size_t out_w = 0, out_b = 0;

  // Zero-valued parameters with the shapes implied by the configuration.
  static ModelParams skeleton(const ModelConfig& config, int src_vocab, int tgt_vocab) {
    config.validate();
    if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) throw UsageError("vocabularies must have content tokens");
    ModelParams p;
    p.config = config;
    p.src_vocab = src_vocab;
    p.tgt_vocab = tgt_vocab;
    const int d = config.model_dim, f = config.ff_dim;
    p.src_embed = p.add("src_embed", src_vocab, d);
    p.tgt_embed = p.add("tgt_embed", tgt_vocab, d);
    p.positions = p.add("positions", config.max_len, d, false);
    for (int l = 0; l < config.num_layers; ++l) {
      const std::string pre = "enc" + std::to_string(l) + ".";
      EncoderLayerIdx e;
      e.ln1 = p.add_norm(pre + "ln1");
      e.self = p.add_attention(pre + "self");
      e.ln2 = p.add_norm(pre + "ln2");
      e.ffn = p.add_ffn(pre + "ffn", d, f);
      p.encoder.push_back(e);
    }
    p.encoder_norm = p.add_norm("enc.norm");
    for (int l = 0; l < config.num_layers; ++l) {
      const std::string pre = "dec" + std::to_string(l) + ".";
      DecoderLayerIdx e;
      e.ln1 = p.add_norm(pre + "ln1");
      e.self = p.add_attention(pre + "self");
      e.ln2 = p.add_norm(pre + "ln2");
      e.cross = p.add_attention(pre + "cross");
      e.ln3 = p.add_norm(pre + "ln3");
      e.ffn = p.add_ffn(pre + "ffn", d, f);
      p.decoder.push_back(e);
    }
    p.decoder_norm = p.add_norm("dec.norm");
    p.out_w = p.add("out.w", d, tgt_vocab);
    p.out_b = p.add("out.b", 1, tgt_vocab);

    // Sinusoidal positions, fixed.
    Matrix& pos = p.tensors[p.positions].value;
    for (int r = 0; r < config.max_len; ++r) {
      for (int c = 0; c < d; c += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(c) / d);
        pos(r, c) = std::sin(r * freq);
        if (c + 1 < d) pos(r, c + 1) = std::cos(r * freq);
      }
    }
    return p;
  }

  const Matrix& at(std::size_t i) const { return tensors[i].value; }
  Matrix& at(std::size_t i) { return tensors[i].value; }

  std::size_t num_trainable() const {
    std::size_t n = 0;
    for (const auto& t : tensors)
      if (t.trainable) n += t.value.size();
    return n;
  }

 private:
  std::size_t add(const std::string& name, int rows, int cols, bool trainable = true) {
    tensors.push_back({name, Matrix(rows, cols), trainable});
    return tensors.size() - 1;
  }
  LayerNormIdx add_norm(const std::string& name) {
    LayerNormIdx n{add(name + ".gain", 1, config.model_dim), add(name + ".bias", 1, config.model_dim)};
    std::fill(tensors[n.gain].value.data.begin(), tensors[n.gain].value.data.end(), 1.0);
    return n;
  }
  AttentionIdx add_attention(const std::string& name) {
    const int d = config.model_dim;
    AttentionIdx a;
    a.wq = add(name + ".wq", d, d);
    a.bq = add(name + ".bq", 1, d);
    a.wk = add(name + ".wk", d, d);
    a.bk = add(name + ".bk", 1, d);
    a.wv = add(name + ".wv", d, d);
    a.bv = add(name + ".bv", 1, d);
    a.wo = add(name + ".wo", d, d);
    a.bo = add(name + ".bo", 1, d);
    return a;
  }
  FeedForwardIdx add_ffn(const std::string& name, int d, int f) {
    return {add(name + ".w1", d, f), add(name + ".b1", 1, f), add(name + ".w2", f, d), add(name + ".b2", 1, d)};
  }
};

using Gradients = std::vector<Matrix>;

inline Gradients zero_gradients(const ModelParams& p) {
  Gradients g;
  g.reserve(p.tensors.size());
  for (const auto& t : p.tensors) g.emplace_back(t.value.rows, t.value.cols);
  return g;
}

// Seeded scaled-uniform initialization: weight matrices U(-a, a) with
// a = sqrt(6 / (fan_in + fan_out)); embeddings U(-sqrt(3/d), sqrt(3/d)) so that
// sqrt(d)-scaled embeddings have unit variance; the output projection
// U(-1/sqrt(d), 1/sqrt(d)) keeps initial logits small. Biases zero, norm gains one.
inline ModelParams init_model(const ModelConfig& config, int src_vocab, int tgt_vocab) {
  ModelParams p = ModelParams::skeleton(config, src_vocab, tgt_vocab);
  Rng rng(config.seed);
  const double d = config.model_dim;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    Tensor& t = p.tensors[i];
    if (!t.trainable || t.value.rows == 1) continue;
    double a = std::sqrt(6.0 / (t.value.rows + t.value.cols));
    if (i == p.src_embed || i == p.tgt_embed) a = std::sqrt(3.0 / d);
    if (i == p.out_w) a = 1.0 / std::sqrt(d);
    for (auto& v : t.value.data) v = rng.uniform(-a, a);
  }
  return p;
}

namespace detail {

inline constexpr double kNormEps = 1e-6;

struct NormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
  const int d = x.cols;
  Matrix y(x.rows, d);
  if (cache) {
    cache->xhat = Matrix(x.rows, d);
    cache->inv_std.assign(x.rows, 0.0);
  }
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double mean = 0;
    for (int c = 0; c < d; ++c) mean += xr[c];
    mean /= d;
    double var = 0;
    for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    double* yr = y.row(r);
    for (int c = 0; c < d; ++c) {
      const double xh = (xr[c] - mean) * inv;
      if (cache) cache->xhat(r, c) = xh;
      yr[c] = xh * gain(0, c) + bias(0, c);
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

inline void layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache, Matrix& dx, Matrix& dgain,
                                Matrix& dbias) {
  const int d = dy.cols;
  std::vector<double> dxh(d);
  for (int r = 0; r < dy.rows; ++r) {
    const double* dyr = dy.row(r);
    const double* xh = cache.xhat.row(r);
    double mean_dxh = 0, mean_dxh_xh = 0;
    for (int c = 0; c < d; ++c) {
      dgain(0, c) += dyr[c] * xh[c];
      dbias(0, c) += dyr[c];
      dxh[c] = dyr[c] * gain(0, c);
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * xh[c];
    }
    mean_dxh /= d;
    mean_dxh_xh /= d;
    double* dxr = dx.row(r);
    for (int c = 0; c < d; ++c) dxr[c] += cache.inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
  }
}

struct AttentionCache {
  Matrix q_in, kv_in;
  Matrix q, k, v;
  std::vector<double> weights;  // [row][head][key], zero past the row's limit
  std::vector<int> limits;
  Matrix context;
};

// Multi-head attention where query row r attends to key rows [0, limits[r]).
inline Matrix attention(const ModelParams& p, const ModelParams::AttentionIdx& idx, const Matrix& q_in,
                        const Matrix& kv_in, std::span<const int> limits, AttentionCache* cache) {
  const int n = q_in.rows, m = kv_in.rows, h = p.config.num_heads, dh = p.config.head_dim();
  Matrix q, k, v;
  affine(q_in, p.at(idx.wq), p.at(idx.bq), q);
  affine(kv_in, p.at(idx.wk), p.at(idx.bk), k);
  affine(kv_in, p.at(idx.wv), p.at(idx.bv), v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix context(n, p.config.model_dim);
  std::vector<double> weights(cache ? static_cast<std::size_t>(n) * h * m : 0, 0.0);
  std::vector<double> w(m);
  for (int r = 0; r < n; ++r) {
    const int lim = limits[r];
    for (int hd = 0; hd < h; ++hd) {
      const int off = hd * dh;
      const double* qr = q.row(r) + off;
      double mx = -INFINITY;
      for (int j = 0; j < lim; ++j) {
        const double* kj = k.row(j) + off;
        double s = 0;
        for (int c = 0; c < dh; ++c) s += qr[c] * kj[c];
        w[j] = s * scale;
        mx = std::max(mx, w[j]);
      }
      double z = 0;
      for (int j = 0; j < lim; ++j) {
        w[j] = std::exp(w[j] - mx);
        z += w[j];
      }
      double* cr = context.row(r) + off;
      for (int j = 0; j < lim; ++j) {
        w[j] /= z;
        const double* vj = v.row(j) + off;
        for (int c = 0; c < dh; ++c) cr[c] += w[j] * vj[c];
      }
      if (cache) std::copy(w.begin(), w.begin() + lim, weights.begin() + (static_cast<std::size_t>(r) * h + hd) * m);
    }
  }
  Matrix out;
  affine(context, p.at(idx.wo), p.at(idx.bo), out);
  if (cache) {
    cache->q_in = q_in;
    cache->kv_in = kv_in;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->limits.assign(limits.begin(), limits.end());
    cache->context = std::move(context);
  }
  return out;
}

inline void attention_backward(const ModelParams& p, const ModelParams::AttentionIdx& idx, const AttentionCache& c,
                               const Matrix& dout, Gradients& g, Matrix& dq_in, Matrix& dkv_in) {
  const int n = c.q.rows, m = c.k.rows, h = p.config.num_heads, dh = p.config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  accumulate_affine_grads(c.context, dout, g[idx.wo], g[idx.bo]);
  Matrix dctx(n, p.config.model_dim);
  accumulate_input_grad(dout, p.at(idx.wo), dctx);
  Matrix dq(n, p.config.model_dim), dk(m, p.config.model_dim), dv(m, p.config.model_dim);
  std::vector<double> dw(m);
  for (int r = 0; r < n; ++r) {
    const int lim = c.limits[r];
    for (int hd = 0; hd < h; ++hd) {
      const int off = hd * dh;
      const double* w = c.weights.data() + (static_cast<std::size_t>(r) * h + hd) * m;
      const double* dcr = dctx.row(r) + off;
      double dot = 0;
      for (int j = 0; j < lim; ++j) {
        const double* vj = c.v.row(j) + off;
        double* dvj = dv.row(j) + off;
        double s = 0;
        for (int x = 0; x < dh; ++x) {
          s += dcr[x] * vj[x];
          dvj[x] += w[j] * dcr[x];
        }
        dw[j] = s;
        dot += w[j] * s;
      }
      const double* qr = c.q.row(r) + off;
      double* dqr = dq.row(r) + off;
      for (int j = 0; j < lim; ++j) {
        const double ds = w[j] * (dw[j] - dot) * scale;
        const double* kj = c.k.row(j) + off;
        double* dkj = dk.row(j) + off;
        for (int x = 0; x < dh; ++x) {
          dqr[x] += ds * kj[x];
          dkj[x] += ds * qr[x];
        }
      }
    }
  }
  accumulate_affine_grads(c.q_in, dq, g[idx.wq], g[idx.bq]);
  accumulate_affine_grads(c.kv_in, dk, g[idx.wk], g[idx.bk]);
  accumulate_affine_grads(c.kv_in, dv, g[idx.wv], g[idx.bv]);
  accumulate_input_grad(dq, p.at(idx.wq), dq_in);
  accumulate_input_grad(dk, p.at(idx.wk), dkv_in);
  accumulate_input_grad(dv, p.at(idx.wv), dkv_in);
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

struct FeedForwardCache {
  Matrix in, pre, act;
};

// tanh-approximated GELU between two affine maps.
inline Matrix feed_forward(const ModelParams& p, const ModelParams::FeedForwardIdx& idx, const Matrix& x,
                           FeedForwardCache* cache) {
  Matrix pre;
  affine(x, p.at(idx.w1), p.at(idx.b1), pre);
  Matrix act(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double u = pre.data[i];
    act.data[i] = 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
  }
  Matrix out;
  affine(act, p.at(idx.w2), p.at(idx.b2), out);
  if (cache) {
    cache->in = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

inline void feed_forward_backward(const ModelParams& p, const ModelParams::FeedForwardIdx& idx,
                                  const FeedForwardCache& c, const Matrix& dout, Gradients& g, Matrix& dx) {
  accumulate_affine_grads(c.act, dout, g[idx.w2], g[idx.b2]);
  Matrix dact(c.act.rows, c.act.cols);
  accumulate_input_grad(dout, p.at(idx.w2), dact);
  for (std::size_t i = 0; i < dact.size(); ++i) {
    const double u = c.pre.data[i];
    const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
    const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
    dact.data[i] *= 0.5 * (1.0 + t) + 0.5 * u * dt;
  }
  accumulate_affine_grads(c.in, dact, g[idx.w1], g[idx.b1]);
  accumulate_input_grad(dact, p.at(idx.w1), dx);
}

// Inverted-dropout mask: entries are 0 or 1/(1-rate). Empty when inactive.
inline Matrix dropout_mask(int rows, int cols, double rate, Rng* rng) {
  if (!rng || rate <= 0) return {};
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (auto& v : m.data) v = rng->uniform() < rate ? 0.0 : keep;
  return m;
}

inline void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size() == 0) return;
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] *= mask.data[i];
}

struct EncoderLayerCache {
  NormCache ln1, ln2;
  AttentionCache self;
  FeedForwardCache ffn;
  Matrix drop_attn, drop_ffn;
};

struct DecoderLayerCache {
  NormCache ln1, ln2, ln3;
  AttentionCache self, cross;
  FeedForwardCache ffn;
  Matrix drop_self, drop_cross, drop_ffn;
};

}  // namespace detail

// One encoder-decoder pass over whole sequences.
//
// `src` holds the encoder tokens (the visible source, plus a trailing EOS when
// the whole source has been read). `tgt` holds decoder inputs starting with
// BOS. Decoder row r cross-attends to encoder rows [0, cross_limits[r]).
// An ablated row has its word embedding replaced by zeros while keeping its
// positional encoding.
struct PassInput {
  std::span<const Token> src;
  std::span<const Token> tgt;
  std::span<const int> cross_limits;
  int src_ablate = -1;
  int tgt_ablate = -1;
};

struct PassCache {
  std::vector<Token> src, tgt;
  int src_ablate = -1, tgt_ablate = -1;
  Matrix drop_src, drop_tgt;
  std::vector<detail::EncoderLayerCache> enc;
  detail::NormCache enc_norm;
  Matrix memory;
  std::vector<detail::DecoderLayerCache> dec;
  detail::NormCache dec_norm;
  Matrix dec_out;
};

// Returns logits, one row per decoder input row. With a cache the
// intermediate values needed by `backward_pass` are kept; with a dropout
// generator the pass runs in training mode.
inline Matrix run_pass(const ModelParams& p, const PassInput& in, PassCache* cache = nullptr,
                       Rng* dropout = nullptr) {
  using namespace detail;
  const int d = p.config.model_dim;
  const int n_src = static_cast<int>(in.src.size()), n_tgt = static_cast<int>(in.tgt.size());
  if (n_src < 1 || n_tgt < 1) throw UsageError("empty encoder or decoder input");
  if (n_src > p.config.max_len || n_tgt > p.config.max_len) {
    throw UsageError("sequence length exceeds model max_len " + std::to_string(p.config.max_len));
  }
  if (static_cast<int>(in.cross_limits.size()) != n_tgt) throw UsageError("cross_limits size mismatch");
  const double rate = p.config.dropout_rate;
  const double emb_scale = std::sqrt(static_cast<double>(d));

  auto embed = [&](std::span<const Token> toks, std::size_t table, int vocab, int ablate) {
    Matrix x(static_cast<int>(toks.size()), d);
    const Matrix& e = p.at(table);
    const Matrix& pos = p.at(p.positions);
    for (int r = 0; r < x.rows; ++r) {
      const Token t = toks[r];
      if (t < 0 || t >= vocab) throw DataError("token id " + std::to_string(t) + " outside model vocabulary");
      for (int c = 0; c < d; ++c) x(r, c) = (r == ablate ? 0.0 : e(t, c) * emb_scale) + pos(r, c);
    }
    return x;
  };

  Matrix x = embed(in.src, p.src_embed, p.src_vocab, in.src_ablate);
  Matrix drop_src = dropout_mask(x.rows, d, rate, dropout);
  apply_mask(x, drop_src);
  std::vector<int> causal_src(n_src), causal_tgt(n_tgt);
  for (int r = 0; r < n_src; ++r) causal_src[r] = r + 1;
  for (int r = 0; r < n_tgt; ++r) causal_tgt[r] = r + 1;

  std::vector<EncoderLayerCache> enc_caches(cache ? p.encoder.size() : 0);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& L = p.encoder[l];
    EncoderLayerCache* lc = cache ? &enc_caches[l] : nullptr;
    Matrix a = layer_norm(x, p.at(L.ln1.gain), p.at(L.ln1.bias), lc ? &lc->ln1 : nullptr);
    Matrix att = attention(p, L.self, a, a, causal_src, lc ? &lc->self : nullptr);
    Matrix m1 = dropout_mask(att.rows, d, rate, dropout);
    apply_mask(att, m1);
    add_inplace(x, att);
    Matrix b = layer_norm(x, p.at(L.ln2.gain), p.at(L.ln2.bias), lc ? &lc->ln2 : nullptr);
    Matrix ff = feed_forward(p, L.ffn, b, lc ? &lc->ffn : nullptr);
    Matrix m2 = dropout_mask(ff.rows, d, rate, dropout);
    apply_mask(ff, m2);
    add_inplace(x, ff);
    if (lc) {
      lc->drop_attn = std::move(m1);
      lc->drop_ffn = std::move(m2);
    }
  }
  NormCache enc_norm;
  Matrix memory = layer_norm(x, p.at(p.encoder_norm.gain), p.at(p.encoder_norm.bias), cache ? &enc_norm : nullptr);

  for (int r = 0; r < n_tgt; ++r) {
    if (in.cross_limits[r] < 1 || in.cross_limits[r] > n_src) throw UsageError("cross-attention limit out of range");
  }
  Matrix y = embed(in.tgt, p.tgt_embed, p.tgt_vocab, in.tgt_ablate);
  Matrix drop_tgt = dropout_mask(y.rows, d, rate, dropout);
  apply_mask(y, drop_tgt);
  std::vector<DecoderLayerCache> dec_caches(cache ? p.decoder.size() : 0);
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& L = p.decoder[l];
    DecoderLayerCache* lc = cache ? &dec_caches[l] : nullptr;
    Matrix a = layer_norm(y, p.at(L.ln1.gain), p.at(L.ln1.bias), lc ? &lc->ln1 : nullptr);
    Matrix sa = attention(p, L.self, a, a, causal_tgt, lc ? &lc->self : nullptr);
    Matrix m1 = dropout_mask(sa.rows, d, rate, dropout);
    apply_mask(sa, m1);
    add_inplace(y, sa);
    Matrix b = layer_norm(y, p.at(L.ln2.gain), p.at(L.ln2.bias), lc ? &lc->ln2 : nullptr);
    Matrix ca = attention(p, L.cross, b, memory, in.cross_limits, lc ? &lc->cross : nullptr);
    Matrix m2 = dropout_mask(ca.rows, d, rate, dropout);
    apply_mask(ca, m2);
    add_inplace(y, ca);
    Matrix c = layer_norm(y, p.at(L.ln3.gain), p.at(L.ln3.bias), lc ? &lc->ln3 : nullptr);
    Matrix ff = feed_forward(p, L.ffn, c, lc ? &lc->ffn : nullptr);
    Matrix m3 = dropout_mask(ff.rows, d, rate, dropout);
    apply_mask(ff, m3);
    add_inplace(y, ff);
    if (lc) {
      lc->drop_self = std::move(m1);
      lc->drop_cross = std::move(m2);
      lc->drop_ffn = std::move(m3);
    }
  }
  NormCache dec_norm;
  Matrix dec_out = layer_norm(y, p.at(p.decoder_norm.gain), p.at(p.decoder_norm.bias), cache ? &dec_norm : nullptr);
  Matrix logits;
  affine(dec_out, p.at(p.out_w), p.at(p.out_b), logits);

  if (cache) {
    cache->src.assign(in.src.begin(), in.src.end());
    cache->tgt.assign(in.tgt.begin(), in.tgt.end());
    cache->src_ablate = in.src_ablate;
    cache->tgt_ablate = in.tgt_ablate;
    cache->drop_src = std::move(drop_src);
    cache->drop_tgt = std::move(drop_tgt);
    cache->enc = std::move(enc_caches);
    cache->enc_norm = std::move(enc_norm);
    cache->memory = std::move(memory);
    cache->dec = std::move(dec_caches);
    cache->dec_norm = std::move(dec_norm);
    cache->dec_out = std::move(dec_out);
  }
  return logits;
}

// Accumulates parameter gradients of sum(dlogits * logits) into `g`.
inline void backward_pass(const ModelParams& p, const PassCache& c, const Matrix& dlogits, Gradients& g) {
  using namespace detail;
  const int d = p.config.model_dim;
  const int n_src = static_cast<int>(c.src.size()), n_tgt = static_cast<int>(c.tgt.size());

  accumulate_affine_grads(c.dec_out, dlogits, g[p.out_w], g[p.out_b]);
  Matrix d_dec_out(n_tgt, d);
  accumulate_input_grad(dlogits, p.at(p.out_w), d_dec_out);
  Matrix dy(n_tgt, d);
  layer_norm_backward(d_dec_out, p.at(p.decoder_norm.gain), c.dec_norm, dy, g[p.decoder_norm.gain],
                      g[p.decoder_norm.bias]);
  Matrix dmemory(n_src, d);

  auto masked = [](const Matrix& grad, const Matrix& mask) {
    Matrix out = grad;
    apply_mask(out, mask);
    return out;
  };

  for (std::size_t l = p.decoder.size(); l-- > 0;) {
    const auto& L = p.decoder[l];
    const auto& lc = c.dec[l];
    {
      const Matrix dff = masked(dy, lc.drop_ffn);
      Matrix dc(n_tgt, d);
      feed_forward_backward(p, L.ffn, lc.ffn, dff, g, dc);
      layer_norm_backward(dc, p.at(L.ln3.gain), lc.ln3, dy, g[L.ln3.gain], g[L.ln3.bias]);
    }
    {
      const Matrix dca = masked(dy, lc.drop_cross);
      Matrix db(n_tgt, d);
      attention_backward(p, L.cross, lc.cross, dca, g, db, dmemory);
      layer_norm_backward(db, p.at(L.ln2.gain), lc.ln2, dy, g[L.ln2.gain], g[L.ln2.bias]);
    }
    {
      const Matrix dsa = masked(dy, lc.drop_self);
      Matrix da(n_tgt, d);
      attention_backward(p, L.self, lc.self, dsa, g, da, da);
      layer_norm_backward(da, p.at(L.ln1.gain), lc.ln1, dy, g[L.ln1.gain], g[L.ln1.bias]);
    }
  }
  apply_mask(dy, c.drop_tgt);
  const double emb_scale = std::sqrt(static_cast<double>(d));
  for (int r = 0; r < n_tgt; ++r) {
    if (r == c.tgt_ablate) continue;
    double* ge = g[p.tgt_embed].row(c.tgt[r]);
    for (int col = 0; col < d; ++col) ge[col] += dy(r, col) * emb_scale;
  }

  Matrix dx(n_src, d);
  layer_norm_backward(dmemory, p.at(p.encoder_norm.gain), c.enc_norm, dx, g[p.encoder_norm.gain],
                      g[p.encoder_norm.bias]);
  for (std::size_t l = p.encoder.size(); l-- > 0;) {
    const auto& L = p.encoder[l];
    const auto& lc = c.enc[l];
    {
      const Matrix dff = masked(dx, lc.drop_ffn);
      Matrix db(n_src, d);
      feed_forward_backward(p, L.ffn, lc.ffn, dff, g, db);
      layer_norm_backward(db, p.at(L.ln2.gain), lc.ln2, dx, g[L.ln2.gain], g[L.ln2.bias]);
    }
    {
      const Matrix dsa = masked(dx, lc.drop_attn);
      Matrix da(n_src, d);
      attention_backward(p, L.self, lc.self, dsa, g, da, da);
      layer_norm_backward(da, p.at(L.ln1.gain), lc.ln1, dx, g[L.ln1.gain], g[L.ln1.bias]);
    }
  }
  apply_mask(dx, c.drop_src);
  for (int r = 0; r < n_src; ++r) {
    if (r == c.src_ablate) continue;
    double* ge = g[p.src_embed].row(c.src[r]);
    for (int col = 0; col < d; ++col) ge[col] += dx(r, col) * emb_scale;
  }
}

inline PredictiveDistribution softmax_row(const Matrix& logits, int r) {
  PredictiveDistribution out;
  out.probs.resize(logits.cols);
  const double* lr = logits.row(r);
  double mx = -INFINITY;
  for (int c = 0; c < logits.cols; ++c) mx = std::max(mx, lr[c]);
  double z = 0;
  for (int c = 0; c < logits.cols; ++c) {
    out.probs[c] = std::exp(lr[c] - mx);
    z += out.probs[c];
  }
  for (auto& v : out.probs) v /= z;
  return out;
}

// Cross-attention limits of a wait-k decoder over a source of `n_src`
// visible tokens. Row r predicts target position i = r + 1 and sees
// min(i + k - 1, n_src) source tokens, plus the source EOS row once it has
// read the whole source (only possible when `complete`).
inline std::vector<int> waitk_cross_limits(int rows, Latency k, int n_src, bool complete) {
  std::vector<int> lim(rows);
  for (int r = 0; r < rows; ++r) {
    const int i = r + 1;
    lim[r] = k.visible(i, n_src) + ((complete && k.source_complete(i, n_src)) ? 1 : 0);
  }
  return lim;
}

// A visible source prefix. `complete` marks that it is the whole sentence,
// in which case the encoder also sees the source EOS.
struct SourcePrefix {
  std::span<const Token> tokens;
  bool complete = false;
};

// Optional single-token ablation, indices as in the relevance formulas:
// `src` is 1-based into the source, `tgt` is 0 for BOS and j for y_j.
struct Ablation {
  int src = 0;
  int tgt = -1;
};

namespace detail {

inline std::vector<Token> encoder_tokens(std::span<const Token> src, bool complete) {
  std::vector<Token> enc(src.begin(), src.end());
  if (complete) enc.push_back(kEos);
  return enc;
}

inline std::vector<Token> decoder_inputs(std::span<const Token> tgt_prefix) {
  std::vector<Token> dec;
  dec.reserve(tgt_prefix.size() + 1);
  dec.push_back(kBos);
  dec.insert(dec.end(), tgt_prefix.begin(), tgt_prefix.end());
  return dec;
}

}  // namespace detail

// P(. | y_<i, x_<=i+k-1): next-token distribution given exactly the visible
// source prefix and the previous target tokens. Earlier decoder rows see the
// source they had read at their own step, as in wait-k training.
inline PredictiveDistribution forward_next(const ModelParams& p, SourcePrefix src, std::span<const Token> tgt_prefix,
                                           Latency k, Ablation ablate = {}) {
  const int n = static_cast<int>(src.tokens.size());
  const int i = static_cast<int>(tgt_prefix.size()) + 1;
  if (n < 1) throw UsageError("source prefix must be nonempty");
  if (src.complete) {
    if (!k.source_complete(i, n)) throw UsageError("source prefix longer than the wait-k schedule allows");
  } else if (k.is_full() || k.visible(i, std::numeric_limits<int>::max()) != n) {
    throw UsageError("incomplete source prefix must hold exactly i + k - 1 tokens");
  }
  if (ablate.src < 0 || ablate.src > n) throw UsageError("source ablation index out of range");
  if (ablate.tgt >= i) throw UsageError("target ablation index out of range");
  const auto enc = detail::encoder_tokens(src.tokens, src.complete);
  const auto dec = detail::decoder_inputs(tgt_prefix);
  const auto lim = waitk_cross_limits(static_cast<int>(dec.size()), k, n, src.complete);
  PassInput in{enc, dec, lim, ablate.src - 1, ablate.tgt};
  const Matrix logits = run_pass(p, in);
  return softmax_row(logits, logits.rows - 1);
}

// The source prefix visible at 1-based target step i of a wait-k schedule.
inline SourcePrefix visible_source(std::span<const Token> src, int i, Latency k) {
  const int n = static_cast<int>(src.size());
  const int v = k.visible(i, n);
  return {src.first(static_cast<std::size_t>(v)), k.source_complete(i, n)};
}

struct TrainOutput {
  std::vector<PredictiveDistribution> dists;  // one per target position incl. the final EOS
  double loss = 0;                            // mean token cross-entropy
};

// Teacher-forced wait-k pass over a full sentence pair. Row i attends to
// x_<=i+k-1; the causal encoder makes one pass serve every prefix length.
inline TrainOutput forward_train(const ModelParams& p, std::span<const Token> src, std::span<const Token> tgt,
                                 Latency k, Ablation ablate = {}) {
  const auto enc = detail::encoder_tokens(src, true);
  const auto dec = detail::decoder_inputs(tgt);
  const int n = static_cast<int>(src.size());
  const auto lim = waitk_cross_limits(static_cast<int>(dec.size()), k, n, true);
  if (ablate.src < 0 || ablate.src > n || ablate.tgt > static_cast<int>(tgt.size())) {
    throw UsageError("ablation index out of range");
  }
  PassInput in{enc, dec, lim, ablate.src - 1, ablate.tgt};
  const Matrix logits = run_pass(p, in);
  TrainOutput out;
  out.dists.reserve(logits.rows);
  for (int r = 0; r < logits.rows; ++r) {
    out.dists.push_back(softmax_row(logits, r));
    const Token gold = r + 1 < logits.rows ? tgt[r] : kEos;
    out.loss -= std::log(out.dists.back().probs[gold]);
  }
  out.loss /= logits.rows;
  return out;
}

// Versioned binary parameter file:
//   magic "SIMTLABP", u32 version,
//   i32 num_layers, num_heads, model_dim, ff_dim, max_len, src_vocab, tgt_vocab,
//   f64 dropout_rate, u64 seed, u32 tensor count,
//   per tensor: u32 name length, name bytes, i32 rows, i32 cols, u8 trainable,
//   then every tensor payload in order as row-major little-endian f64.
inline constexpr std::uint32_t kParamFileVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(path + ": truncated parameter file");
  return v;
}

}  // namespace detail

inline void save_params(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write parameter file " + path);
  out.write("SIMTLABP", 8);
  detail::write_pod(out, kParamFileVersion);
  for (int v : {p.config.num_layers, p.config.num_heads, p.config.model_dim, p.config.ff_dim, p.config.max_len,
                p.src_vocab, p.tgt_vocab}) {
    detail::write_pod<std::int32_t>(out, v);
  }
  detail::write_pod(out, p.config.dropout_rate);
  detail::write_pod<std::uint64_t>(out, p.config.seed);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_pod<std::int32_t>(out, t.value.rows);
    detail::write_pod<std::int32_t>(out, t.value.cols);
    detail::write_pod<std::uint8_t>(out, t.trainable ? 1 : 0);
  }
  for (const auto& t : p.tensors) {
    out.write(reinterpret_cast<const char*>(t.value.data.data()),
              static_cast<std::streamsize>(t.value.data.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing parameter file " + path);
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read parameter file " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "SIMTLABP", 8) != 0) throw DataError(path + ": not a parameter file");
  const auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != kParamFileVersion) {
    throw DataError(path + ": parameter file version " + std::to_string(version) + ", expected " +
                    std::to_string(kParamFileVersion));
  }
  ModelConfig cfg;
  cfg.num_layers = detail::read_pod<std::int32_t>(in, path);
  cfg.num_heads = detail::read_pod<std::int32_t>(in, path);
  cfg.model_dim = detail::read_pod<std::int32_t>(in, path);
  cfg.ff_dim = detail::read_pod<std::int32_t>(in, path);
  cfg.max_len = detail::read_pod<std::int32_t>(in, path);
  const int src_vocab = detail::read_pod<std::int32_t>(in, path);
  const int tgt_vocab = detail::read_pod<std::int32_t>(in, path);
  cfg.dropout_rate = detail::read_pod<double>(in, path);
  cfg.seed = detail::read_pod<std::uint64_t>(in, path);
  ModelParams p;
  try {
    p = ModelParams::skeleton(cfg, src_vocab, tgt_vocab);
  } catch (const UsageError& e) {
    throw DataError(path + ": invalid header (" + e.what() + ")");
  }
  const auto count = detail::read_pod<std::uint32_t>(in, path);
  if (count != p.tensors.size()) throw DataError(path + ": tensor count mismatch");
  for (auto& t : p.tensors) {
    const auto len = detail::read_pod<std::uint32_t>(in, path);
    if (len > 256) throw DataError(path + ": corrupt tensor name");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError(path + ": truncated parameter file");
    const auto rows = detail::read_pod<std::int32_t>(in, path);
    const auto cols = detail::read_pod<std::int32_t>(in, path);
    const auto trainable = detail::read_pod<std::uint8_t>(in, path);
    if (name != t.name || rows != t.value.rows || cols != t.value.cols || (trainable != 0) != t.trainable) {
      throw DataError(path + ": shape table mismatch at tensor '" + name + "'");
    }
  }
  for (auto& t : p.tensors) {
    const auto bytes = static_cast<std::streamsize>(t.value.data.size() * sizeof(double));
    if (!in.read(reinterpret_cast<char*>(t.value.data.data()), bytes)) throw DataError(path + ": truncated parameter file");
    for (double v : t.value.data)
      if (!std::isfinite(v)) throw DataError(path + ": non-finite parameter in '" + t.name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path + ": trailing bytes after payload");
  return p;
}

}  // namespace simtlab
