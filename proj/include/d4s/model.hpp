#pragma once

// Decoder-only toy transformer. Each block computes
//
//   h^l = h^{l-1} + att^l + m^l,   m^l = W_out sigma(W_in gamma(att^l))
//
// where att^l is causal multi-head attention over layer-normed h^{l-1} and
// gamma is a layer norm. With ModelConfig::mlp_reads_residual the MLP reads
// gamma(h^{l-1} + att^l) instead, the usual GPT-style block.
//
// The MLP inner activation sigma(W_in gamma(.)) is the "key" the editors
// read; W_out is the matrix they rewrite.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "d4s/errors.hpp"
#include "d4s/numerics.hpp"

namespace d4s {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_mlp_hidden = 128;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;
  bool mlp_reads_residual = false;

  void validate() const {
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    if (vocab_size < 8) throw ConfigError("vocab_size must be at least 8");
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (d_mlp_hidden == 0) throw ConfigError("d_mlp_hidden must be positive");
    if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;  // 1 x d
  Matrix w_q, w_k, w_v, w_o;  // d x d, applied as W x
  Matrix ln2_gain, ln2_bias;  // 1 x d
  Matrix w_in;                // d_mlp x d
  Matrix b_in;                // 1 x d_mlp
  Matrix w_out;               // d x d_mlp

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", self.ln1_gain);
    f(prefix + "ln1_bias", self.ln1_bias);
    f(prefix + "w_q", self.w_q);
    f(prefix + "w_k", self.w_k);
    f(prefix + "w_v", self.w_v);
    f(prefix + "w_o", self.w_o);
    f(prefix + "ln2_gain", self.ln2_gain);
    f(prefix + "ln2_bias", self.ln2_bias);
    f(prefix + "w_in", self.w_in);
    f(prefix + "b_in", self.b_in);
    f(prefix + "w_out", self.w_out);
  }

  bool operator==(const LayerParams&) const = default;
};

struct Parameters {
  Matrix tok_embed;  // vocab x d
  Matrix pos_embed;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;  // 1 x d
  Matrix unembed;             // vocab x d

  // Visits every parameter in the fixed checkpoint order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  // Same shapes, all zeros.
  Parameters zeros_like() const {
    Parameters z = *this;
    z.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
    return z;
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Matrix& m) { ok = ok && m.all_finite(); });
    return ok;
  }

  bool operator==(const Parameters&) const = default;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("tok_embed"), self.tok_embed);
    f(std::string("pos_embed"), self.pos_embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      LayerParams::visit_impl(self.layers[l], "layer" + std::to_string(l) + ".", f);
    }
    f(std::string("lnf_gain"), self.lnf_gain);
    f(std::string("lnf_bias"), self.lnf_bias);
    f(std::string("unembed"), self.unembed);
  }
};

struct ToyModel {
  ModelConfig config;
  Parameters params;

  Matrix& w_out(std::size_t layer) { return params.layers.at(layer).w_out; }
  const Matrix& w_out(std::size_t layer) const { return params.layers.at(layer).w_out; }

  bool operator==(const ToyModel&) const = default;
};

inline ToyModel make_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  const std::size_t m = cfg.d_mlp_hidden;
  auto gaussian = [&](std::size_t rows, std::size_t cols, double std) {
    std::normal_distribution<double> dist(0.0, std);
    Matrix out(rows, cols);
    for (double& x : out.data()) x = dist(rng);
    return out;
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sm = 1.0 / std::sqrt(static_cast<double>(m));

  ToyModel model;
  model.config = cfg;
  Parameters& p = model.params;
  p.tok_embed = gaussian(cfg.vocab_size, d, 1.0);
  p.pos_embed = gaussian(cfg.max_seq_len, d, 0.5);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = Matrix(1, d, 1.0);
    lp.ln1_bias = Matrix(1, d, 0.0);
    lp.w_q = gaussian(d, d, sd);
    lp.w_k = gaussian(d, d, sd);
    lp.w_v = gaussian(d, d, sd);
    lp.w_o = gaussian(d, d, 0.5 * sd);
    lp.ln2_gain = Matrix(1, d, 1.0);
    lp.ln2_bias = Matrix(1, d, 0.0);
    lp.w_in = gaussian(m, d, sd);
    lp.b_in = Matrix(1, m, 0.0);
    lp.w_out = gaussian(d, m, 0.5 * sm);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_gain = Matrix(1, d, 1.0);
  p.lnf_bias = Matrix(1, d, 0.0);
  p.unembed = gaussian(cfg.vocab_size, d, sd);
  return model;
}

// Adds delta to the hidden state at (layer, position) right after that layer
// produces it, before any later layer reads it.
struct Injection {
  std::size_t layer = 0;
  std::size_t position = 0;
  Vector delta;
};

struct NormCache {
  Matrix xhat;
  Vector rstd;
};

// Per-layer captures. hidden is h^l (after any injection at this layer),
// mlp_in is gamma(.) fed to W_in, mlp_key is sigma(W_in mlp_in + b_in).
struct LayerTrace {
  NormCache ln1;
  Matrix attn_in;
  Matrix q, k, v;
  Matrix probs;  // (n_heads * T) x T, row h*T + i holds head h's weights for query i
  Matrix attn_heads;
  Matrix attn_out;
  NormCache ln2;
  Matrix mlp_in;
  Matrix mlp_pre;
  Matrix mlp_key;
  Matrix mlp_out;
  Matrix hidden;
};

struct HiddenTrace {
  Matrix embed;  // h^{-1}: token + position embeddings
  std::vector<LayerTrace> layers;
  NormCache lnf;
  Matrix final_norm;
  std::optional<std::size_t> subject_position;

  std::size_t depth() const noexcept { return layers.size(); }
  std::size_t width() const noexcept { return embed.rows(); }
  // Hidden state entering layer l (the embeddings for l = 0).
  const Matrix& input_of(std::size_t l) const { return l == 0 ? embed : layers[l - 1].hidden; }
};

struct ForwardPass {
  Matrix logits;  // T x vocab
  HiddenTrace trace;
};

// One term of a next-token loss: -weight * log P(token | tokens[0..position]).
struct TargetToken {
  std::size_t position = 0;
  Token token = 0;
  double weight = 1.0;
};

namespace detail {

inline constexpr double kNormEps = 1e-5;

inline void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& out,
                       NormCache& cache) {
  const std::size_t t = x.rows();
  const std::size_t d = x.cols();
  out = Matrix(t, d);
  cache.xhat = Matrix(t, d);
  cache.rstd.assign(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x(i, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (x(i, c) - mean) * rstd;
      cache.xhat(i, c) = xh;
      out(i, c) = xh * gain(0, c) + bias(0, c);
    }
  }
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache,
                                  Matrix* dgain, Matrix* dbias) {
  const std::size_t t = dy.rows();
  const std::size_t d = dy.cols();
  Matrix dx(t, d);
  Vector dxhat(d);
  for (std::size_t i = 0; i < t; ++i) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = dy(i, c) * gain(0, c);
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * cache.xhat(i, c);
      if (dgain != nullptr) {
        (*dgain)(0, c) += dy(i, c) * cache.xhat(i, c);
        (*dbias)(0, c) += dy(i, c);
      }
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(i, c) = cache.rstd[i] * (dxhat[c] - mean_dxhat - cache.xhat(i, c) * mean_dxhat_xhat);
    }
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline void check_tokens(const ToyModel& model, std::span<const Token> tokens) {
  if (tokens.empty()) throw LengthError("token sequence is empty");
  if (tokens.size() > model.config.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(model.config.max_seq_len));
  }
  for (Token t : tokens) {
    if (t >= model.config.vocab_size) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

inline void check_injection(const ToyModel& model, std::size_t seq_len, const Injection& inj) {
  if (inj.layer >= model.config.n_layers) {
    throw IndexError("injection layer " + std::to_string(inj.layer) + " out of range");
  }
  if (inj.position >= seq_len) {
    throw IndexError("injection position " + std::to_string(inj.position) + " out of range");
  }
  if (inj.delta.size() != model.config.d_model) {
    throw ShapeError("injection delta length differs from d_model");
  }
}

inline void embed(const ToyModel& model, std::span<const Token> tokens, HiddenTrace& trace) {
  const std::size_t d = model.config.d_model;
  trace.embed = Matrix(tokens.size(), d);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      trace.embed(j, c) = model.params.tok_embed(tokens[j], c) + model.params.pos_embed(j, c);
    }
  }
}

inline void layer_forward(const ToyModel& model, std::size_t l, const Matrix& x, LayerTrace& lt) {
  const LayerParams& p = model.params.layers[l];
  const std::size_t t = x.rows();
  const std::size_t d = model.config.d_model;
  const std::size_t n_heads = model.config.n_heads;
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  layer_norm(x, p.ln1_gain, p.ln1_bias, lt.attn_in, lt.ln1);
  lt.q = matmul_bt(lt.attn_in, p.w_q);
  lt.k = matmul_bt(lt.attn_in, p.w_k);
  lt.v = matmul_bt(lt.attn_in, p.w_v);
  lt.probs = Matrix(n_heads * t, t);
  lt.attn_heads = Matrix(t, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < t; ++i) {
      double* prow = lt.probs.data().data() + (h * t + i) * t;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += lt.q(i, c0 + c) * lt.k(j, c0 + c);
        prow[j] = s * scale;
        mx = std::max(mx, prow[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        z += prow[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        prow[j] /= z;
        for (std::size_t c = 0; c < dh; ++c) lt.attn_heads(i, c0 + c) += prow[j] * lt.v(j, c0 + c);
      }
    }
  }
  lt.attn_out = matmul_bt(lt.attn_heads, p.w_o);

  if (model.config.mlp_reads_residual) {
    layer_norm(x + lt.attn_out, p.ln2_gain, p.ln2_bias, lt.mlp_in, lt.ln2);
  } else {
    layer_norm(lt.attn_out, p.ln2_gain, p.ln2_bias, lt.mlp_in, lt.ln2);
  }
  lt.mlp_pre = matmul_bt(lt.mlp_in, p.w_in);
  lt.mlp_key = Matrix(t, model.config.d_mlp_hidden);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < model.config.d_mlp_hidden; ++c) {
      lt.mlp_pre(i, c) += p.b_in(0, c);
      lt.mlp_key(i, c) = gelu(lt.mlp_pre(i, c));
    }
  }
  lt.mlp_out = matmul_bt(lt.mlp_key, p.w_out);

  lt.hidden = Matrix(t, d);
  for (std::size_t i = 0; i < lt.hidden.size(); ++i) {
    lt.hidden.data()[i] = (x.data()[i] + lt.attn_out.data()[i]) + lt.mlp_out.data()[i];
  }
}

// Backward through one block. dh is dLoss/dh^l; returns dLoss/dh^{l-1}.
inline Matrix layer_backward(const ToyModel& model, std::size_t l, const Matrix& x,
                             const LayerTrace& lt, const Matrix& dh, LayerParams* grad) {
  const LayerParams& p = model.params.layers[l];
  const std::size_t t = x.rows();
  const std::size_t d = model.config.d_model;
  const std::size_t n_heads = model.config.n_heads;
  const std::size_t dk = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix dx = dh;
  Matrix d_att = dh;

  // MLP.
  if (grad != nullptr) add_matmul_at(grad->w_out, dh, lt.mlp_key);
  Matrix d_pre = matmul(dh, p.w_out);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < model.config.d_mlp_hidden; ++c) {
      d_pre(i, c) *= gelu_grad(lt.mlp_pre(i, c));
      if (grad != nullptr) grad->b_in(0, c) += d_pre(i, c);
    }
  }
  if (grad != nullptr) add_matmul_at(grad->w_in, d_pre, lt.mlp_in);
  const Matrix d_mlp_in = matmul(d_pre, p.w_in);
  const Matrix d_src = layer_norm_backward(d_mlp_in, p.ln2_gain, lt.ln2,
                                           grad ? &grad->ln2_gain : nullptr,
                                           grad ? &grad->ln2_bias : nullptr);
  d_att += d_src;
  if (model.config.mlp_reads_residual) dx += d_src;

  // Attention.
  if (grad != nullptr) add_matmul_at(grad->w_o, d_att, lt.attn_heads);
  const Matrix d_heads = matmul(d_att, p.w_o);
  Matrix dq(t, d), dkm(t, d), dv(t, d);
  Vector dp(t);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dk;
    for (std::size_t i = 0; i < t; ++i) {
      const double* prow = lt.probs.data().data() + (h * t + i) * t;
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) {
          s += d_heads(i, c0 + c) * lt.v(j, c0 + c);
          dv(j, c0 + c) += prow[j] * d_heads(i, c0 + c);
        }
        dp[j] = s;
        dot += prow[j] * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = prow[j] * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        for (std::size_t c = 0; c < dk; ++c) {
          dq(i, c0 + c) += ds * lt.k(j, c0 + c);
          dkm(j, c0 + c) += ds * lt.q(i, c0 + c);
        }
      }
    }
  }
  if (grad != nullptr) {
    add_matmul_at(grad->w_q, dq, lt.attn_in);
    add_matmul_at(grad->w_k, dkm, lt.attn_in);
    add_matmul_at(grad->w_v, dv, lt.attn_in);
  }
  Matrix d_attn_in = matmul(dq, p.w_q);
  d_attn_in += matmul(dkm, p.w_k);
  d_attn_in += matmul(dv, p.w_v);
  dx += layer_norm_backward(d_attn_in, p.ln1_gain, lt.ln1, grad ? &grad->ln1_gain : nullptr,
                            grad ? &grad->ln1_bias : nullptr);
  return dx;
}

// Runs layers first..n-1, reading the input of layer `first` from the trace.
inline void run_layers(const ToyModel& model, HiddenTrace& trace, std::size_t first,
                       const Injection* inj) {
  for (std::size_t l = first; l < model.config.n_layers; ++l) {
    layer_forward(model, l, trace.input_of(l), trace.layers[l]);
    if (inj != nullptr && inj->layer == l) {
      auto row = trace.layers[l].hidden.row_span(inj->position);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += inj->delta[c];
    }
  }
  const auto& last = trace.layers.back().hidden;
  detail::layer_norm(last, model.params.lnf_gain, model.params.lnf_bias, trace.final_norm,
                     trace.lnf);
}

inline Vector logits_row(const ToyModel& model, const HiddenTrace& trace, std::size_t pos) {
  return matvec(model.params.unembed, trace.final_norm.row_span(pos));
}

struct LossResult {
  double loss = 0.0;
  Matrix d_final;  // dLoss/d(final_norm), T x d
};

inline LossResult target_loss(const ToyModel& model, const HiddenTrace& trace,
                              std::span<const TargetToken> targets, bool want_grad,
                              Parameters* grad) {
  LossResult out;
  const std::size_t d = model.config.d_model;
  const std::size_t vocab = model.config.vocab_size;
  if (want_grad) out.d_final = Matrix(trace.width(), d);
  Vector dlogits(vocab);
  for (const TargetToken& tt : targets) {
    if (tt.position >= trace.width()) throw IndexError("target position outside sequence");
    if (tt.token >= vocab) throw IndexError("target token outside vocabulary");
    const Vector logits = logits_row(model, trace, tt.position);
    double mx = -INFINITY;
    for (double x : logits) {
      if (!std::isfinite(x)) {
        throw NumericError("non-finite logit " + std::to_string(x) + " at position " +
                           std::to_string(tt.position));
      }
      mx = std::max(mx, x);
    }
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    const double logp = logits[tt.token] - mx - std::log(z);
    out.loss -= tt.weight * logp;
    if (!want_grad) continue;
    for (std::size_t v = 0; v < vocab; ++v) {
      dlogits[v] = tt.weight * std::exp(logits[v] - mx) / z;
    }
    dlogits[tt.token] -= tt.weight;
    auto drow = out.d_final.row_span(tt.position);
    for (std::size_t v = 0; v < vocab; ++v) {
      const double g = dlogits[v];
      if (g == 0.0) continue;
      const auto urow = model.params.unembed.row_span(v);
      for (std::size_t c = 0; c < d; ++c) drow[c] += g * urow[c];
      if (grad != nullptr) {
        auto grow = grad->unembed.row_span(v);
        const auto frow = trace.final_norm.row_span(tt.position);
        for (std::size_t c = 0; c < d; ++c) grow[c] += g * frow[c];
      }
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

// Back-propagates from the final norm down to the output of layer `stop`
// (exclusive). Returns dLoss/dh^{stop}; stop = -1 means the embeddings.
inline Matrix backward_to(const ToyModel& model, const HiddenTrace& trace, const Matrix& d_final,
                          long stop, Parameters* grad) {
  Matrix dh = layer_norm_backward(d_final, model.params.lnf_gain, trace.lnf,
                                  grad ? &grad->lnf_gain : nullptr,
                                  grad ? &grad->lnf_bias : nullptr);
  for (long l = static_cast<long>(model.config.n_layers) - 1; l > stop; --l) {
    const auto lu = static_cast<std::size_t>(l);
    dh = layer_backward(model, lu, trace.input_of(lu), trace.layers[lu], dh,
                        grad ? &grad->layers[lu] : nullptr);
  }
  return dh;
}

}  // namespace detail

inline HiddenTrace run_trace(const ToyModel& model, std::span<const Token> tokens,
                             const Injection* injection = nullptr) {
  detail::check_tokens(model, tokens);
  if (injection != nullptr) detail::check_injection(model, tokens.size(), *injection);
  HiddenTrace trace;
  trace.layers.resize(model.config.n_layers);
  detail::embed(model, tokens, trace);
  detail::run_layers(model, trace, 0, injection);
  return trace;
}

// Runs layers 0..last_layer only; later layers and the final norm are left
// empty. Enough for reading keys and hidden states at or below last_layer.
inline HiddenTrace trace_through(const ToyModel& model, std::span<const Token> tokens,
                                 std::size_t last_layer) {
  detail::check_tokens(model, tokens);
  if (last_layer >= model.config.n_layers) throw IndexError("layer index out of range");
  HiddenTrace trace;
  trace.layers.resize(model.config.n_layers);
  detail::embed(model, tokens, trace);
  for (std::size_t l = 0; l <= last_layer; ++l) {
    detail::layer_forward(model, l, trace.input_of(l), trace.layers[l]);
  }
  return trace;
}

inline ForwardPass forward(const ToyModel& model, std::span<const Token> tokens,
                           const std::optional<Injection>& injection = std::nullopt) {
  ForwardPass out;
  out.trace = run_trace(model, tokens, injection ? &*injection : nullptr);
  out.logits = matmul_bt(out.trace.final_norm, model.params.unembed);
  return out;
}

// Logits at selected positions only; cheaper than the full forward.
inline Matrix logits_at(const ToyModel& model, std::span<const Token> tokens,
                        std::span<const std::size_t> positions) {
  const HiddenTrace trace = run_trace(model, tokens);
  Matrix out(positions.size(), model.config.vocab_size);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    if (positions[r] >= tokens.size()) throw IndexError("logit position outside sequence");
    const Vector row = detail::logits_row(model, trace, positions[r]);
    std::copy(row.begin(), row.end(), out.row_span(r).begin());
  }
  return out;
}

inline double target_nll(const ToyModel& model, std::span<const Token> tokens,
                         std::span<const TargetToken> targets,
                         const std::optional<Injection>& injection = std::nullopt) {
  const HiddenTrace trace = run_trace(model, tokens, injection ? &*injection : nullptr);
  return detail::target_loss(model, trace, targets, false, nullptr).loss;
}

// Evaluates a target loss as a function of a vector injected at a fixed site.
// Layers at or below the site are computed once; each evaluation reruns only
// the layers above it.
class InjectionProbe {
 public:
  InjectionProbe(const ToyModel& model, TokenSeq tokens, std::size_t layer, std::size_t position,
                 std::vector<TargetToken> targets)
      : model_(&model), tokens_(std::move(tokens)), targets_(std::move(targets)) {
    detail::check_tokens(model, tokens_);
    site_.layer = layer;
    site_.position = position;
    site_.delta.assign(model.config.d_model, 0.0);
    detail::check_injection(model, tokens_.size(), site_);
    for (const auto& tt : targets_) {
      if (tt.position >= tokens_.size()) throw IndexError("target position outside sequence");
    }
    trace_ = run_trace(model, tokens_);
    const auto row = trace_.layers[layer].hidden.row_span(position);
    base_.assign(row.begin(), row.end());
  }

  // Clean hidden state at the site, before any injection.
  const Vector& base_state() const noexcept { return base_; }
  const HiddenTrace& trace() const noexcept { return trace_; }
  std::size_t layer() const noexcept { return site_.layer; }
  std::size_t position() const noexcept { return site_.position; }

  struct Result {
    double loss = 0.0;
    Vector grad;  // empty unless requested
  };

  Result evaluate(std::span<const double> delta, bool want_grad) {
    const ToyModel& model = *model_;
    if (delta.size() != base_.size()) throw ShapeError("injection delta length differs from d_model");
    auto row = trace_.layers[site_.layer].hidden.row_span(site_.position);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = base_[c] + delta[c];
    for (std::size_t l = site_.layer + 1; l < model.config.n_layers; ++l) {
      detail::layer_forward(model, l, trace_.input_of(l), trace_.layers[l]);
    }
    detail::layer_norm(trace_.layers.back().hidden, model.params.lnf_gain,
                       model.params.lnf_bias, trace_.final_norm, trace_.lnf);
    auto loss = detail::target_loss(model, trace_, targets_, want_grad, nullptr);
    Result out;
    out.loss = loss.loss;
    if (want_grad) {
      const Matrix dh =
          detail::backward_to(model, trace_, loss.d_final, static_cast<long>(site_.layer), nullptr);
      const auto g = dh.row_span(site_.position);
      out.grad.assign(g.begin(), g.end());
    }
    return out;
  }

 private:
  const ToyModel* model_;
  TokenSeq tokens_;
  std::vector<TargetToken> targets_;
  Injection site_;
  HiddenTrace trace_;
  Vector base_;
};

// dLoss/d(delta) for a vector injected at (layer, position), evaluated at `delta`
// (zero when omitted).
inline Vector backward_wrt_injection(const ToyModel& model, std::span<const Token> tokens,
                                     std::size_t layer, std::size_t position,
                                     std::span<const TargetToken> targets,
                                     std::span<const double> delta = {}) {
  InjectionProbe probe(model, TokenSeq(tokens.begin(), tokens.end()), layer, position,
                       std::vector<TargetToken>(targets.begin(), targets.end()));
  Vector d(model.config.d_model, 0.0);
  if (!delta.empty()) d.assign(delta.begin(), delta.end());
  return probe.evaluate(d, true).grad;
}

// Loss and full parameter gradient (accumulated into grad) for one sequence.
inline double accumulate_gradients(const ToyModel& model, std::span<const Token> tokens,
                                   std::span<const TargetToken> targets, Parameters& grad) {
  const HiddenTrace trace = run_trace(model, tokens);
  auto loss = detail::target_loss(model, trace, targets, true, &grad);
  const Matrix d_embed = detail::backward_to(model, trace, loss.d_final, -1, &grad);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    auto te = grad.tok_embed.row_span(tokens[j]);
    auto pe = grad.pos_embed.row_span(j);
    const auto dr = d_embed.row_span(j);
    for (std::size_t c = 0; c < dr.size(); ++c) {
      te[c] += dr[c];
      pe[c] += dr[c];
    }
  }
  return loss.loss;
}

// ---------------------------------------------------------------------------
// Pretraining

struct TrainingExample {
  TokenSeq tokens;
  std::vector<TargetToken> targets;
};

struct PretrainOptions {
  std::size_t steps = 0;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // Optional augmentation: with probability prefix_prob, insert a random run of
  // up to max_prefix_len tokens from prefix_pool after position 0.
  std::vector<Token> prefix_pool;
  std::size_t max_prefix_len = 0;
  double prefix_prob = 0.0;
};

struct TrainingCurve {
  std::vector<double> loss;  // mean per-target loss of each step's batch
};

namespace detail {

inline TrainingExample with_prefix(const TrainingExample& ex, std::span<const Token> prefix) {
  TrainingExample out;
  out.tokens.reserve(ex.tokens.size() + prefix.size());
  out.tokens.push_back(ex.tokens.front());
  out.tokens.insert(out.tokens.end(), prefix.begin(), prefix.end());
  out.tokens.insert(out.tokens.end(), ex.tokens.begin() + 1, ex.tokens.end());
  out.targets = ex.targets;
  for (auto& t : out.targets) {
    if (t.position >= 1) t.position += prefix.size();
  }
  return out;
}

}  // namespace detail

// Adam on the mean target cross-entropy. Deterministic for a fixed seed.
inline TrainingCurve pretrain(ToyModel& model, std::span<const TrainingExample> corpus,
                              const PretrainOptions& opt) {
  TrainingCurve curve;
  if (opt.steps == 0) return curve;
  if (corpus.empty()) throw TrainingError("pretraining corpus is empty", 0);

  std::mt19937_64 rng(opt.seed);
  Parameters m1 = model.params.zeros_like();
  Parameters m2 = m1;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t step = 0; step < opt.steps; ++step) {
    Parameters grad = model.params.zeros_like();
    double total = 0.0;
    std::size_t n_targets = 0;
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TrainingExample* ex = &corpus[order[cursor++]];
      TrainingExample augmented;
      if (opt.prefix_prob > 0.0 && !opt.prefix_pool.empty() && opt.max_prefix_len > 0 &&
          unit(rng) < opt.prefix_prob) {
        std::uniform_int_distribution<std::size_t> len_dist(1, opt.max_prefix_len);
        std::uniform_int_distribution<std::size_t> tok_dist(0, opt.prefix_pool.size() - 1);
        TokenSeq prefix(len_dist(rng));
        for (Token& t : prefix) t = opt.prefix_pool[tok_dist(rng)];
        if (ex->tokens.size() + prefix.size() <= model.config.max_seq_len) {
          augmented = detail::with_prefix(*ex, prefix);
          ex = &augmented;
        }
      }
      try {
        total += accumulate_gradients(model, ex->tokens, ex->targets, grad);
      } catch (const NumericError& e) {
        throw TrainingError("pretraining diverged at step " + std::to_string(step) + ": " +
                                e.what(),
                            step);
      }
      n_targets += ex->targets.size();
    }
    const double denom = static_cast<double>(std::max<std::size_t>(n_targets, 1));
    const double mean_loss = total / denom;
    if (!std::isfinite(mean_loss)) {
      throw TrainingError("pretraining diverged at step " + std::to_string(step), step);
    }
    curve.loss.push_back(mean_loss);

    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    std::vector<Matrix*> params, g1, g2, gg;
    model.params.visit([&](const std::string&, Matrix& m) { params.push_back(&m); });
    m1.visit([&](const std::string&, Matrix& m) { g1.push_back(&m); });
    m2.visit([&](const std::string&, Matrix& m) { g2.push_back(&m); });
    grad.visit([&](const std::string&, Matrix& m) { gg.push_back(&m); });
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p]->data();
      auto& a = g1[p]->data();
      auto& b = g2[p]->data();
      const auto& g = gg[p]->data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] / denom;
        a[i] = opt.beta1 * a[i] + (1.0 - opt.beta1) * gi;
        b[i] = opt.beta2 * b[i] + (1.0 - opt.beta2) * gi * gi;
        w[i] -= opt.lr * (a[i] / c1) / (std::sqrt(b[i] / c2) + opt.adam_eps);
      }
    }
    if (!model.params.all_finite()) {
      throw TrainingError("non-finite parameters after step " + std::to_string(step), step);
    }
  }
  return curve;
}

}  // namespace d4s
