#pragma once

#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "condlora/linalg.hpp"
#include "condlora/matrix.hpp"
#include "condlora/matrix_io.hpp"
#include "condlora/rng.hpp"

namespace condlora {

/// Attention projections an adapter may target.
enum class Module : int { query = 0, key = 1, value = 2, output = 3 };

inline constexpr std::array<Module, 4> kAllModules{Module::query, Module::key, Module::value,
                                                   Module::output};

inline std::string to_string(Module m) {
  switch (m) {
  case Module::query: return "query";
  case Module::key: return "key";
  case Module::value: return "value";
  case Module::output: return "output";
  }
  return "?";
}

inline Module parse_module(const std::string& s) {
  for (Module m : kAllModules)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown module '" + s + "' (expected query|key|value|output)");
}

/// One adapted projection: module m in layer l (1-based).
struct Target {
  Module module;
  int layer;
  auto operator<=>(const Target&) const = default;
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 32;
  int n_heads = 4;
  int d_ff = 64;
  int vocab_size = 64;
  int max_len = 32;
  int n_outputs = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
        max_len < 1 || n_outputs < 1)
      throw ConfigError("model: all dimensions must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }

  /// `key=value` pairs, as echoed on a checkpoint's CONFIG line.
  std::string to_line() const {
    std::ostringstream os;
    os << "n_layers=" << n_layers << " d_model=" << d_model << " n_heads=" << n_heads
       << " d_ff=" << d_ff << " vocab_size=" << vocab_size << " max_len=" << max_len
       << " n_outputs=" << n_outputs << " seed=" << seed;
    return os.str();
  }

  static ModelConfig from_line(const std::string& line) {
    ModelConfig c;
    std::istringstream is(line);
    std::string kv;
    while (is >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ParseError("CONFIG: bad field '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      try {
        if (key == "seed") {
          c.seed = std::stoull(val);
          continue;
        }
        const int v = std::stoi(val);
        if (key == "n_layers") c.n_layers = v;
        else if (key == "d_model") c.d_model = v;
        else if (key == "n_heads") c.n_heads = v;
        else if (key == "d_ff") c.d_ff = v;
        else if (key == "vocab_size") c.vocab_size = v;
        else if (key == "max_len") c.max_len = v;
        else if (key == "n_outputs") c.n_outputs = v;
        else throw ParseError("CONFIG: unknown field '" + key + "'");
      } catch (const std::logic_error&) {
        throw ParseError("CONFIG: bad value in '" + kv + "'");
      }
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Frozen weights of one post-LN encoder block. Projections are stored
/// (out x in) and applied as y = x W^T; the FFN maps are applied as x W.
struct LayerWeights {
  std::array<Matrix, 4> projections;  // indexed by Module
  Matrix ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
  Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  const Matrix& projection(Module m) const { return projections[static_cast<int>(m)]; }
  Matrix& projection(Module m) { return projections[static_cast<int>(m)]; }

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct BaseWeights {
  ModelConfig config;
  std::vector<LayerWeights> layers;
  Matrix token_embed;  // vocab x d
  Matrix pos_embed;    // max_len x d
  Matrix head;         // d x n_outputs

  /// 1-based layer access.
  const LayerWeights& layer(int l) const { return layers.at(static_cast<std::size_t>(l - 1)); }
  LayerWeights& layer(int l) { return layers.at(static_cast<std::size_t>(l - 1)); }
  const Matrix& projection(Target t) const { return layer(t.layer).projection(t.module); }

  friend bool operator==(const BaseWeights&, const BaseWeights&) = default;
};

/// Projections whose condition estimate exceeds this are redrawn at build time.
constexpr double kMaxBaseCondition = 1e6;

inline BaseWeights build_model(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  std::uint64_t stream = 0;
  auto next_seed = [&] { return derive_seed(config.seed, stream++); };

  BaseWeights w;
  w.config = config;
  w.token_embed = gaussian(static_cast<std::size_t>(config.vocab_size), d, 0.0, 1.0, next_seed());
  w.pos_embed = gaussian(static_cast<std::size_t>(config.max_len), d, 0.0, 0.1, next_seed());
  w.head = gaussian(d, static_cast<std::size_t>(config.n_outputs), 0.0, proj_std, next_seed());
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    for (Module m : kAllModules) {
      Matrix p = gaussian(d, d, 0.0, proj_std, next_seed());
      while (condition_estimate(p) >= kMaxBaseCondition) p = gaussian(d, d, 0.0, proj_std, next_seed());
      lw.projection(m) = std::move(p);
    }
    lw.ffn_in = gaussian(d, ff, 0.0, proj_std, next_seed());
    lw.ffn_out = gaussian(ff, d, 0.0, 1.0 / std::sqrt(static_cast<double>(ff)), next_seed());
    lw.ffn_in_bias = Matrix(1, ff);
    lw.ffn_out_bias = Matrix(1, d);
    lw.ln1_gain = Matrix(1, d, 1.0);
    lw.ln1_bias = Matrix(1, d);
    lw.ln2_gain = Matrix(1, d, 1.0);
    lw.ln2_bias = Matrix(1, d);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

/// Row-major batch of equal-length token sequences.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::uint32_t> ids;

  std::span<const std::uint32_t> sequence(std::size_t b) const {
    return {ids.data() + b * len, len};
  }
};

/// Additive deltas keyed by target; absent targets use the frozen projection.
using DeltaSet = std::map<Target, Matrix>;

namespace detail {

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                         LayerNormCache& cache) {
  const std::size_t n = x.cols();
  Matrix y(x.rows(), n);
  cache.xhat = Matrix(x.rows(), n);
  cache.rstd.assign(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (double v : x.row(i)) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x.row(i)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x(i, j) - mean) * rstd;
      cache.xhat(i, j) = xh;
      y(i, j) = gain(0, j) * xh + bias(0, j);
    }
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain,
                                  const LayerNormCache& cache) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dxhat[j] = dy(i, j) * gain(0, j);
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * cache.xhat(i, j);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

inline void add_row_bias(Matrix& x, const Matrix& bias) {
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += bias(0, j);
}

struct LayerCache {
  Matrix x_in, q, k, v;
  std::vector<Matrix> probs;  // per head, len x len
  Matrix ctx;
  LayerNormCache ln1;
  Matrix h1, f_pre, f_act;
  LayerNormCache ln2;
  Matrix out;
};

struct SequenceCache {
  std::vector<LayerCache> layers;
};

} // namespace detail

/// Full forward state kept for backpropagation.
struct ForwardTrace {
  Matrix logits;  // batch x n_outputs
  std::vector<std::array<Matrix, 4>> projections;  // effective W0 + delta, per layer
  std::vector<detail::SequenceCache> sequences;
};

inline void validate_tokens(const ModelConfig& c, const TokenBatch& tokens) {
  if (tokens.batch == 0 || tokens.len == 0) throw ShapeError("forward: empty token batch");
  if (tokens.ids.size() != tokens.batch * tokens.len)
    throw ShapeError("forward: token buffer length does not match batch x len");
  if (tokens.len > static_cast<std::size_t>(c.max_len))
    throw ShapeError("forward: sequence length " + std::to_string(tokens.len) +
                     " exceeds max_len " + std::to_string(c.max_len));
  for (auto id : tokens.ids)
    if (id >= static_cast<std::uint32_t>(c.vocab_size))
      throw ShapeError("forward: token id " + std::to_string(id) + " out of range for vocab " +
                       std::to_string(c.vocab_size));
}

inline ForwardTrace forward_trace(const BaseWeights& w, const DeltaSet* deltas,
                                  const TokenBatch& tokens) {
  const ModelConfig& c = w.config;
  validate_tokens(c, tokens);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t T = tokens.len;

  ForwardTrace tr;
  tr.projections.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    for (Module m : kAllModules) {
      const Matrix& base = w.layers[l].projection(m);
      const Target t{m, static_cast<int>(l + 1)};
      const Matrix* delta = nullptr;
      if (deltas) {
        auto it = deltas->find(t);
        if (it != deltas->end()) delta = &it->second;
      }
      tr.projections[l][static_cast<int>(m)] = delta ? add(base, *delta) : base;
    }
  }
  tr.logits = Matrix(tokens.batch, static_cast<std::size_t>(c.n_outputs));
  tr.sequences.resize(tokens.batch);

  for (std::size_t b = 0; b < tokens.batch; ++b) {
    auto seq = tokens.sequence(b);
    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) x(t, j) = w.token_embed(seq[t], j) + w.pos_embed(t, j);

    auto& sc = tr.sequences[b];
    sc.layers.resize(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      const LayerWeights& lw = w.layers[l];
      const auto& proj = tr.projections[l];
      auto& lc = sc.layers[l];
      lc.x_in = x;
      lc.q = matmul_nt(x, proj[0]);
      lc.k = matmul_nt(x, proj[1]);
      lc.v = matmul_nt(x, proj[2]);
      lc.ctx = Matrix(T, d);
      lc.probs.assign(heads, Matrix(T, T));
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Matrix& p = lc.probs[h];
        for (std::size_t i = 0; i < T; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < T; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += lc.q(i, off + e) * lc.k(j, off + e);
            p(i, j) = s * inv_sqrt_dh;
            mx = std::max(mx, p(i, j));
          }
          double z = 0.0;
          for (std::size_t j = 0; j < T; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            z += p(i, j);
          }
          for (std::size_t j = 0; j < T; ++j) p(i, j) /= z;
          for (std::size_t j = 0; j < T; ++j) {
            const double pij = p(i, j);
            for (std::size_t e = 0; e < dh; ++e) lc.ctx(i, off + e) += pij * lc.v(j, off + e);
          }
        }
      }
      Matrix r1 = add(x, matmul_nt(lc.ctx, proj[3]));
      lc.h1 = detail::layer_norm(r1, lw.ln1_gain, lw.ln1_bias, lc.ln1);
      lc.f_pre = matmul(lc.h1, lw.ffn_in);
      detail::add_row_bias(lc.f_pre, lw.ffn_in_bias);
      lc.f_act = lc.f_pre;
      for (double& v : lc.f_act.data()) v = detail::gelu(v);
      Matrix f_out = matmul(lc.f_act, lw.ffn_out);
      detail::add_row_bias(f_out, lw.ffn_out_bias);
      lc.out = detail::layer_norm(add(lc.h1, f_out), lw.ln2_gain, lw.ln2_bias, lc.ln2);
      x = lc.out;
    }

    // Mean pool then linear head.
    for (std::size_t o = 0; o < static_cast<std::size_t>(c.n_outputs); ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double pooled = 0.0;
        for (std::size_t t = 0; t < T; ++t) pooled += x(t, j);
        s += (pooled / static_cast<double>(T)) * w.head(j, o);
      }
      tr.logits(b, o) = s;
    }
  }
  return tr;
}

struct ForwardResult {
  Matrix logits;
  /// hidden[l][b] is the len x d_model output of layer l+1 for sequence b.
  std::vector<std::vector<Matrix>> hidden;
};

inline ForwardResult forward(const BaseWeights& w, const DeltaSet* deltas,
                             const TokenBatch& tokens) {
  ForwardTrace tr = forward_trace(w, deltas, tokens);
  ForwardResult r;
  r.logits = std::move(tr.logits);
  r.hidden.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l)
    for (auto& seq : tr.sequences) r.hidden[l].push_back(std::move(seq.layers[l].out));
  return r;
}

/// Backpropagates dL/dlogits to dL/dW_eff for each requested projection.
/// The frozen weights themselves are never updated; their gradients are
/// only formed where a caller asks for them.
inline std::map<Target, Matrix> projection_gradients(const BaseWeights& w,
                                                     const ForwardTrace& tr,
                                                     const Matrix& dlogits,
                                                     const std::vector<Target>& wanted) {
  const ModelConfig& c = w.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto n_layers = w.layers.size();

  std::map<Target, Matrix> grads;
  int min_layer = static_cast<int>(n_layers) + 1;
  for (const Target& t : wanted) {
    grads.emplace(t, Matrix(d, d));
    min_layer = std::min(min_layer, t.layer);
  }
  if (wanted.empty()) return grads;
  auto want = [&](Module m, std::size_t l) -> Matrix* {
    auto it = grads.find(Target{m, static_cast<int>(l + 1)});
    return it == grads.end() ? nullptr : &it->second;
  };

  for (std::size_t b = 0; b < tr.sequences.size(); ++b) {
    const auto& sc = tr.sequences[b];
    const std::size_t T = sc.layers.front().out.rows();
    Matrix dx(T, d);
    for (std::size_t j = 0; j < d; ++j) {
      double g = 0.0;
      for (std::size_t o = 0; o < static_cast<std::size_t>(c.n_outputs); ++o)
        g += dlogits(b, o) * w.head(j, o);
      g /= static_cast<double>(T);
      for (std::size_t t = 0; t < T; ++t) dx(t, j) = g;
    }

    for (std::size_t l = n_layers; l-- > static_cast<std::size_t>(min_layer - 1);) {
      const LayerWeights& lw = w.layers[l];
      const auto& proj = tr.projections[l];
      const auto& lc = sc.layers[l];

      Matrix dr2 = detail::layer_norm_backward(dx, lw.ln2_gain, lc.ln2);
      Matrix df_act = matmul_nt(dr2, lw.ffn_out);
      for (std::size_t i = 0; i < df_act.size(); ++i)
        df_act.data()[i] *= detail::gelu_grad(lc.f_pre.data()[i]);
      Matrix dh1 = add(dr2, matmul_nt(df_act, lw.ffn_in));
      Matrix dr1 = detail::layer_norm_backward(dh1, lw.ln1_gain, lc.ln1);

      // r1 = x + ctx Wo^T
      if (Matrix* g = want(Module::output, l)) accumulate(*g, matmul_tn(dr1, lc.ctx));
      Matrix dctx = matmul(dr1, proj[3]);

      Matrix dq(T, d), dk(T, d), dv(T, d);
      std::vector<double> dp(T);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix& p = lc.probs[h];
        for (std::size_t i = 0; i < T; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < T; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += dctx(i, off + e) * lc.v(j, off + e);
            dp[j] = s;
            dot += s * p(i, j);
            for (std::size_t e = 0; e < dh; ++e) dv(j, off + e) += p(i, j) * dctx(i, off + e);
          }
          for (std::size_t j = 0; j < T; ++j) {
            const double ds = p(i, j) * (dp[j] - dot) * inv_sqrt_dh;
            if (ds == 0.0) continue;
            for (std::size_t e = 0; e < dh; ++e) {
              dq(i, off + e) += ds * lc.k(j, off + e);
              dk(j, off + e) += ds * lc.q(i, off + e);
            }
          }
        }
      }
      if (Matrix* g = want(Module::query, l)) accumulate(*g, matmul_tn(dq, lc.x_in));
      if (Matrix* g = want(Module::key, l)) accumulate(*g, matmul_tn(dk, lc.x_in));
      if (Matrix* g = want(Module::value, l)) accumulate(*g, matmul_tn(dv, lc.x_in));

      if (l == static_cast<std::size_t>(min_layer - 1)) break;
      dx = dr1;
      accumulate(dx, matmul(dq, proj[0]));
      accumulate(dx, matmul(dk, proj[1]));
      accumulate(dx, matmul(dv, proj[2]));
    }
  }
  return grads;
}

inline std::string block_name(Target t) {
  return "layer" + std::to_string(t.layer) + "." + to_string(t.module);
}

inline MatrixBundle to_bundle(const BaseWeights& w) {
  MatrixBundle b;
  b.headers["CONFIG"] = w.config.to_line();
  b.put("embed.token", w.token_embed);
  b.put("embed.pos", w.pos_embed);
  b.put("head.out", w.head);
  for (int l = 1; l <= w.config.n_layers; ++l) {
    const auto& lw = w.layer(l);
    const std::string p = "layer" + std::to_string(l) + ".";
    for (Module m : kAllModules) b.put(block_name({m, l}), lw.projection(m));
    b.put(p + "ffn.in", lw.ffn_in);
    b.put(p + "ffn.in_bias", lw.ffn_in_bias);
    b.put(p + "ffn.out", lw.ffn_out);
    b.put(p + "ffn.out_bias", lw.ffn_out_bias);
    b.put(p + "ln1.gain", lw.ln1_gain);
    b.put(p + "ln1.bias", lw.ln1_bias);
    b.put(p + "ln2.gain", lw.ln2_gain);
    b.put(p + "ln2.bias", lw.ln2_bias);
  }
  return b;
}

inline BaseWeights from_bundle(const MatrixBundle& b) {
  auto it = b.headers.find("CONFIG");
  if (it == b.headers.end()) throw ParseError("model checkpoint: missing CONFIG line");
  BaseWeights w;
  w.config = ModelConfig::from_line(it->second);
  const auto& c = w.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  auto fetch = [&](const std::string& name, std::size_t r, std::size_t cc) {
    const Matrix& m = b.at(name);
    if (m.rows() != r || m.cols() != cc)
      throw ParseError("block '" + name + "' has shape " + m.shape() + ", expected " +
                       Matrix::shape_string(r, cc));
    return m;
  };
  w.token_embed = fetch("embed.token", static_cast<std::size_t>(c.vocab_size), d);
  w.pos_embed = fetch("embed.pos", static_cast<std::size_t>(c.max_len), d);
  w.head = fetch("head.out", d, static_cast<std::size_t>(c.n_outputs));
  for (int l = 1; l <= c.n_layers; ++l) {
    LayerWeights lw;
    const std::string p = "layer" + std::to_string(l) + ".";
    for (Module m : kAllModules) lw.projection(m) = fetch(block_name({m, l}), d, d);
    lw.ffn_in = fetch(p + "ffn.in", d, ff);
    lw.ffn_in_bias = fetch(p + "ffn.in_bias", 1, ff);
    lw.ffn_out = fetch(p + "ffn.out", ff, d);
    lw.ffn_out_bias = fetch(p + "ffn.out_bias", 1, d);
    lw.ln1_gain = fetch(p + "ln1.gain", 1, d);
    lw.ln1_bias = fetch(p + "ln1.bias", 1, d);
    lw.ln2_gain = fetch(p + "ln2.gain", 1, d);
    lw.ln2_bias = fetch(p + "ln2.bias", 1, d);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

} // namespace condlora
