#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "condlora/matrix.hpp"
#include "condlora/matrix_io.hpp"
#include "condlora/model.hpp"
#include "condlora/rng.hpp"

namespace condlora {

enum class Method { lora, condlora };

inline std::string to_string(Method m) { return m == Method::lora ? "lora" : "condlora"; }

inline Method parse_method(const std::string& s) {
  if (s == "lora") return Method::lora;
  if (s == "condlora") return Method::condlora;
  throw ConfigError("unknown method '" + s + "' (expected lora|condlora)");
}

/// Projection shape seen by the adapters: W0 is d1 x d2.
struct Dims {
  std::size_t d1 = 0;
  std::size_t d2 = 0;
};

inline Dims dims_of(const ModelConfig& c) {
  return {static_cast<std::size_t>(c.d_model), static_cast<std::size_t>(c.d_model)};
}

struct AdapterSpec {
  Method method = Method::lora;
  int rank = 8;
  double alpha = 8.0;
  std::vector<Module> modules{Module::query, Module::value};
  std::vector<int> layers;  // 1-based; empty until bound to a model, see with_all_layers

  std::size_t k() const noexcept { return modules.size(); }
  double scaling() const noexcept { return alpha / static_cast<double>(rank); }

  /// Targets in (module, layer) order.
  std::vector<Target> targets() const {
    std::vector<Target> out;
    for (Module m : modules)
      for (int l : layers) out.push_back({m, l});
    return out;
  }

  bool targets_contain(Target t) const {
    return std::find(modules.begin(), modules.end(), t.module) != modules.end() &&
           std::find(layers.begin(), layers.end(), t.layer) != layers.end();
  }

  AdapterSpec& with_all_layers(int n_layers) {
    layers.clear();
    for (int l = 1; l <= n_layers; ++l) layers.push_back(l);
    return *this;
  }

  void normalize() {
    std::sort(modules.begin(), modules.end());
    modules.erase(std::unique(modules.begin(), modules.end()), modules.end());
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  }

  void validate(const ModelConfig& c) const {
    if (rank < 1) throw ConfigError("adapter: rank must be >= 1");
    if (rank > c.d_model)
      throw ConfigError("adapter: rank " + std::to_string(rank) + " exceeds d_model " +
                        std::to_string(c.d_model));
    if (!(alpha > 0.0)) throw ConfigError("adapter: alpha must be positive");
    if (modules.empty()) throw ConfigError("adapter: target_modules must be non-empty");
    if (layers.empty()) throw ConfigError("adapter: target_layers must be non-empty");
    for (int l : layers)
      if (l < 1 || l > c.n_layers)
        throw ConfigError("adapter: target layer " + std::to_string(l) + " outside 1.." +
                          std::to_string(c.n_layers));
  }

  std::string to_line() const {
    std::ostringstream os;
    os << "method=" << to_string(method) << " r=" << rank << " alpha=" << format_double(alpha)
       << " modules=";
    for (std::size_t i = 0; i < modules.size(); ++i) os << (i ? "," : "") << to_string(modules[i]);
    os << " layers=";
    for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
    return os.str();
  }

  static AdapterSpec from_line(const std::string& line) {
    AdapterSpec s;
    std::istringstream is(line);
    std::string kv;
    auto split = [](const std::string& v) {
      std::vector<std::string> parts;
      std::stringstream ss(v);
      std::string p;
      while (std::getline(ss, p, ','))
        if (!p.empty()) parts.push_back(p);
      return parts;
    };
    while (is >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ParseError("SPEC: bad field '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      try {
        if (key == "method") s.method = parse_method(val);
        else if (key == "r") s.rank = std::stoi(val);
        else if (key == "alpha") s.alpha = parse_double(val);
        else if (key == "modules") {
          s.modules.clear();
          for (const auto& p : split(val)) s.modules.push_back(parse_module(p));
        } else if (key == "layers") {
          s.layers.clear();
          for (const auto& p : split(val)) s.layers.push_back(std::stoi(p));
        } else throw ParseError("SPEC: unknown field '" + key + "'");
      } catch (const std::logic_error&) {
        throw ParseError("SPEC: bad value in '" + kv + "'");
      }
    }
    return s;
  }

  friend bool operator==(const AdapterSpec&, const AdapterSpec&) = default;
};

struct LoraPair {
  Matrix a;  // r x d1
  Matrix b;  // d2 x r
  friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

struct LoraParams {
  std::map<Target, LoraPair> pairs;
  friend bool operator==(const LoraParams&, const LoraParams&) = default;
};

struct CondPair {
  Matrix theta_a;  // d2 x r
  Matrix theta_b;  // d1 x r
  friend bool operator==(const CondPair&, const CondPair&) = default;
};

struct CondLoraParams {
  std::map<Module, CondPair> pairs;
  friend bool operator==(const CondLoraParams&, const CondLoraParams&) = default;
};

using AdapterParams = std::variant<LoraParams, CondLoraParams>;

/// A spec together with its trainable tensors.
struct Adapter {
  AdapterSpec spec;
  AdapterParams params;
  friend bool operator==(const Adapter&, const Adapter&) = default;
};

/// Standard deviation of the randomly initialized factor (A, or theta_A).
inline double init_std(const AdapterSpec& spec) { return 1.0 / static_cast<double>(spec.rank); }

inline std::uint64_t target_stream(Target t) {
  return static_cast<std::uint64_t>(static_cast<int>(t.module)) * 1000u +
         static_cast<std::uint64_t>(t.layer);
}

/// A ~ N(0, (1/r)^2), B = 0, so every delta starts at zero.
inline LoraParams init_lora(const AdapterSpec& spec, Dims dims, std::uint64_t seed) {
  const auto r = static_cast<std::size_t>(spec.rank);
  LoraParams p;
  for (Target t : spec.targets())
    p.pairs[t] = {gaussian(r, dims.d1, 0.0, init_std(spec), derive_seed(seed, target_stream(t))),
                  Matrix(dims.d2, r)};
  return p;
}

/// theta_A ~ N(0, (1/r)^2), theta_B = 0; mirrors the LoRA convention.
inline CondLoraParams init_condlora(const AdapterSpec& spec, Dims dims, std::uint64_t seed) {
  const auto r = static_cast<std::size_t>(spec.rank);
  CondLoraParams p;
  for (Module m : spec.modules)
    p.pairs[m] = {gaussian(dims.d2, r, 0.0, init_std(spec),
                           derive_seed(seed, target_stream({m, 0}))),
                  Matrix(dims.d1, r)};
  return p;
}

inline Adapter init_adapter(const AdapterSpec& spec, Dims dims, std::uint64_t seed) {
  if (spec.method == Method::lora) return {spec, init_lora(spec, dims, seed)};
  return {spec, init_condlora(spec, dims, seed)};
}

/// A_cond = (W0 theta_A)^T, shape r x d1.
inline Matrix cond_A(const Matrix& w0, const Matrix& theta_a) {
  if (w0.cols() != theta_a.rows())
    throw ShapeError("cond_A: W0 " + w0.shape() + " incompatible with theta_A " + theta_a.shape());
  return transpose(matmul(w0, theta_a));
}

/// B_cond = W0^T theta_B, shape d2 x r.
inline Matrix cond_B(const Matrix& w0, const Matrix& theta_b) {
  if (w0.rows() != theta_b.rows())
    throw ShapeError("cond_B: W0 " + w0.shape() + " incompatible with theta_B " + theta_b.shape());
  return matmul(transpose(w0), theta_b);
}

/// The (A, B) factors an adapter applies at target t.
inline LoraPair factors(const Adapter& ad, const Matrix& w0, Target t) {
  if (!ad.spec.targets_contain(t))
    throw ConfigError("not a target: " + block_name(t));
  if (const auto* lp = std::get_if<LoraParams>(&ad.params)) {
    auto it = lp->pairs.find(t);
    if (it == lp->pairs.end()) throw ConfigError("not a target: " + block_name(t));
    return it->second;
  }
  const auto& cp = std::get<CondLoraParams>(ad.params);
  auto it = cp.pairs.find(t.module);
  if (it == cp.pairs.end()) throw ConfigError("not a target: " + block_name(t));
  return {cond_A(w0, it->second.theta_a), cond_B(w0, it->second.theta_b)};
}

/// (alpha / r) * B A for the factors in effect at t.
inline Matrix delta_w(const Adapter& ad, const Matrix& w0, Target t) {
  const LoraPair f = factors(ad, w0, t);
  return scale(matmul(f.b, f.a), ad.spec.scaling());
}

inline DeltaSet materialize(const Adapter& ad, const BaseWeights& w) {
  DeltaSet ds;
  for (Target t : ad.spec.targets()) ds.emplace(t, delta_w(ad, w.projection(t), t));
  return ds;
}

inline ForwardResult forward(const BaseWeights& w, const Adapter& ad, const TokenBatch& tokens) {
  const DeltaSet ds = materialize(ad, w);
  return forward(w, &ds, tokens);
}

/// Base weights with every targeted projection replaced by W0 + delta.
/// Merging the result again adds the delta a second time.
inline BaseWeights merge(const BaseWeights& w, const Adapter& ad) {
  ad.spec.validate(w.config);
  BaseWeights out = w;
  for (const auto& [t, delta] : materialize(ad, w)) {
    Matrix& p = out.layer(t.layer).projection(t.module);
    require_same_shape(p, delta, "merge");
    p = add(p, delta);
  }
  return out;
}

inline std::int64_t count_trainable(const AdapterSpec& spec, Dims dims) {
  const auto per_pair = static_cast<std::int64_t>(dims.d1 * static_cast<std::size_t>(spec.rank) +
                                                  dims.d2 * static_cast<std::size_t>(spec.rank));
  const auto k = static_cast<std::int64_t>(spec.k());
  if (spec.method == Method::condlora) return per_pair * k;
  return per_pair * k * static_cast<std::int64_t>(spec.layers.size());
}

/// Named views of every trainable tensor, in checkpoint order.
inline std::vector<std::pair<std::string, Matrix*>> named_tensors(AdapterParams& params) {
  std::vector<std::pair<std::string, Matrix*>> out;
  if (auto* lp = std::get_if<LoraParams>(&params)) {
    for (auto& [t, pair] : lp->pairs) {
      const std::string p = "lora." + to_string(t.module) + "." + std::to_string(t.layer);
      out.emplace_back(p + ".A", &pair.a);
      out.emplace_back(p + ".B", &pair.b);
    }
  } else {
    for (auto& [m, pair] : std::get<CondLoraParams>(params).pairs) {
      const std::string p = "cond." + to_string(m);
      out.emplace_back(p + ".thetaA", &pair.theta_a);
      out.emplace_back(p + ".thetaB", &pair.theta_b);
    }
  }
  return out;
}

inline std::vector<std::pair<std::string, const Matrix*>> named_tensors(
    const AdapterParams& params) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : named_tensors(const_cast<AdapterParams&>(params)))
    out.emplace_back(name, m);
  return out;
}

inline std::int64_t tensor_entry_count(const AdapterParams& params) {
  std::int64_t n = 0;
  for (const auto& [name, m] : named_tensors(params)) n += static_cast<std::int64_t>(m->size());
  return n;
}

/// Zero-filled tensors with the same structure as `params`.
inline AdapterParams zeros_like(const AdapterParams& params) {
  AdapterParams z = params;
  for (auto& [name, m] : named_tensors(z)) std::fill(m->data().begin(), m->data().end(), 0.0);
  return z;
}

inline MatrixBundle to_bundle(const Adapter& ad) {
  MatrixBundle b;
  b.headers["SPEC"] = ad.spec.to_line();
  for (const auto& [name, m] : named_tensors(ad.params)) b.put(name, *m);
  return b;
}

inline Adapter adapter_from_bundle(const MatrixBundle& b, Dims dims) {
  auto it = b.headers.find("SPEC");
  if (it == b.headers.end()) throw ParseError("adapter checkpoint: missing SPEC line");
  Adapter ad{AdapterSpec::from_line(it->second), LoraParams{}};
  // Build a zero template of the right structure, then fill from the blocks.
  ad.params = ad.spec.method == Method::lora ? AdapterParams{init_lora(ad.spec, dims, 0)}
                                             : AdapterParams{init_condlora(ad.spec, dims, 0)};
  for (auto& [name, m] : named_tensors(ad.params)) {
    const Matrix& src = b.at(name);
    if (src.rows() != m->rows() || src.cols() != m->cols())
      throw ParseError("block '" + name + "' has shape " + src.shape() + ", expected " +
                       m->shape());
    *m = src;
  }
  if (b.blocks.size() != named_tensors(ad.params).size())
    throw ParseError("adapter checkpoint: unexpected extra matrix blocks");
  return ad;
}

} // namespace condlora
