#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "condlora/adapters.hpp"
#include "condlora/model.hpp"
#include "condlora/task.hpp"

namespace condlora {

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 5e-3;
  std::int64_t max_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;          // data stream
  std::size_t eval_batches = 4;    // held-out batches for initial/final loss
  std::optional<std::filesystem::path> checkpoint;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
    if (eval_batches < 1) throw ConfigError("train: eval_batches must be >= 1");
  }
};

struct TrainReport {
  std::vector<double> losses;  // training-batch loss at each executed step
  double initial_loss = 0.0;   // held-out loss before the first update
  double final_loss = 0.0;     // held-out loss after the last update
  double examples_per_second = 0.0;
  std::int64_t trainable_params = 0;
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;

  /// `step,loss` rows (row 0 is the held-out initial loss) plus a footer line.
  void write_csv(std::ostream& os) const {
    os << "step,loss\n";
    os << 0 << ',' << format_double(initial_loss) << '\n';
    for (std::size_t i = 0; i < losses.size(); ++i)
      os << i + 1 << ',' << format_double(losses[i]) << '\n';
    os << "final_loss=" << format_double(final_loss)
       << " examples_per_second=" << format_double(examples_per_second)
       << " params=" << trainable_params << " seconds=" << format_double(wall_clock_seconds)
       << '\n';
  }
};

/// Loss and dL/dlogits for a batch.
inline std::pair<double, Matrix> loss_and_dlogits(const Matrix& logits, const Batch& batch,
                                                  LossKind kind) {
  Matrix d(logits.rows(), logits.cols());
  double loss = 0.0;
  if (kind == LossKind::mse) {
    require_same_shape(logits, batch.targets, "mse loss");
    const double n = static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double r = logits.data()[i] - batch.targets.data()[i];
      loss += r * r;
      d.data()[i] = 2.0 * r / n;
    }
    loss /= n;
  } else {
    if (batch.labels.size() != logits.rows())
      throw ShapeError("cross entropy: label count does not match batch");
    const double n = static_cast<double>(logits.rows());
    for (std::size_t b = 0; b < logits.rows(); ++b) {
      const int label = batch.labels[b];
      if (label < 0 || static_cast<std::size_t>(label) >= logits.cols())
        throw ShapeError("cross entropy: label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (double v : logits.row(b)) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : logits.row(b)) z += std::exp(v - mx);
      const double log_z = mx + std::log(z);
      loss -= logits(b, static_cast<std::size_t>(label)) - log_z;
      for (std::size_t o = 0; o < logits.cols(); ++o) {
        const double p = std::exp(logits(b, o) - log_z);
        d(b, o) = (p - (static_cast<int>(o) == label ? 1.0 : 0.0)) / n;
      }
    }
    loss /= n;
  }
  return {loss, std::move(d)};
}

inline double batch_loss(const BaseWeights& w, const Adapter& ad, const Batch& batch,
                         LossKind kind) {
  return loss_and_dlogits(forward(w, ad, batch.tokens).logits, batch, kind).first;
}

struct LossAndGrads {
  double loss = 0.0;
  AdapterParams grads;
};

/// Chains dL/dW_eff for one target into the adapter factors.
/// With dW = s B A: dL/dA = s B^T G and dL/dB = s G A^T.
inline LoraPair factor_gradients(const LoraPair& f, const Matrix& g, double s) {
  return {scale(matmul_tn(f.b, g), s), scale(matmul_nt(g, f.a), s)};
}

/// Gradient of one CondLoRA target's loss contribution with respect to the
/// shared (theta_A, theta_B), given G = dL/dW_eff at that target.
inline CondPair cond_contribution(const Matrix& w0, const CondPair& theta, const Matrix& g,
                                  double s) {
  const LoraPair f{cond_A(w0, theta.theta_a), cond_B(w0, theta.theta_b)};
  const LoraPair df = factor_gradients(f, g, s);
  // A^T = W0 theta_A  =>  dtheta_A = W0^T (dA)^T;  B = W0^T theta_B  =>  dtheta_B = W0 dB.
  return {matmul_tn(w0, transpose(df.a)), matmul(w0, df.b)};
}

inline LossAndGrads loss_and_grads(const BaseWeights& w, const Adapter& ad, const Batch& batch,
                                   LossKind kind) {
  if (batch.tokens.batch == 0) throw ShapeError("loss_and_grads: empty batch");
  const DeltaSet deltas = materialize(ad, w);
  const ForwardTrace tr = forward_trace(w, &deltas, batch.tokens);
  auto [loss, dlogits] = loss_and_dlogits(tr.logits, batch, kind);
  if (!std::isfinite(loss)) throw NumericError("loss_and_grads: non-finite loss");

  const auto targets = ad.spec.targets();
  const auto g = projection_gradients(w, tr, dlogits, targets);
  const double s = ad.spec.scaling();

  LossAndGrads out{loss, zeros_like(ad.params)};
  if (const auto* lp = std::get_if<LoraParams>(&ad.params)) {
    auto& gp = std::get<LoraParams>(out.grads);
    for (const auto& [t, pair] : lp->pairs) gp.pairs[t] = factor_gradients(pair, g.at(t), s);
  } else {
    const auto& cp = std::get<CondLoraParams>(ad.params);
    auto& gp = std::get<CondLoraParams>(out.grads);
    for (Target t : targets) {
      const CondPair c = cond_contribution(w.projection(t), cp.pairs.at(t.module), g.at(t), s);
      accumulate(gp.pairs[t.module].theta_a, c.theta_a);
      accumulate(gp.pairs[t.module].theta_b, c.theta_b);
    }
  }
  return out;
}

struct AdamState {
  AdapterParams m;
  AdapterParams v;
};

inline AdamState adam_init(const AdapterParams& params) {
  return {zeros_like(params), zeros_like(params)};
}

/// Learning rate after linear decay to zero; `step` counts completed updates.
inline double scheduled_rate(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.max_steps <= 0) return 0.0;
  return cfg.learning_rate *
         std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(cfg.max_steps));
}

/// One bias-corrected Adam update. `step` is 0-based.
inline void adam_step(AdapterParams& params, const AdapterParams& grads, AdamState& state,
                      std::int64_t step, const TrainConfig& cfg) {
  const double lr = scheduled_rate(cfg, step);
  const double t = static_cast<double>(step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto p = named_tensors(params);
  auto g = named_tensors(grads);
  auto m = named_tensors(state.m);
  auto v = named_tensors(state.v);
  if (p.size() != g.size() || p.size() != m.size())
    throw ShapeError("adam_step: parameter and gradient sets differ");
  for (std::size_t k = 0; k < p.size(); ++k) {
    require_same_shape(*p[k].second, *g[k].second, "adam_step");
    auto pd = p[k].second->data();
    auto gd = g[k].second->data();
    auto md = m[k].second->data();
    auto vd = v[k].second->data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
      vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double mhat = md[i] / c1;
      const double vhat = vd[i] / c2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

inline double eval_loss(const BaseWeights& w, const Adapter& ad, const Task& task,
                        const TrainConfig& cfg) {
  double total = 0.0;
  for (std::size_t i = 0; i < cfg.eval_batches; ++i)
    total += batch_loss(w, ad, task.eval_batch(i, cfg.batch_size), task.loss_kind());
  return total / static_cast<double>(cfg.eval_batches);
}

inline void write_adapter_checkpoint(const std::filesystem::path& path, const Adapter& ad) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_bundle(os, to_bundle(ad));
}

/// Trains `init` against `task`; the base weights are only read.
inline std::pair<Adapter, TrainReport> train_run(const BaseWeights& w, const Adapter& init,
                                                 const Task& task, const TrainConfig& cfg) {
  cfg.validate();
  init.spec.validate(w.config);
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();

  Adapter ad = init;
  TrainReport rep;
  rep.seed = cfg.seed;
  rep.trainable_params = count_trainable(ad.spec, dims_of(w.config));
  rep.initial_loss = eval_loss(w, ad, task, cfg);
  if (!std::isfinite(rep.initial_loss)) throw NumericError("train: non-finite initial loss");

  AdamState state = adam_init(ad.params);
  const auto t_train = clock::now();
  for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
    const Batch batch = task.train_batch(static_cast<std::uint64_t>(step), cfg.batch_size);
    LossAndGrads lg;
    try {
      lg = loss_and_grads(w, ad, batch, task.loss_kind());
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    rep.losses.push_back(lg.loss);
    adam_step(ad.params, lg.grads, state, step, cfg);
  }
  const double train_seconds = std::chrono::duration<double>(clock::now() - t_train).count();

  const auto t_eval = clock::now();
  rep.final_loss = eval_loss(w, ad, task, cfg);
  const double eval_seconds = std::chrono::duration<double>(clock::now() - t_eval).count();
  if (!std::isfinite(rep.final_loss)) throw NumericError("train: non-finite final loss");

  // Without updates there is no training throughput; report evaluation throughput instead.
  const double examples =
      cfg.max_steps > 0
          ? static_cast<double>(cfg.max_steps) * static_cast<double>(cfg.batch_size)
          : static_cast<double>(cfg.eval_batches * cfg.batch_size);
  const double seconds = cfg.max_steps > 0 ? train_seconds : eval_seconds;
  rep.examples_per_second = examples / std::max(seconds, 1e-9);
  rep.wall_clock_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (cfg.checkpoint) write_adapter_checkpoint(*cfg.checkpoint, ad);
  return {std::move(ad), std::move(rep)};
}

/// Examples per second over full training iterations, after 10 warm-up iterations.
inline double bench_throughput(const BaseWeights& w, const Adapter& init, const Task& task,
                               const TrainConfig& cfg, double seconds) {
  if (seconds < 1.0) throw ConfigError("bench: seconds must be >= 1");
  using clock = std::chrono::steady_clock;
  Adapter ad = init;
  AdamState state = adam_init(ad.params);
  TrainConfig run = cfg;
  run.max_steps = std::numeric_limits<std::int64_t>::max();
  std::int64_t step = 0;
  auto iterate = [&] {
    const Batch batch = task.train_batch(static_cast<std::uint64_t>(step), run.batch_size);
    const LossAndGrads lg = loss_and_grads(w, ad, batch, task.loss_kind());
    adam_step(ad.params, lg.grads, state, step, run);
    ++step;
  };
  for (int i = 0; i < 10; ++i) iterate();
  const auto start = clock::now();
  std::int64_t iters = 0;
  double elapsed = 0.0;
  while (elapsed < seconds) {
    iterate();
    ++iters;
    elapsed = std::chrono::duration<double>(clock::now() - start).count();
  }
  return static_cast<double>(iters) * static_cast<double>(run.batch_size) / elapsed;
}

/// Fills every trainable tensor with N(0, std^2) draws so no factor is zero.
inline void randomize(Adapter& ad, std::uint64_t seed, double std) {
  std::uint64_t stream = 0;
  for (auto& [name, m] : named_tensors(ad.params))
    *m = gaussian(m->rows(), m->cols(), 0.0, std, derive_seed(seed, stream++));
}

struct TensorCheck {
  std::string name;
  double max_relative_error = 0.0;
};

/// Compares analytic gradients with central differences, per trainable tensor.
/// Error is max |analytic - numeric| over the tensor, divided by the larger
/// of the two gradients' max magnitudes.
inline std::vector<TensorCheck> gradcheck(const BaseWeights& w, const Adapter& ad,
                                          const Batch& batch, LossKind kind,
                                          double eps = 1e-5, double perturb = 0.0) {
  LossAndGrads lg = loss_and_grads(w, ad, batch, kind);
  if (perturb != 0.0) {
    auto g = named_tensors(lg.grads);
    if (!g.empty()) {
      Matrix& first = *g.front().second;
      first.data()[0] += perturb * std::max(max_abs(first), 1e-6);
    }
  }
  Adapter probe = ad;
  auto probe_tensors = named_tensors(probe.params);
  auto grad_tensors = named_tensors(lg.grads);
  std::vector<TensorCheck> out;
  for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
    Matrix& p = *probe_tensors[k].second;
    const Matrix& g = *grad_tensors[k].second;
    double max_diff = 0.0;
    double max_mag = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double up = batch_loss(w, probe, batch, kind);
      p.data()[i] = orig - eps;
      const double down = batch_loss(w, probe, batch, kind);
      p.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      max_diff = std::max(max_diff, std::abs(numeric - g.data()[i]));
      max_mag = std::max({max_mag, std::abs(numeric), std::abs(g.data()[i])});
    }
    out.push_back({probe_tensors[k].first, max_mag > 0.0 ? max_diff / max_mag : max_diff});
  }
  return out;
}

} // namespace condlora
