#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "condlora/adapters.hpp"
#include "condlora/model.hpp"
#include "condlora/rng.hpp"

namespace condlora {

enum class LossKind { mse, cross_entropy };

inline std::string to_string(LossKind k) { return k == LossKind::mse ? "mse" : "cross_entropy"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "cross_entropy") return LossKind::cross_entropy;
  throw ConfigError("unknown loss kind '" + s + "' (expected mse|cross_entropy)");
}

struct Batch {
  TokenBatch tokens;
  Matrix targets;            // batch x n_outputs, for mse
  std::vector<int> labels;   // per sequence, for cross_entropy
};

/// Deterministic source of training and evaluation batches.
class Task {
public:
  virtual ~Task() = default;
  virtual LossKind loss_kind() const = 0;
  virtual std::string name() const = 0;
  /// Batch `index` of the training stream; a pure function of (seed, index).
  virtual Batch train_batch(std::uint64_t index, std::size_t batch_size) const = 0;
  /// Held-out batch `index`, disjoint stream from training.
  virtual Batch eval_batch(std::uint64_t index, std::size_t batch_size) const = 0;
};

inline TokenBatch random_tokens(std::size_t batch, std::size_t len, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch tb{batch, len, std::vector<std::uint32_t>(batch * len)};
  for (auto& id : tb.ids) id = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  return tb;
}

constexpr std::uint64_t kEvalStreamOffset = 1ULL << 40;

/// How the teacher's hidden deltas relate across layers.
enum class TeacherKind {
  /// Every layer's factors come from one Gaussian pair per module through
  /// its own W0: A* = (W0 tA)^T, B* = W0^T tB.
  shared,
  /// Independent Gaussian factors per layer.
  independent
};

inline std::string to_string(TeacherKind k) {
  return k == TeacherKind::shared ? "shared" : "independent";
}

inline TeacherKind parse_teacher_kind(const std::string& s) {
  if (s == "shared") return TeacherKind::shared;
  if (s == "independent") return TeacherKind::independent;
  throw ConfigError("unknown teacher kind '" + s + "' (expected shared|independent)");
}

struct TeacherOptions {
  int rank = 4;            // r*
  double delta_scale = -1; // entry std of each hidden delta; negative means 0.5 / sqrt(d)
  TeacherKind kind = TeacherKind::shared;
  std::size_t seq_len = 8;
  std::vector<Module> modules{Module::query, Module::value};
};

/// Regression onto the logits of the base model perturbed by hidden rank-r* deltas.
class TeacherTask final : public Task {
public:
  TeacherTask(const BaseWeights& base, const TeacherOptions& opt, std::uint64_t seed)
      : seed_(seed), opt_(opt), vocab_(base.config.vocab_size) {
    if (opt.rank < 1 || opt.rank > base.config.d_model)
      throw ConfigError("teacher: rank must be in 1..d_model");
    if (opt.seq_len < 1 || opt.seq_len > static_cast<std::size_t>(base.config.max_len))
      throw ConfigError("teacher: seq_len must be in 1..max_len");
    const auto d = static_cast<std::size_t>(base.config.d_model);
    const auto r = static_cast<std::size_t>(opt.rank);
    const double scale =
        opt.delta_scale >= 0.0 ? opt.delta_scale : 0.5 / std::sqrt(static_cast<double>(d));
    // Entry std of a product of two N(0, s^2) factors with inner size r is s^2 sqrt(r).
    const double factor_std = std::sqrt(scale / std::sqrt(static_cast<double>(r)));
    const std::uint64_t tseed = derive_seed(seed, 0x7EAC);
    for (Module m : opt.modules) {
      const Matrix shared_a = gaussian(d, r, 0.0, factor_std, derive_seed(tseed, target_stream({m, 0})));
      const Matrix shared_b = gaussian(d, r, 0.0, factor_std, derive_seed(tseed, target_stream({m, 0}) + 500));
      for (int l = 1; l <= base.config.n_layers; ++l) {
        const Target t{m, l};
        const Matrix& w0 = base.projection(t);
        Matrix a, b;
        if (opt.kind == TeacherKind::shared) {
          a = cond_A(w0, shared_a);
          b = cond_B(w0, shared_b);
        } else {
          a = gaussian(r, d, 0.0, factor_std, derive_seed(tseed, target_stream(t)));
          b = gaussian(d, r, 0.0, factor_std, derive_seed(tseed, target_stream(t) + 500));
        }
        deltas_.emplace(t, matmul(b, a));
      }
    }
    teacher_ = base;
    for (const auto& [t, delta] : deltas_) {
      Matrix& p = teacher_.layer(t.layer).projection(t.module);
      p = add(p, delta);
    }
  }

  LossKind loss_kind() const override { return LossKind::mse; }
  std::string name() const override { return "teacher"; }

  Batch train_batch(std::uint64_t index, std::size_t batch_size) const override {
    return make(derive_seed(seed_, index), batch_size);
  }
  Batch eval_batch(std::uint64_t index, std::size_t batch_size) const override {
    return make(derive_seed(seed_, kEvalStreamOffset + index), batch_size);
  }

  const DeltaSet& hidden_deltas() const { return deltas_; }
  const BaseWeights& teacher_weights() const { return teacher_; }

private:
  Batch make(std::uint64_t s, std::size_t batch_size) const {
    Batch b;
    b.tokens = random_tokens(batch_size, opt_.seq_len, vocab_, s);
    b.targets = forward(teacher_, nullptr, b.tokens).logits;
    return b;
  }

  std::uint64_t seed_;
  TeacherOptions opt_;
  int vocab_;
  DeltaSet deltas_;
  BaseWeights teacher_;
};

constexpr int kParityVocab = 4;

/// Label 1 when the designated token occurs an even number of times, else 0.
class ParityTask final : public Task {
public:
  ParityTask(const ModelConfig& c, std::uint64_t seed, std::size_t seq_len = 8,
             std::uint32_t designated = 0)
      : seed_(seed), seq_len_(seq_len), vocab_(c.vocab_size), designated_(designated) {
    if (c.n_outputs < 2) throw ConfigError("parity: model needs n_outputs >= 2");
    if (seq_len < 1 || seq_len > static_cast<std::size_t>(c.max_len))
      throw ConfigError("parity: seq_len must be in 1..max_len");
    if (designated >= static_cast<std::uint32_t>(std::min(c.vocab_size, kParityVocab)))
      throw ConfigError("parity: designated token outside the sampled vocabulary");
  }

  LossKind loss_kind() const override { return LossKind::cross_entropy; }
  std::string name() const override { return "parity"; }

  Batch train_batch(std::uint64_t index, std::size_t batch_size) const override {
    return make(derive_seed(seed_, index), batch_size);
  }
  Batch eval_batch(std::uint64_t index, std::size_t batch_size) const override {
    return make(derive_seed(seed_, kEvalStreamOffset + index), batch_size);
  }

private:
  Batch make(std::uint64_t s, std::size_t batch_size) const {
    Batch b;
    // A small vocabulary slice keeps the designated token frequent.
    const int sub_vocab = std::min(vocab_, kParityVocab);
    b.tokens = random_tokens(batch_size, seq_len_, sub_vocab, s);
    for (std::size_t i = 0; i < batch_size; ++i) {
      int count = 0;
      for (auto id : b.tokens.sequence(i)) count += id == designated_;
      b.labels.push_back(count % 2 == 0 ? 1 : 0);
    }
    return b;
  }

  std::uint64_t seed_;
  std::size_t seq_len_;
  int vocab_;
  std::uint32_t designated_;
};

} // namespace condlora
