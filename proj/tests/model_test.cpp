#include <gtest/gtest.h>

#include <sstream>

#include "condlora/adapters.hpp"
#include "condlora/model.hpp"
#include "condlora/task.hpp"

using namespace condlora;

namespace {

ModelConfig small_config(int layers = 4, int d = 32) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.seed = 7;
  return c;
}

} // namespace

TEST(BuildModel, DeterministicAndShaped) {
  const ModelConfig c = small_config();
  const BaseWeights a = build_model(c);
  const BaseWeights b = build_model(c);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.layer(1).projection(Module::query).rows(), 32u);
  EXPECT_EQ(a.layer(1).projection(Module::query).cols(), 32u);
  EXPECT_EQ(a.layers.size(), 4u);
  EXPECT_EQ(a.layer(2).ffn_in_bias, Matrix(1, 64));
  ModelConfig other = c;
  other.seed = 8;
  EXPECT_NE(build_model(other).layer(1).projection(Module::value), a.layer(1).projection(Module::value));
}

TEST(BuildModel, ProjectionStdMatchesOneOverSqrtD) {
  const BaseWeights w = build_model(small_config(4, 32));
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& lw : w.layers)
    for (double v : lw.projection(Module::key).data()) {
      ss += v * v;
      ++n;
    }
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 1.0 / std::sqrt(32.0), 0.01);
}

TEST(BuildModel, QueryAndValueAreWellConditioned) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig c = small_config();
    c.seed = seed;
    const BaseWeights w = build_model(c);
    for (int l = 1; l <= c.n_layers; ++l)
      for (Module m : {Module::query, Module::value})
        EXPECT_LT(condition_estimate(w.projection({m, l})), 1e6);
  }
}

TEST(BuildModel, RejectsInvalidConfig) {
  ModelConfig c = small_config();
  c.n_heads = 5;
  EXPECT_THROW(build_model(c), ConfigError);
  c = small_config();
  c.d_ff = 0;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(Forward, ShapesForSingleToken) {
  const BaseWeights w = build_model(small_config());
  const TokenBatch tb{1, 1, {5}};
  const ForwardResult r = forward(w, nullptr, tb);
  EXPECT_EQ(r.logits.rows(), 1u);
  EXPECT_EQ(r.logits.cols(), static_cast<std::size_t>(w.config.n_outputs));
  ASSERT_EQ(r.hidden.size(), 4u);
  EXPECT_EQ(r.hidden[3][0].rows(), 1u);
  EXPECT_EQ(r.hidden[3][0].cols(), 32u);
}

TEST(Forward, HiddenShapeIsBatchByLenByModel) {
  const BaseWeights w = build_model(small_config());
  const TokenBatch tb = random_tokens(3, 7, w.config.vocab_size, 1);
  const ForwardResult r = forward(w, nullptr, tb);
  for (const auto& layer : r.hidden) {
    ASSERT_EQ(layer.size(), 3u);
    for (const auto& h : layer) {
      EXPECT_EQ(h.rows(), 7u);
      EXPECT_EQ(h.cols(), 32u);
    }
  }
}

TEST(Forward, ZeroDeltaIsBitIdentical) {
  const BaseWeights w = build_model(small_config());
  const TokenBatch tb = random_tokens(4, 9, w.config.vocab_size, 3);
  DeltaSet zeros;
  for (int l = 1; l <= 4; ++l)
    for (Module m : kAllModules) zeros.emplace(Target{m, l}, Matrix(32, 32));
  EXPECT_EQ(forward(w, &zeros, tb).logits, forward(w, nullptr, tb).logits);
}

TEST(Forward, BatchPermutationPermutesLogits) {
  const BaseWeights w = build_model(small_config());
  const TokenBatch tb = random_tokens(5, 6, w.config.vocab_size, 4);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  TokenBatch permuted{5, 6, {}};
  for (std::size_t p : perm) {
    auto seq = tb.sequence(p);
    permuted.ids.insert(permuted.ids.end(), seq.begin(), seq.end());
  }
  const Matrix a = forward(w, nullptr, tb).logits;
  const Matrix b = forward(w, nullptr, permuted).logits;
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t o = 0; o < a.cols(); ++o) EXPECT_EQ(b(i, o), a(perm[i], o));
}

TEST(Forward, RejectsBadTokens) {
  const BaseWeights w = build_model(small_config());
  EXPECT_THROW(forward(w, nullptr, TokenBatch{1, 2, {1, 64}}), ShapeError);
  const TokenBatch too_long = random_tokens(1, 33, 64, 0);
  EXPECT_THROW(forward(w, nullptr, too_long), ShapeError);
}

TEST(Forward, DeterministicAcrossCalls) {
  const BaseWeights w = build_model(small_config());
  const TokenBatch tb = random_tokens(2, 5, 64, 8);
  EXPECT_EQ(forward(w, nullptr, tb).logits, forward(w, nullptr, tb).logits);
}

TEST(ProjectionGradients, MatchFiniteDifferencesOnEffectiveWeight) {
  const BaseWeights w = build_model(small_config(2, 16));
  const TokenBatch tb = random_tokens(3, 5, 64, 2);
  const Matrix weights_out = gaussian(3, static_cast<std::size_t>(w.config.n_outputs), 0, 1, 3);
  // L = sum(weights_out * logits), so dL/dlogits = weights_out.
  auto loss = [&](const DeltaSet* ds) {
    const Matrix lg = forward(w, ds, tb).logits;
    double s = 0.0;
    for (std::size_t i = 0; i < lg.size(); ++i) s += lg.data()[i] * weights_out.data()[i];
    return s;
  };
  std::vector<Target> all;
  for (int l = 1; l <= 2; ++l)
    for (Module m : kAllModules) all.push_back({m, l});
  const ForwardTrace tr = forward_trace(w, nullptr, tb);
  const auto grads = projection_gradients(w, tr, weights_out, all);
  const double eps = 1e-5;
  for (const Target& t : all) {
    const Matrix& g = grads.at(t);
    double max_diff = 0.0, max_mag = 0.0;
    for (std::size_t i = 0; i < 16; i += 3) {
      for (std::size_t j = 0; j < 16; j += 5) {
        DeltaSet up, down;
        Matrix e(16, 16);
        e(i, j) = eps;
        up.emplace(t, e);
        down.emplace(t, scale(e, -1));
        const double fd = (loss(&up) - loss(&down)) / (2 * eps);
        max_diff = std::max(max_diff, std::abs(fd - g(i, j)));
        max_mag = std::max(max_mag, std::abs(fd));
      }
    }
    EXPECT_LT(max_diff / max_mag, 1e-6) << block_name(t);
  }
}

TEST(ModelCheckpoint, RoundTripsThroughText) {
  const BaseWeights w = build_model(small_config(2, 8));
  std::stringstream ss;
  write_bundle(ss, to_bundle(w));
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("CONFIG n_layers=2 d_model=8", 0), 0u);
  EXPECT_NE(text.find("MATRIX layer2.value 8 8"), std::string::npos);
  EXPECT_NE(text.find("MATRIX embed.token"), std::string::npos);
  EXPECT_NE(text.find("MATRIX head.out"), std::string::npos);
  EXPECT_EQ(from_bundle(read_bundle(ss)), w);
}

TEST(ModelCheckpoint, RejectsMissingBlocks) {
  std::stringstream ss("CONFIG n_layers=1 d_model=4 n_heads=1 d_ff=4 vocab_size=4 max_len=4 n_outputs=2 seed=0\n");
  EXPECT_THROW(from_bundle(read_bundle(ss)), ParseError);
}
