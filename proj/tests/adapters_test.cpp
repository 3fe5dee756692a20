#include <gtest/gtest.h>

#include <sstream>

#include "condlora/adapters.hpp"
#include "condlora/linalg.hpp"
#include "condlora/task.hpp"
#include "condlora/trainer.hpp"

using namespace condlora;

namespace {

ModelConfig desk() {
  ModelConfig c;
  c.seed = 3;
  return c;
}

AdapterSpec spec_for(Method m, int rank = 4, int layers = 4) {
  AdapterSpec s;
  s.method = m;
  s.rank = rank;
  s.alpha = rank;
  s.with_all_layers(layers);
  return s;
}

} // namespace

TEST(InitLora, BIsZeroAndDeltaVanishes) {
  const BaseWeights w = build_model(desk());
  const AdapterSpec s = spec_for(Method::lora);
  const Adapter ad{s, init_lora(s, dims_of(w.config), 99)};
  const auto& lp = std::get<LoraParams>(ad.params);
  EXPECT_EQ(lp.pairs.size(), 8u);
  for (const auto& [t, pair] : lp.pairs) {
    EXPECT_EQ(pair.b, Matrix(32, 4));
    EXPECT_EQ(pair.a.rows(), 4u);
    EXPECT_EQ(pair.a.cols(), 32u);
    EXPECT_EQ(delta_w(ad, w.projection(t), t), Matrix(32, 32));
  }
}

TEST(InitLora, SeedsChangeAOnly) {
  const AdapterSpec s = spec_for(Method::lora);
  const LoraParams a = init_lora(s, {32, 32}, 1);
  const LoraParams b = init_lora(s, {32, 32}, 2);
  for (const auto& [t, pair] : a.pairs) {
    EXPECT_NE(pair.a, b.pairs.at(t).a);
    EXPECT_EQ(pair.b, b.pairs.at(t).b);
  }
  EXPECT_EQ(init_lora(s, {32, 32}, 1), a);
}

TEST(InitCondLora, ThetaBZeroAndShapes) {
  const BaseWeights w = build_model(desk());
  const AdapterSpec s = spec_for(Method::condlora);
  const Adapter ad{s, init_condlora(s, dims_of(w.config), 5)};
  const auto& cp = std::get<CondLoraParams>(ad.params);
  ASSERT_EQ(cp.pairs.size(), 2u);
  for (const auto& [m, pair] : cp.pairs) {
    EXPECT_EQ(pair.theta_b, Matrix(32, 4));
    EXPECT_EQ(pair.theta_a.rows(), 32u);
    EXPECT_EQ(pair.theta_a.cols(), 4u);
  }
  for (Target t : s.targets()) EXPECT_EQ(delta_w(ad, w.projection(t), t), Matrix(32, 32));
}

TEST(CondFactors, ZeroIdentityAndDirectOracle) {
  const Matrix theta = gaussian(32, 4, 0, 1, 1);
  EXPECT_EQ(cond_A(gaussian(32, 32, 0, 1, 2), Matrix(32, 4)), Matrix(4, 32));
  EXPECT_EQ(cond_B(gaussian(32, 32, 0, 1, 2), Matrix(32, 4)), Matrix(32, 4));
  EXPECT_EQ(cond_A(Matrix::identity(32), theta), transpose(theta));
  EXPECT_EQ(cond_B(Matrix::identity(32), theta), theta);

  const Matrix w0 = gaussian(32, 32, 0, 0.2, 3);
  const Matrix ca = cond_A(w0, theta);
  const Matrix cb = cond_B(w0, theta);
  ASSERT_EQ(ca.rows(), 4u);
  ASSERT_EQ(cb.rows(), 32u);
  // Explicit index sums, independent of the matmul kernel.
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 32; ++i) {
      double a = 0.0, b = 0.0;
      for (std::size_t k = 0; k < 32; ++k) {
        a += w0(i, k) * theta(k, r);
        b += w0(k, i) * theta(k, r);
      }
      EXPECT_NEAR(ca(r, i), a, 1e-13);
      EXPECT_NEAR(cb(i, r), b, 1e-13);
    }
  EXPECT_EQ(ca, transpose(matmul(w0, theta)));
  EXPECT_EQ(cb, matmul(transpose(w0), theta));
  EXPECT_THROW(cond_A(w0, Matrix(16, 4)), ShapeError);
  EXPECT_THROW(cond_B(w0, Matrix(16, 4)), ShapeError);
}

TEST(DeltaW, ScaleIsOneWhenAlphaEqualsRank) {
  AdapterSpec s;  // defaults r = 8, alpha = 8
  EXPECT_EQ(s.rank, 8);
  EXPECT_EQ(s.alpha, 8.0);
  EXPECT_EQ(s.scaling(), 1.0);
}

TEST(DeltaW, RankBoundForBothMethods) {
  const BaseWeights w = build_model(desk());
  for (Method m : {Method::lora, Method::condlora}) {
    Adapter ad = init_adapter(spec_for(m), dims_of(w.config), 4);
    randomize(ad, 17, 0.3);
    for (Target t : ad.spec.targets()) {
      const Matrix dw = delta_w(ad, w.projection(t), t);
      const SvdResult r = svd(dw);
      EXPECT_LT(r.s[4], 1e-9 * frobenius_norm(dw)) << to_string(m) << " " << block_name(t);
      EXPECT_GT(r.s[3], 1e-6 * frobenius_norm(dw));
    }
  }
}

TEST(DeltaW, AlphaScalingIsEntryExact) {
  const BaseWeights w = build_model(desk());
  for (Method m : {Method::lora, Method::condlora}) {
    Adapter ad = init_adapter(spec_for(m), dims_of(w.config), 4);
    randomize(ad, 18, 0.3);
    Adapter doubled = ad;
    doubled.spec.alpha = 2 * ad.spec.alpha;
    for (Target t : ad.spec.targets())
      EXPECT_EQ(delta_w(doubled, w.projection(t), t), scale(delta_w(ad, w.projection(t), t), 2.0));
  }
}

TEST(DeltaW, UntargetedIsRejected) {
  const BaseWeights w = build_model(desk());
  AdapterSpec s = spec_for(Method::lora);
  s.layers = {1, 2};
  const Adapter ad = init_adapter(s, dims_of(w.config), 1);
  EXPECT_THROW(delta_w(ad, w.projection({Module::query, 3}), {Module::query, 3}), ConfigError);
  EXPECT_THROW(delta_w(ad, w.projection({Module::key, 1}), {Module::key, 1}), ConfigError);
}

TEST(CondLora, WeightTyingAcrossLayers) {
  const BaseWeights w = build_model(desk());
  Adapter ad = init_adapter(spec_for(Method::condlora), dims_of(w.config), 2);
  randomize(ad, 3, 0.2);
  const auto& cp = std::get<CondLoraParams>(ad.params);
  for (Target t : ad.spec.targets()) {
    const Matrix& w0 = w.projection(t);
    const CondPair& th = cp.pairs.at(t.module);
    const Matrix manual =
        scale(matmul(cond_B(w0, th.theta_b), cond_A(w0, th.theta_a)), ad.spec.scaling());
    EXPECT_EQ(delta_w(ad, w0, t), manual);
  }
}

TEST(Merge, ZeroAdaptersLeaveBaseUnchanged) {
  const BaseWeights w = build_model(desk());
  for (Method m : {Method::lora, Method::condlora}) {
    const Adapter ad = init_adapter(spec_for(m), dims_of(w.config), 1);
    EXPECT_EQ(merge(w, ad), w);
  }
}

TEST(Merge, ForwardEquivalence) {
  const BaseWeights w = build_model(desk());
  const TokenBatch tb = random_tokens(6, 8, 64, 21);
  for (Method m : {Method::lora, Method::condlora}) {
    Adapter ad = init_adapter(spec_for(m), dims_of(w.config), 1);
    randomize(ad, 5, 0.2);
    const Matrix via_adapter = forward(w, ad, tb).logits;
    const Matrix via_merge = forward(merge(w, ad), nullptr, tb).logits;
    EXPECT_LT(max_abs_diff(via_adapter, via_merge), 1e-9);
  }
}

TEST(Merge, TwiceAddsDeltaTwice) {
  const BaseWeights w = build_model(desk());
  Adapter ad = init_adapter(spec_for(Method::lora), dims_of(w.config), 1);
  randomize(ad, 6, 0.2);
  const BaseWeights twice = merge(merge(w, ad), ad);
  for (Target t : ad.spec.targets()) {
    const Matrix expected = add(w.projection(t), scale(delta_w(ad, w.projection(t), t), 2.0));
    EXPECT_LT(max_abs_diff(twice.projection(t), expected), 1e-14);
  }
}

TEST(CountTrainable, Dimensions768Rank8TwelveLayers) {
  AdapterSpec s = spec_for(Method::lora, 8, 12);
  EXPECT_EQ(count_trainable(s, {768, 768}), 294912);
  s.method = Method::condlora;
  EXPECT_EQ(count_trainable(s, {768, 768}), 24576);
}

TEST(CountTrainable, DeskDimensionsAndLayerIndependence) {
  AdapterSpec s = spec_for(Method::lora, 4, 4);
  EXPECT_EQ(count_trainable(s, {32, 32}), 2048);
  s.method = Method::condlora;
  EXPECT_EQ(count_trainable(s, {32, 32}), 512);
  for (int n = 1; n <= 12; ++n) {
    AdapterSpec lora = spec_for(Method::lora, 4, n);
    AdapterSpec cond = spec_for(Method::condlora, 4, n);
    EXPECT_EQ(count_trainable(cond, {32, 32}), 512);
    EXPECT_EQ(count_trainable(lora, {32, 32}), n * count_trainable(cond, {32, 32}));
  }
}

TEST(CountTrainable, MatchesActualTensorEntries) {
  for (Method m : {Method::lora, Method::condlora}) {
    const AdapterSpec s = spec_for(m, 4, 4);
    const Adapter ad = init_adapter(s, {32, 32}, 0);
    EXPECT_EQ(tensor_entry_count(ad.params), count_trainable(s, {32, 32}));
  }
}

TEST(AdapterSpec, ValidatesAgainstModel) {
  const ModelConfig c = desk();
  AdapterSpec s = spec_for(Method::lora);
  EXPECT_NO_THROW(s.validate(c));
  s.rank = 33;
  EXPECT_THROW(s.validate(c), ConfigError);
  s = spec_for(Method::lora);
  s.layers = {0};
  EXPECT_THROW(s.validate(c), ConfigError);
  s = spec_for(Method::lora);
  s.modules.clear();
  EXPECT_THROW(s.validate(c), ConfigError);
}

TEST(AdapterCheckpoint, RoundTripsBothMethods) {
  for (Method m : {Method::lora, Method::condlora}) {
    AdapterSpec s = spec_for(m);
    s.alpha = 6.5;
    Adapter ad = init_adapter(s, {32, 32}, 8);
    randomize(ad, 9, 0.1);
    std::stringstream ss;
    write_bundle(ss, to_bundle(ad));
    const std::string text = ss.str();
    EXPECT_EQ(text.rfind("SPEC method=" + to_string(m) + " r=4 alpha=6.5 modules=query,value layers=1,2,3,4", 0), 0u);
    if (m == Method::lora) EXPECT_NE(text.find("MATRIX lora.value.3.A 4 32"), std::string::npos);
    else EXPECT_NE(text.find("MATRIX cond.query.thetaB 32 4"), std::string::npos);
    EXPECT_EQ(adapter_from_bundle(read_bundle(ss), {32, 32}), ad);
  }
}
