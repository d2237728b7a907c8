// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rsseg/backbone.hpp"
#include "rsseg/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace rsseg;
using rsseg::testing::expect_all_near;
using rsseg::testing::random_tensor;
using rsseg::testing::randomize;

namespace {

BackboneConfig small_config() { return {16, 4, 8, 2, 2, 2.0, {0, 1}}; }

}  // namespace

TEST(Msa, MatchesLoopOracleOnRandomInstances) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Index heads = 1 + trial % 3, c = heads * (2 + trial % 2), n = 1 + trial % 5;
    ParameterStore<double> store;
    const MultiHeadAttention<double> m(Builder<double>{store, rng, ParamGroup::kBackbone}, "m", c, heads);
    randomize(store, rng);
    const auto x = random_tensor(rng, {2, n, c});
    expect_all_near(m(x).data(), oracle::msa(x, m), 1e-12);
  }
}

TEST(Msa, SingleTokenAttendsToItself) {
  SplitMix64 rng(2);
  ParameterStore<double> store;
  const MultiHeadAttention<double> m(Builder<double>{store, rng, ParamGroup::kBackbone}, "m", 4, 2);
  randomize(store, rng);
  const auto x = random_tensor(rng, {1, 1, 4});
  Tensor<double> w;
  const auto y = m(x, &w);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  expect_all_near(y.data(), m.proj(m.v(x)).data(), 1e-12);
}

TEST(Msa, IdenticalKeysGiveUniformWeights) {
  SplitMix64 rng(3);
  ParameterStore<double> store;
  const MultiHeadAttention<double> m(Builder<double>{store, rng, ParamGroup::kBackbone}, "m", 4, 2);
  randomize(store, rng);
  Tensor<double> x({1, 2, 4});
  const auto row = random_tensor(rng, {4});
  for (Index t = 0; t < 2; ++t)
    for (Index c = 0; c < 4; ++c) x.mutable_data()[t * 4 + c] = row[c];
  Tensor<double> w;
  m(x, &w);
  for (double v : w.data()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Msa, AttentionIsRowStochastic) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index heads = 1 + trial % 4, c = heads * (1 + trial % 3), n = 1 + trial % 17;
    ParameterStore<float> store;
    const MultiHeadAttention<float> m(Builder<float>{store, rng, ParamGroup::kBackbone}, "m", c, heads);
    const auto x = random_tensor<float>(rng, {1 + trial % 2, n, c}, -3, 3);
    Tensor<float> w;
    m(x, &w);
    for (Index r = 0; r < w.size() / n; ++r) {
      double s = 0;
      for (Index j = 0; j < n; ++j) {
        EXPECT_GE(w[r * n + j], 0.f);
        s += w[r * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Msa, RejectsIndivisibleWidth) {
  SplitMix64 rng(5);
  ParameterStore<double> store;
  EXPECT_THROW(MultiHeadAttention<double>(Builder<double>{store, rng, ParamGroup::kBackbone}, "m", 6, 4),
               std::invalid_argument);
}

TEST(TransformerLayer, ZeroedProjectionsGiveIdentity) {
  SplitMix64 rng(6);
  ParameterStore<double> store;
  const TransformerLayer<double> layer(Builder<double>{store, rng, ParamGroup::kBackbone}, "l", 8, 2, 16);
  randomize(store, rng);
  for (Tensor<double> t : {layer.attn.proj.weight, layer.attn.proj.bias, layer.mlp.fc2.weight, layer.mlp.fc2.bias})
    for (double& v : t.mutable_data()) v = 0;
  const auto x = random_tensor(rng, {2, 5, 8});
  const auto y = layer(x);
  ASSERT_EQ(y.shape(), x.shape());
  expect_all_near(y.data(), x.data(), 0.0);
}

TEST(TransformerLayer, MatchesComposedOracle) {
  SplitMix64 rng(7);
  ParameterStore<double> store;
  const TransformerLayer<double> layer(Builder<double>{store, rng, ParamGroup::kBackbone}, "l", 8, 2, 16);
  randomize(store, rng);
  const auto x = random_tensor(rng, {1, 5, 8});
  // pre-norm: h = x + MSA(LN1 x); y = h + fc2(gelu(fc1(LN2 h)))
  auto ln = [](const std::vector<double>& v, Index rows, Index c, const LayerNorm<double>& n) {
    std::vector<double> out(v.size());
    for (Index r = 0; r < rows; ++r) {
      double m = 0, s = 0;
      for (Index j = 0; j < c; ++j) m += v[static_cast<std::size_t>(r * c + j)];
      m /= c;
      for (Index j = 0; j < c; ++j) s += std::pow(v[static_cast<std::size_t>(r * c + j)] - m, 2);
      const double rstd = 1 / std::sqrt(s / c + 1e-6);
      for (Index j = 0; j < c; ++j)
        out[static_cast<std::size_t>(r * c + j)] = (v[static_cast<std::size_t>(r * c + j)] - m) * rstd * n.gamma[j] + n.beta[j];
    }
    return out;
  };
  const std::vector<double> xv(x.data().begin(), x.data().end());
  const auto n1 = ln(xv, 5, 8, layer.norm1);
  const auto a = oracle::msa(Tensor<double>({1, 5, 8}, n1), layer.attn);
  std::vector<double> h(xv.size());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = xv[i] + a[i];
  auto f1 = oracle::affine(ln(h, 5, 8, layer.norm2), 5, layer.mlp.fc1.weight, layer.mlp.fc1.bias);
  for (double& v : f1) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  const auto f2 = oracle::affine(f1, 5, layer.mlp.fc2.weight, layer.mlp.fc2.bias);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += f2[i];
  expect_all_near(layer(x).data(), h, 1e-12);
}

TEST(Backbone, PatchEmbedMatchesStridedConvOracle) {
  SplitMix64 rng(8);
  ParameterStore<double> store;
  const VitBackbone<double> vit(Builder<double>{store, rng, ParamGroup::kBackbone}, small_config());
  const auto image = random_tensor(rng, {2, 3, 16, 16}, 0, 1);
  const auto tokens = vit.patch_embed(image);
  ASSERT_EQ(tokens.shape(), (Shape{2, 16, 8}));
  for (Index b = 0; b < 2; ++b)
    for (Index gy = 0; gy < 4; ++gy)
      for (Index gx = 0; gx < 4; ++gx)
        for (Index c = 0; c < 8; ++c) {
          double acc = vit.patch_proj.bias[c] + vit.pos_embed[(gy * 4 + gx) * 8 + c];
          for (Index ic = 0; ic < 3; ++ic)
            for (Index ky = 0; ky < 4; ++ky)
              for (Index kx = 0; kx < 4; ++kx)
                acc += image[((b * 3 + ic) * 16 + gy * 4 + ky) * 16 + gx * 4 + kx] *
                       vit.patch_proj.weight[((c * 3 + ic) * 4 + ky) * 4 + kx];
          EXPECT_NEAR(tokens[(b * 16 + gy * 4 + gx) * 8 + c], acc, 1e-12);
        }
}

TEST(Backbone, ZeroImageGivesPositionalEmbeddings) {
  SplitMix64 rng(9);
  ParameterStore<double> store;
  const VitBackbone<double> vit(Builder<double>{store, rng, ParamGroup::kBackbone}, small_config());
  const auto tokens = vit.patch_embed(Tensor<double>({1, 3, 16, 16}));
  expect_all_near(tokens.data(), vit.pos_embed.data(), 0.0);
}

TEST(Backbone, TokenCountAndIndivisibleInput) {
  SplitMix64 rng(10);
  ParameterStore<float> store;
  const VitBackbone<float> vit(Builder<float>{store, rng, ParamGroup::kBackbone}, {64, 16, 8, 1, 2, 2.0, {}});
  EXPECT_EQ(vit.patch_embed(Tensor<float>({1, 3, 64, 64})).dim(1), 16);
  EXPECT_THROW(vit.patch_embed(Tensor<float>({1, 3, 60, 64})), ShapeError);
  // other multiples of the patch resize the positional embeddings
  EXPECT_EQ(vit.patch_embed(Tensor<float>({1, 3, 32, 48})).dim(1), 6);
}

TEST(Backbone, TapsAreLayerOutputsAndFinalIsTapInvariant) {
  SplitMix64 rng(11);
  const auto image = random_tensor(rng, {1, 3, 16, 16}, 0, 1);
  BackboneConfig with_taps = small_config();
  BackboneConfig no_taps = small_config();
  no_taps.tap_indices = {};
  ParameterStore<double> s1, s2;
  SplitMix64 r1(5), r2(5);
  const VitBackbone<double> a(Builder<double>{s1, r1, ParamGroup::kBackbone}, with_taps);
  const VitBackbone<double> b(Builder<double>{s2, r2, ParamGroup::kBackbone}, no_taps);
  const auto oa = a.forward_with_taps(image);
  const auto ob = b.forward_with_taps(image);
  ASSERT_EQ(oa.taps.size(), 2u);
  EXPECT_TRUE(ob.taps.empty());
  expect_all_near(oa.final.data(), ob.final.data(), 0.0);
  const auto layer0 = a.layers[0](a.patch_embed(image));
  expect_all_near(oa.taps[0].data(), layer0.data(), 0.0);
  expect_all_near(oa.final.data(), a.norm(a.layers[1](layer0)).data(), 0.0);
}

TEST(Backbone, ConfigValidation) {
  EXPECT_THROW(BackboneConfig({60, 16, 8, 2, 2, 2.0, {}}).validate(), ConfigError);
  EXPECT_THROW(BackboneConfig({64, 16, 9, 2, 2, 2.0, {}}).validate(), ConfigError);
  EXPECT_THROW(BackboneConfig({64, 16, 8, 2, 2, 2.0, {2}}).validate(), ConfigError);
  EXPECT_THROW(BackboneConfig({64, 16, 8, 4, 2, 2.0, {1, 1}}).validate(), ConfigError);
  EXPECT_NO_THROW(BackboneConfig({64, 16, 8, 12, 2, 4.0, {1, 3, 5, 7}}).validate());
}

TEST(Backbone, Gradients) {
  SplitMix64 rng(12);
  ParameterStore<double> store;
  const VitBackbone<double> vit(Builder<double>{store, rng, ParamGroup::kBackbone}, small_config());
  randomize(store, rng, 0.3);
  const auto image = random_tensor(rng, {1, 3, 16, 16}, 0, 1);
  const auto w = random_tensor(rng, {1, 16, 8});
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  for (auto& e : store.entries()) inputs.emplace_back(e.name, e.tensor);
  const auto r = gradcheck([&] { return sum(mul(vit.forward_with_taps(image).final, w)); }, inputs);
  EXPECT_TRUE(r.passed()) << r.worst.name << "[" << r.worst.index << "] " << r.worst.analytic << " vs "
                          << r.worst.numeric;
}
