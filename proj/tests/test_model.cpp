// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctlora/model.hpp"
#include "test_util.hpp"

using namespace ctlora;
using namespace ctlora::model;
using ctlora::testing::random_model_volume;
using ctlora::testing::random_tokens;
using ctlora::testing::randomize;
using ctlora::testing::tiny_config;

namespace {

std::vector<double> vision_embedding(const Model<double>& m, const volume::ModelVolume& v) {
  Context<double> c(m, false, 0, false);
  return to_vector(vision_forward(c, v));
}

std::vector<double> text_embedding(const Model<double>& m, const text::TokenSequence& t) {
  Context<double> c(m, false, 0, false);
  return to_vector(text_forward(c, t));
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(Patchify, GridCounts) {
  ModelConfig desk;
  EXPECT_EQ(desk.vision.temporal_groups(), 4u);
  EXPECT_EQ(desk.vision.spatial_positions(), 16u);
  auto paper = ModelConfig::paper_scale();
  EXPECT_EQ(paper.vision.temporal_groups(), 24u);
  EXPECT_EQ(paper.vision.spatial_positions(), 576u);

  volume::ModelVolume v(desk.vision.depth, desk.vision.height, desk.vision.width);
  auto g = patchify(v, desk.vision);
  EXPECT_EQ(g.temporal, 4u);
  EXPECT_EQ(g.spatial, 16u);
  EXPECT_EQ(g.features, 10u * 12 * 12);
  EXPECT_EQ(g.data.size(), 4u * 16 * 1440);

  auto bad = desk.vision;
  bad.temporal_patch = 7;
  EXPECT_THROW(patchify(v, bad), Error);
  volume::ModelVolume wrong(desk.vision.depth, 40, 48);
  EXPECT_THROW(patchify(wrong, desk.vision), Error);
}

TEST(Patchify, FeatureOrder) {
  auto cfg = tiny_config().vision;
  volume::ModelVolume v(cfg.depth, cfg.height, cfg.width);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = float(i);
  auto g = patchify(v, cfg);
  // Token t=1, s=3 (bottom-right patch of the second slab); feature (z=1, y=2, x=3).
  const std::size_t row = 1 * 4 + 3, f = 1 * 16 + 2 * 4 + 3;
  EXPECT_EQ(g.data[row * g.features + f], v.at(3, 6, 7));
}

TEST(VisionTower, ZeroProjectionGivesZeroEmbedding) {
  auto m = Model<double>::create(tiny_config(), 1);
  randomize(m, 2);
  for (auto& x : *m.params.at("vision.proj.weight").value) x = 0;
  for (double e : vision_embedding(m, random_model_volume(m.cfg, 3))) EXPECT_EQ(e, 0.0);
}

TEST(VisionTower, SpatialPermutationEquivariance) {
  auto cfg = tiny_config();
  cfg.vision.positional = false;
  auto m = Model<double>::create(cfg, 4);
  randomize(m, 5);
  auto v = random_model_volume(cfg, 6);
  // Swap patch (0,0) with patch (1,1) in every slice: spatial positions 0 and 3.
  auto w = v;
  for (std::size_t z = 0; z < cfg.vision.depth; ++z)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) std::swap(w.at(z, y, x), w.at(z, y + 4, x + 4));
  Context<double> c1(m, false, 0, false), c2(m, false, 0, false);
  auto a = to_vector(vision_tokens(c1, v)), b = to_vector(vision_tokens(c2, w));
  const std::size_t S = 4, D = cfg.vision.dim;
  const std::size_t perm[4] = {3, 1, 2, 0};
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t k = 0; k < D; ++k) EXPECT_NEAR(a[(t * S + s) * D + k], b[(t * S + perm[s]) * D + k], 1e-12);
  // Mean and max pooling are invariant to the permutation.
  EXPECT_LT(max_diff(vision_embedding(m, v), vision_embedding(m, w)), 1e-12);
}

TEST(VisionTower, PositionalEmbeddingBreaksPermutationSymmetry) {
  auto m = Model<double>::create(tiny_config(), 4);
  randomize(m, 5);
  auto v = random_model_volume(m.cfg, 6);
  auto w = v;
  for (std::size_t z = 0; z < m.cfg.vision.depth; ++z)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) std::swap(w.at(z, y, x), w.at(z, y + 4, x + 4));
  EXPECT_GT(max_diff(vision_embedding(m, v), vision_embedding(m, w)), 1e-6);
}

TEST(VisionTower, AttentionCounterMatchesFactorizedCost) {
  auto cfg = tiny_config();
  cfg.vision.spatial_layers = 2;
  cfg.vision.temporal_layers = 3;
  auto m = Model<double>::create(cfg, 1);
  Context<double> c(m, false, 0, false);
  vision_forward(c, random_model_volume(cfg, 1));
  const std::uint64_t T = 2, S = 4;
  EXPECT_EQ(c.stats.pairwise, 2 * T * S * S + 3 * S * T * T);
  EXPECT_LE(c.stats.largest_block, std::max(S * S, T * T));
}

TEST(VisionTower, ShapesForBothPoolings) {
  auto cfg = tiny_config();
  for (auto pool : {Pooling::mean, Pooling::max, Pooling::flatten}) {
    cfg.vision.pooling = pool;
    auto specs = param_specs(cfg);
    auto it = std::find_if(specs.begin(), specs.end(), [](const ParamSpec& s) { return s.name == "vision.proj.weight"; });
    ASSERT_NE(it, specs.end());
    EXPECT_EQ(it->rows, cfg.vision.shared_dim);
    EXPECT_EQ(it->cols, pool != Pooling::flatten ? cfg.vision.dim : cfg.vision.tokens() * cfg.vision.dim);
    auto m = Model<double>::create(cfg, 2);
    EXPECT_EQ(vision_embedding(m, random_model_volume(cfg, 1)).size(), cfg.vision.shared_dim);
    Context<double> c(m, false, 0, false);
    auto tok = vision_tokens(c, random_model_volume(cfg, 1));
    EXPECT_EQ(tok.rows(), cfg.vision.tokens());
    EXPECT_EQ(tok.cols(), cfg.vision.dim);
  }
}

TEST(VisionTower, NonFiniteWeightIsNumericFault) {
  auto m = Model<double>::create(tiny_config(), 1);
  (*m.params.at("vision.spatial0.attn.q.weight").value)[0] = std::nan("");
  try {
    vision_embedding(m, random_model_volume(m.cfg, 1));
    FAIL() << "expected a numeric fault";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::numeric_fault);
  }
}

TEST(VisionTower, VqAddsAuxiliaryLoss) {
  auto cfg = tiny_config();
  cfg.vision.vq_enabled = true;
  auto m = Model<double>::create(cfg, 3);
  Context<double> c(m, false, 0, false);
  auto e = vision_forward(c, random_model_volume(cfg, 1));
  EXPECT_EQ(e.cols(), cfg.vision.shared_dim);
  ASSERT_EQ(c.aux_losses.size(), 1u);
  EXPECT_GE(c.aux_losses[0].item(), 0.0);
}

TEST(TextTower, PaddingContentIsIgnored) {
  auto m = Model<double>::create(tiny_config(), 7);
  randomize(m, 8);
  auto t = random_tokens(m.cfg, 5, 9);
  const auto ref = text_embedding(m, t);
  auto noisy = t;
  for (std::size_t i = 7; i < noisy.input_ids.size(); ++i) noisy.input_ids[i] = 11;
  EXPECT_LT(max_diff(ref, text_embedding(m, noisy)), 1e-12);

  auto full = m;
  full.cfg.text.trim_padding = false;
  EXPECT_LT(max_diff(ref, text_embedding(full, noisy)), 1e-12);

  auto shorter = random_tokens(m.cfg, 5, 9, 8);
  EXPECT_LT(max_diff(ref, text_embedding(full, shorter)), 1e-12);
}

TEST(TextTower, InputValidation) {
  auto m = Model<double>::create(tiny_config(), 7);
  text::TokenSequence pad;
  pad.input_ids.assign(4, text::kPad);
  pad.attention_mask.assign(4, 0);
  try {
    text_embedding(m, pad);
    FAIL() << "expected invalid_input";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_input);
  }
  auto t = random_tokens(m.cfg, 3, 1);
  t.input_ids[2] = 99;
  EXPECT_THROW(text_embedding(m, t), Error);
  auto long_seq = random_tokens(m.cfg, 20, 1, 24);
  EXPECT_THROW(text_embedding(m, long_seq), Error);
}

TEST(TextTower, GoldenEmbedding) {
  auto m = Model<double>::create(tiny_config(), 2026);
  text::TokenSequence t;
  t.input_ids = {text::kCls, 5, 9, 17, 6, text::kSep, text::kPad, text::kPad};
  t.attention_mask = {1, 1, 1, 1, 1, 1, 0, 0};
  const std::vector<double> golden = {-0.286185972432, -0.273849252503, 0.165788562048, -0.893354620114, 0.608769044853, 1.30900551673};
  const auto e = text_embedding(m, t);
  ASSERT_EQ(e.size(), golden.size());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e[i], golden[i], 1e-6) << i;
}

TEST(Head, ZeroWeightsGiveBias) {
  auto m = Model<double>::create(tiny_config(), 1);
  for (auto& x : *m.params.at("head.weight").value) x = 0;
  auto& b = *m.params.at("head.bias").value;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = double(i) * 0.1 - 0.5;
  Context<double> c(m, false, 0, false);
  auto z = to_vector(classify(c, ag::constant<double>(1, 6, {1, 2, 3, 4, 5, 6})));
  ASSERT_EQ(z.size(), kNumClasses);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z[i], b[i]);
  EXPECT_THROW(classify(c, ag::constant<double>(1, 5, {1, 2, 3, 4, 5})), Error);
}

TEST(Head, EvalIsDeterministicAndDropoutIsUnbiased) {
  auto m = Model<double>::create(tiny_config(), 1);
  randomize(m, 3);
  auto& bias = *m.params.at("head.bias").value;
  std::fill(bias.begin(), bias.end(), 0.0);
  const std::vector<double> emb{0.3, -0.2, 0.5, 0.1, -0.4, 0.2};
  auto eval = [&](bool train, std::uint64_t seed) {
    Context<double> c(m, train, seed, false);
    return to_vector(classify(c, ag::constant<double>(1, 6, emb)));
  };
  EXPECT_EQ(eval(false, 1), eval(false, 2));
  const auto ref = eval(false, 0);
  // Monte Carlo mean of the first logit; each feature is kept w.p. 0.7 and scaled by 1/0.7.
  const auto& W = *m.params.at("head.weight").value;
  const double p = m.cfg.head.dropout;
  double var = 0;
  for (std::size_t k = 0; k < 6; ++k) var += std::pow(W[k] * emb[k], 2) * p / (1 - p);
  const int n = 10000;
  double mean = 0;
  for (int i = 0; i < n; ++i) mean += eval(true, std::uint64_t(i) + 1)[0];
  mean /= n;
  EXPECT_NEAR(mean, ref[0], 3 * std::sqrt(var / n));
}

TEST(Model, CloneAndCastAreIndependent) {
  auto m = Model<float>::create(tiny_config(), 1);
  auto c = m.clone();
  (*c.params.at("head.bias").value)[0] = 5;
  EXPECT_NE((*m.params.at("head.bias").value)[0], 5.0f);
  auto d = m.cast<double>();
  EXPECT_EQ(d.params.size(), m.params.size());
  EXPECT_EQ((*d.params.at("head.weight").value)[3], double((*m.params.at("head.weight").value)[3]));
}

TEST(Model, SameSeedSameWeights) {
  auto a = Model<float>::create(tiny_config(), 9), b = Model<float>::create(tiny_config(), 9);
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(*a.params.items()[i].value, *b.params.items()[i].value);
}

TEST(Model, ConfigRoundTripAndValidation) {
  auto cfg = tiny_config();
  cfg.vision.pooling = Pooling::flatten;
  auto back = ModelConfig::from_kv(cfg.to_kv());
  EXPECT_EQ(back.to_kv(), cfg.to_kv());
  auto kv = cfg.to_kv();
  kv["model.vision.pooling"] = "median";
  EXPECT_THROW(ModelConfig::from_kv(kv), Error);
  kv = cfg.to_kv();
  kv["model.vision.nonsense"] = "1";
  EXPECT_THROW(ModelConfig::from_kv(kv), Error);
  cfg.text.shared_dim = 7;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Model, TargetListsNameExistingMatrices) {
  auto cfg = tiny_config();
  auto m = Model<float>::create(cfg, 1);
  auto vt = vision_targets(cfg.vision), tt = text_targets(cfg.text);
  EXPECT_FALSE(vt.empty());
  EXPECT_FALSE(tt.empty());
  for (const auto& t : vt) EXPECT_TRUE(m.params.has(t + ".weight")) << t;
  for (const auto& t : tt) EXPECT_TRUE(m.params.has(t + ".weight")) << t;
}
