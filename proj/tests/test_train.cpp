// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ctlora/train.hpp"
#include "test_util.hpp"

using namespace ctlora;
using namespace ctlora::train;
using ctlora::testing::random_model_volume;
using ctlora::testing::random_tokens;
using ctlora::testing::randomize;
using ctlora::testing::tiny_config;

namespace {

std::vector<Sample> random_samples(const model::ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i].volume = random_model_volume(cfg, seed * 1000 + i);
    s[i].tokens = random_tokens(cfg, 1 + rng() % (cfg.text.max_len - 2), seed * 1000 + i);
    for (auto& l : s[i].labels) l = rng() % 3 == 0;
  }
  return s;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& s) {
  std::vector<const Sample*> p;
  for (const auto& x : s) p.push_back(&x);
  return p;
}

// Explicit softmax oracle of the symmetric contrastive loss.
double contrastive_oracle(const std::vector<std::vector<double>>& I, const std::vector<std::vector<double>>& T,
                          double tau) {
  const std::size_t n = I.size();
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
  };
  std::vector<std::vector<double>> s(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s[i][j] = tau * cosine(I[i], T[j]);
  double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      zr += std::exp(s[i][j]);
      zc += std::exp(s[j][i]);
    }
    rows -= std::log(std::exp(s[i][i]) / zr);
    cols -= std::log(std::exp(s[i][i]) / zc);
  }
  return 0.5 * (rows + cols) / double(n);
}

}  // namespace

TEST(Bce, Examples) {
  EXPECT_NEAR(bce_loss({0, 0, 0, 0}, {1, 0, 0, 1}, 2).loss, std::log(2.0), 1e-15);
  EXPECT_LE(bce_loss({40, -40, 40}, {1, 0, 1}, 3).loss, 1e-12);
  EXPECT_NEAR(bce_loss({1}, {1}, 1).loss, std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(bce_loss({1}, {1}, 1).loss, 0.313262, 1e-6);
  EXPECT_TRUE(std::isfinite(bce_loss({-1000, 1000}, {1, 0}, 2).loss));
  try {
    bce_loss({0}, {0.5}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_label);
  }
}

TEST(Bce, PerClassMeansAverageToLoss) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> z(5 * 4), y(5 * 4);
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = u(rng);
    y[i] = double(rng() % 2);
  }
  auto r = bce_loss(z, y, 4);
  double s = 0;
  for (double v : r.per_class) s += v;
  EXPECT_NEAR(s / 4, r.loss, 1e-14);
  EXPECT_GE(r.loss, 0.0);
}

TEST(Bce, GradientIsSigmoidMinusLabel) {
  for (double z : {-2.0, 0.0, 0.7}) {
    for (double y : {0.0, 1.0}) {
      auto w = std::make_shared<std::vector<double>>(std::vector<double>{z});
      auto leaf = ag::leaf<double>(w, 1, 1, true);
      ag::backward(ag::bce_with_logits(leaf, std::vector<double>{y}));
      EXPECT_NEAR(leaf.grad()[0], 1 / (1 + std::exp(-z)) - y, 1e-15);
    }
  }
}

TEST(Contrastive, Examples) {
  EXPECT_EQ(contrastive_loss({1, 2, 3}, {0.5, -1, 2}, 1, 10), 0.0);
  // Orthonormal matched pairs: loss decreases monotonically in tau.
  const std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  double prev = 1e9;
  for (double tau : {1.0, 10.0, 100.0}) {
    const double l = contrastive_loss(eye, eye, 3, tau);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-30);
  EXPECT_THROW(contrastive_loss({0, 0, 1, 1}, {1, 1, 1, 1}, 2, 10), Error);
}

TEST(Contrastive, MatchesBruteForce) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> I(3, std::vector<double>(5)), T = I;
    std::vector<double> fi, ft;
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 5; ++k) {
        fi.push_back(I[i][k] = nd(rng));
        ft.push_back(T[i][k] = nd(rng));
      }
    EXPECT_NEAR(contrastive_loss(fi, ft, 3, 10), contrastive_oracle(I, T, 10), 1e-8);
  }
}

TEST(Gradients, FiniteDifferencePretrainMode) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = tiny_config();
    if (seed % 2) cfg.vision.pooling = model::Pooling::flatten;
    auto m = model::Model<double>::create(cfg, seed);
    randomize(m, seed + 10);
    apply_freeze_policy(m, Mode::pretrain);
    auto s = random_samples(cfg, 3, seed);
    const auto r = gradient_check(m, pointers(s), LossWeights{});
    EXPECT_LT(r.worst, 1e-4) << r.worst_tensor;
    EXPECT_EQ(r.max_rel_error.size(), std::size_t(std::count_if(m.params.items().begin(), m.params.items().end(),
                                                                [](const auto& p) { return p.trainable; })));
  }
}

TEST(Gradients, FiniteDifferenceLoraMode) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = tiny_config();
    auto m = model::Model<double>::create(cfg, seed);
    randomize(m, seed + 20);
    lora::inject(m, lora::InjectionSpec::desk(cfg), seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (auto& [t, slot] : m.lora)
      for (auto& x : *m.params.at(lora::adapter_b(t)).value) x = u(rng);
    auto s = random_samples(cfg, 3, seed + 50);
    const auto r = gradient_check(m, pointers(s), LossWeights{});
    EXPECT_LT(r.worst, 1e-4) << r.worst_tensor;
    for (const auto& [name, err] : r.max_rel_error) EXPECT_NE(model::kind_of(name), model::Kind::base) << name;
  }
}

TEST(Gradients, FrozenGetNothingAndDetachedIsAnError) {
  auto m = model::Model<double>::create(tiny_config(), 1);
  lora::inject(m, lora::InjectionSpec::desk(m.cfg), 1);
  auto s = random_samples(m.cfg, 2, 1);
  {
    model::Context<double> ctx(m, true, 0, true);
    ag::backward(batch_loss(ctx, pointers(s), LossWeights{}).total);
    for (const auto& [name, g] : collect_gradients(ctx)) EXPECT_NE(model::kind_of(name), model::Kind::base) << name;
    EXPECT_TRUE(ctx.leaves().at("vision.patch_embed.weight").grad().empty());
  }
  model::Context<double> ctx(m, true, 0, true);
  ctx.p("head.weight");  // read but never used
  auto emb = model::text_forward(ctx, s[0].tokens);
  ag::backward(ag::mse(emb, std::vector<double>(emb.size(), 0.0)));
  try {
    collect_gradients(ctx);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_gradient);
    EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos);
  }
  EXPECT_NO_THROW(collect_gradients(ctx, false));
}

TEST(AdamW, ClosedFormSteps) {
  model::ParamStore<double> ps;
  ps.add("w", 1, 1, {2.0}).trainable = true;
  OptimizerConfig cfg;
  cfg.weight_decay = 0;
  cfg.learning_rate = 0.1;
  AdamState st;
  adamw_step<double>(ps, {{"w", {0.0}}}, st, cfg);
  EXPECT_EQ((*ps.at("w").value)[0], 2.0);

  AdamState fresh;
  adamw_step<double>(ps, {{"w", {1.0}}}, fresh, cfg);
  EXPECT_NEAR((*ps.at("w").value)[0], 1.9, 1e-6);

  cfg.weight_decay = 0.01;
  AdamState decay;
  const double before = (*ps.at("w").value)[0];
  adamw_step<double>(ps, {}, decay, cfg);
  EXPECT_DOUBLE_EQ((*ps.at("w").value)[0], before * (1 - 0.1 * 0.01));

  const double keep = (*ps.at("w").value)[0];
  try {
    adamw_step<double>(ps, {{"w", {std::nan("")}}}, decay, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::numeric_fault);
  }
  EXPECT_EQ((*ps.at("w").value)[0], keep);
}

TEST(Fit, ZeroLearningRateLeavesAdaptersUntouched) {
  auto m = model::Model<float>::create(tiny_config(), 1);
  lora::inject(m, lora::InjectionSpec::desk(m.cfg), 2);
  const auto before = m.clone();
  FitOptions o;
  o.optimizer.learning_rate = 0;
  o.optimizer.epochs = 2;
  fit(m, random_samples(m.cfg, 5, 1), o);
  for (const auto& p : before.params.items()) EXPECT_EQ(*m.params.at(p.name).value, *p.value) << p.name;
}

TEST(Fit, BaseFrozenAndDeterministic) {
  auto data = random_samples(tiny_config(), 12, 3);
  auto run = [&] {
    auto m = model::Model<float>::create(tiny_config(), 4);
    lora::inject(m, lora::InjectionSpec::desk(m.cfg), 5);
    FitOptions o;
    o.optimizer.epochs = 3;
    o.optimizer.batch_size = 4;
    o.seed = 6;
    auto r = fit(m, data, o);
    EXPECT_EQ(r.base_hash_before, r.base_hash_after);
    return r;
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.log[i].total, b.log[i].total);
    EXPECT_EQ(a.log[i].bce, b.log[i].bce);
    EXPECT_GE(a.log[i].total, 0.0);
  }
}

TEST(Fit, Errors) {
  auto m = model::Model<float>::create(tiny_config(), 1);
  FitOptions o;
  try {
    fit(m, {}, o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_config);
  }
  o.optimizer.epochs = 0;
  EXPECT_THROW(fit(m, random_samples(m.cfg, 2, 1), o), Error);
}

TEST(Fit, FreezePolicyPerMode) {
  auto m = model::Model<float>::create(tiny_config(), 1);
  lora::inject(m, lora::InjectionSpec::desk(m.cfg), 1);
  apply_freeze_policy(m, Mode::pretrain);
  for (const auto& p : m.params.items()) EXPECT_EQ(p.trainable, p.kind() != model::Kind::adapter) << p.name;
  apply_freeze_policy(m, Mode::lora);
  for (const auto& p : m.params.items()) EXPECT_EQ(p.trainable, p.kind() != model::Kind::base) << p.name;
}

TEST(Fit, SingleSampleOverfitsAtDeskScale) {
  model::ModelConfig cfg;
  cfg.vision.pooling = model::Pooling::flatten;
  cfg.text.vocab_size = 32;
  auto m = model::Model<float>::create(cfg, 1);
  lora::inject(m, lora::InjectionSpec::desk(cfg), 2);
  auto s = random_samples(cfg, 1, 9);
  FitOptions o;
  o.optimizer.epochs = 50;
  o.optimizer.learning_rate = 1e-2;
  o.weights.contrastive = 0;
  auto r = fit(m, s, o);
  // Dropout makes single epochs noisy, so compare 10-epoch windows.
  std::vector<double> window;
  for (std::size_t i = 0; i < r.log.size(); i += 10) {
    double sum = 0;
    for (std::size_t k = i; k < i + 10; ++k) sum += r.log[k].bce;
    window.push_back(sum / 10);
  }
  for (std::size_t i = 1; i < window.size(); ++i) EXPECT_LT(window[i], window[i - 1]) << "window " << i;
  EXPECT_LT(r.log.back().bce, 0.05);
}

TEST(Fit, LogAndResume) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "ctlora_fit_resume";
  fs::remove_all(dir);
  auto data = random_samples(tiny_config(), 8, 7);
  auto make = [] {
    auto m = model::Model<float>::create(tiny_config(), 8);
    lora::inject(m, lora::InjectionSpec::desk(m.cfg), 9);
    return m;
  };
  FitOptions o;
  o.optimizer.batch_size = 4;
  o.seed = 3;
  o.out_dir = dir.string();
  o.optimizer.epochs = 2;
  auto m1 = make();
  auto first = fit(m1, data, o);
  EXPECT_TRUE(fs::exists(dir / "adapters.peft"));
  EXPECT_TRUE(fs::exists(dir / "lora_log.jsonl"));

  o.optimizer.epochs = 4;
  o.resume = true;
  auto m2 = make();
  auto resumed = fit(m2, data, o);
  ASSERT_EQ(resumed.log.size(), 4u);
  EXPECT_EQ(resumed.log[0].total, first.log[0].total);
  EXPECT_EQ(resumed.log[1].total, first.log[1].total);

  o.resume = false;
  o.out_dir.clear();
  auto m3 = make();
  auto straight = fit(m3, data, o);
  for (std::size_t i = 2; i < 4; ++i) EXPECT_NEAR(resumed.log[i].total, straight.log[i].total, 1e-4);

  o.resume = true;
  o.out_dir = (dir / "missing").string();
  auto m4 = make();
  EXPECT_THROW(fit(m4, data, o), Error);
  fs::remove_all(dir);
}
