// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: ctlora_acceptance [criterion-number ...]

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include "ctlora/ctlora.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace ctlora;
using ctlora::testing::random_model_volume;
using ctlora::testing::random_tokens;
using ctlora::testing::randomize;
using ctlora::testing::tiny_config;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

template <class T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng, double s = 1.0) {
  std::uniform_real_distribution<double> u(-s, s);
  std::vector<T> v(n);
  for (auto& x : v) x = T(u(rng));
  return v;
}

template <class T>
std::vector<double> both_towers(const model::Model<T>& m, std::uint64_t seed) {
  model::Context<T> c(m, false, 0, false);
  auto v = model::to_vector(model::vision_forward(c, random_model_volume(m.cfg, seed)));
  auto t = model::to_vector(model::text_forward(c, random_tokens(m.cfg, 1 + seed % 20, seed)));
  v.insert(v.end(), t.begin(), t.end());
  return v;
}

void randomize_b(model::Model<float>& m, std::uint64_t seed, double s) {
  std::mt19937_64 rng(seed);
  for (auto& [t, slot] : m.lora) *m.params.at(lora::adapter_b(t)).value = random_vec<float>(slot.d * slot.r, rng, s);
}

// ---------------------------------------------------------------------------

Outcome zero_init_identity() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto base = model::Model<float>::create(model::ModelConfig{}, seed);
    auto adapted = base.clone();
    lora::inject(adapted, lora::InjectionSpec::desk(adapted.cfg), seed + 100);
    for (std::uint64_t i = 0; i < 20; ++i) {
      const auto a = both_towers(base, seed * 100 + i), b = both_towers(adapted, seed * 100 + i);
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
    }
  }
  return {worst <= 1e-6, fmt("max |adapted - base| = %.3g over 5 seeds x 20 inputs", worst)};
}

Outcome merge_equivalence() {
  double worst_rel = 0, worst_restore = 0;
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 2 + rng() % 30, k = 2 + rng() % 30, r = 1 + rng() % std::min<std::size_t>(8, std::min(d, k));
    auto a = lora::init_adapter<float>(d, k, r, 2.0 * double(r), 0.0, std::uint64_t(t));
    a.B = random_vec<float>(a.B.size(), rng, 0.5);
    const auto W = random_vec<float>(d * k, rng), x = random_vec<float>(k, rng);
    const auto dyn = lora::adapted_forward(x, W, a);
    const auto Wm = lora::merge(a, W);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < d; ++i) {
      double h = 0;
      for (std::size_t j = 0; j < k; ++j) h += double(Wm[i * k + j]) * x[j];
      num += (h - dyn[i]) * (h - dyn[i]);
      den += double(dyn[i]) * dyn[i];
    }
    worst_rel = std::max(worst_rel, std::sqrt(num / std::max(den, 1e-30)));
    const auto back = lora::unmerge(a, Wm);
    for (std::size_t i = 0; i < W.size(); ++i) worst_restore = std::max(worst_restore, double(std::abs(back[i] - W[i])));
  }
  // Whole model at desk scale.
  auto m = model::Model<float>::create(model::ModelConfig{}, 5);
  const auto base = m.clone();
  lora::inject(m, lora::InjectionSpec::desk(m.cfg), 7);
  randomize_b(m, 8, 0.05);
  auto merged = m.clone();
  lora::merge_all(merged);
  double model_rel = 0;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const auto dyn = both_towers(m, i), mer = both_towers(merged, i);
    double num = 0, den = 0;
    for (std::size_t j = 0; j < dyn.size(); ++j) {
      num += (dyn[j] - mer[j]) * (dyn[j] - mer[j]);
      den += dyn[j] * dyn[j];
    }
    model_rel = std::max(model_rel, std::sqrt(num / den));
  }
  lora::unmerge_all(merged);
  double model_restore = 0;
  for (const auto& p : base.params.items()) {
    const auto& now = *merged.params.at(p.name).value;
    for (std::size_t i = 0; i < now.size(); ++i)
      model_restore = std::max(model_restore, double(std::abs(now[i] - (*p.value)[i])));
  }
  const bool ok = worst_rel <= 1e-5 && model_rel <= 1e-5 && worst_restore <= 1e-6 && model_restore <= 1e-6;
  return {ok, fmt("100 adapters: rel %.3g, restore %.3g; desk model: rel %.3g, restore %.3g", worst_rel, worst_restore,
                  model_rel, model_restore)};
}

Outcome accounting() {
  const auto ref = lora::reference_accounting();
  const double millions = std::round(double(ref.trainable()) / 1e4) / 100;
  const bool paper_ok = millions == 1.67 && std::abs(ref.percent() - 0.38) <= 0.02 && ref.model_size == 440'000'000;

  model::ModelConfig cfg;
  const auto spec = lora::InjectionSpec::desk(cfg);
  auto m = model::Model<float>::create(cfg, 1);
  std::uint64_t frozen = 0;
  for (const auto& p : m.params.items()) frozen += p.size();
  lora::inject(m, spec, 2);
  std::uint64_t oracle = 0;
  for (const auto& rule : spec.rules)
    for (const auto& t : rule.targets) {
      const auto& w = m.params.at(t + ".weight");
      oracle += rule.rank * (w.rows + w.cols);
    }
  oracle += m.params.at("head.weight").size() + m.params.at("head.bias").size();
  const auto pc = lora::count_trainable(m);
  const auto sc = lora::structural_count(cfg, spec);
  const bool desk_ok = pc.trainable == oracle && sc.trainable == oracle && pc.total == frozen + oracle -
                       m.params.at("head.weight").size() - m.params.at("head.bias").size() && sc.total == pc.total;
  std::ostringstream s;
  s << "reference " << ref.trainable() << " (" << millions << "M, " << fmt("%.3f", ref.percent()) << "%); desk "
    << pc.trainable << " vs oracle " << oracle;
  return {paper_ok && desk_ok, s.str()};
}

std::vector<train::Sample> grad_samples(const model::ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<train::Sample> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i].volume = random_model_volume(cfg, seed * 1000 + i);
    s[i].tokens = random_tokens(cfg, 1 + rng() % (cfg.text.max_len - 2), seed * 1000 + i);
    for (auto& l : s[i].labels) l = rng() % 3 == 0;
  }
  return s;
}

Outcome gradient_check() {
  double worst = 0;
  std::string where;
  std::size_t tensors = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cfg = tiny_config();
    train::LossWeights w;
    w.tau = 10;
    w.prompt = 1;
    for (std::size_t j = 0; j < 3; ++j) w.prompt_tokens.push_back(random_tokens(cfg, 2 + j, 900 + seed * 10 + j));
    w.prompt_pos_weight = {1.0, 2.5, 4.0};
    const auto s = grad_samples(cfg, 3, seed);
    std::vector<const train::Sample*> batch;
    for (const auto& x : s) batch.push_back(&x);
    for (auto mode : {train::Mode::pretrain, train::Mode::lora}) {
      auto m = model::Model<double>::create(cfg, seed);
      randomize(m, seed + 10);
      if (mode == train::Mode::lora) {
        lora::inject(m, lora::InjectionSpec::desk(cfg), seed);
        std::mt19937_64 rng(seed + 30);
        for (auto& [t, slot] : m.lora) *m.params.at(lora::adapter_b(t)).value = random_vec<double>(slot.d * slot.r, rng, 0.3);
      } else {
        train::apply_freeze_policy(m, mode);
      }
      const auto r = train::gradient_check(m, batch, w);
      tensors += r.max_rel_error.size();
      if (r.worst > worst) {
        worst = r.worst;
        where = r.worst_tensor;
      }
    }
  }
  return {worst < 1e-4,
          fmt("worst relative error %.3g over %.0f tensor checks (5 seeds, pretrain and adapter modes)", worst,
              double(tensors)) + " at " + where};
}

double pairwise_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] && !y[j]) {
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        pairs += 1;
      }
  return num / pairs;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(11);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(200);
    std::vector<std::uint8_t> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      y[i] = rng() % 3 == 0;
      s[i] = t % 2 ? double(rng() % 17) / 16 : std::uniform_real_distribution<double>(0, 1)(rng);  // ties on odd t
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(*metrics::auroc(s, y) - pairwise_auroc(s, y)));
  }
  int exact = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t N = 3 + rng() % 6, C = 2 + rng() % 4;
    metrics::BinaryMatrix p{N, C, {}}, y{N, C, {}};
    for (std::size_t i = 0; i < N * C; ++i) {
      p.data.push_back(rng() % 2);
      y.data.push_back(rng() % 2);
    }
    // Hand enumeration of each cell.
    std::vector<double> tp(C), fp(C), fn(C), tn(C);
    double stp = 0, sfp = 0, sfn = 0, stn = 0, samples = 0;
    for (std::size_t i = 0; i < N; ++i) {
      double rtp = 0, rfp = 0, rfn = 0;
      for (std::size_t j = 0; j < C; ++j) {
        const int a = p(i, j), b = y(i, j);
        tp[j] += a & b;
        fp[j] += a & !b;
        fn[j] += (!a) & b;
        tn[j] += !a & !b;
        rtp += a & b;
        rfp += a & !b;
        rfn += (!a) & b;
      }
      samples += rtp + rfp + rfn == 0 ? 1.0 : 2 * rtp / (2 * rtp + rfp + rfn);
    }
    std::vector<double> f(C);
    double macro = 0, weighted = 0, support = 0;
    for (std::size_t j = 0; j < C; ++j) {
      f[j] = 2 * tp[j] + fp[j] + fn[j] == 0 ? 0.0 : 2 * tp[j] / (2 * tp[j] + fp[j] + fn[j]);
      macro += f[j];
      weighted += f[j] * (tp[j] + fn[j]);
      support += tp[j] + fn[j];
      stp += tp[j];
      sfp += fp[j];
      sfn += fn[j];
      stn += tn[j];
    }
    const auto r = metrics::f1_suite(p, y);
    const bool ok = r.accuracy == (stp + stn) / (stp + stn + sfp + sfn) &&
                    r.micro_f1 == (2 * stp + sfp + sfn == 0 ? 0.0 : 2 * stp / (2 * stp + sfp + sfn)) &&
                    r.macro_f1 == macro / double(C) && r.weighted_f1 == (support == 0 ? 0.0 : weighted / support) &&
                    r.samples_f1 == samples / double(N) && r.per_class_f1 == f;
    exact += ok;
  }
  return {worst <= 1e-12 && exact == 20,
          fmt("AUROC max diff %.3g on 50 x n=200; F1 family exact on %.0f/20", worst, double(exact))};
}

Outcome zero_shot_identities() {
  const inference::Embedding v{0.3, -1.2, 2.0};
  inference::Embedding anti = v, ortho{1.2, 0.3, 0.0};
  for (auto& x : anti) x = -2.5 * x;
  double endpoint = 0;
  for (double tau : {1.0, 10.0, 37.0}) {
    const auto s = inference::zero_shot_scores(v, {v, ortho, anti}, tau);
    endpoint = std::max({endpoint, std::abs(s.p[0] - 1 / (1 + std::exp(-tau))), std::abs(s.p[1] - 0.5),
                         std::abs(s.p[2] - 1 / (1 + std::exp(tau)))});
  }
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  double scale = 0;
  for (int trial = 0; trial < 50; ++trial) {
    inference::Embedding e(64);
    std::vector<inference::Embedding> t(18, inference::Embedding(64));
    for (auto& x : e) x = nd(rng);
    for (auto& p : t)
      for (auto& x : p) x = nd(rng);
    for (double c : {1e-6, 0.5, 3.0, 1e6}) scale = std::max(scale, inference::scale_invariance_check(e, t, 10, c).max_abs_diff);
  }
  return {endpoint <= 1e-7 && scale <= 1e-6, fmt("endpoint error %.3g; rescaling max diff %.3g", endpoint, scale)};
}

volume::RawVolume raw_of(std::size_t d, std::size_t h, std::size_t w, std::vector<std::int16_t> v, double slope,
                         double intercept) {
  volume::RawVolume r;
  r.depth = d;
  r.height = h;
  r.width = w;
  r.voxels = std::move(v);
  r.rescale_slope = slope;
  r.rescale_intercept = intercept;
  return r;
}

Outcome preprocessing() {
  std::mt19937_64 rng(1);
  bool clip = true, depth = true;
  for (std::size_t D : {20, 57, 240, 311}) {
    std::vector<std::int16_t> v(D * 4 * 4);
    for (auto& x : v) x = static_cast<std::int16_t>(int(rng() % 16000) - 8000);
    const auto raw = raw_of(D, 4, 4, v, 1.5, -300);
    for (float x : volume::rescale_and_clip(raw).voxels) clip = clip && x >= volume::kHuMin && x <= volume::kHuMax;
    const auto p = volume::preprocess(raw, 240);
    depth = depth && p.depth == 240 && p.voxels.size() == 240 * 16;
    for (float x : p.voxels) clip = clip && x >= 0.0f && x <= 1.0f;
  }
  volume::HuVolume e(1, 1, 3);
  e.voxels = {-1000.0f, 1000.0f, 0.0f};
  const auto n = volume::normalize_and_pack(e);
  const bool ends = n.voxels[0] == 0.0f && n.voxels[1] == 1.0f && n.voxels[2] == 0.5f;

  const std::size_t D = 300, target = 240;
  volume::HuVolume ramp(D, 1, 2);
  for (std::size_t k = 0; k < D; ++k) ramp.voxels[k * 2] = ramp.voxels[k * 2 + 1] = float(double(k) / double(D - 1));
  const auto out = volume::adjust_depth(ramp, target);
  double err = 0;
  for (std::size_t k = 0; k < target; ++k) {
    const double x = double(k) * double(D - 1) / double(target - 1);
    const double lo = std::floor(x), f = x - lo;
    const double expect = ((1 - f) * lo + f * std::min(lo + 1, double(D - 1))) / double(D - 1);
    err = std::max(err, std::abs(out.voxels[k * 2] - expect));
  }
  std::ostringstream s;
  s << "clip " << (clip ? "ok" : "violated") << "; endpoints " << (ends ? "ok" : "wrong") << "; depth 240 "
    << (depth ? "ok" : "wrong") << fmt("; ramp oracle max error %.3g", err);
  return {clip && ends && depth && err <= 1e-6, s.str()};
}

augment::ModelVolume aug_volume(std::uint64_t seed) {
  augment::ModelVolume v(12, 16, 16, 0.0f, {2.0, 1.5, 1.5});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& x : v.voxels) x = u(rng);
  return v;
}

Outcome augmentation() {
  const auto v = aug_volume(1);
  auto e = v, a = v, g = v;
  augment::elastic_deform(e, augment::DisplacementField::zero());
  augment::affine_transform(a, nullptr, {0, 0, 0}, 1.0, {0, 0, 0});
  augment::gamma_correct(g, 0.0);
  const bool ident = e.voxels == v.voxels && a.voxels == v.voxels && g.voxels == v.voxels;

  const augment::AugmentationPolicy pol;
  const std::array<double, 9> expect{pol.p_rotation, pol.p_scaling, pol.p_translation, pol.p_elastic, pol.p_flip,
                                     pol.p_blur,     pol.p_noise,   pol.p_gamma,       pol.p_bias_field};
  std::array<double, 9> count{};
  const int n = 10000;
  for (int s = 0; s < n; ++s)
    for (const auto& t : augment::sample_plan(pol, std::uint64_t(s)).transforms) count[t.index()] += 1;
  double worst_z = 0;
  for (std::size_t i = 0; i < 9; ++i)
    worst_z = std::max(worst_z, std::abs(count[i] / n - expect[i]) / std::sqrt(expect[i] * (1 - expect[i]) / n));

  bool det = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto x = aug_volume(s), y = x;
    augment::apply(augment::sample_plan(augment::AugmentationPolicy::always(), s), x);
    augment::apply(augment::sample_plan(augment::AugmentationPolicy::always(), s), y);
    det = det && std::memcmp(x.voxels.data(), y.voxels.data(), x.voxels.size() * sizeof(float)) == 0;
  }
  std::ostringstream s;
  s << "identities " << (ident ? "exact" : "broken") << fmt("; worst inclusion z = %.2f", worst_z) << "; determinism "
    << (det ? "bitwise" : "differs");
  return {ident && worst_z <= 3 && det, s.str()};
}

Outcome directional() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = fs::temp_directory_path() / ("ctlora_accept_" + std::to_string(::getpid()));
  fs::create_directories(root);
  const auto spec = synth::SyntheticSpec::standard();
  // Base pretraining uses its own corpus; the benchmark split is never seen by it.
  const auto corpus = data::gen_synth(spec, {800, 0, 0}, 7, (root / "pretrain").string());
  const auto bench = data::gen_synth(spec, {800, 0, 200}, 11, (root / "bench").string());

  auto cfg = pipeline::RunConfig::defaults();
  const auto vocab = pipeline::corpus_vocab({&corpus, &bench}, cfg.prompt_template);
  auto m = pipeline::pretrain_base(cfg, corpus, vocab);
  const auto eval = data::load_split(bench, "test", m.cfg, vocab);
  const auto before = pipeline::zero_shot(cfg, m, vocab, eval);
  const auto r = pipeline::finetune(cfg, m, bench, vocab);
  const auto after = pipeline::zero_shot(cfg, m, vocab, eval);
  fs::remove_all(root);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;

  const double gain = 100 * (after.mean_auroc - before.mean_auroc);
  const bool ok = gain >= 5 && after.f1.accuracy > before.f1.accuracy && after.f1.macro_f1 > before.f1.macro_f1 &&
                  r.base_hash_before == r.base_hash_after && minutes < 20;
  std::ostringstream s;
  s << fmt("zero-shot mean AUROC %.3f -> %.3f (%+.1f pp)", before.mean_auroc, after.mean_auroc, gain)
    << fmt(", accuracy %.3f -> %.3f", before.f1.accuracy, after.f1.accuracy)
    << fmt(", macro-F1 %.3f -> %.3f", before.f1.macro_f1, after.f1.macro_f1) << ", base hash "
    << (r.base_hash_before == r.base_hash_after ? "unchanged" : "CHANGED") << fmt(", %.1f min", minutes);
  return {ok, s.str()};
}

Outcome rank_sufficiency() {
  const std::size_t d = 32, k = 32, r = 4, n = 256, steps = 2000;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    auto gauss = [&](std::size_t a, std::size_t b, double s) {
      Eigen::MatrixXd m(a, b);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * nd(rng);
      return m;
    };
    const Eigen::MatrixXd target = gauss(d, r, 1 / std::sqrt(double(r))) * gauss(r, k, 1 / std::sqrt(double(k)));
    const Eigen::MatrixXd X = gauss(k, n, 1.0);
    auto a = lora::init_adapter<double>(d, k, r, 2.0 * double(r), 0.0, seed + 50, "linear");
    model::ParamStore<double> ps;
    ps.add("A", r, k, a.A).trainable = true;
    ps.add("B", d, r, a.B).trainable = true;
    train::OptimizerConfig oc;
    oc.weight_decay = 0;
    oc.eps = 1e-12;
    train::AdamState st;
    double err = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      a.A = *ps.at("A").value;
      a.B = *ps.at("B").value;
      const lora::Mat<double> A = Eigen::Map<const lora::Mat<double>>(a.A.data(), r, k);
      const lora::Mat<double> B = Eigen::Map<const lora::Mat<double>>(a.B.data(), d, r);
      // Loss (1/n) ||(W0 + dW) X - (W0 + dW*) X||^2; W0 cancels.
      const Eigen::MatrixXd E = lora::delta(a).cast<double>() - target;
      err = E.norm();
      const Eigen::MatrixXd G = 2.0 / double(n) * (E * X) * X.transpose();
      const lora::Mat<double> gB = a.scale() * G * A.transpose(), gA = a.scale() * B.transpose() * G;
      oc.learning_rate = 0.01 * 0.5 * (1 + std::cos(M_PI * double(t) / double(steps)));
      train::adamw_step(ps, {{"A", {gA.data(), gA.data() + gA.size()}}, {"B", {gB.data(), gB.data() + gB.size()}}},
                        st, oc);
    }
    a.A = *ps.at("A").value;
    a.B = *ps.at("B").value;
    err = (lora::delta(a) - target).norm();
    worst = std::max(worst, err);
  }
  return {worst < 1e-3, fmt("worst Frobenius error %.3g after 2000 Adam steps (d=k=32, r=4, 5 seeds)", worst)};
}

Outcome checkpoint_economics() {
  model::ModelConfig cfg;
  auto m = model::Model<float>::create(cfg, 1);
  lora::inject(m, lora::InjectionSpec::desk(cfg), 2);
  randomize_b(m, 3, 0.1);
  const auto base = checkpoint::encode(checkpoint::base_container(m));
  const auto adapters = checkpoint::encode(checkpoint::adapter_container(m));
  const fs::path p = fs::temp_directory_path() / ("ctlora_accept_" + std::to_string(::getpid()) + ".peft");
  checkpoint::save(checkpoint::adapter_container(m), p.string());
  const auto loaded = checkpoint::load(p.string());
  fs::remove(p);
  auto fresh = model::Model<float>::create(cfg, 1);
  checkpoint::apply_adapters(fresh, loaded);
  bool bitwise = checkpoint::encode(loaded) == adapters;
  for (const auto& q : m.params.items())
    if (q.kind() != model::Kind::base)
      bitwise = bitwise && fresh.params.has(q.name) &&
                std::memcmp(q.value->data(), fresh.params.at(q.name).value->data(), q.size() * sizeof(float)) == 0;
  const auto rb = checkpoint::decode(base);
  bitwise = bitwise && checkpoint::encode(rb) == base;
  std::ostringstream s;
  s << "adapters " << adapters.size() << " B, base " << base.size() << " B"
    << fmt(" (1/%.1f)", double(base.size()) / double(adapters.size())) << "; round trip "
    << (bitwise ? "bitwise" : "lossy");
  return {adapters.size() * 50 <= base.size() && bitwise, s.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"adapter zero-init identity", zero_init_identity},
      {"merge equivalence", merge_equivalence},
      {"parameter accounting", accounting},
      {"gradient correctness", gradient_check},
      {"metric oracles", metric_oracles},
      {"zero-shot identities", zero_shot_identities},
      {"preprocessing contracts", preprocessing},
      {"augmentation identities", augmentation},
      {"directional adapter gain", directional},
      {"rank sufficiency", rank_sufficiency},
      {"checkpoint economics", checkpoint_economics},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %2zu %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), sec);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
