// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration and the end-to-end steps shared by the CLI and the
// acceptance harness: pretrain a base, fine-tune adapters, compare zero-shot.

#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ctlora/augment.hpp"
#include "ctlora/checkpoint.hpp"
#include "ctlora/config.hpp"
#include "ctlora/data.hpp"
#include "ctlora/inference.hpp"
#include "ctlora/lora.hpp"
#include "ctlora/metrics.hpp"
#include "ctlora/model.hpp"
#include "ctlora/text.hpp"
#include "ctlora/train.hpp"

namespace ctlora::pipeline {

namespace fs = std::filesystem;

struct StageConfig {
  train::OptimizerConfig optimizer;
  double bce = 1.0;
  double contrastive = 1.0;
  double prompt = 0.0;
  double prompt_pos_cap = 1.0;  // 1 disables positive re-weighting
};

struct RunConfig {
  model::ModelConfig model;
  StageConfig pretrain;
  StageConfig finetune;
  std::size_t vision_rank = 2, text_rank = 2;
  double vision_alpha = 4.0, text_alpha = 4.0, lora_dropout = 0.05;
  std::string augment_policy;  // empty: no augmentation
  std::uint64_t seed = 0;
  std::string out = "runs";
  double tau = inference::kDefaultTau;
  double threshold = 0.5;
  std::string prompt_template = inference::kDefaultTemplate;
  std::string manifest;           // labelled data (train/val/test splits)
  std::string pretrain_manifest;  // unlabelled-for-eval corpus for the base

  static RunConfig defaults() {
    RunConfig c;
    c.pretrain.optimizer.epochs = 15;
    c.pretrain.optimizer.learning_rate = 1e-3;
    c.finetune.optimizer.epochs = 8;
    c.finetune.optimizer.learning_rate = 1e-3;
    c.finetune.prompt = 1.0;
    c.finetune.prompt_pos_cap = 10.0;
    return c;
  }

  lora::InjectionSpec injection() const {
    return {{{model::vision_targets(model.vision), vision_rank, vision_alpha, lora_dropout},
             {model::text_targets(model.text), text_rank, text_alpha, lora_dropout}}};
  }

  config::KeyValues to_kv() const {
    using config::fmt;
    auto kv = model.to_kv();
    auto stage = [&](const std::string& p, const StageConfig& s) {
      kv[p + ".epochs"] = fmt(s.optimizer.epochs);
      kv[p + ".learning_rate"] = fmt(s.optimizer.learning_rate);
      kv[p + ".weight_decay"] = fmt(s.optimizer.weight_decay);
      kv[p + ".batch_size"] = fmt(s.optimizer.batch_size);
      kv[p + ".beta1"] = fmt(s.optimizer.beta1);
      kv[p + ".beta2"] = fmt(s.optimizer.beta2);
      kv[p + ".eps"] = fmt(s.optimizer.eps);
      kv[p + ".bce_weight"] = fmt(s.bce);
      kv[p + ".contrastive_weight"] = fmt(s.contrastive);
      kv[p + ".prompt_weight"] = fmt(s.prompt);
      kv[p + ".prompt_pos_cap"] = fmt(s.prompt_pos_cap);
    };
    stage("pretrain", pretrain);
    stage("finetune", finetune);
    kv["lora.vision_rank"] = fmt(vision_rank);
    kv["lora.vision_alpha"] = fmt(vision_alpha);
    kv["lora.text_rank"] = fmt(text_rank);
    kv["lora.text_alpha"] = fmt(text_alpha);
    kv["lora.dropout"] = fmt(lora_dropout);
    kv["augment.policy"] = augment_policy;
    kv["run.seed"] = fmt(seed);
    kv["run.out"] = out;
    kv["eval.tau"] = fmt(tau);
    kv["eval.threshold"] = fmt(threshold);
    kv["eval.template"] = prompt_template;
    kv["data.manifest"] = manifest;
    kv["data.pretrain_manifest"] = pretrain_manifest;
    return kv;
  }

  static RunConfig from_kv(const config::KeyValues& kv) {
    RunConfig c = defaults();
    config::KeyValues model_kv = c.model.to_kv();
    for (const auto& [k, v] : kv)
      if (k.rfind("model.", 0) == 0) model_kv[k] = v;
    c.model = model::ModelConfig::from_kv(model_kv);
    config::Reader r(kv);
    for (const auto& [k, v] : kv)
      if (k.rfind("model.", 0) == 0) r.get(k, model_kv[k]);
    auto stage = [&](const std::string& p, StageConfig& s) {
      r.get(p + ".epochs", s.optimizer.epochs);
      r.get(p + ".learning_rate", s.optimizer.learning_rate);
      r.get(p + ".weight_decay", s.optimizer.weight_decay);
      r.get(p + ".batch_size", s.optimizer.batch_size);
      r.get(p + ".beta1", s.optimizer.beta1);
      r.get(p + ".beta2", s.optimizer.beta2);
      r.get(p + ".eps", s.optimizer.eps);
      r.get(p + ".bce_weight", s.bce);
      r.get(p + ".contrastive_weight", s.contrastive);
      r.get(p + ".prompt_weight", s.prompt);
      r.get(p + ".prompt_pos_cap", s.prompt_pos_cap);
      s.optimizer.validate();
      require(s.bce >= 0 && s.contrastive >= 0 && s.prompt >= 0, Errc::invalid_config,
              p + " loss weights must be >= 0");
      require(s.prompt_pos_cap >= 1, Errc::invalid_config, p + ".prompt_pos_cap must be >= 1");
    };
    stage("pretrain", c.pretrain);
    stage("finetune", c.finetune);
    r.get("lora.vision_rank", c.vision_rank);
    r.get("lora.vision_alpha", c.vision_alpha);
    r.get("lora.text_rank", c.text_rank);
    r.get("lora.text_alpha", c.text_alpha);
    r.get("lora.dropout", c.lora_dropout);
    r.get("augment.policy", c.augment_policy);
    r.get("run.seed", c.seed);
    r.get("run.out", c.out);
    r.get("eval.tau", c.tau);
    r.get("eval.threshold", c.threshold);
    r.get("eval.template", c.prompt_template);
    r.get("data.manifest", c.manifest);
    r.get("data.pretrain_manifest", c.pretrain_manifest);
    const auto unknown = r.first_unknown("");
    require(unknown.empty(), Errc::invalid_config, "unknown config key " + unknown);
    require(c.tau > 0 && std::isfinite(c.tau), Errc::invalid_config, "eval.tau must be positive");
    require(c.threshold > 0 && c.threshold < 1, Errc::invalid_config, "eval.threshold must lie in (0,1)");
    require(c.vision_rank >= 1 && c.text_rank >= 1, Errc::invalid_rank, "LoRA rank must be >= 1");
    require(c.lora_dropout >= 0 && c.lora_dropout < 1, Errc::invalid_config, "lora.dropout must be in [0,1)");
    inference::build_prompts({"x"}, c.prompt_template);  // validates the template
    return c;
  }
};

inline std::optional<augment::AugmentationPolicy> load_policy(const std::string& path) {
  if (path.empty()) return std::nullopt;
  require(fs::exists(path), Errc::invalid_config, "cannot open augmentation policy " + path);
  return augment::parse_policy(volume::read_file(path));
}

// ---------------------------------------------------------------------------
// Output directories

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%S") << std::setw(3) << std::setfill('0') << ms;
  return os.str();
}

/// <out>/<command>-<timestamp>, with config.conf and seed written up front.
inline std::string make_run_dir(const RunConfig& cfg, const std::string& command) {
  fs::path dir = fs::path(cfg.out) / (command + "-" + timestamp());
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(cfg.out) / (command + "-" + timestamp() + "-" + std::to_string(i));
  fs::create_directories(dir);
  volume::write_file((dir / "config.conf").string(), config::to_text(cfg.to_kv()));
  volume::write_file((dir / "seed").string(), std::to_string(cfg.seed) + "\n");
  return dir.string();
}

// ---------------------------------------------------------------------------
// Steps

/// Vocabulary over the train-split reports of every manifest plus the prompts.
inline text::Vocabulary corpus_vocab(const std::vector<const data::Manifest*>& manifests, const std::string& tmpl) {
  std::vector<std::string> corpus;
  for (const auto* m : manifests)
    for (const auto* r : m->split("train")) corpus.push_back(r->report());
  for (const auto& p : inference::build_prompts(model::class_names(), tmpl).prompts) corpus.push_back(p);
  return text::build_vocab(corpus);
}

inline train::LossWeights loss_weights(const RunConfig& cfg, const StageConfig& s, const text::Vocabulary& vocab,
                                       const std::vector<train::Sample>& data) {
  train::LossWeights w;
  w.bce = s.bce;
  w.contrastive = s.contrastive;
  w.tau = cfg.tau;
  w.prompt = s.prompt;
  if (s.prompt > 0) {
    for (const auto& p : inference::build_prompts(model::class_names(), cfg.prompt_template).prompts)
      w.prompt_tokens.push_back(text::tokenize(p, vocab, cfg.model.text.max_len));
    if (s.prompt_pos_cap > 1) w.prompt_pos_weight = train::balanced_pos_weight(data, s.prompt_pos_cap);
  }
  return w;
}

inline train::FitOptions fit_options(const RunConfig& cfg, const StageConfig& s, train::Mode mode,
                                     const text::Vocabulary& vocab, const std::vector<train::Sample>& data) {
  train::FitOptions o;
  o.mode = mode;
  o.optimizer = s.optimizer;
  o.weights = loss_weights(cfg, s, vocab, data);
  o.seed = cfg.seed;
  o.augmentation = load_policy(cfg.augment_policy);
  return o;
}

/// Trains base weights and head from scratch on the train split of `corpus`.
inline model::Model<float> pretrain_base(const RunConfig& cfg, const data::Manifest& corpus,
                                         const text::Vocabulary& vocab, const std::string& out_dir = {},
                                         bool resume = false, train::FitResult* result = nullptr) {
  model::ModelConfig mc = cfg.model;
  mc.text.vocab_size = vocab.size();
  auto m = model::Model<float>::create(mc, cfg.seed);
  const auto d = data::load_split(corpus, "train", mc, vocab);
  auto o = fit_options(cfg, cfg.pretrain, train::Mode::pretrain, vocab, d.samples);
  o.out_dir = out_dir;
  o.resume = resume;
  auto r = train::fit(m, d.samples, o);
  if (result) *result = std::move(r);
  return m;
}

/// Injects adapters into `m` and trains adapters + head on the train split.
inline train::FitResult finetune(const RunConfig& cfg, model::Model<float>& m, const data::Manifest& manifest,
                                 const text::Vocabulary& vocab, const std::string& out_dir = {},
                                 bool resume = false) {
  lora::inject(m, cfg.injection(), cfg.seed);
  const auto d = data::load_split(manifest, "train", m.cfg, vocab);
  auto o = fit_options(cfg, cfg.finetune, train::Mode::lora, vocab, d.samples);
  o.out_dir = out_dir;
  o.resume = resume;
  return train::fit(m, d.samples, o);
}

inline metrics::MetricsReport zero_shot(const RunConfig& cfg, const model::Model<float>& m,
                                        const text::Vocabulary& vocab, const data::Dataset& d,
                                        metrics::ScoreMatrix* scores = nullptr) {
  auto p = inference::build_prompts(model::class_names(), cfg.prompt_template);
  inference::embed_prompts(p, m, vocab);
  return inference::zero_shot_eval(m, p, d.volumes(), d.labels(), cfg.tau, cfg.threshold, scores);
}

/// Image -> report retrieval over a split (query i matches gallery item i).
inline inference::RetrievalResult retrieval(const model::Model<float>& m, const data::Dataset& d,
                                            const std::vector<std::size_t>& ks) {
  std::vector<inference::Embedding> q, g;
  for (const auto& s : d.samples) {
    q.push_back(inference::embed_volume(m, s.volume));
    model::Context<float> ctx(m, false, 0, false);
    const auto v = model::to_vector(model::text_forward(ctx, s.tokens));
    g.emplace_back(v.begin(), v.end());
  }
  return inference::retrieve_all(q, g, ks);
}

// ---------------------------------------------------------------------------
// Comparison tables

struct ComparisonRow {
  std::string metric;
  double base = 0, adapted = 0;
  double gain_pp() const { return 100.0 * (adapted - base); }
  double relative() const { return base != 0 ? 100.0 * (adapted - base) / base : 0.0; }
};

inline std::vector<ComparisonRow> compare(const metrics::MetricsReport& base, const metrics::MetricsReport& adapted) {
  return {{"Accuracy", base.f1.accuracy, adapted.f1.accuracy},
          {"Micro-F1", base.f1.micro_f1, adapted.f1.micro_f1},
          {"Macro-F1", base.f1.macro_f1, adapted.f1.macro_f1},
          {"Weighted-F1", base.f1.weighted_f1, adapted.f1.weighted_f1},
          {"Samples-F1", base.f1.samples_f1, adapted.f1.samples_f1},
          {"Mean AUROC", base.mean_auroc, adapted.mean_auroc}};
}

inline std::string format_table(const std::vector<ComparisonRow>& rows) {
  auto pct = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.1f%%", 100.0 * v);
    return std::string(b);
  };
  auto signed1 = [](double v, const char* suffix) {
    char b[32];
    std::snprintf(b, sizeof b, "%+.1f%s", v, suffix);
    return std::string(b);
  };
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s\n", "Metric", "Base", "Adapted", "Gain (pp)", "Relative");
  os << line;
  double gain = 0, rel = 0;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s\n", r.metric.c_str(), pct(r.base).c_str(),
                  pct(r.adapted).c_str(), signed1(r.gain_pp(), "").c_str(), signed1(r.relative(), "%").c_str());
    os << line;
    gain += r.gain_pp();
    rel += r.relative();
  }
  if (!rows.empty()) {
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s\n", "Mean Gain", "", "",
                  signed1(gain / double(rows.size()), " pp").c_str(), signed1(rel / double(rows.size()), "%").c_str());
    os << line;
  }
  return os.str();
}

inline nlohmann::json to_json(const std::vector<ComparisonRow>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"metric", r.metric}, {"base", r.base}, {"adapted", r.adapted}, {"gain_pp", r.gain_pp()},
                   {"relative", r.relative()}});
  return arr;
}

}  // namespace ctlora::pipeline
