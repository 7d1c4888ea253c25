// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Losses, gradient collection, AdamW and the epoch loop.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ctlora/augment.hpp"
#include "ctlora/checkpoint.hpp"
#include "ctlora/config.hpp"
#include "ctlora/error.hpp"
#include "ctlora/model.hpp"
#include "ctlora/text.hpp"

namespace ctlora::train {

using ag::Var;
using model::Context;
using model::Model;

// ---------------------------------------------------------------------------
// Losses

struct LossReport {
  double loss = 0;
  std::vector<double> per_class;  // mean BCE of each column
};

inline void check_labels(const std::vector<double>& y) {
  for (double v : y) require(v == 0.0 || v == 1.0, Errc::invalid_label, "labels must be 0 or 1");
}

/// Mean over N*C of the logit-form binary cross-entropy.
inline LossReport bce_loss(const std::vector<double>& logits, const std::vector<double>& labels, std::size_t classes) {
  require(logits.size() == labels.size() && classes > 0 && logits.size() % classes == 0, Errc::invalid_input,
          "bce_loss: shape mismatch");
  check_labels(labels);
  LossReport r;
  r.per_class.assign(classes, 0.0);
  const std::size_t n = logits.size() / classes;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    r.per_class[i % classes] += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  for (auto& v : r.per_class) {
    r.loss += v;
    v /= double(n);
  }
  r.loss /= double(logits.size());
  return r;
}

/// 0.5 * (CE over rows + CE over columns) of tau * cos(image_i, text_j).
template <class T>
Var<T> contrastive(const Var<T>& image, const Var<T>& text, T tau) {
  require(image.rows() == text.rows() && image.cols() == text.cols() && image.rows() > 0, Errc::invalid_input,
          "contrastive: shape mismatch");
  Var<T> s = ag::scale(ag::matmul_nt(ag::l2_normalize_rows(image), ag::l2_normalize_rows(text)), tau);
  return ag::scale(ag::add(ag::cross_entropy_diag(s), ag::cross_entropy_diag(ag::transpose(s))), T(0.5));
}

inline double contrastive_loss(const std::vector<double>& image, const std::vector<double>& text, std::size_t n,
                               double tau) {
  require(n > 0 && image.size() == text.size() && image.size() % n == 0, Errc::invalid_input,
          "contrastive_loss: shape mismatch");
  for (double v : image) require(std::isfinite(v), Errc::invalid_input, "non-finite image embedding");
  for (double v : text) require(std::isfinite(v), Errc::invalid_input, "non-finite text embedding");
  const std::size_t d = image.size() / n;
  return contrastive(ag::constant<double>(n, d, image), ag::constant<double>(n, d, text), tau).item();
}

// ---------------------------------------------------------------------------
// Gradients

template <class T>
using Gradients = std::map<std::string, std::vector<T>>;

/// Gradients of every trainable parameter read during the forward pass. In
/// strict mode a trainable parameter that was read but received no gradient
/// (detached from the loss) is an error.
template <class T>
Gradients<T> collect_gradients(const Context<T>& ctx, bool strict = true) {
  Gradients<T> g;
  for (const auto& [name, leaf] : ctx.leaves()) {
    if (!ctx.model.params.at(name).trainable) continue;
    if (leaf.grad().empty()) {
      if (strict) fail(Errc::missing_gradient, "no gradient reached trainable parameter " + name);
      continue;
    }
    g[name] = {leaf.grad().begin(), leaf.grad().end()};
  }
  return g;
}

template <class T>
double grad_norm(const Gradients<T>& g) {
  double s = 0;
  for (const auto& [n, v] : g)
    for (T x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// AdamW

struct OptimizerConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  std::size_t epochs = 15;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 8;

  void validate() const {
    require(learning_rate >= 0 && std::isfinite(learning_rate), Errc::invalid_config, "learning_rate must be >= 0");
    require(epochs >= 1, Errc::invalid_config, "epochs must be >= 1");
    require(batch_size >= 1, Errc::invalid_config, "batch_size must be >= 1");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0 && weight_decay >= 0, Errc::invalid_config,
            "AdamW hyperparameters out of range");
  }
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

/// Decoupled decay, then the bias-corrected Adam update. Parameters missing
/// from `grads` are treated as having zero gradient (decay still applies).
template <class T>
void adamw_step(model::ParamStore<T>& params, const Gradients<T>& grads, AdamState& st, const OptimizerConfig& cfg) {
  for (const auto& [name, g] : grads) {
    require(params.has(name) && params.at(name).size() == g.size(), Errc::invalid_input,
            "gradient shape mismatch for " + name);
    for (T x : g)
      if (!std::isfinite(double(x))) fail(Errc::numeric_fault, "non-finite gradient in " + name + "; step rejected");
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    auto& m = st.m[p.name];
    auto& v = st.v[p.name];
    m.resize(p.size(), 0.0);
    v.resize(p.size(), 0.0);
    auto it = grads.find(p.name);
    auto& w = *p.value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = it == grads.end() ? 0.0 : double(it->second[i]);
      double x = double(w[i]) * (1.0 - cfg.learning_rate * cfg.weight_decay);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      x -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
      w[i] = static_cast<T>(x);
    }
  }
}

// ---------------------------------------------------------------------------
// Batches

struct Sample {
  volume::ModelVolume volume;
  text::TokenSequence tokens;
  std::array<std::uint8_t, model::kNumClasses> labels{};
};

struct LossWeights {
  double bce = 1.0;
  double contrastive = 1.0;
  double tau = 10.0;
  // Prompt alignment: BCE on tau * cos(image, prompt_j) against label j.
  // Positives of class j are weighted by prompt_pos_weight[j] when given.
  double prompt = 0.0;
  std::vector<text::TokenSequence> prompt_tokens;
  std::vector<double> prompt_pos_weight;
};

/// (1 - p) / p per class from the training labels, clamped to [1, cap].
inline std::vector<double> balanced_pos_weight(const std::vector<Sample>& data, double cap = 10.0) {
  std::vector<double> w(model::kNumClasses, 1.0);
  for (std::size_t j = 0; j < model::kNumClasses; ++j) {
    double pos = 0;
    for (const auto& s : data) pos += s.labels[j];
    if (pos > 0) w[j] = std::clamp((double(data.size()) - pos) / pos, 1.0, cap);
  }
  return w;
}

template <class T>
struct BatchLoss {
  Var<T> total;
  double bce = 0;
  double contrastive = 0;
  double prompt = 0;
  double vq = 0;
};

/// Forward for a batch: image embeddings -> head (BCE) and, with a non-zero
/// contrastive weight, text embeddings -> symmetric contrastive term.
template <class T>
BatchLoss<T> batch_loss(Context<T>& ctx, const std::vector<const Sample*>& batch, const LossWeights& w) {
  require(!batch.empty(), Errc::invalid_input, "empty batch");
  std::vector<Var<T>> img;
  for (const auto* s : batch) img.push_back(model::vision_forward(ctx, s->volume));
  Var<T> I = ag::stack_rows(img);
  BatchLoss<T> out;
  std::vector<Var<T>> terms;
  if (w.bce > 0) {
    std::vector<T> y;
    for (const auto* s : batch)
      for (auto l : s->labels) y.push_back(T(l));
    Var<T> b = ag::bce_with_logits(model::classify(ctx, I), y);
    out.bce = double(b.item());
    terms.push_back(ag::scale(b, T(w.bce)));
  }
  if (w.contrastive > 0) {
    std::vector<Var<T>> txt;
    for (const auto* s : batch) txt.push_back(model::text_forward(ctx, s->tokens));
    Var<T> c = contrastive(I, ag::stack_rows(txt), T(w.tau));
    out.contrastive = double(c.item());
    terms.push_back(ag::scale(c, T(w.contrastive)));
  }
  if (w.prompt > 0) {
    require(!w.prompt_tokens.empty(), Errc::invalid_config, "prompt alignment needs prompt tokens");
    require(w.prompt_pos_weight.empty() || w.prompt_pos_weight.size() == w.prompt_tokens.size(), Errc::invalid_config,
            "prompt_pos_weight size mismatch");
    std::vector<Var<T>> pr;
    for (const auto& t : w.prompt_tokens) pr.push_back(model::text_forward(ctx, t));
    const std::size_t K = pr.size();
    Var<T> z = ag::scale(ag::matmul_nt(ag::l2_normalize_rows(I), ag::l2_normalize_rows(ag::stack_rows(pr))), T(w.tau));
    std::vector<T> y, wt;
    for (const auto* s : batch)
      for (std::size_t j = 0; j < K; ++j) {
        const bool pos = j < s->labels.size() && s->labels[j];
        y.push_back(T(pos));
        wt.push_back(T(pos && !w.prompt_pos_weight.empty() ? w.prompt_pos_weight[j] : 1.0));
      }
    Var<T> p = ag::bce_with_logits(z, y, std::move(wt));
    out.prompt = double(p.item());
    terms.push_back(ag::scale(p, T(w.prompt)));
  }
  for (const auto& a : ctx.aux_losses) {
    out.vq += double(a.item());
    terms.push_back(a);
  }
  require(!terms.empty(), Errc::invalid_config, "all loss weights are zero");
  out.total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = ag::add(out.total, terms[i]);
  if (!std::isfinite(double(out.total.item()))) fail(Errc::numeric_fault, "non-finite training loss");
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
  std::map<std::string, double> max_rel_error;  // per trainable tensor
  double worst = 0;
  std::string worst_tensor;
  std::size_t entries = 0;
};

/// Central differences of the batch loss against reverse mode, for every entry
/// of every trainable tensor. Runs in eval mode so the loss is deterministic.
/// Relative error is |a - f| / max(|a| + |f|, floor).
inline GradCheckReport gradient_check(Model<double>& m, const std::vector<const Sample*>& batch, const LossWeights& w,
                                      double h = 1e-5, double floor = 1e-5) {
  Context<double> ctx(m, false, 0, true);
  auto loss = batch_loss(ctx, batch, w);
  ag::backward(loss.total);
  const auto grads = collect_gradients(ctx, true);
  auto value = [&] {
    Context<double> c(m, false, 0, false);
    return batch_loss(c, batch, w).total.item();
  };
  GradCheckReport r;
  for (auto& p : m.params.items()) {
    if (!p.trainable) continue;
    auto it = grads.find(p.name);
    require(it != grads.end(), Errc::missing_gradient, "no gradient for trainable parameter " + p.name);
    double worst = 0;
    auto& x = *p.value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = x[i];
      x[i] = x0 + h;
      const double up = value();
      x[i] = x0 - h;
      const double down = value();
      x[i] = x0;
      const double fd = (up - down) / (2 * h), an = it->second[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), floor));
      ++r.entries;
    }
    r.max_rel_error[p.name] = worst;
    if (worst >= r.worst) {
      r.worst = worst;
      r.worst_tensor = p.name;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Epoch loop

enum class Mode { pretrain, lora };

struct FitOptions {
  Mode mode = Mode::lora;
  OptimizerConfig optimizer;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::optional<augment::AugmentationPolicy> augmentation;
  std::string out_dir;  // empty: no log or checkpoints
  bool resume = false;
  bool strict_gradients = true;
  std::function<void(const nlohmann::json&)> on_epoch;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double bce = 0, contrastive = 0, prompt = 0, vq = 0, total = 0, grad_norm = 0, wall_time = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"bce", bce},     {"contrastive", contrastive}, {"prompt", prompt},
            {"vq", vq},       {"total", total}, {"grad_norm", grad_norm},     {"wall_time", wall_time}};
  }
};

struct FitResult {
  std::vector<EpochRecord> log;
  std::string base_hash_before, base_hash_after;
};

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return lora::adapter_seed(a, b); }

/// Trainable set per mode: base and head for pretraining; adapters and head
/// for LoRA fine-tuning.
template <class T>
void apply_freeze_policy(Model<T>& m, Mode mode) {
  for (auto& p : m.params.items())
    p.trainable = mode == Mode::pretrain ? p.kind() != model::Kind::adapter : p.kind() != model::Kind::base;
}

inline checkpoint::Container train_state(const AdamState& st, std::size_t epoch) {
  checkpoint::Container c{"train_state", "train_state", {}, {}, {}};
  c.meta["step"] = std::to_string(st.step);
  c.meta["epoch"] = std::to_string(epoch);
  auto put = [&](const std::string& prefix, const std::map<std::string, std::vector<double>>& mm) {
    for (const auto& [n, v] : mm) c.tensors.push_back({prefix + n, 1, v.size(), std::vector<float>(v.begin(), v.end())});
  };
  put("m:", st.m);
  put("v:", st.v);
  return c;
}

inline std::pair<AdamState, std::size_t> restore_state(const checkpoint::Container& c) {
  require(c.component == "train_state", Errc::compatibility, "not a train_state checkpoint");
  AdamState st;
  st.step = std::stoull(c.meta.at("step"));
  for (const auto& t : c.tensors) {
    auto& dst = t.name.rfind("m:", 0) == 0 ? st.m : st.v;
    dst[t.name.substr(2)] = {t.data.begin(), t.data.end()};
  }
  return {st, std::stoul(c.meta.at("epoch"))};
}

/// Trains `m` in place. In LoRA mode base weights are hash-checked unchanged.
inline FitResult fit(Model<float>& m, const std::vector<Sample>& data, const FitOptions& opt) {
  require(!data.empty(), Errc::invalid_config, "training dataset is empty");
  opt.optimizer.validate();
  apply_freeze_policy(m, opt.mode);
  require(opt.mode == Mode::pretrain || !m.lora.empty() || opt.weights.bce > 0, Errc::invalid_config,
          "LoRA fine-tuning needs adapters or a BCE term");
  FitResult res;
  res.base_hash_before = checkpoint::base_hash(m);
  AdamState st;
  std::size_t first_epoch = 0;
  namespace fs = std::filesystem;
  const fs::path dir = opt.out_dir;
  if (!opt.out_dir.empty()) fs::create_directories(dir);
  const std::string prefix = opt.mode == Mode::pretrain ? "pretrain" : "lora";
  if (opt.resume) {
    require(!opt.out_dir.empty(), Errc::invalid_config, "--resume needs an output directory");
    const fs::path sp = dir / (prefix + "_state.peft");
    require(fs::exists(sp), Errc::data, "no resumable checkpoint in " + dir.string());
    std::tie(st, first_epoch) = restore_state(checkpoint::load(sp.string()));
    if (opt.mode == Mode::lora) {
      checkpoint::apply_adapters(m, checkpoint::load((dir / "adapters.peft").string()));
    } else {
      auto base = checkpoint::model_from_base(checkpoint::load((dir / "base.peft").string()));
      for (auto& p : m.params.items())
        if (p.kind() == model::Kind::base) *p.value = *base.params.at(p.name).value;
      checkpoint::apply_adapters(m, checkpoint::load((dir / "head.peft").string()));
      res.base_hash_before = checkpoint::base_hash(m);
    }
    apply_freeze_policy(m, opt.mode);
    std::ifstream old((dir / (prefix + "_log.jsonl")).string());
    std::string line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch");
      r.bce = j.at("bce");
      r.contrastive = j.at("contrastive");
      r.prompt = j.value("prompt", 0.0);
      r.vq = j.at("vq");
      r.total = j.at("total");
      r.grad_norm = j.at("grad_norm");
      r.wall_time = j.at("wall_time");
      if (r.epoch <= first_epoch) res.log.push_back(r);
    }
  }
  std::ofstream log;
  if (!opt.out_dir.empty())
    log.open((dir / (prefix + "_log.jsonl")).string(), opt.resume ? std::ios::app : std::ios::trunc);

  const std::size_t B = opt.optimizer.batch_size;
  for (std::size_t epoch = first_epoch + 1; epoch <= opt.optimizer.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuf(mix(opt.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuf);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      const std::size_t b1 = std::min(order.size(), b0 + B);
      if (opt.augmentation) augmented.reserve(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        const Sample& s = data[order[i]];
        if (opt.augmentation) {
          augmented.push_back(s);
          augment::apply(augment::sample_plan(*opt.augmentation, mix(mix(opt.seed, epoch), order[i])),
                         augmented.back().volume);
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      Context<float> ctx(m, true, mix(opt.seed ^ 0x5eed, st.step + 1));
      auto loss = batch_loss(ctx, batch, opt.weights);
      ag::backward(loss.total);
      auto grads = collect_gradients(ctx, opt.strict_gradients);
      rec.grad_norm += grad_norm(grads);
      adamw_step(m.params, grads, st, opt.optimizer);
      rec.bce += loss.bce;
      rec.contrastive += loss.contrastive;
      rec.prompt += loss.prompt;
      rec.vq += loss.vq;
      rec.total += double(loss.total.item());
      ++steps;
    }
    for (double* v : {&rec.bce, &rec.contrastive, &rec.prompt, &rec.vq, &rec.total, &rec.grad_norm}) *v /= double(steps);
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(rec);
    if (!opt.out_dir.empty()) {
      log << rec.to_json().dump() << "\n" << std::flush;
      if (opt.mode == Mode::lora) checkpoint::save(checkpoint::adapter_container(m), (dir / "adapters.peft").string());
      else {
        checkpoint::save(checkpoint::base_container(m), (dir / "base.peft").string());
        checkpoint::save(checkpoint::adapter_container(m, "head"), (dir / "head.peft").string());
      }
      checkpoint::save(train_state(st, epoch), (dir / (prefix + "_state.peft")).string());
    }
    if (opt.on_epoch) opt.on_epoch(rec.to_json());
  }
  res.base_hash_after = checkpoint::base_hash(m);
  if (opt.mode == Mode::lora)
    require(res.base_hash_before == res.base_hash_after, Errc::numeric_fault,
            "frozen base weights changed during fine-tuning");
  return res;
}

}  // namespace ctlora::train
