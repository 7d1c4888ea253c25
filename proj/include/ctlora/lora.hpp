// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Low-rank adapters: creation, injection into named projections, merge /
// unmerge, and trainable-parameter accounting.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ctlora/error.hpp"
#include "ctlora/model.hpp"

namespace ctlora::lora {

using model::LoraSlot;
using model::Model;
using model::ModelConfig;

/// Standalone adapter: A is r x k, B is d x r, both row-major.
template <class T>
struct LoraAdapter {
  std::string target;
  std::size_t d = 0, k = 0, r = 0;
  double alpha = 1.0;
  double dropout = 0.0;
  std::vector<T> A, B;

  double scale() const { return alpha / double(r); }
  std::size_t parameter_count() const { return A.size() + B.size(); }
};

/// A ~ U(-1/sqrt(k), 1/sqrt(k)), B = 0.
template <class T>
LoraAdapter<T> init_adapter(std::size_t d, std::size_t k, std::size_t r, double alpha, double dropout,
                            std::uint64_t seed, std::string target = {}) {
  require(r >= 1 && r <= std::min(d, k), Errc::invalid_rank,
          "rank " + std::to_string(r) + " exceeds min(d,k)=" + std::to_string(std::min(d, k)));
  require(alpha > 0 && std::isfinite(alpha / double(r)), Errc::invalid_config, "alpha must be positive");
  require(dropout >= 0 && dropout < 1, Errc::invalid_config, "adapter dropout must be in [0,1)");
  LoraAdapter<T> a{std::move(target), d, k, r, alpha, dropout, std::vector<T>(r * k), std::vector<T>(d * r, T(0))};
  std::mt19937_64 rng(seed);
  const double b = 1.0 / std::sqrt(double(k));
  std::uniform_real_distribution<double> u(-b, b);
  for (auto& x : a.A) x = static_cast<T>(u(rng));
  return a;
}

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Mat<T> delta(const LoraAdapter<T>& a) {
  Eigen::Map<const Mat<T>> A(a.A.data(), Eigen::Index(a.r), Eigen::Index(a.k));
  Eigen::Map<const Mat<T>> B(a.B.data(), Eigen::Index(a.d), Eigen::Index(a.r));
  return (B * A) * T(a.scale());
}

/// h = W0 x + (alpha/r) B A dropout(x). Dropout only when `rng` is given (train mode).
template <class T>
std::vector<T> adapted_forward(const std::vector<T>& x, const std::vector<T>& W0, const LoraAdapter<T>& a,
                               std::mt19937_64* rng = nullptr) {
  require(x.size() == a.k && W0.size() == a.d * a.k && a.A.size() == a.r * a.k && a.B.size() == a.d * a.r,
          Errc::invalid_input, "adapted_forward: shape mismatch");
  Eigen::Map<const Mat<T>> W(W0.data(), Eigen::Index(a.d), Eigen::Index(a.k));
  Eigen::Map<const Mat<T>> A(a.A.data(), Eigen::Index(a.r), Eigen::Index(a.k));
  Eigen::Map<const Mat<T>> B(a.B.data(), Eigen::Index(a.d), Eigen::Index(a.r));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(x.data(), Eigen::Index(a.k));
  Eigen::Matrix<T, Eigen::Dynamic, 1> xa = xv;
  if (rng && a.dropout > 0) {
    std::bernoulli_distribution keep(1.0 - a.dropout);
    for (Eigen::Index i = 0; i < xa.size(); ++i) xa(i) = keep(*rng) ? xa(i) / T(1.0 - a.dropout) : T(0);
  }
  Eigen::Matrix<T, Eigen::Dynamic, 1> h = W * xv + (B * (A * xa)) * T(a.scale());
  return {h.data(), h.data() + h.size()};
}

/// W0 + (alpha/r) B A.
template <class T>
std::vector<T> merge(const LoraAdapter<T>& a, std::vector<T> W0) {
  require(W0.size() == a.d * a.k, Errc::invalid_input, "merge: shape mismatch");
  const Mat<T> dw = delta(a);
  for (std::size_t i = 0; i < W0.size(); ++i) W0[i] += dw.data()[i];
  return W0;
}

template <class T>
std::vector<T> unmerge(const LoraAdapter<T>& a, std::vector<T> W) {
  require(W.size() == a.d * a.k, Errc::invalid_input, "unmerge: shape mismatch");
  const Mat<T> dw = delta(a);
  for (std::size_t i = 0; i < W.size(); ++i) W[i] -= dw.data()[i];
  return W;
}

// ---------------------------------------------------------------------------
// Injection

struct TargetRule {
  std::vector<std::string> targets;
  std::size_t rank = 1;
  double alpha = 1.0;
  double dropout = 0.0;
};

struct InjectionSpec {
  std::vector<TargetRule> rules;

  /// Scaled-down ranks for the desk model (alpha/r kept at 2).
  static InjectionSpec desk(const ModelConfig& cfg) {
    return {{{model::vision_targets(cfg.vision), 2, 4.0, 0.05}, {model::text_targets(cfg.text), 2, 4.0, 0.05}}};
  }
  /// r=16, alpha=32 on vision; r=8, alpha=16 on text.
  static InjectionSpec paper(const ModelConfig& cfg) {
    return {{{model::vision_targets(cfg.vision), 16, 32.0, 0.05}, {model::text_targets(cfg.text), 8, 16.0, 0.05}}};
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& r : rules) n += r.targets.size();
    return n;
  }
};

inline std::string adapter_a(const std::string& target) { return target + ".lora_A"; }
inline std::string adapter_b(const std::string& target) { return target + ".lora_B"; }

/// Seeds the per-target RNG from the run seed and the adapter's position.
inline std::uint64_t adapter_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Attaches fresh adapters, freezes every base parameter and leaves the head
/// and adapters trainable. Returns the number of adapters attached.
template <class T>
std::size_t inject(Model<T>& m, const InjectionSpec& spec, std::uint64_t seed) {
  std::set<std::string> seen;
  std::string missing;
  for (const auto& rule : spec.rules)
    for (const auto& t : rule.targets) {
      if (!m.params.has(t + ".weight")) missing += (missing.empty() ? "" : ", ") + t;
      require(seen.insert(t).second && !m.lora.count(t), Errc::injection, "target adapted twice: " + t);
    }
  require(missing.empty(), Errc::injection, "unresolved adapter targets: " + missing);
  std::size_t index = 0;
  for (const auto& rule : spec.rules)
    for (const auto& t : rule.targets) {
      const auto& w = m.params.at(t + ".weight");
      auto a = init_adapter<T>(w.rows, w.cols, rule.rank, rule.alpha, rule.dropout, adapter_seed(seed, index++), t);
      m.params.add(adapter_a(t), a.r, a.k, std::move(a.A));
      m.params.add(adapter_b(t), a.d, a.r, std::move(a.B));
      m.lora[t] = LoraSlot{t, a.d, a.k, a.r, a.alpha, a.dropout, false};
    }
  for (auto& p : m.params.items()) p.trainable = p.kind() != model::Kind::base;
  return spec.size();
}

/// Snapshot of one attached adapter as a standalone value.
template <class T>
LoraAdapter<T> extract(const Model<T>& m, const std::string& target) {
  auto it = m.lora.find(target);
  require(it != m.lora.end(), Errc::compatibility, "no adapter on " + target);
  const auto& s = it->second;
  return {target, s.d, s.k, s.r, s.alpha, s.dropout, *m.params.at(adapter_a(target)).value,
          *m.params.at(adapter_b(target)).value};
}

/// Folds every adapter into its base weight (idempotent per adapter).
template <class T>
void merge_all(Model<T>& m) {
  for (auto& [t, s] : m.lora) {
    if (s.merged) continue;
    auto& w = *m.params.at(t + ".weight").value;
    w = merge(extract(m, t), std::move(w));
    s.merged = true;
  }
}

template <class T>
void unmerge_all(Model<T>& m) {
  for (auto& [t, s] : m.lora) {
    if (!s.merged) continue;
    auto& w = *m.params.at(t + ".weight").value;
    w = unmerge(extract(m, t), std::move(w));
    s.merged = false;
  }
}

/// Drops all adapters (base weights untouched unless merged first).
template <class T>
void remove_adapters(Model<T>& m) {
  for (const auto& [t, s] : m.lora) {
    m.params.erase(adapter_a(t));
    m.params.erase(adapter_b(t));
  }
  m.lora.clear();
}

// ---------------------------------------------------------------------------
// Accounting

struct ComponentCount {
  std::string component;
  std::uint64_t total = 0;      // all parameters in the component
  std::uint64_t trainable = 0;  // adapters + head
  std::uint64_t adapters = 0;   // number of adapter layers
  double percent() const { return total ? 100.0 * double(trainable) / double(total) : 0.0; }
};

struct ParamCount {
  std::vector<ComponentCount> components;
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
  std::uint64_t adapters = 0;
  double percent() const { return total ? 100.0 * double(trainable) / double(total) : 0.0; }
};

inline std::string component_of(const std::string& name) {
  if (name.rfind("vision.", 0) == 0) return "vision";
  if (name.rfind("text.", 0) == 0) return "text";
  return "head";
}

template <class T>
ParamCount count_trainable(const Model<T>& m) {
  std::map<std::string, ComponentCount> by;
  for (const char* c : {"vision", "text", "head"}) by[c].component = c;
  for (const auto& p : m.params.items()) {
    auto& c = by[component_of(p.name)];
    c.total += p.size();
    if (p.trainable) c.trainable += p.size();
  }
  for (const auto& [t, s] : m.lora) ++by[component_of(t)].adapters;
  ParamCount pc;
  for (const char* c : {"vision", "text", "head"}) {
    pc.components.push_back(by[c]);
    pc.trainable += by[c].trainable;
    pc.total += by[c].total;
    pc.adapters += by[c].adapters;
  }
  return pc;
}

/// Accounting for a config + spec without allocating any tensors.
inline ParamCount structural_count(const ModelConfig& cfg, const InjectionSpec& spec) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
  std::map<std::string, ComponentCount> by;
  for (const char* c : {"vision", "text", "head"}) by[c].component = c;
  for (const auto& s : model::param_specs(cfg)) {
    shapes[s.name] = {s.rows, s.cols};
    auto& c = by[component_of(s.name)];
    c.total += s.rows * s.cols;
    if (model::kind_of(s.name) == model::Kind::head) c.trainable += s.rows * s.cols;
  }
  for (const auto& rule : spec.rules)
    for (const auto& t : rule.targets) {
      auto it = shapes.find(t + ".weight");
      require(it != shapes.end(), Errc::injection, "unresolved adapter targets: " + t);
      const auto [d, k] = it->second;
      require(rule.rank <= std::min(d, k), Errc::invalid_rank, "rank exceeds min(d,k) on " + t);
      auto& c = by[component_of(t)];
      c.total += rule.rank * (d + k);
      c.trainable += rule.rank * (d + k);
      ++c.adapters;
    }
  ParamCount pc;
  for (const char* c : {"vision", "text", "head"}) {
    pc.components.push_back(by[c]);
    pc.trainable += by[c].trainable;
    pc.total += by[c].total;
    pc.adapters += by[c].adapters;
  }
  return pc;
}

/// Reference-scale accounting of the published CT foundation model, rebuilt
/// from its stated component sizes and adapter layout.
///
/// Vision: 97 adapters at r=16, each on a 512 <-> 256 attention projection
/// (16 * (512 + 256) = 12,288 parameters). Text: BERT-base query/key/value in
/// 12 blocks plus the pooler and projection dense layers, 38 adapters at r=8 on
/// 768 x 768 (12,288 each). Head: 512 x 18 + 18. Frozen sizes are the published
/// component totals.
struct ReferenceAccounting {
  struct Row {
    std::string component;
    std::uint64_t model_size = 0;
    std::uint64_t adapters = 0;
    std::uint64_t lora_params = 0;
    double percent() const { return model_size ? 100.0 * double(lora_params) / double(model_size) : 0.0; }
  };
  std::vector<Row> rows;
  std::uint64_t head_params = 0;
  std::uint64_t model_size = 0;

  std::uint64_t trainable() const {
    std::uint64_t t = head_params;
    for (const auto& r : rows) t += r.lora_params;
    return t;
  }
  double percent() const { return 100.0 * double(trainable()) / double(model_size); }
};

inline ReferenceAccounting reference_accounting() {
  ReferenceAccounting a;
  const std::uint64_t vis_each = 16 * (512 + 256), txt_each = 8 * (768 + 768);
  a.rows.push_back({"Vision Encoder", 98'000'000, 97, 97 * vis_each});
  a.rows.push_back({"Text Encoder", 110'000'000, 38, 38 * txt_each});
  a.rows.push_back({"Projection Heads", 232'000'000, 0, 0});
  a.head_params = 512 * 18 + 18;
  a.model_size = 440'000'000;
  return a;
}

}  // namespace ctlora::lora
