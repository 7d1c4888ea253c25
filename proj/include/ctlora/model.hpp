// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Dual encoder: factorized spatiotemporal vision transformer, [CLS]-pooled
// text transformer, shared-space projections and the multi-label head.
//
// Parameters live in a ParamStore; a Context binds them to autograd leaves for
// one forward/backward pass. Low-rank adapters attach to named projections and
// are applied inside Context::proj.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ctlora/autograd.hpp"
#include "ctlora/config.hpp"
#include "ctlora/error.hpp"
#include "ctlora/text.hpp"
#include "ctlora/volume.hpp"

namespace ctlora::model {

using ag::Var;
using volume::ModelVolume;

inline constexpr std::size_t kNumClasses = 18;

inline const std::array<std::string, kNumClasses>& pathology_names() {
  static const std::array<std::string, kNumClasses> names = {"medical material",
                                                             "arterial wall calcification",
                                                             "cardiomegaly",
                                                             "pericardial effusion",
                                                             "coronary artery wall calcification",
                                                             "hiatal hernia",
                                                             "lymphadenopathy",
                                                             "emphysema",
                                                             "atelectasis",
                                                             "lung nodule",
                                                             "lung opacity",
                                                             "pulmonary fibrotic sequela",
                                                             "pleural effusion",
                                                             "mosaic attenuation pattern",
                                                             "peribronchial thickening",
                                                             "consolidation",
                                                             "bronchiectasis",
                                                             "interlobular septal thickening"};
  return names;
}

inline std::vector<std::string> class_names() { return {pathology_names().begin(), pathology_names().end()}; }

enum class Pooling { mean, max, flatten };

inline const char* pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : p == Pooling::max ? "max" : "flatten"; }

struct VisionConfig {
  std::size_t depth = 40;
  std::size_t height = 48;
  std::size_t width = 48;
  std::size_t temporal_patch = 10;
  std::size_t spatial_patch = 12;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t spatial_layers = 4;
  std::size_t temporal_layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t codebook_size = 512;
  bool vq_enabled = false;
  double vq_beta = 0.25;
  std::size_t shared_dim = 64;
  Pooling pooling = Pooling::max;
  bool positional = true;

  std::size_t temporal_groups() const { return depth / temporal_patch; }
  std::size_t spatial_positions() const { return (height / spatial_patch) * (width / spatial_patch); }
  std::size_t tokens() const { return temporal_groups() * spatial_positions(); }
  std::size_t patch_features() const { return temporal_patch * spatial_patch * spatial_patch; }
  std::size_t inner() const { return heads * head_dim; }

  void validate() const {
    require(temporal_patch > 0 && spatial_patch > 0, Errc::invalid_config, "patch sizes must be positive");
    require(depth % temporal_patch == 0 && depth > 0, Errc::invalid_config,
            "depth " + std::to_string(depth) + " not divisible by temporal_patch " + std::to_string(temporal_patch));
    require(height % spatial_patch == 0 && width % spatial_patch == 0 && height > 0 && width > 0,
            Errc::invalid_config, "height/width not divisible by spatial_patch " + std::to_string(spatial_patch));
    require(dim > 0 && heads > 0 && head_dim > 0 && mlp_ratio > 0 && shared_dim > 0, Errc::invalid_config,
            "vision widths must be positive");
    require(!vq_enabled || codebook_size > 0, Errc::invalid_config, "empty codebook");
  }
};

struct TextConfig {
  std::size_t vocab_size = 512;
  std::size_t max_len = text::kDefaultMaxLen;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t shared_dim = 64;
  bool trim_padding = true;  // run only the active prefix; masked keys make this exact

  void validate() const {
    require(heads > 0 && hidden % heads == 0, Errc::invalid_config, "text hidden_dim must be divisible by heads");
    require(vocab_size > text::kReserved && max_len >= 2 && mlp_ratio > 0 && shared_dim > 0, Errc::invalid_config,
            "text config out of range");
  }
};

struct HeadConfig {
  std::size_t classes = kNumClasses;
  double dropout = 0.3;
};

struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  HeadConfig head;

  void validate() const {
    vision.validate();
    text.validate();
    require(vision.shared_dim == text.shared_dim, Errc::invalid_config, "vision and text shared_dim differ");
    require(head.classes == kNumClasses, Errc::invalid_config, "head must have 18 outputs");
    require(head.dropout >= 0 && head.dropout < 1, Errc::invalid_config, "head dropout must be in [0,1)");
  }

  /// Reference-scale dimensions. Used for accounting only; never allocated here.
  static ModelConfig paper_scale() {
    ModelConfig c;
    c.vision.depth = 240;
    c.vision.height = c.vision.width = 480;
    c.vision.temporal_patch = 10;
    c.vision.spatial_patch = 20;
    c.vision.dim = 512;
    c.vision.heads = 8;
    c.vision.head_dim = 32;
    c.vision.codebook_size = 8192;
    c.vision.vq_enabled = true;
    c.vision.shared_dim = 512;
    c.text.vocab_size = 30522;
    c.text.hidden = 768;
    c.text.layers = 12;
    c.text.heads = 12;
    c.text.shared_dim = 512;
    return c;
  }

  config::KeyValues to_kv() const {
    using config::fmt;
    config::KeyValues kv;
    kv["model.vision.depth"] = fmt(vision.depth);
    kv["model.vision.height"] = fmt(vision.height);
    kv["model.vision.width"] = fmt(vision.width);
    kv["model.vision.temporal_patch"] = fmt(vision.temporal_patch);
    kv["model.vision.spatial_patch"] = fmt(vision.spatial_patch);
    kv["model.vision.dim"] = fmt(vision.dim);
    kv["model.vision.heads"] = fmt(vision.heads);
    kv["model.vision.head_dim"] = fmt(vision.head_dim);
    kv["model.vision.spatial_layers"] = fmt(vision.spatial_layers);
    kv["model.vision.temporal_layers"] = fmt(vision.temporal_layers);
    kv["model.vision.mlp_ratio"] = fmt(vision.mlp_ratio);
    kv["model.vision.codebook_size"] = fmt(vision.codebook_size);
    kv["model.vision.vq_enabled"] = vision.vq_enabled ? "1" : "0";
    kv["model.vision.vq_beta"] = fmt(vision.vq_beta);
    kv["model.vision.pooling"] = pooling_name(vision.pooling);
    kv["model.vision.positional"] = vision.positional ? "1" : "0";
    kv["model.shared_dim"] = fmt(vision.shared_dim);
    kv["model.text.vocab_size"] = fmt(text.vocab_size);
    kv["model.text.max_len"] = fmt(text.max_len);
    kv["model.text.hidden"] = fmt(text.hidden);
    kv["model.text.layers"] = fmt(text.layers);
    kv["model.text.heads"] = fmt(text.heads);
    kv["model.text.mlp_ratio"] = fmt(text.mlp_ratio);
    kv["model.text.trim_padding"] = text.trim_padding ? "1" : "0";
    kv["model.head.dropout"] = fmt(head.dropout);
    return kv;
  }

  static ModelConfig from_kv(const config::KeyValues& kv) {
    ModelConfig c;
    config::Reader r(kv);
    r.get("model.vision.depth", c.vision.depth);
    r.get("model.vision.height", c.vision.height);
    r.get("model.vision.width", c.vision.width);
    r.get("model.vision.temporal_patch", c.vision.temporal_patch);
    r.get("model.vision.spatial_patch", c.vision.spatial_patch);
    r.get("model.vision.dim", c.vision.dim);
    r.get("model.vision.heads", c.vision.heads);
    r.get("model.vision.head_dim", c.vision.head_dim);
    r.get("model.vision.spatial_layers", c.vision.spatial_layers);
    r.get("model.vision.temporal_layers", c.vision.temporal_layers);
    r.get("model.vision.mlp_ratio", c.vision.mlp_ratio);
    r.get("model.vision.codebook_size", c.vision.codebook_size);
    r.get("model.vision.vq_enabled", c.vision.vq_enabled);
    r.get("model.vision.vq_beta", c.vision.vq_beta);
    std::string pooling = "max";
    r.get("model.vision.pooling", pooling);
    require(pooling == "mean" || pooling == "max" || pooling == "flatten", Errc::invalid_config,
            "pooling must be mean, max or flatten");
    c.vision.pooling = pooling == "mean" ? Pooling::mean : pooling == "max" ? Pooling::max : Pooling::flatten;
    r.get("model.vision.positional", c.vision.positional);
    r.get("model.shared_dim", c.vision.shared_dim);
    c.text.shared_dim = c.vision.shared_dim;
    r.get("model.text.vocab_size", c.text.vocab_size);
    r.get("model.text.max_len", c.text.max_len);
    r.get("model.text.hidden", c.text.hidden);
    r.get("model.text.layers", c.text.layers);
    r.get("model.text.heads", c.text.heads);
    r.get("model.text.mlp_ratio", c.text.mlp_ratio);
    r.get("model.text.trim_padding", c.text.trim_padding);
    r.get("model.head.dropout", c.head.dropout);
    const auto unknown = r.first_unknown("model.");
    require(unknown.empty(), Errc::invalid_config, "unknown config key " + unknown);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameter inventory

enum class Init { zeros, ones, normal, fan_in };
enum class Kind { base, adapter, head };

struct ParamSpec {
  std::string name;
  std::size_t rows = 0, cols = 0;
  Init init = Init::zeros;
};

inline Kind kind_of(std::string_view name) {
  if (name.rfind("head.", 0) == 0) return Kind::head;
  if (name.find(".lora_") != std::string_view::npos) return Kind::adapter;
  return Kind::base;
}

/// Names and shapes of every base/head parameter, in allocation order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  std::vector<ParamSpec> s;
  const auto& v = cfg.vision;
  const auto& t = cfg.text;
  auto lin = [&](const std::string& n, std::size_t out, std::size_t in, bool bias) {
    s.push_back({n + ".weight", out, in, Init::fan_in});
    if (bias) s.push_back({n + ".bias", 1, out, Init::zeros});
  };
  auto norm = [&](const std::string& n, std::size_t w) {
    s.push_back({n + ".gamma", 1, w, Init::ones});
    s.push_back({n + ".beta", 1, w, Init::zeros});
  };
  auto mlp = [&](const std::string& n, std::size_t w, std::size_t ratio) {
    lin(n + ".fc1", w * ratio, w, true);
    lin(n + ".fc2", w, w * ratio, true);
  };

  lin("vision.patch_embed", v.dim, v.patch_features(), true);
  if (v.positional) {
    s.push_back({"vision.pos_spatial", v.spatial_positions(), v.dim, Init::normal});
    s.push_back({"vision.pos_temporal", v.temporal_groups(), v.dim, Init::normal});
  }
  auto vblock = [&](const std::string& n) {
    norm(n + ".norm1", v.dim);
    lin(n + ".attn.q", v.inner(), v.dim, false);
    lin(n + ".attn.kv", 2 * v.inner(), v.dim, false);
    lin(n + ".attn.out", v.dim, v.inner(), false);
    norm(n + ".norm2", v.dim);
    mlp(n + ".mlp", v.dim, v.mlp_ratio);
  };
  for (std::size_t i = 0; i < v.spatial_layers; ++i) vblock("vision.spatial" + std::to_string(i));
  for (std::size_t i = 0; i < v.temporal_layers; ++i) vblock("vision.temporal" + std::to_string(i));
  norm("vision.final_norm", v.dim);
  if (v.vq_enabled) s.push_back({"vision.codebook", v.codebook_size, v.dim, Init::normal});
  const std::size_t pooled = v.pooling == Pooling::flatten ? v.dim * v.tokens() : v.dim;
  lin("vision.proj", v.shared_dim, pooled, false);

  s.push_back({"text.token_embed", t.vocab_size, t.hidden, Init::normal});
  s.push_back({"text.pos_embed", t.max_len, t.hidden, Init::normal});
  norm("text.embed_norm", t.hidden);
  for (std::size_t i = 0; i < t.layers; ++i) {
    const std::string n = "text.layer" + std::to_string(i);
    norm(n + ".norm1", t.hidden);
    lin(n + ".attn.query", t.hidden, t.hidden, true);
    lin(n + ".attn.key", t.hidden, t.hidden, true);
    lin(n + ".attn.value", t.hidden, t.hidden, true);
    lin(n + ".attn.dense", t.hidden, t.hidden, true);
    norm(n + ".norm2", t.hidden);
    mlp(n + ".mlp", t.hidden, t.mlp_ratio);
  }
  norm("text.final_norm", t.hidden);
  lin("text.proj", t.shared_dim, t.hidden, false);

  lin("head", cfg.head.classes, v.shared_dim, true);
  return s;
}

/// Adapter target names (attention projections of both encoders).
inline std::vector<std::string> vision_targets(const VisionConfig& v) {
  std::vector<std::string> out;
  auto add = [&](const std::string& n) {
    for (const char* p : {"q", "kv", "out"}) out.push_back(n + ".attn." + p);
  };
  for (std::size_t i = 0; i < v.spatial_layers; ++i) add("vision.spatial" + std::to_string(i));
  for (std::size_t i = 0; i < v.temporal_layers; ++i) add("vision.temporal" + std::to_string(i));
  return out;
}

inline std::vector<std::string> text_targets(const TextConfig& t) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < t.layers; ++i)
    for (const char* p : {"query", "key", "value", "dense"}) out.push_back("text.layer" + std::to_string(i) + ".attn." + p);
  return out;
}

template <class T>
struct Param {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::shared_ptr<std::vector<T>> value;
  bool trainable = false;

  Kind kind() const { return kind_of(name); }
  std::size_t size() const { return rows * cols; }
};

template <class T>
class ParamStore {
 public:
  Param<T>& add(std::string name, std::size_t rows, std::size_t cols, std::vector<T> init) {
    require(!index_.count(name), Errc::invalid_config, "duplicate parameter " + name);
    require(init.size() == rows * cols, Errc::invalid_input, "parameter " + name + " size mismatch");
    index_[name] = items_.size();
    items_.push_back({std::move(name), rows, cols, std::make_shared<std::vector<T>>(std::move(init)), false});
    return items_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Errc::invalid_input, "no parameter named " + name);
    return items_[it->second];
  }
  const Param<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  void erase(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return;
    items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(it->second));
    index_.clear();
    for (std::size_t i = 0; i < items_.size(); ++i) index_[items_[i].name] = i;
  }

  std::vector<Param<T>>& items() { return items_; }
  const std::vector<Param<T>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<Param<T>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Metadata of one attached low-rank adapter; its A (r x k) and B (d x r)
/// tensors live in the ParamStore as `<target>.lora_A` / `<target>.lora_B`.
struct LoraSlot {
  std::string target;
  std::size_t d = 0, k = 0, r = 0;
  double alpha = 1.0;
  double dropout = 0.0;
  bool merged = false;

  double scale() const { return alpha / double(r); }
};

template <class T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> params;
  std::map<std::string, LoraSlot> lora;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    for (const auto& s : param_specs(cfg)) {
      std::vector<T> v(s.rows * s.cols);
      switch (s.init) {
        case Init::zeros: std::fill(v.begin(), v.end(), T(0)); break;
        case Init::ones: std::fill(v.begin(), v.end(), T(1)); break;
        case Init::normal: {
          std::normal_distribution<double> nd(0.0, s.name == "vision.codebook" ? 1.0 : 0.02);
          for (auto& x : v) x = static_cast<T>(nd(rng));
          break;
        }
        case Init::fan_in: {
          const double b = 1.0 / std::sqrt(double(s.cols));
          std::uniform_real_distribution<double> ud(-b, b);
          for (auto& x : v) x = static_cast<T>(ud(rng));
          break;
        }
      }
      m.params.add(s.name, s.rows, s.cols, std::move(v));
    }
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.cfg = cfg;
    m.lora = lora;
    for (const auto& p : params.items()) {
      std::vector<U> v(p.value->begin(), p.value->end());
      m.params.add(p.name, p.rows, p.cols, std::move(v)).trainable = p.trainable;
    }
    return m;
  }

  /// Independent copy (parameter storage is not shared).
  Model clone() const { return cast<T>(); }

  void set_trainable(bool (*pred)(const Param<T>&)) {
    for (auto& p : params.items()) p.trainable = pred(p);
  }
};

// ---------------------------------------------------------------------------
// Forward context

template <class T>
class Context {
 public:
  Context(const Model<T>& m, bool train, std::uint64_t seed = 0, bool grad = true)
      : model(m), train(train), rng(seed), grad_(grad) {}

  const Model<T>& model;
  bool train;
  std::mt19937_64 rng;
  ag::AttentionStats stats;
  std::vector<Var<T>> aux_losses;        // VQ terms
  std::set<std::string>* access = nullptr;  // optional instrumentation of parameter reads

  /// Leaf for parameter `name`, created once per context.
  Var<T> p(const std::string& name) {
    if (access) access->insert(name);
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    const auto& prm = model.params.at(name);
    auto v = ag::leaf<T>(prm.value, prm.rows, prm.cols, grad_ && prm.trainable);
    leaves_.emplace(name, v);
    return v;
  }

  /// y = x W^T (+ b), plus (alpha/r) B A dropout(x) when an unmerged adapter is attached.
  Var<T> proj(const Var<T>& x, const std::string& target, bool bias) {
    const Var<T> w = p(target + ".weight");
    Var<T> b;
    if (bias) b = p(target + ".bias");
    Var<T> y = ag::linear(x, w, bias ? &b : nullptr);
    auto it = model.lora.find(target);
    if (it == model.lora.end() || it->second.merged) return y;
    const LoraSlot& s = it->second;
    Var<T> xa = train ? ag::dropout(x, s.dropout, rng) : x;
    Var<T> u = ag::linear(xa, p(target + ".lora_A"));
    Var<T> ba = ag::linear(u, p(target + ".lora_B"));
    return ag::add(y, ag::scale(ba, T(s.scale())));
  }

  const std::map<std::string, Var<T>>& leaves() const { return leaves_; }

 private:
  bool grad_;
  std::map<std::string, Var<T>> leaves_;
};

// ---------------------------------------------------------------------------
// Vision tower

/// T x S x F patch grid; row t*S + s, features ordered (slice, row, col).
struct PatchGrid {
  std::size_t temporal = 0, spatial = 0, features = 0;
  std::vector<float> data;
};

inline PatchGrid patchify(const ModelVolume& vol, const VisionConfig& cfg) {
  cfg.validate();
  require(vol.depth == cfg.depth && vol.height == cfg.height && vol.width == cfg.width, Errc::invalid_config,
          "volume shape does not match the vision config");
  const std::size_t tp = cfg.temporal_patch, sp = cfg.spatial_patch, nw = cfg.width / sp;
  PatchGrid g{cfg.temporal_groups(), cfg.spatial_positions(), cfg.patch_features(), {}};
  g.data.resize(g.temporal * g.spatial * g.features);
  for (std::size_t t = 0; t < g.temporal; ++t)
    for (std::size_t s = 0; s < g.spatial; ++s) {
      const std::size_t py = s / nw, px = s % nw;
      float* out = g.data.data() + (t * g.spatial + s) * g.features;
      std::size_t f = 0;
      for (std::size_t z = 0; z < tp; ++z)
        for (std::size_t y = 0; y < sp; ++y)
          for (std::size_t x = 0; x < sp; ++x) out[f++] = vol.at(t * tp + z, py * sp + y, px * sp + x);
    }
  return g;
}

using Groups = std::vector<std::vector<std::size_t>>;

/// Spatial groups: one per temporal index, holding its S positions.
inline Groups spatial_groups(std::size_t T, std::size_t S) {
  Groups g(T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) g[t].push_back(t * S + s);
  return g;
}

/// Temporal groups: one per spatial position, holding its T slices.
inline Groups temporal_groups(std::size_t T, std::size_t S) {
  Groups g(S);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t) g[s].push_back(t * S + s);
  return g;
}

namespace detail {

template <class T>
void check_finite(const Var<T>& x, const char* tower, std::size_t layer) {
  if (!ag::all_finite(x))
    fail(Errc::numeric_fault, std::string("non-finite activation in ") + tower + " layer " + std::to_string(layer));
}

template <class T>
Var<T> norm(Context<T>& c, const Var<T>& x, const std::string& n) {
  return ag::layer_norm(x, c.p(n + ".gamma"), c.p(n + ".beta"));
}

template <class T>
Var<T> mlp(Context<T>& c, const Var<T>& x, const std::string& n) {
  return c.proj(ag::gelu(c.proj(x, n + ".fc1", true)), n + ".fc2", true);
}

template <class T>
Var<T> vision_block(Context<T>& c, const Var<T>& x, const std::string& n, const Groups& groups) {
  const auto& v = c.model.cfg.vision;
  const std::size_t inner = v.inner();
  Var<T> h = norm(c, x, n + ".norm1");
  Var<T> q = c.proj(h, n + ".attn.q", false);
  Var<T> kv = c.proj(h, n + ".attn.kv", false);
  Var<T> a = ag::grouped_attention(q, ag::slice_cols(kv, 0, inner), ag::slice_cols(kv, inner, 2 * inner), v.heads,
                                   groups, {}, &c.stats);
  Var<T> y = ag::add(x, c.proj(a, n + ".attn.out", false));
  return ag::add(y, mlp(c, norm(c, y, n + ".norm2"), n + ".mlp"));
}

}  // namespace detail

/// Token matrix (T*S x dim) after the first `blocks` transformer blocks
/// (spatial stack first, then temporal). Without the final norm.
template <class T>
Var<T> vision_tokens(Context<T>& c, const ModelVolume& vol, std::size_t blocks = std::numeric_limits<std::size_t>::max()) {
  const auto& v = c.model.cfg.vision;
  const PatchGrid g = patchify(vol, v);
  const std::size_t T_ = g.temporal, S = g.spatial, N = T_ * S;
  Var<T> x = ag::constant<T>(N, g.features, std::vector<T>(g.data.begin(), g.data.end()));
  x = c.proj(x, "vision.patch_embed", true);
  if (v.positional) {
    std::vector<std::size_t> si(N), ti(N);
    for (std::size_t i = 0; i < N; ++i) {
      si[i] = i % S;
      ti[i] = i / S;
    }
    x = ag::add(x, ag::select_rows(c.p("vision.pos_spatial"), si));
    x = ag::add(x, ag::select_rows(c.p("vision.pos_temporal"), ti));
  }
  const Groups sg = spatial_groups(T_, S), tg = temporal_groups(T_, S);
  std::size_t layer = 0;
  for (std::size_t i = 0; i < v.spatial_layers && layer < blocks; ++i, ++layer) {
    x = detail::vision_block(c, x, "vision.spatial" + std::to_string(i), sg);
    detail::check_finite(x, "vision", layer);
  }
  for (std::size_t i = 0; i < v.temporal_layers && layer < blocks; ++i, ++layer) {
    x = detail::vision_block(c, x, "vision.temporal" + std::to_string(i), tg);
    detail::check_finite(x, "vision", layer);
  }
  return x;
}

/// 1 x shared_dim embedding of one volume.
template <class T>
Var<T> vision_forward(Context<T>& c, const ModelVolume& vol) {
  const auto& v = c.model.cfg.vision;
  Var<T> x = detail::norm(c, vision_tokens(c, vol), "vision.final_norm");
  if (v.vq_enabled) {
    auto q = ag::vector_quantize(x, c.p("vision.codebook"), T(v.vq_beta));
    c.aux_losses.push_back(q.loss);
    x = q.output;
  }
  Var<T> pooled = v.pooling == Pooling::mean  ? ag::mean_rows(x)
                  : v.pooling == Pooling::max ? ag::max_rows(x)
                                              : ag::reshape(x, 1, x.size());
  Var<T> e = c.proj(pooled, "vision.proj", false);
  detail::check_finite(e, "vision projection", v.spatial_layers + v.temporal_layers);
  return e;
}

// ---------------------------------------------------------------------------
// Text tower

/// 1 x shared_dim embedding from the [CLS] row.
template <class T>
Var<T> text_forward(Context<T>& c, const text::TokenSequence& tok) {
  const auto& t = c.model.cfg.text;
  require(tok.input_ids.size() == tok.attention_mask.size() && !tok.input_ids.empty(), Errc::invalid_input,
          "token ids and mask lengths differ");
  std::size_t last = 0, active = 0;
  for (std::size_t i = 0; i < tok.attention_mask.size(); ++i) {
    require(tok.attention_mask[i] <= 1, Errc::invalid_input, "attention mask must be binary");
    if (tok.attention_mask[i]) {
      last = i;
      ++active;
    }
  }
  require(active > 0, Errc::invalid_input, "all-pad token sequence");
  require(tok.attention_mask[0] == 1, Errc::invalid_input, "[CLS] position must be unmasked");
  const std::size_t L = t.trim_padding ? last + 1 : tok.input_ids.size();
  require(L <= t.max_len, Errc::invalid_input,
          "sequence length " + std::to_string(L) + " exceeds text max_len " + std::to_string(t.max_len));
  std::vector<std::size_t> ids(L), pos(L);
  std::vector<std::uint8_t> valid(tok.attention_mask.begin(), tok.attention_mask.begin() + std::ptrdiff_t(L));
  for (std::size_t i = 0; i < L; ++i) {
    const auto id = tok.input_ids[i];
    if (valid[i]) require(id >= 0 && std::size_t(id) < t.vocab_size, Errc::invalid_input, "token id out of range");
    ids[i] = valid[i] && id >= 0 && std::size_t(id) < t.vocab_size ? std::size_t(id) : std::size_t(text::kPad);
    pos[i] = i;
  }
  Var<T> x = ag::add(ag::embedding(c.p("text.token_embed"), ids), ag::select_rows(c.p("text.pos_embed"), pos));
  x = detail::norm(c, x, "text.embed_norm");
  const Groups all{pos};
  for (std::size_t i = 0; i < t.layers; ++i) {
    const std::string n = "text.layer" + std::to_string(i);
    Var<T> h = detail::norm(c, x, n + ".norm1");
    Var<T> a = ag::grouped_attention(c.proj(h, n + ".attn.query", true), c.proj(h, n + ".attn.key", true),
                                     c.proj(h, n + ".attn.value", true), t.heads, all, valid, &c.stats);
    x = ag::add(x, c.proj(a, n + ".attn.dense", true));
    x = ag::add(x, detail::mlp(c, detail::norm(c, x, n + ".norm2"), n + ".mlp"));
    detail::check_finite(x, "text", i);
  }
  Var<T> cls = ag::select_rows(detail::norm(c, x, "text.final_norm"), {0});
  return c.proj(cls, "text.proj", false);
}

// ---------------------------------------------------------------------------
// Classification head

/// logits = W emb + b, dropout on emb in train mode. emb: n x shared_dim.
template <class T>
Var<T> classify(Context<T>& c, const Var<T>& emb) {
  require(emb.cols() == c.model.cfg.vision.shared_dim, Errc::invalid_input, "embedding width does not match head");
  Var<T> x = c.train ? ag::dropout(emb, c.model.cfg.head.dropout, c.rng) : emb;
  return c.proj(x, "head", true);
}

template <class T>
std::vector<double> to_vector(const Var<T>& v) {
  return {v.values().begin(), v.values().end()};
}

}  // namespace ctlora::model
