// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// "PEFT" checkpoint container shared by base weights, adapter sets and
// training state.
//
//   magic "PEFT" | u32 version | u32 header bytes | header text | f32 payload
//
// Header lines are `key=value` metadata plus one entry per payload block:
//   tensor  <name> <rows> <cols> <offset> <bytes>
//   adapter <target> <d> <k> <r> <alpha> <dropout> <offset_A> <offset_B>
// Offsets are relative to the first payload byte. Payload floats are
// little-endian IEEE-754 binary32.

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctlora/config.hpp"
#include "ctlora/error.hpp"
#include "ctlora/lora.hpp"
#include "ctlora/model.hpp"
#include "ctlora/volume.hpp"

namespace ctlora::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct Tensor {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<float> data;

  bool operator==(const Tensor&) const = default;
};

struct Container {
  std::string name;
  std::string component;  // base | adapter | train_state
  std::map<std::string, std::string> meta;
  std::vector<Tensor> tensors;
  std::vector<lora::LoraAdapter<float>> adapters;
};

/// FNV-1a over the adapter layout (targets, shapes, ranks, alphas).
inline std::uint64_t fingerprint(const std::vector<lora::LoraAdapter<float>>& adapters) {
  std::map<std::string, std::string> lines;
  for (const auto& a : adapters) {
    std::ostringstream os;
    os << std::setprecision(17) << a.target << " " << a.d << " " << a.k << " " << a.r << " " << a.alpha;
    lines[a.target] = os.str();
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, line] : lines)
    for (unsigned char ch : line + "\n") {
      h ^= ch;
      h *= 0x100000001b3ull;
    }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}
inline void put_floats(std::string& s, const std::vector<float>& v) {
  for (float f : v) put_u32(s, std::bit_cast<std::uint32_t>(f));
}
inline std::vector<float> get_floats(const std::string& s, std::size_t at, std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(get_u32(s, at + 4 * i));
  return v;
}
inline bool safe_token(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

}  // namespace detail

inline std::string encode(const Container& c) {
  std::ostringstream h;
  h << std::setprecision(17);
  require(detail::safe_token(c.name) && detail::safe_token(c.component), Errc::format,
          "checkpoint name/component must be non-empty without whitespace");
  h << "name=" << c.name << "\n";
  h << "component=" << c.component << "\n";
  if (!c.adapters.empty()) h << "fingerprint=" << hex64(fingerprint(c.adapters)) << "\n";
  for (const auto& [k, v] : c.meta) {
    require(detail::safe_token(k) && v.find('\n') == std::string::npos, Errc::format, "bad metadata key " + k);
    h << k << "=" << v << "\n";
  }
  std::string payload;
  for (const auto& t : c.tensors) {
    require(detail::safe_token(t.name) && t.data.size() == t.rows * t.cols, Errc::format, "bad tensor " + t.name);
    h << "tensor " << t.name << " " << t.rows << " " << t.cols << " " << payload.size() << " " << 4 * t.data.size()
      << "\n";
    detail::put_floats(payload, t.data);
  }
  for (const auto& a : c.adapters) {
    require(detail::safe_token(a.target) && a.A.size() == a.r * a.k && a.B.size() == a.d * a.r, Errc::format,
            "bad adapter " + a.target);
    const std::size_t oa = payload.size();
    detail::put_floats(payload, a.A);
    const std::size_t ob = payload.size();
    detail::put_floats(payload, a.B);
    h << "adapter " << a.target << " " << a.d << " " << a.k << " " << a.r << " " << a.alpha << " " << a.dropout << " "
      << oa << " " << ob << "\n";
  }
  const std::string header = h.str();
  std::string out = "PEFT";
  detail::put_u32(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out += payload;
  return out;
}

inline Container decode(const std::string& bytes) {
  require(bytes.size() >= 12 && bytes.compare(0, 4, "PEFT") == 0, Errc::format, "not a PEFT checkpoint (bad magic)");
  require(detail::get_u32(bytes, 4) == kVersion, Errc::format, "unsupported PEFT version");
  const std::size_t hlen = detail::get_u32(bytes, 8);
  require(12 + hlen <= bytes.size(), Errc::format, "PEFT header length exceeds file size");
  const std::string header = bytes.substr(12, hlen);
  const std::size_t base = 12 + hlen, plen = bytes.size() - base;
  Container c;
  std::string fp;
  std::istringstream is(header);
  std::string line;
  std::size_t used = 0;
  auto in_payload = [&](std::size_t off, std::size_t n) {
    require(off <= plen && n <= plen - off, Errc::format, "PEFT tensor offset outside payload");
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      Tensor t;
      std::size_t off = 0, nb = 0;
      ls >> t.name >> t.rows >> t.cols >> off >> nb;
      require(!ls.fail() && nb == 4 * t.rows * t.cols, Errc::format, "malformed tensor entry: " + line);
      in_payload(off, nb);
      t.data = detail::get_floats(bytes, base + off, t.rows * t.cols);
      used += nb;
      c.tensors.push_back(std::move(t));
    } else if (line.rfind("adapter ", 0) == 0) {
      std::istringstream ls(line.substr(8));
      lora::LoraAdapter<float> a;
      std::size_t oa = 0, ob = 0;
      ls >> a.target >> a.d >> a.k >> a.r >> a.alpha >> a.dropout >> oa >> ob;
      require(!ls.fail() && a.r >= 1 && a.r <= std::min(a.d, a.k) && a.alpha > 0, Errc::format,
              "malformed adapter entry: " + line);
      in_payload(oa, 4 * a.r * a.k);
      in_payload(ob, 4 * a.d * a.r);
      a.A = detail::get_floats(bytes, base + oa, a.r * a.k);
      a.B = detail::get_floats(bytes, base + ob, a.d * a.r);
      used += 4 * (a.r * a.k + a.d * a.r);
      c.adapters.push_back(std::move(a));
    } else {
      const auto eq = line.find('=');
      require(eq != std::string::npos && eq > 0, Errc::format, "malformed PEFT header line: " + line);
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "name") c.name = v;
      else if (k == "component") c.component = v;
      else if (k == "fingerprint") fp = v;
      else c.meta[k] = v;
    }
  }
  require(!c.name.empty() && !c.component.empty(), Errc::format, "PEFT header lacks name or component");
  require(used == plen, Errc::format, "PEFT payload size does not match header");
  if (!c.adapters.empty())
    require(fp == hex64(fingerprint(c.adapters)), Errc::format, "PEFT adapter fingerprint mismatch");
  return c;
}

inline void save(const Container& c, const std::string& path) { volume::write_file(path, encode(c)); }
inline Container load(const std::string& path) { return decode(volume::read_file(path)); }

// ---------------------------------------------------------------------------
// Model <-> container

inline Tensor to_tensor(const model::Param<float>& p) { return {p.name, p.rows, p.cols, *p.value}; }

/// Base weights with the model config embedded as `config.*` metadata.
inline Container base_container(const model::Model<float>& m, const std::string& name = "base") {
  require(m.lora.empty() || std::none_of(m.lora.begin(), m.lora.end(), [](const auto& s) { return s.second.merged; }),
          Errc::invalid_input, "unmerge adapters before saving base weights");
  Container c{name, "base", {}, {}, {}};
  for (const auto& [k, v] : m.cfg.to_kv()) c.meta["config." + k] = v;
  for (const auto& p : m.params.items())
    if (p.kind() == model::Kind::base) c.tensors.push_back(to_tensor(p));
  return c;
}

inline model::ModelConfig config_of(const Container& c) {
  config::KeyValues kv;
  for (const auto& [k, v] : c.meta)
    if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
  return model::ModelConfig::from_kv(kv);
}

/// Rebuilds a model from a base container; the head is left at its seeded init.
inline model::Model<float> model_from_base(const Container& c, std::uint64_t head_seed = 0) {
  require(c.component == "base", Errc::compatibility, "checkpoint component is '" + c.component + "', expected base");
  auto m = model::Model<float>::create(config_of(c), head_seed);
  std::map<std::string, const Tensor*> by;
  for (const auto& t : c.tensors) by[t.name] = &t;
  for (auto& p : m.params.items()) {
    if (p.kind() != model::Kind::base) continue;
    auto it = by.find(p.name);
    require(it != by.end(), Errc::compatibility, "base checkpoint lacks tensor " + p.name);
    require(it->second->rows == p.rows && it->second->cols == p.cols, Errc::compatibility,
            "shape mismatch for tensor " + p.name);
    *p.value = it->second->data;
  }
  return m;
}

/// Adapter set + head tensors of `m`.
inline Container adapter_container(const model::Model<float>& m, const std::string& name = "adapters") {
  Container c{name, "adapter", {}, {}, {}};
  for (const auto& [t, s] : m.lora) {
    require(!s.merged, Errc::invalid_input, "unmerge adapters before saving them");
    c.adapters.push_back(lora::extract(m, t));
  }
  for (const auto& p : m.params.items())
    if (p.kind() == model::Kind::head) c.tensors.push_back(to_tensor(p));
  return c;
}

/// Installs adapters (and head tensors, if present) into `m`. Every target must
/// exist in the model; an already-injected model must carry the same layout.
inline void apply_adapters(model::Model<float>& m, const Container& c) {
  require(c.component == "adapter", Errc::compatibility,
          "checkpoint component is '" + c.component + "', expected adapter");
  for (const auto& a : c.adapters) {
    require(m.params.has(a.target + ".weight"), Errc::compatibility, "adapter target missing in model: " + a.target);
    const auto& w = m.params.at(a.target + ".weight");
    require(w.rows == a.d && w.cols == a.k, Errc::compatibility, "adapter shape mismatch on " + a.target);
  }
  if (!m.lora.empty()) {
    std::vector<lora::LoraAdapter<float>> mine;
    for (const auto& [t, s] : m.lora) mine.push_back(lora::extract(m, t));
    require(fingerprint(mine) == fingerprint(c.adapters), Errc::compatibility,
            "adapter layout fingerprint differs from the injected model");
    lora::unmerge_all(m);
  }
  for (const auto& a : c.adapters) {
    if (!m.lora.count(a.target)) {
      m.params.add(lora::adapter_a(a.target), a.r, a.k, a.A);
      m.params.add(lora::adapter_b(a.target), a.d, a.r, a.B);
      m.lora[a.target] = model::LoraSlot{a.target, a.d, a.k, a.r, a.alpha, a.dropout, false};
    } else {
      *m.params.at(lora::adapter_a(a.target)).value = a.A;
      *m.params.at(lora::adapter_b(a.target)).value = a.B;
    }
  }
  for (const auto& t : c.tensors) {
    require(m.params.has(t.name), Errc::compatibility, "tensor not present in model: " + t.name);
    auto& p = m.params.at(t.name);
    require(p.rows == t.rows && p.cols == t.cols, Errc::compatibility, "shape mismatch for tensor " + t.name);
    *p.value = t.data;
  }
  for (auto& p : m.params.items()) p.trainable = p.kind() != model::Kind::base;
}

// ---------------------------------------------------------------------------
// Integrity

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) == 1, Errc::data,
          "SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

/// Hash of the serialized base weights (names, shapes and values).
template <class T>
std::string base_hash(const model::Model<T>& m) {
  std::string s;
  for (const auto& p : m.params.items()) {
    if (p.kind() != model::Kind::base) continue;
    s += p.name + " " + std::to_string(p.rows) + " " + std::to_string(p.cols) + "\n";
    if constexpr (std::is_same_v<T, float>) {
      detail::put_floats(s, *p.value);
    } else {
      for (T x : *p.value) {
        const auto u = std::bit_cast<std::uint64_t>(double(x));
        for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
      }
    }
  }
  return sha256_hex(s);
}

}  // namespace ctlora::checkpoint
