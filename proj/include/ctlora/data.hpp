// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// JSONL dataset manifests and in-memory datasets.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "ctlora/error.hpp"
#include "ctlora/metrics.hpp"
#include "ctlora/model.hpp"
#include "ctlora/synth.hpp"
#include "ctlora/text.hpp"
#include "ctlora/train.hpp"
#include "ctlora/volume.hpp"

namespace ctlora::data {

namespace fs = std::filesystem;
using model::kNumClasses;

struct Record {
  std::string volume_path;  // relative to the manifest directory unless absolute
  std::array<std::uint8_t, kNumClasses> labels{};
  std::string findings;
  std::string impressions;
  std::string split = "train";
  std::vector<synth::Planted> planted;  // synthetic data only

  std::string report() const { return text::concat_sections(findings, impressions); }
};

struct Manifest {
  std::string base_dir;
  std::vector<Record> records;

  std::vector<const Record*> split(const std::string& tag) const {
    std::vector<const Record*> out;
    for (const auto& r : records)
      if (r.split == tag) out.push_back(&r);
    return out;
  }
  std::string resolve(const Record& r) const {
    const fs::path p(r.volume_path);
    return p.is_absolute() ? p.string() : (fs::path(base_dir) / p).string();
  }
};

inline nlohmann::json to_json(const Record& r) {
  nlohmann::json j;
  j["volume_path"] = r.volume_path;
  j["labels"] = std::vector<int>(r.labels.begin(), r.labels.end());
  j["findings"] = r.findings;
  j["impressions"] = r.impressions;
  j["split"] = r.split;
  if (!r.planted.empty()) {
    auto& arr = j["planted"] = nlohmann::json::array();
    for (const auto& p : r.planted) arr.push_back({{"class", p.cls}, {"center", p.center}, {"size", p.size}});
  }
  return j;
}

inline Record record_from_json(const nlohmann::json& j, std::size_t line) {
  const std::string where = "manifest line " + std::to_string(line) + ": ";
  Record r;
  try {
    r.volume_path = j.at("volume_path").get<std::string>();
    const auto labels = j.at("labels").get<std::vector<int>>();
    require(labels.size() == kNumClasses, Errc::data, where + "labels must have 18 entries");
    for (std::size_t i = 0; i < kNumClasses; ++i) {
      require(labels[i] == 0 || labels[i] == 1, Errc::data, where + "labels must be binary");
      r.labels[i] = static_cast<std::uint8_t>(labels[i]);
    }
    r.findings = j.value("findings", "");
    r.impressions = j.value("impressions", "");
    r.split = j.value("split", "train");
    if (j.contains("planted"))
      for (const auto& p : j["planted"])
        r.planted.push_back({p.at("class").get<std::size_t>(), p.at("center").get<std::array<int, 3>>(),
                             p.at("size").get<int>()});
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::data, where + e.what());
  }
  require(r.split == "train" || r.split == "val" || r.split == "test", Errc::data,
          where + "split must be train, val or test");
  return r;
}

/// Parses a manifest and checks that every referenced volume exists.
inline Manifest load_manifest(const std::string& path, bool check_paths = true) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::data, "cannot open manifest: " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::data, "manifest line " + std::to_string(n) + ": " + e.what());
    }
    m.records.push_back(record_from_json(j, n));
  }
  if (check_paths)
    for (const auto& r : m.records)
      require(fs::exists(m.resolve(r)), Errc::data, "missing volume file: " + m.resolve(r));
  return m;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::data, "cannot write manifest: " + path);
  for (const auto& r : m.records) out << to_json(r).dump() << "\n";
}

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t total() const { return train + val + test; }
};

inline std::uint64_t record_seed(std::uint64_t seed, std::size_t i) { return train::mix(seed, i); }

/// Writes volumes/<i>.vol and manifest.jsonl under `dir`.
inline Manifest gen_synth(const synth::SyntheticSpec& spec, SplitSizes n, std::uint64_t seed, const std::string& dir) {
  spec.validate();
  fs::create_directories(fs::path(dir) / "volumes");
  Manifest m;
  m.base_dir = dir;
  for (std::size_t i = 0; i < n.total(); ++i) {
    auto s = synth::generate(spec, record_seed(seed, i));
    Record r;
    char name[64];
    std::snprintf(name, sizeof name, "volumes/%05zu.vol", i);
    r.volume_path = name;
    r.labels = s.labels;
    r.findings = s.findings;
    r.impressions = s.impressions;
    r.split = i < n.train ? "train" : i < n.train + n.val ? "val" : "test";
    r.planted = s.planted;
    volume::save(s.volume, (fs::path(dir) / name).string());
    m.records.push_back(std::move(r));
  }
  save_manifest(m, (fs::path(dir) / "manifest.jsonl").string());
  return m;
}

/// Record-level consistency: label j, planted j and the report mention of
/// class j agree for every class.
inline bool consistent(const Record& r, std::string* why = nullptr) {
  const auto& names = model::pathology_names();
  for (std::size_t j = 0; j < kNumClasses; ++j) {
    bool planted = false;
    for (const auto& p : r.planted) planted = planted || p.cls == j;
    const bool said = synth::mentions(r.report(), names[j]);
    if (planted != bool(r.labels[j]) || said != bool(r.labels[j])) {
      if (why) *why = "class " + names[j];
      return false;
    }
  }
  return true;
}

struct Dataset {
  std::vector<train::Sample> samples;
  std::vector<std::string> reports;

  metrics::BinaryMatrix labels() const {
    metrics::BinaryMatrix b{samples.size(), kNumClasses, {}};
    for (const auto& s : samples) b.data.insert(b.data.end(), s.labels.begin(), s.labels.end());
    return b;
  }
  std::vector<const volume::ModelVolume*> volumes() const {
    std::vector<const volume::ModelVolume*> v;
    for (const auto& s : samples) v.push_back(&s.volume);
    return v;
  }
};

inline Dataset load_split(const Manifest& m, const std::string& split, const model::ModelConfig& cfg,
                          const text::Vocabulary& vocab) {
  Dataset d;
  for (const auto* r : m.split(split)) {
    train::Sample s;
    s.volume = volume::preprocess(volume::load(m.resolve(*r)), cfg.vision.depth);
    s.tokens = text::tokenize(r->report(), vocab, cfg.text.max_len);
    s.labels = r->labels;
    d.samples.push_back(std::move(s));
    d.reports.push_back(r->report());
  }
  require(!d.samples.empty(), Errc::data, "no records in split '" + split + "'");
  return d;
}

}  // namespace ctlora::data
