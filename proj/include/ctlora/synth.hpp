// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic chest-CT-like volumes with planted per-pathology signals and
// matching template reports.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "ctlora/error.hpp"
#include "ctlora/model.hpp"
#include "ctlora/volume.hpp"

namespace ctlora::synth {

using model::kNumClasses;

enum class Primitive { ball, shell, rod, tube, slab, cluster, checker, grid, crescent, streaks };
enum class Zone { body, mediastinum, heart, lower_mediastinum, lung, lung_lower, lung_posterior };
enum class Mode { set, add };

inline const char* primitive_name(Primitive p) {
  static const char* n[] = {"ball", "shell", "rod", "tube", "slab", "cluster", "checker", "grid", "crescent", "streaks"};
  return n[static_cast<int>(p)];
}

struct SignalDescriptor {
  Primitive primitive = Primitive::ball;
  Zone zone = Zone::lung;
  Mode mode = Mode::set;
  double hu = 0;               // value written (set) or added (add)
  int size_min = 2, size_max = 3;  // radius-like extent in voxels
  std::vector<std::string> phrases;  // each contains the class name
};

struct SyntheticSpec {
  std::size_t depth = 48, height = 48, width = 48;
  volume::Spacing spacing{5.0, 6.0, 6.0};
  double noise_hu = 20.0;
  std::array<double, kNumClasses> prevalence{};
  std::array<SignalDescriptor, kNumClasses> signals;
  std::vector<std::string> background_sentences;

  void validate() const {
    require(depth >= volume::kMinRawDepth && height >= 16 && width >= 16, Errc::spec_error, "synthetic volume too small");
    const int lim = static_cast<int>(std::min({depth, height, width}));
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      const auto& s = signals[j];
      require(prevalence[j] >= 0.0 && prevalence[j] <= 1.0, Errc::spec_error, "prevalence outside [0,1]");
      require(s.size_min >= 1 && s.size_min <= s.size_max, Errc::spec_error, "bad size range");
      require(2 * s.size_max + 1 <= lim, Errc::spec_error,
              "primitive for '" + model::pathology_names()[j] + "' larger than the volume");
      require(!s.phrases.empty(), Errc::spec_error, "missing report phrase");
    }
  }

  static SyntheticSpec standard() {
    SyntheticSpec s;
    s.prevalence = {0.12, 0.30, 0.15, 0.10, 0.25, 0.12, 0.22, 0.20, 0.25,
                    0.35, 0.30, 0.20, 0.15, 0.10, 0.12, 0.18, 0.10, 0.08};
    using P = Primitive;
    using Z = Zone;
    using M = Mode;
    const auto& n = model::pathology_names();
    auto ph = [&](std::size_t j, std::string a, std::string b) {
      return std::vector<std::string>{a.replace(a.find('@'), 1, n[j]), b.replace(b.find('@'), 1, n[j])};
    };
    s.signals = {{
        {P::rod, Z::body, M::set, 1000, 3, 4, ph(0, "@ is noted.", "there is @ in the chest.")},
        {P::tube, Z::mediastinum, M::set, 700, 5, 6, ph(1, "@ is seen in the aorta.", "mild @ is present.")},
        {P::ball, Z::heart, M::set, 60, 9, 11, ph(2, "the heart is enlarged consistent with @.", "@ is present.")},
        {P::shell, Z::heart, M::set, -400, 8, 10, ph(3, "a small @ is seen.", "there is @.")},
        {P::cluster, Z::heart, M::set, 1000, 2, 3, ph(4, "@ is noted.", "there is @ in the left main artery.")},
        {P::ball, Z::lower_mediastinum, M::set, -900, 5, 7, ph(5, "a small @ is present.", "@ is seen.")},
        {P::cluster, Z::mediastinum, M::set, 500, 3, 4, ph(6, "mediastinal @ is seen.", "there is @.")},
        {P::cluster, Z::lung, M::set, -1000, 4, 6, ph(7, "centrilobular @ is present.", "@ is noted in both lungs.")},
        {P::slab, Z::lung_lower, M::set, 100, 4, 5, ph(8, "basal @ is seen.", "there is @ in the lower lobe.")},
        {P::ball, Z::lung, M::set, 200, 5, 6, ph(9, "a @ is seen in the lung.", "there is a @.")},
        {P::ball, Z::lung, M::add, 450, 6, 8, ph(10, "@ is seen.", "there is patchy @.")},
        {P::streaks, Z::lung, M::set, 300, 4, 6, ph(11, "@ is noted.", "there are changes of @.")},
        {P::crescent, Z::lung_posterior, M::set, 20, 8, 10, ph(12, "a @ is present.", "there is @ on the right.")},
        {P::checker, Z::lung, M::add, 450, 7, 9, ph(13, "a @ is seen.", "there is @ in the lungs.")},
        {P::tube, Z::lung, M::set, 400, 3, 3, ph(14, "@ is noted.", "there is mild @.")},
        {P::ball, Z::lung, M::set, 40, 6, 8, ph(15, "@ is seen in the lung.", "there is dense @.")},
        {P::tube, Z::lung_lower, M::set, 300, 4, 4, ph(16, "@ is noted.", "there is cylindrical @.")},
        {P::grid, Z::lung, M::add, 650, 6, 8, ph(17, "@ is seen.", "there is @ in the periphery.")},
    }};
    s.background_sentences = {"the trachea and main bronchi are patent.",
                              "the thyroid gland appears normal.",
                              "degenerative changes are seen in the spine.",
                              "the upper abdominal organs are unremarkable.",
                              "no focal bone lesion is seen.",
                              "the esophagus has normal caliber."};
    return s;
  }
};

struct Planted {
  std::size_t cls = 0;
  std::array<int, 3> center{};  // depth, height, width
  int size = 0;
};

struct SyntheticRecord {
  volume::RawVolume volume;
  std::array<std::uint8_t, kNumClasses> labels{};
  std::vector<Planted> planted;
  std::string findings;
  std::string impressions;
};

namespace detail {

struct Anatomy {
  double cy, cx, ry, rx;                  // body ellipse
  double lung_cy, lung_lx, lung_rx;       // lung centres
  double lung_ry, lung_rxr, lung_rz, lung_cz;  // lung radii
};

inline bool in_lung(const Anatomy& a, double z, double y, double x) {
  for (double lx : {a.lung_lx, a.lung_rx}) {
    const double dz = (z - a.lung_cz) / a.lung_rz, dy = (y - a.lung_cy) / a.lung_ry, dx = (x - lx) / a.lung_rxr;
    if (dz * dz + dy * dy + dx * dx <= 1.0) return true;
  }
  return false;
}

inline bool in_body(const Anatomy& a, double y, double x) {
  const double dy = (y - a.cy) / a.ry, dx = (x - a.cx) / a.rx;
  return dy * dy + dx * dx <= 1.0;
}

}  // namespace detail

/// Builds one record. Labels are drawn first; each positive class plants its
/// primitive; the report lists exactly the planted classes.
inline SyntheticRecord generate(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  auto uint = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
  const int D = int(spec.depth), H = int(spec.height), W = int(spec.width);

  SyntheticRecord rec;
  for (std::size_t j = 0; j < kNumClasses; ++j) rec.labels[j] = u01(rng) < spec.prevalence[j] ? 1 : 0;

  detail::Anatomy a{};
  a.cy = H * 0.5 + uni(-1, 1);
  a.cx = W * 0.5 + uni(-1, 1);
  a.ry = H * 0.40;
  a.rx = W * 0.45;
  a.lung_cy = H * 0.45;
  a.lung_lx = W * 0.30;
  a.lung_rx = W * 0.70;
  a.lung_ry = H * 0.28 + uni(-0.5, 0.5);
  a.lung_rxr = W * 0.16 + uni(-0.5, 0.5);
  a.lung_rz = D * 0.45;
  a.lung_cz = D * 0.5;

  std::vector<double> hu(std::size_t(D) * H * W);
  auto at = [&](int z, int y, int x) -> double& { return hu[(std::size_t(z) * H + y) * W + x]; };
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = -1000;
        if (detail::in_body(a, y, x)) v = detail::in_lung(a, z, y, x) ? -850 : 40;
        const double sy = (y - H * 0.82) / 3.0, sx = (x - a.cx) / 3.0;
        if (sy * sy + sx * sx <= 1.0) v = 400;  // spine
        at(z, y, x) = v;
      }

  auto lung_point = [&](int margin, bool lower, bool posterior) {
    for (int tries = 0; tries < 200; ++tries) {
      const int z = lower ? uint(D / 2, D - 1 - margin) : uint(margin, D - 1 - margin);
      const int y = posterior ? uint(int(a.lung_cy), int(a.lung_cy + a.lung_ry) - 1) : uint(margin, H - 1 - margin);
      const int x = uint(margin, W - 1 - margin);
      if (detail::in_lung(a, z, y, x)) return std::array<int, 3>{z, y, x};
    }
    return std::array<int, 3>{D / 2, int(a.lung_cy), int(a.lung_lx)};
  };
  auto zone_point = [&](Zone zn, int margin) -> std::array<int, 3> {
    auto clampc = [&](int v, int n) { return std::clamp(v, margin, n - 1 - margin); };
    switch (zn) {
      case Zone::body:
        return {clampc(uint(0, D - 1), D), clampc(int(a.cy) + uint(-H / 5, H / 5), H),
                clampc(int(a.cx) + uint(-W / 10, W / 10), W)};
      case Zone::mediastinum:
        return {clampc(uint(D / 6, D / 2), D), clampc(int(a.cy) + uint(-H / 8, 0), H), clampc(int(a.cx) + uint(-2, 2), W)};
      case Zone::heart:
        return {clampc(uint(D / 2, 2 * D / 3), D), clampc(int(a.cy) + uint(0, H / 10), H),
                clampc(int(a.cx) + uint(1, W / 10), W)};
      case Zone::lower_mediastinum:
        return {clampc(uint(3 * D / 4, D - 1), D), clampc(int(a.cy) + uint(0, H / 8), H), clampc(int(a.cx) + uint(-2, 2), W)};
      case Zone::lung: return lung_point(margin, false, false);
      case Zone::lung_lower: return lung_point(margin, true, false);
      case Zone::lung_posterior: return lung_point(margin, true, true);
    }
    return {D / 2, H / 2, W / 2};
  };

  auto write = [&](const SignalDescriptor& s, int z, int y, int x) {
    if (z < 0 || y < 0 || x < 0 || z >= D || y >= H || x >= W) return;
    double& v = at(z, y, x);
    v = s.mode == Mode::set ? s.hu : v + s.hu;
  };
  auto ball = [&](const SignalDescriptor& s, std::array<int, 3> c, double r, double inner = -1) {
    const int R = int(std::ceil(r));
    for (int dz = -R; dz <= R; ++dz)
      for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) {
          const double d = std::sqrt(double(dz * dz + dy * dy + dx * dx));
          if (d <= r && d > inner) write(s, c[0] + dz, c[1] + dy, c[2] + dx);
        }
  };

  for (std::size_t j = 0; j < kNumClasses; ++j) {
    if (!rec.labels[j]) continue;
    const auto& s = spec.signals[j];
    const int r = uint(s.size_min, s.size_max);
    const auto c = zone_point(s.zone, std::min(r, 4));
    rec.planted.push_back({j, c, r});
    switch (s.primitive) {
      case Primitive::ball: ball(s, c, r); break;
      case Primitive::shell: ball(s, c, r, r - 2.0); break;
      case Primitive::crescent:
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = 0; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const double d = std::sqrt(double(dz * dz + dy * dy + dx * dx));
              if (d <= r && d > r - 3.0) write(s, c[0] + dz, c[1] + dy, c[2] + dx);
            }
        break;
      case Primitive::rod: {
        const int len = uint(16, 24);
        for (int dz = -len / 2; dz <= len / 2; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx)
              if (dy * dy + dx * dx <= r * r) write(s, c[0] + dz, c[1] + dy, c[2] + dx);
        break;
      }
      case Primitive::tube: {
        const int len = uint(14, 20);
        for (int dz = -len / 2; dz <= len / 2; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const double d = std::sqrt(double(dy * dy + dx * dx));
              if (d <= r && d > r - 2.0) write(s, c[0] + dz, c[1] + dy, c[2] + dx);
            }
        break;
      }
      case Primitive::slab:
        for (int dz = 0; dz < r; ++dz)
          for (int dy = -3 * r; dy <= 3 * r; ++dy)
            for (int dx = -2 * r; dx <= 2 * r; ++dx)
              if (detail::in_lung(a, c[0] + dz, c[1] + dy, c[2] + dx)) write(s, c[0] + dz, c[1] + dy, c[2] + dx);
        break;
      case Primitive::cluster: {
        const int k = uint(4, 6);
        for (int i = 0; i < k; ++i) {
          auto ci = c;
          for (int& v : ci) v += uint(-4, 4);
          ball(s, ci, r + 0.5);
        }
        break;
      }
      case Primitive::checker:
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx)
              if (((c[0] + dz) / 3 + (c[1] + dy) / 3 + (c[2] + dx) / 3) % 2 == 0 &&
                  detail::in_lung(a, c[0] + dz, c[1] + dy, c[2] + dx))
                write(s, c[0] + dz, c[1] + dy, c[2] + dx);
        break;
      case Primitive::grid:
        for (int dz = -r; dz <= r; ++dz)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx)
              if (((c[1] + dy) % 4 == 0 || (c[2] + dx) % 4 == 0) && detail::in_lung(a, c[0] + dz, c[1] + dy, c[2] + dx))
                write(s, c[0] + dz, c[1] + dy, c[2] + dx);
        break;
      case Primitive::streaks: {
        const int k = uint(2, 4);
        for (int i = 0; i < k; ++i) {
          const int zz = c[0] + uint(-3, 3), yy = c[1] + uint(-4, 4);
          for (int dx = -2 * r; dx <= 2 * r; ++dx)
            for (int e = 0; e < 9; ++e) write(s, zz + e / 3 - 1, yy + e % 3 - 1, c[2] + dx);
        }
        break;
      }
    }
  }

  std::normal_distribution<double> noise(0.0, spec.noise_hu);
  rec.volume.depth = spec.depth;
  rec.volume.height = spec.height;
  rec.volume.width = spec.width;
  rec.volume.spacing = spec.spacing;
  rec.volume.rescale_slope = 0.5;
  rec.volume.rescale_intercept = -1024.0;
  rec.volume.voxels.resize(hu.size());
  for (std::size_t i = 0; i < hu.size(); ++i) {
    const double v = std::clamp(hu[i] + noise(rng), -1024.0, 3000.0);
    rec.volume.voxels[i] = static_cast<std::int16_t>(std::lround((v + 1024.0) / 0.5));
  }

  std::vector<std::string> sentences;
  for (const auto& p : rec.planted) {
    const auto& ph = spec.signals[p.cls].phrases;
    sentences.push_back(ph[std::uniform_int_distribution<std::size_t>(0, ph.size() - 1)(rng)]);
  }
  if (!spec.background_sentences.empty()) {
    const std::size_t k = 1 + rng() % 2;
    for (std::size_t i = 0; i < k; ++i)
      sentences.push_back(spec.background_sentences[rng() % spec.background_sentences.size()]);
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) rec.findings += (i ? " " : "") + sentences[i];
  if (rec.planted.empty()) {
    rec.impressions = "no acute findings.";
  } else {
    rec.impressions = "ct scan showing ";
    for (std::size_t i = 0; i < rec.planted.size(); ++i) {
      if (i) rec.impressions += i + 1 == rec.planted.size() ? " and " : ", ";
      rec.impressions += model::pathology_names()[rec.planted[i].cls];
    }
    rec.impressions += ".";
  }
  return rec;
}

/// Whole-word, case-insensitive phrase test.
inline bool mentions(const std::string& report, const std::string& phrase) {
  std::string r = report, p = phrase;
  for (auto& c : r) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (auto& c : p) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (std::size_t at = r.find(p); at != std::string::npos; at = r.find(p, at + 1)) {
    const bool left = at == 0 || !std::isalnum(static_cast<unsigned char>(r[at - 1]));
    const std::size_t end = at + p.size();
    const bool right = end == r.size() || !std::isalnum(static_cast<unsigned char>(r[end]));
    if (left && right) return true;
  }
  return false;
}

}  // namespace ctlora::synth
