// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// CT volume preprocessing: rescale to HU, clip, depth adjustment,
// normalization, and the VOL1 binary container.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ctlora/error.hpp"

namespace ctlora::volume {

inline constexpr float kHuMin = -1000.0f;
inline constexpr float kHuMax = 1000.0f;
inline constexpr std::size_t kMinRawDepth = 20;

/// mm per voxel along (depth, height, width).
using Spacing = std::array<double, 3>;

struct RawVolume {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<std::int16_t> voxels;  // depth-major
  double rescale_slope = 1.0;
  double rescale_intercept = 0.0;
  Spacing spacing{1.0, 1.0, 1.0};
};

/// Real-valued D x H x W grid. HU before normalization, [0,1] after.
struct Grid {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<float> voxels;
  Spacing spacing{1.0, 1.0, 1.0};

  Grid() = default;
  Grid(std::size_t d, std::size_t h, std::size_t w, float fill = 0.0f, Spacing sp = {1.0, 1.0, 1.0})
      : depth(d), height(h), width(w), voxels(d * h * w, fill), spacing(sp) {}

  std::size_t slice_size() const { return height * width; }
  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const { return (d * height + h) * width + w; }
  float& at(std::size_t d, std::size_t h, std::size_t w) { return voxels[index(d, h, w)]; }
  float at(std::size_t d, std::size_t h, std::size_t w) const { return voxels[index(d, h, w)]; }
  bool same_shape(const Grid& o) const { return depth == o.depth && height == o.height && width == o.width; }
};

struct HuVolume : Grid {
  using Grid::Grid;
};

/// Model input (1, D_target, H, W) with voxels in [0,1]; the channel is implicit.
struct ModelVolume : Grid {
  using Grid::Grid;
  static constexpr std::size_t channels = 1;
};

inline void validate(const RawVolume& raw) {
  require(raw.rescale_slope != 0.0 && std::isfinite(raw.rescale_slope), Errc::invalid_metadata,
          "rescale slope must be finite and non-zero");
  require(std::isfinite(raw.rescale_intercept), Errc::invalid_metadata, "rescale intercept must be finite");
  require(raw.depth >= kMinRawDepth, Errc::invalid_metadata,
          "volume depth " + std::to_string(raw.depth) + " below minimum " + std::to_string(kMinRawDepth));
  require(raw.height > 0 && raw.width > 0, Errc::invalid_metadata, "volume height and width must be positive");
  require(raw.voxels.size() == raw.depth * raw.height * raw.width, Errc::invalid_metadata,
          "voxel count does not match D*H*W");
}

/// v' = clamp(v * slope + intercept, -1000, 1000).
inline HuVolume rescale_and_clip(const RawVolume& raw) {
  validate(raw);
  HuVolume out(raw.depth, raw.height, raw.width, 0.0f, raw.spacing);
  for (std::size_t i = 0; i < raw.voxels.size(); ++i) {
    const double hu = static_cast<double>(raw.voxels[i]) * raw.rescale_slope + raw.rescale_intercept;
    out.voxels[i] = static_cast<float>(std::clamp(hu, double(kHuMin), double(kHuMax)));
  }
  return out;
}

/// Resample (linear, end-aligned) when deeper than `target`, zero-pad the tail
/// when shallower, identity otherwise.
template <class G>
G adjust_depth(const G& vol, std::size_t target) {
  require(target >= 1, Errc::invalid_config, "target depth must be >= 1");
  require(vol.depth >= 1, Errc::invalid_input, "volume depth must be >= 1");
  if (vol.depth == target) return vol;
  G out;
  static_cast<Grid&>(out) = Grid(target, vol.height, vol.width, 0.0f, vol.spacing);
  const std::size_t ss = vol.slice_size();
  if (vol.depth < target) {
    std::copy(vol.voxels.begin(), vol.voxels.end(), out.voxels.begin());
    return out;
  }
  const double step = target == 1 ? 0.0 : double(vol.depth - 1) / double(target - 1);
  for (std::size_t k = 0; k < target; ++k) {
    const double pos = k == target - 1 ? double(vol.depth - 1) : double(k) * step;
    const auto i0 = std::min<std::size_t>(static_cast<std::size_t>(std::floor(pos)), vol.depth - 1);
    const std::size_t i1 = std::min(i0 + 1, vol.depth - 1);
    const double f = pos - double(i0);
    const float* a = vol.voxels.data() + i0 * ss;
    const float* b = vol.voxels.data() + i1 * ss;
    float* o = out.voxels.data() + k * ss;
    for (std::size_t i = 0; i < ss; ++i) o[i] = static_cast<float>((1.0 - f) * a[i] + f * b[i]);
  }
  // Resampling changes the physical slice thickness.
  out.spacing[0] = vol.spacing[0] * double(vol.depth - 1) / double(std::max<std::size_t>(target - 1, 1));
  return out;
}

/// v' = (v + 1000) / 2000.
inline ModelVolume normalize_and_pack(const HuVolume& vol) {
  ModelVolume out(vol.depth, vol.height, vol.width, 0.0f, vol.spacing);
  for (std::size_t i = 0; i < vol.voxels.size(); ++i) {
    const float v = vol.voxels[i];
    if (!(v >= kHuMin && v <= kHuMax))
      fail(Errc::contract_violation, "voxel " + std::to_string(i) + " outside [-1000, 1000]: " + std::to_string(v));
    out.voxels[i] = (v - kHuMin) / (kHuMax - kHuMin);
  }
  return out;
}

inline ModelVolume preprocess(const RawVolume& raw, std::size_t target_depth) {
  return normalize_and_pack(adjust_depth(rescale_and_clip(raw), target_depth));
}

// ---------------------------------------------------------------------------
// VOL1 container (little-endian)

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& s, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr std::size_t kVolHeaderBytes = 4 + 3 * 4 + 3 * 8 + 2 * 8;

inline std::string encode(const RawVolume& v) {
  std::string s = "VOL1";
  detail::put_u32(s, static_cast<std::uint32_t>(v.depth));
  detail::put_u32(s, static_cast<std::uint32_t>(v.height));
  detail::put_u32(s, static_cast<std::uint32_t>(v.width));
  for (double sp : v.spacing) detail::put_f64(s, sp);
  detail::put_f64(s, v.rescale_slope);
  detail::put_f64(s, v.rescale_intercept);
  s.reserve(s.size() + 2 * v.voxels.size());
  for (auto x : v.voxels) {
    const auto u = static_cast<std::uint16_t>(x);
    s.push_back(static_cast<char>(u & 0xFF));
    s.push_back(static_cast<char>(u >> 8));
  }
  return s;
}

inline RawVolume decode(const std::string& bytes) {
  require(bytes.size() >= kVolHeaderBytes && bytes.compare(0, 4, "VOL1") == 0, Errc::format,
          "not a VOL1 volume (bad magic or truncated header)");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 4;
  RawVolume v;
  v.depth = detail::get_le(p, 4);
  v.height = detail::get_le(p + 4, 4);
  v.width = detail::get_le(p + 8, 4);
  p += 12;
  for (int i = 0; i < 3; ++i) v.spacing[i] = std::bit_cast<double>(detail::get_le(p + 8 * i, 8));
  p += 24;
  v.rescale_slope = std::bit_cast<double>(detail::get_le(p, 8));
  v.rescale_intercept = std::bit_cast<double>(detail::get_le(p + 8, 8));
  const std::size_t n = v.depth * v.height * v.width;
  require(bytes.size() == kVolHeaderBytes + 2 * n, Errc::format, "VOL1 payload size does not match D*H*W");
  const auto* q = reinterpret_cast<const unsigned char*>(bytes.data()) + kVolHeaderBytes;
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    v.voxels[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(q[2 * i] | (q[2 * i + 1] << 8)));
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::data, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::data, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::data, "short write to " + path);
}

inline RawVolume load(const std::string& path) { return decode(read_file(path)); }
inline void save(const RawVolume& v, const std::string& path) { write_file(path, encode(v)); }

/// Stores a [0,1] model volume as HU with 1/16 HU resolution (slope 0.0625).
inline RawVolume to_raw(const ModelVolume& m) {
  RawVolume r;
  r.depth = m.depth;
  r.height = m.height;
  r.width = m.width;
  r.spacing = m.spacing;
  r.rescale_slope = 0.0625;
  r.rescale_intercept = 0.0;
  r.voxels.resize(m.voxels.size());
  for (std::size_t i = 0; i < m.voxels.size(); ++i) {
    const double hu = double(m.voxels[i]) * 2000.0 - 1000.0;
    r.voxels[i] = static_cast<std::int16_t>(std::lround(std::clamp(hu, -1000.0, 1000.0) * 16.0));
  }
  return r;
}

}  // namespace ctlora::volume
