// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Seeded spatial + intensity augmentation for normalized volumes.
//
// A TransformPlan is sampled once from a policy and a seed and then applied
// deterministically. Spatial transforms run first (image trilinear, mask
// nearest-neighbour), intensity transforms after, on the image only.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ctlora/error.hpp"
#include "ctlora/volume.hpp"

namespace ctlora::augment {

using volume::Grid;
using volume::ModelVolume;

struct Mask {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(std::size_t d, std::size_t h, std::size_t w) const { return labels[(d * height + h) * width + w]; }
};

struct AugmentationPolicy {
  double p_rotation = 0.9;
  double p_scaling = 0.9;
  double p_translation = 0.9;
  double p_elastic = 0.7;
  double p_flip = 0.5;
  double p_blur = 0.5;
  double p_noise = 0.5;
  double p_gamma = 0.5;
  double p_bias_field = 0.3;

  double max_rotation_deg = 15.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double max_translation_mm = 10.0;
  std::size_t elastic_control_points = 7;
  double elastic_max_mm = 10.0;
  double flip_axis_probability = 0.5;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.5;
  double noise_sigma = 0.15;
  double log_gamma_min = -0.5;
  double log_gamma_max = 0.5;
  double bias_coefficient = 0.5;
  int bias_order = 3;

  static AugmentationPolicy disabled() {
    AugmentationPolicy p;
    p.p_rotation = p.p_scaling = p.p_translation = p.p_elastic = p.p_flip = 0;
    p.p_blur = p.p_noise = p.p_gamma = p.p_bias_field = 0;
    return p;
  }
  static AugmentationPolicy always() {
    AugmentationPolicy p;
    p.p_rotation = p.p_scaling = p.p_translation = p.p_elastic = p.p_flip = 1;
    p.p_blur = p.p_noise = p.p_gamma = p.p_bias_field = 1;
    return p;
  }

  std::map<std::string, double*> fields() {
    return {{"rotation.p", &p_rotation},
            {"scaling.p", &p_scaling},
            {"translation.p", &p_translation},
            {"elastic.p", &p_elastic},
            {"flip.p", &p_flip},
            {"blur.p", &p_blur},
            {"noise.p", &p_noise},
            {"gamma.p", &p_gamma},
            {"bias_field.p", &p_bias_field},
            {"rotation.max_deg", &max_rotation_deg},
            {"scaling.min", &scale_min},
            {"scaling.max", &scale_max},
            {"translation.max_mm", &max_translation_mm},
            {"elastic.max_mm", &elastic_max_mm},
            {"flip.axis_p", &flip_axis_probability},
            {"blur.sigma_min", &blur_sigma_min},
            {"blur.sigma_max", &blur_sigma_max},
            {"noise.sigma", &noise_sigma},
            {"gamma.log_min", &log_gamma_min},
            {"gamma.log_max", &log_gamma_max},
            {"bias_field.coefficient", &bias_coefficient}};
  }

  void validate() const {
    for (double p : {p_rotation, p_scaling, p_translation, p_elastic, p_flip, p_blur, p_noise, p_gamma, p_bias_field,
                     flip_axis_probability})
      require(p >= 0.0 && p <= 1.0, Errc::invalid_config, "policy probabilities must lie in [0,1]");
    require(max_rotation_deg >= 0 && max_translation_mm >= 0 && elastic_max_mm >= 0 && noise_sigma >= 0 &&
                bias_coefficient >= 0,
            Errc::invalid_config, "policy magnitudes must be non-negative");
    require(scale_min > 0 && scale_min <= scale_max, Errc::invalid_config, "scaling range must be positive and ordered");
    require(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max, Errc::invalid_config, "blur sigma range invalid");
    require(log_gamma_min <= log_gamma_max, Errc::invalid_config, "gamma range invalid");
    require(elastic_control_points >= 4, Errc::invalid_config, "elastic grid needs >= 4 control points per axis");
    require(bias_order >= 0, Errc::invalid_config, "bias order must be >= 0");
  }
};

inline AugmentationPolicy parse_policy(const std::string& text) {
  AugmentationPolicy p;
  auto f = p.fields();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    auto strip = [](std::string& s) {
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
    };
    strip(key);
    strip(val);
    if (key == "elastic.control_points") {
      p.elastic_control_points = std::stoul(val);
    } else if (key == "bias_field.order") {
      p.bias_order = std::stoi(val);
    } else {
      auto it = f.find(key);
      require(it != f.end(), Errc::invalid_config, "unknown policy key '" + key + "'");
      try {
        *it->second = std::stod(val);
      } catch (const std::exception&) {
        fail(Errc::invalid_config, "bad value for policy key '" + key + "'");
      }
    }
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Cubic B-spline displacement field

/// Centered uniform cubic B-spline.
inline double cubic_bspline(double s) {
  s = std::abs(s);
  if (s < 1.0) return 2.0 / 3.0 - s * s + 0.5 * s * s * s;
  if (s < 2.0) {
    const double t = 2.0 - s;
    return t * t * t / 6.0;
  }
  return 0.0;
}

/// n x n x n grid of 3-vector control coefficients in mm, indexed (depth, height, width).
struct DisplacementField {
  std::size_t n = 7;
  std::vector<double> coeffs;  // ((i*n + j)*n + k)*3 + component

  static DisplacementField zero(std::size_t n = 7) { return {n, std::vector<double>(n * n * n * 3, 0.0)}; }

  double& c(std::size_t i, std::size_t j, std::size_t k, std::size_t comp) { return coeffs[((i * n + j) * n + k) * 3 + comp]; }
  double c(std::size_t i, std::size_t j, std::size_t k, std::size_t comp) const {
    return coeffs[((i * n + j) * n + k) * 3 + comp];
  }
};

/// Control point `i` sits at voxel coordinate (i - 1) * h with h = (N - 1) / (n - 3),
/// so the n - 3 interior intervals span the axis exactly.
inline double control_spacing(std::size_t axis_len, std::size_t n) {
  return axis_len > 1 ? double(axis_len - 1) / double(n - 3) : 1.0;
}

/// Per-coordinate basis weights for one axis: weights[x * n + i] = B_i(x).
inline std::vector<double> axis_weights(std::size_t axis_len, std::size_t n) {
  const double h = control_spacing(axis_len, n);
  std::vector<double> w(axis_len * n);
  for (std::size_t x = 0; x < axis_len; ++x)
    for (std::size_t i = 0; i < n; ++i) w[x * n + i] = cubic_bspline(double(x) / h - (double(i) - 1.0));
  return w;
}

/// Dense field u(x) in mm, 3 components per voxel, evaluated separably.
inline std::vector<double> evaluate_field(const DisplacementField& f, std::size_t D, std::size_t H, std::size_t W) {
  const std::size_t n = f.n;
  require(f.coeffs.size() == n * n * n * 3 && n >= 4, Errc::invalid_field, "displacement control grid has wrong shape");
  const auto wd = axis_weights(D, n), wh = axis_weights(H, n), ww = axis_weights(W, n);
  // contract width: a[i][j][x][c]
  std::vector<double> a(n * n * W * 3, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t k = 0; k < n; ++k) {
          const double b = ww[x * n + k];
          if (b == 0.0) continue;
          for (std::size_t c = 0; c < 3; ++c) a[((i * n + j) * W + x) * 3 + c] += b * f.c(i, j, k, c);
        }
  // contract height: b[i][y][x][c]
  std::vector<double> bb(n * H * W * 3, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t j = 0; j < n; ++j) {
        const double b = wh[y * n + j];
        if (b == 0.0) continue;
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t c = 0; c < 3; ++c) bb[((i * H + y) * W + x) * 3 + c] += b * a[((i * n + j) * W + x) * 3 + c];
      }
  std::vector<double> u(D * H * W * 3, 0.0);
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t i = 0; i < n; ++i) {
      const double b = wd[z * n + i];
      if (b == 0.0) continue;
      for (std::size_t yx = 0; yx < H * W; ++yx)
        for (std::size_t c = 0; c < 3; ++c) u[(z * H * W + yx) * 3 + c] += b * bb[(i * H * W + yx) * 3 + c];
    }
  return u;
}

// ---------------------------------------------------------------------------
// Samplers

inline float sample_trilinear(const Grid& g, double z, double y, double x) {
  const double fz = std::floor(z), fy = std::floor(y), fx = std::floor(x);
  const double tz = z - fz, ty = y - fy, tx = x - fx;
  const auto iz = static_cast<long>(fz), iy = static_cast<long>(fy), ix = static_cast<long>(fx);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const long zz = iz + dz;
    const double wz = dz ? tz : 1.0 - tz;
    if (wz == 0.0 || zz < 0 || zz >= static_cast<long>(g.depth)) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const long yy = iy + dy;
      const double wy = dy ? ty : 1.0 - ty;
      if (wy == 0.0 || yy < 0 || yy >= static_cast<long>(g.height)) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const long xx = ix + dx;
        const double wx = dx ? tx : 1.0 - tx;
        if (wx == 0.0 || xx < 0 || xx >= static_cast<long>(g.width)) continue;
        acc += wz * wy * wx * g.at(zz, yy, xx);
      }
    }
  }
  return static_cast<float>(acc);
}

inline std::uint8_t sample_nearest(const Mask& m, double z, double y, double x) {
  const long zz = std::lround(z), yy = std::lround(y), xx = std::lround(x);
  if (zz < 0 || yy < 0 || xx < 0 || zz >= long(m.depth) || yy >= long(m.height) || xx >= long(m.width)) return 0;
  return m.at(zz, yy, xx);
}

/// Resamples image (and mask) with a per-voxel source-coordinate function.
template <class SourceFn>
void resample(ModelVolume& vol, Mask* mask, SourceFn&& source) {
  Grid src = vol;
  std::optional<Mask> msrc;
  if (mask) msrc = *mask;
  for (std::size_t z = 0; z < vol.depth; ++z)
    for (std::size_t y = 0; y < vol.height; ++y)
      for (std::size_t x = 0; x < vol.width; ++x) {
        const auto p = source(z, y, x);
        vol.at(z, y, x) = sample_trilinear(src, p[0], p[1], p[2]);
        if (mask) mask->labels[(z * vol.height + y) * vol.width + x] = sample_nearest(*msrc, p[0], p[1], p[2]);
      }
}

inline void check_mask(const ModelVolume& vol, const Mask* mask) {
  if (mask)
    require(mask->depth == vol.depth && mask->height == vol.height && mask->width == vol.width &&
                mask->labels.size() == vol.voxels.size(),
            Errc::invalid_input, "mask shape does not match volume");
}

/// x' = x + u(x): each output voxel reads the input at its displaced position.
inline void elastic_deform(ModelVolume& vol, const DisplacementField& field, Mask* mask = nullptr) {
  require(field.n == 7 && field.coeffs.size() == 7 * 7 * 7 * 3, Errc::invalid_field,
          "elastic control grid must be 7x7x7x3");
  check_mask(vol, mask);
  bool any = false;
  for (double c : field.coeffs) any = any || c != 0.0;
  if (!any) return;
  const auto u = evaluate_field(field, vol.depth, vol.height, vol.width);
  const auto& sp = vol.spacing;
  resample(vol, mask, [&](std::size_t z, std::size_t y, std::size_t x) {
    const double* d = &u[((z * vol.height + y) * vol.width + x) * 3];
    return std::array<double, 3>{double(z) + d[0] / sp[0], double(y) + d[1] / sp[1], double(x) + d[2] / sp[2]};
  });
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

/// Rotation from Euler angles (degrees) about the depth, height and width axes,
/// composed as R_depth * R_height * R_width in (d, h, w) coordinates.
inline Mat3 rotation_matrix(const std::array<double, 3>& deg) {
  const double k = 3.14159265358979323846 / 180.0;
  const double a = deg[0] * k, b = deg[1] * k, c = deg[2] * k;
  const Mat3 rd{{{1, 0, 0}, {0, std::cos(a), -std::sin(a)}, {0, std::sin(a), std::cos(a)}}};
  const Mat3 rh{{{std::cos(b), 0, std::sin(b)}, {0, 1, 0}, {-std::sin(b), 0, std::cos(b)}}};
  const Mat3 rw{{{std::cos(c), -std::sin(c), 0}, {std::sin(c), std::cos(c), 0}, {0, 0, 1}}};
  return matmul3(matmul3(rd, rh), rw);
}

/// Forward map about the volume centre: p' = s R p + t (physical mm).
inline void affine_transform(ModelVolume& vol, Mask* mask, const std::array<double, 3>& rotation_deg, double scale,
                             const std::array<double, 3>& translation_mm) {
  require(scale > 0 && std::isfinite(scale), Errc::invalid_parameter, "scale must be positive");
  check_mask(vol, mask);
  if (rotation_deg == std::array<double, 3>{0, 0, 0} && scale == 1.0 &&
      translation_mm == std::array<double, 3>{0, 0, 0})
    return;
  const Mat3 r = rotation_matrix(rotation_deg);
  const auto& sp = vol.spacing;
  const std::array<double, 3> ctr{(double(vol.depth) - 1) / 2, (double(vol.height) - 1) / 2,
                                  (double(vol.width) - 1) / 2};
  resample(vol, mask, [&](std::size_t z, std::size_t y, std::size_t x) {
    const std::array<double, 3> idx{double(z), double(y), double(x)};
    std::array<double, 3> q{};
    for (int i = 0; i < 3; ++i) q[i] = (idx[i] - ctr[i]) * sp[i] - translation_mm[i];
    std::array<double, 3> src{};
    for (int i = 0; i < 3; ++i) {
      double acc = 0;
      for (int j = 0; j < 3; ++j) acc += r[j][i] * q[j];  // R^T q
      src[i] = acc / scale / sp[i] + ctr[i];
    }
    return src;
  });
}

/// Exact index reversal along height (anterior-posterior) and/or width (left-right).
inline void flip(ModelVolume& vol, Mask* mask, bool height_axis, bool width_axis) {
  check_mask(vol, mask);
  if (!height_axis && !width_axis) return;
  auto src = vol.voxels;
  std::vector<std::uint8_t> msrc;
  if (mask) msrc = mask->labels;
  for (std::size_t z = 0; z < vol.depth; ++z)
    for (std::size_t y = 0; y < vol.height; ++y)
      for (std::size_t x = 0; x < vol.width; ++x) {
        const std::size_t sy = height_axis ? vol.height - 1 - y : y;
        const std::size_t sx = width_axis ? vol.width - 1 - x : x;
        const std::size_t o = vol.index(z, y, x), s = vol.index(z, sy, sx);
        vol.voxels[o] = src[s];
        if (mask) mask->labels[o] = msrc[s];
      }
}

// ---------------------------------------------------------------------------
// Intensity transforms

inline void gamma_correct(ModelVolume& vol, double log_gamma) {
  if (log_gamma == 0.0) return;
  const double g = std::exp(log_gamma);
  for (auto& v : vol.voxels) v = static_cast<float>(std::pow(std::max(0.0, double(v)), g));
}

inline void add_noise(ModelVolume& vol, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& v : vol.voxels) v = static_cast<float>(std::clamp(double(v) + nd(rng), 0.0, 1.0));
}

/// Separable Gaussian smoothing, radius ceil(3 sigma), replicate borders.
inline void gaussian_blur(ModelVolume& vol, double sigma) {
  require(sigma > 0, Errc::invalid_parameter, "blur sigma must be positive");
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * rad + 1);
  double s = 0;
  for (int i = -rad; i <= rad; ++i) s += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= s;
  const std::array<std::size_t, 3> dims{vol.depth, vol.height, vol.width};
  const std::array<std::size_t, 3> stride{vol.height * vol.width, vol.width, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const auto src = vol.voxels;
    const long len = static_cast<long>(dims[axis]);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const long pos = static_cast<long>((i / stride[axis]) % dims[axis]);
      const std::size_t base = i - static_cast<std::size_t>(pos) * stride[axis];
      double acc = 0;
      for (int t = -rad; t <= rad; ++t) {
        const long p = std::clamp(pos + t, 0L, len - 1);
        acc += k[t + rad] * src[base + static_cast<std::size_t>(p) * stride[axis]];
      }
      vol.voxels[i] = static_cast<float>(acc);
    }
  }
}

/// Number of monomials z^a y^b x^c with a + b + c <= order.
inline std::size_t bias_terms(int order) {
  std::size_t n = 0;
  for (int a = 0; a <= order; ++a)
    for (int b = 0; b <= order - a; ++b) n += static_cast<std::size_t>(order - a - b + 1);
  return n;
}

/// Multiplies by exp(P) for a polynomial P in [-1,1]-normalized coordinates,
/// then rescales by the maximum if it exceeds 1.
inline void bias_field(ModelVolume& vol, int order, const std::vector<double>& coeffs) {
  require(coeffs.size() == bias_terms(order), Errc::invalid_parameter, "bias field coefficient count mismatch");
  auto norm = [](std::size_t i, std::size_t n) { return n > 1 ? 2.0 * double(i) / double(n - 1) - 1.0 : 0.0; };
  float mx = 0;
  for (std::size_t z = 0; z < vol.depth; ++z)
    for (std::size_t y = 0; y < vol.height; ++y)
      for (std::size_t x = 0; x < vol.width; ++x) {
        const double cz = norm(z, vol.depth), cy = norm(y, vol.height), cx = norm(x, vol.width);
        double p = 0;
        std::size_t m = 0;
        for (int a = 0; a <= order; ++a)
          for (int b = 0; b <= order - a; ++b)
            for (int c = 0; c <= order - a - b; ++c) p += coeffs[m++] * std::pow(cz, a) * std::pow(cy, b) * std::pow(cx, c);
        float& v = vol.at(z, y, x);
        v = static_cast<float>(double(v) * std::exp(p));
        mx = std::max(mx, v);
      }
  if (mx > 1.0f)
    for (auto& v : vol.voxels) v /= mx;
}

// ---------------------------------------------------------------------------
// Plans

struct Rotation { std::array<double, 3> degrees{}; };
struct Scaling { double factor = 1.0; };
struct Translation { std::array<double, 3> mm{}; };
struct Elastic { DisplacementField field = DisplacementField::zero(); };
struct Flip { bool height_axis = false; bool width_axis = false; };
struct Blur { double sigma = 1.0; };
struct Noise { double sigma = 0.15; std::uint64_t seed = 0; };
struct Gamma { double log_gamma = 0.0; };
struct BiasField { int order = 3; std::vector<double> coefficients; };

using Transform = std::variant<Rotation, Scaling, Translation, Elastic, Flip, Blur, Noise, Gamma, BiasField>;

inline bool is_spatial(const Transform& t) { return t.index() <= 4; }

inline const char* transform_name(const Transform& t) {
  static const char* names[] = {"rotation", "scaling", "translation", "elastic", "flip",
                                "blur", "noise", "gamma", "bias_field"};
  return names[t.index()];
}

struct TransformPlan {
  std::uint64_t rng_seed = 0;
  std::vector<Transform> transforms;
};

inline TransformPlan sample_plan(const AugmentationPolicy& policy, std::uint64_t seed) {
  policy.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  auto take = [&](double p) { return u01(rng) < p; };
  TransformPlan plan;
  plan.rng_seed = seed;

  if (take(policy.p_rotation)) {
    const double m = policy.max_rotation_deg;
    plan.transforms.emplace_back(Rotation{{uni(-m, m), uni(-m, m), uni(-m, m)}});
  }
  if (take(policy.p_scaling)) plan.transforms.emplace_back(Scaling{uni(policy.scale_min, policy.scale_max)});
  if (take(policy.p_translation)) {
    std::normal_distribution<double> nd;
    std::array<double, 3> dir{nd(rng), nd(rng), nd(rng)};
    const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    const double mag = uni(0.0, policy.max_translation_mm);
    for (auto& c : dir) c = len > 0 ? c / len * mag : 0.0;
    plan.transforms.emplace_back(Translation{dir});
  }
  if (take(policy.p_elastic)) {
    const std::size_t n = policy.elastic_control_points;
    const double m = policy.elastic_max_mm;
    Elastic e{DisplacementField::zero(n)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) {
          std::array<double, 3> v{uni(-m, m), uni(-m, m), uni(-m, m)};
          const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
          // Outermost shell of control points is pinned to zero (edge taper).
          const std::size_t edge = std::min({i, j, k, n - 1 - i, n - 1 - j, n - 1 - k});
          const double taper = std::min(1.0, double(edge));
          const double shrink = len > m ? m / len : 1.0;
          for (std::size_t c = 0; c < 3; ++c) e.field.c(i, j, k, c) = v[c] * shrink * taper;
        }
    plan.transforms.emplace_back(std::move(e));
  }
  if (take(policy.p_flip)) {
    Flip f;
    f.height_axis = take(policy.flip_axis_probability);
    f.width_axis = take(policy.flip_axis_probability);
    plan.transforms.emplace_back(f);
  }
  if (take(policy.p_blur)) plan.transforms.emplace_back(Blur{uni(policy.blur_sigma_min, policy.blur_sigma_max)});
  if (take(policy.p_noise)) plan.transforms.emplace_back(Noise{policy.noise_sigma, rng()});
  if (take(policy.p_gamma)) plan.transforms.emplace_back(Gamma{uni(policy.log_gamma_min, policy.log_gamma_max)});
  if (take(policy.p_bias_field)) {
    BiasField b{policy.bias_order, std::vector<double>(bias_terms(policy.bias_order))};
    for (auto& c : b.coefficients) c = uni(-policy.bias_coefficient, policy.bias_coefficient);
    plan.transforms.emplace_back(std::move(b));
  }
  return plan;
}

/// Applies only the intensity transforms of `plan` (image only).
inline void intensity_transforms(ModelVolume& vol, const TransformPlan& plan) {
  for (const auto& t : plan.transforms) {
    std::visit(
        [&](const auto& x) {
          using X = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<X, Blur>) gaussian_blur(vol, x.sigma);
          else if constexpr (std::is_same_v<X, Noise>) add_noise(vol, x.sigma, x.seed);
          else if constexpr (std::is_same_v<X, Gamma>) gamma_correct(vol, x.log_gamma);
          else if constexpr (std::is_same_v<X, BiasField>) bias_field(vol, x.order, x.coefficients);
        },
        t);
  }
}

/// Spatial group (affines fused into one resampling pass, then elastic, then
/// flip) followed by intensity transforms. Shapes never change.
inline void apply(const TransformPlan& plan, ModelVolume& vol, Mask* mask = nullptr) {
  check_mask(vol, mask);
  std::array<double, 3> rot{0, 0, 0}, shift{0, 0, 0};
  double scale = 1.0;
  const Elastic* elastic = nullptr;
  const Flip* fl = nullptr;
  for (const auto& t : plan.transforms) {
    if (auto* r = std::get_if<Rotation>(&t)) rot = r->degrees;
    if (auto* s = std::get_if<Scaling>(&t)) scale = s->factor;
    if (auto* tr = std::get_if<Translation>(&t)) shift = tr->mm;
    if (auto* e = std::get_if<Elastic>(&t)) elastic = e;
    if (auto* f = std::get_if<Flip>(&t)) fl = f;
  }
  affine_transform(vol, mask, rot, scale, shift);
  if (elastic) elastic_deform(vol, elastic->field, mask);
  if (fl) flip(vol, mask, fl->height_axis, fl->width_axis);
  intensity_transforms(vol, plan);
}

// ---------------------------------------------------------------------------
// Plan text format: one transform per line, `name v1 v2 ...`

inline std::string serialize(const TransformPlan& plan) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "seed " << plan.rng_seed << "\n";
  for (const auto& t : plan.transforms) {
    os << transform_name(t);
    std::visit(
        [&](const auto& x) {
          using X = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<X, Rotation>) os << " " << x.degrees[0] << " " << x.degrees[1] << " " << x.degrees[2];
          else if constexpr (std::is_same_v<X, Scaling>) os << " " << x.factor;
          else if constexpr (std::is_same_v<X, Translation>) os << " " << x.mm[0] << " " << x.mm[1] << " " << x.mm[2];
          else if constexpr (std::is_same_v<X, Elastic>) {
            os << " " << x.field.n;
            for (double c : x.field.coeffs) os << " " << c;
          } else if constexpr (std::is_same_v<X, Flip>) os << " " << x.height_axis << " " << x.width_axis;
          else if constexpr (std::is_same_v<X, Blur>) os << " " << x.sigma;
          else if constexpr (std::is_same_v<X, Noise>) os << " " << x.sigma << " " << x.seed;
          else if constexpr (std::is_same_v<X, Gamma>) os << " " << x.log_gamma;
          else if constexpr (std::is_same_v<X, BiasField>) {
            os << " " << x.order;
            for (double c : x.coefficients) os << " " << c;
          }
        },
        t);
    os << "\n";
  }
  return os.str();
}

inline TransformPlan parse_plan(const std::string& text) {
  TransformPlan plan;
  std::istringstream is(text);
  std::string line;
  auto bad = [](const std::string& l) { fail(Errc::format, "malformed plan line: " + l.substr(0, 60)); };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    if (name == "seed") {
      ls >> plan.rng_seed;
    } else if (name == "rotation") {
      Rotation r;
      ls >> r.degrees[0] >> r.degrees[1] >> r.degrees[2];
      plan.transforms.emplace_back(r);
    } else if (name == "scaling") {
      Scaling s;
      ls >> s.factor;
      plan.transforms.emplace_back(s);
    } else if (name == "translation") {
      Translation t;
      ls >> t.mm[0] >> t.mm[1] >> t.mm[2];
      plan.transforms.emplace_back(t);
    } else if (name == "elastic") {
      Elastic e;
      ls >> e.field.n;
      if (!ls || e.field.n < 4 || e.field.n > 64) bad(line);
      e.field.coeffs.resize(e.field.n * e.field.n * e.field.n * 3);
      for (auto& c : e.field.coeffs) ls >> c;
      plan.transforms.emplace_back(std::move(e));
    } else if (name == "flip") {
      Flip f;
      ls >> f.height_axis >> f.width_axis;
      plan.transforms.emplace_back(f);
    } else if (name == "blur") {
      Blur b;
      ls >> b.sigma;
      plan.transforms.emplace_back(b);
    } else if (name == "noise") {
      Noise n;
      ls >> n.sigma >> n.seed;
      plan.transforms.emplace_back(n);
    } else if (name == "gamma") {
      Gamma g;
      ls >> g.log_gamma;
      plan.transforms.emplace_back(g);
    } else if (name == "bias_field") {
      BiasField b;
      ls >> b.order;
      if (!ls || b.order < 0 || b.order > 8) bad(line);
      b.coefficients.resize(bias_terms(b.order));
      for (auto& c : b.coefficients) ls >> c;
      plan.transforms.emplace_back(std::move(b));
    } else {
      bad(line);
    }
    if (ls.fail()) bad(line);
  }
  return plan;
}

}  // namespace ctlora::augment
