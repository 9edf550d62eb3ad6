// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic bpMRI-like prostate cases. Geometry is an ellipsoidal gland with an anterior
// transition zone (TZ) and the remaining peripheral shell (PZ). Lesion appearance depends
// on the zone: PZ lesions are dominated by diffusion contrast (ADC dark, DWI bright), TZ
// lesions by T2W darkening. Benign T2W-dark foci in the PZ mimic TZ-style lesions, so
// reading T2W darkening correctly requires knowing the zone.

#include <algorithm>
#include <array>
#include <functional>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cspca/rng.hpp"
#include "cspca/volume.hpp"
#include "cspca/zonal.hpp"

namespace cspca {

/// Additive lesion contrast per zone (rows: TZ, PZ) and channel (T2W, ADC, DWI).
struct ContrastTable {
  std::array<double, 3> tz{-0.4, -0.1, 0.1};
  std::array<double, 3> pz{-0.1, -0.4, 0.4};

  const std::array<double, 3>& operator[](int zone) const { return zone == kTransitionZone ? tz : pz; }
};

/// Healthy tissue intensity per region (rows: background, TZ, PZ) and channel.
struct BaseIntensities {
  std::array<double, 3> background{0.30, 0.35, 0.15};
  std::array<double, 3> tz{0.42, 0.55, 0.30};
  std::array<double, 3> pz{0.68, 0.65, 0.25};

  const std::array<double, 3>& operator[](int zone) const {
    return zone == kTransitionZone ? tz : zone == kPeripheralZone ? pz : background;
  }
};

struct PhantomConfig {
  std::size_t n_cases = 120;
  Dims dims{96, 96, 12};
  Spacing spacing{0.5, 0.5, 3.6};
  double prob_case_positive = 0.376;  // 319 / 848
  double pz_lesion_prob = 0.725;      // midpoint of 70-75 %
  int min_lesions = 1;
  int max_lesions = 3;
  double lesion_radius_min_mm = 2.0;
  double lesion_radius_max_mm = 6.0;
  double min_gap_mm = 3.0;  ///< healthy margin kept between lesions and mimics
  ContrastTable contrast;
  BaseIntensities base;
  double noise_sigma = 0.05;
  double smooth_field_amplitude = 0.03;
  int max_pz_mimics = 2;  ///< benign T2W-dark PZ foci per case, uniform in [0, max]
  double mimic_radius_min_mm = 2.0;
  double mimic_radius_max_mm = 4.0;
  double mimic_t2w_contrast = -0.3;
  std::uint64_t seed = 2019;
  std::string id_prefix = "case";

  void validate() const {
    for (double p : {prob_case_positive, pz_lesion_prob})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("phantom probabilities must lie in [0, 1]");
    if (dims.size() == 0) throw ConfigError("phantom dims must be positive");
    for (double s : {spacing.sx, spacing.sy, spacing.sz})
      if (!(s > 0.0)) throw ConfigError("phantom spacing must be positive");
    if (!(lesion_radius_min_mm > 0.0 && lesion_radius_min_mm <= lesion_radius_max_mm))
      throw ConfigError("lesion radius range must be positive and ordered");
    if (min_lesions < 1 || min_lesions > max_lesions) throw ConfigError("lesion count range is invalid");
    if (!(min_gap_mm >= 0.0)) throw ConfigError("min_gap_mm must be nonnegative");
    for (const auto* row : {&contrast.tz, &contrast.pz})
      for (double c : *row)
        if (std::abs(c) > 1.0) throw ConfigError("contrast magnitudes must not exceed 1");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be nonnegative");
  }
};

struct LesionInfo {
  int label = 0;
  int zone = kPeripheralZone;
  double radius_mm = 0.0;
  std::size_t voxel_count = 0;
  std::array<std::size_t, 3> center{};
};

struct PhantomCase {
  PatientCase patient;
  std::vector<LesionInfo> lesions;
  std::size_t mimics = 0;
  std::size_t regenerations = 0;
};

namespace detail {

struct PlacementFailed {};

struct Ellipsoid {
  std::array<double, 3> center{}, semi{};
  bool contains(const std::array<double, 3>& p) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / semi[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

class PhantomBuilder {
 public:
  PhantomBuilder(const PhantomConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng), d_(cfg.dims), s_(cfg.spacing) {}

  PhantomCase build(const std::string& id) {
    PhantomCase out;
    zones_ = Volume3(d_, s_);
    lesions_ = Volume3(d_, s_);
    blocked_.assign(d_.size(), 0);
    build_zones();

    const bool positive = rng_.bernoulli(cfg_.prob_case_positive);
    std::vector<std::vector<std::size_t>> lesion_voxels;
    if (positive) {
      const auto k = rng_.integer(cfg_.min_lesions, cfg_.max_lesions);
      for (int l = 1; l <= k; ++l) {
        const int zone = rng_.bernoulli(cfg_.pz_lesion_prob) ? kPeripheralZone : kTransitionZone;
        LesionInfo info;
        info.label = l;
        info.zone = zone;
        auto voxels = place(zone, cfg_.lesion_radius_min_mm, cfg_.lesion_radius_max_mm, info);
        for (auto i : voxels) lesions_[i] = static_cast<float>(l);
        block_around(voxels);
        info.voxel_count = voxels.size();
        out.lesions.push_back(info);
        lesion_voxels.push_back(std::move(voxels));
      }
    }
    std::vector<std::vector<std::size_t>> mimic_voxels;
    const auto n_mimics = cfg_.max_pz_mimics > 0 ? rng_.integer(0, cfg_.max_pz_mimics) : 0;
    for (int m = 0; m < n_mimics; ++m) {
      LesionInfo info;
      try {
        auto voxels = place(kPeripheralZone, cfg_.mimic_radius_min_mm, cfg_.mimic_radius_max_mm, info);
        block_around(voxels);
        mimic_voxels.push_back(std::move(voxels));
      } catch (const PlacementFailed&) {
        // Mimics are optional decoration; a crowded gland simply gets fewer.
      }
    }
    out.mimics = mimic_voxels.size();

    auto& p = out.patient;
    p.id = id;
    p.has_cspca = positive;
    for (std::size_t c = 0; c < 3; ++c) p.channels[c] = render_channel(c, out.lesions, lesion_voxels, mimic_voxels);
    p.lesion_mask = lesions_;
    p.zonal_gt = zones_;
    return out;
  }

 private:
  std::array<double, 3> position(std::size_t x, std::size_t y, std::size_t z) const {
    return {(x + 0.5) * s_.sx - 0.5 * d_.nx * s_.sx, (y + 0.5) * s_.sy - 0.5 * d_.ny * s_.sy,
            (z + 0.5) * s_.sz - 0.5 * d_.nz * s_.sz};
  }

  void build_zones() {
    const double ex = d_.nx * s_.sx, ey = d_.ny * s_.sy, ez = d_.nz * s_.sz;
    auto jitter = [&] { return rng_.uniform(0.92, 1.08); };
    const Ellipsoid gland{{0.0, 0.0, 0.0}, {0.27 * ex * jitter(), 0.22 * ey * jitter(), 0.30 * ez * jitter()}};
    // y < 0 is anterior.
    const Ellipsoid tz{{0.0, -0.25 * gland.semi[1], 0.0},
                       {0.75 * gland.semi[0], 0.68 * gland.semi[1], 0.85 * gland.semi[2]}};
    for (std::size_t z = 0; z < d_.nz; ++z)
      for (std::size_t y = 0; y < d_.ny; ++y)
        for (std::size_t x = 0; x < d_.nx; ++x) {
          const auto p = position(x, y, z);
          if (!gland.contains(p)) continue;
          const std::size_t i = zones_.index(x, y, z);
          zones_[i] = static_cast<float>(tz.contains(p) ? kTransitionZone : kPeripheralZone);
          zone_voxels_[zones_[i] == kTransitionZone ? 0 : 1].push_back(i);
        }
    for (int z = 0; z < 2; ++z) {
      const auto d2 = clearance_map(z == 0 ? kTransitionZone : kPeripheralZone);
      auto& vox = zone_voxels_[z];
      std::ranges::stable_sort(vox, std::greater<>{}, [&](std::size_t i) { return d2[i]; });
      clearance2_[z].clear();
      for (auto i : vox) clearance2_[z].push_back(d2[i]);
    }
  }

  /// Squared distance in mm from each voxel to the nearest voxel outside `zone`, the volume
  /// border counting as outside. Separable exact transform (lower envelope of parabolas).
  std::vector<double> clearance_map(int zone) const {
    const std::size_t px = d_.nx + 2, py = d_.ny + 2, pz = d_.nz + 2;
    constexpr double inf = 1e30;
    std::vector<double> g(px * py * pz, 0.0);
    for (std::size_t z = 0; z < d_.nz; ++z)
      for (std::size_t y = 0; y < d_.ny; ++y)
        for (std::size_t x = 0; x < d_.nx; ++x)
          if (zones_.at(x, y, z) == static_cast<float>(zone)) g[(x + 1) + px * ((y + 1) + py * (z + 1))] = inf;
    std::vector<double> f, out;
    std::vector<std::size_t> v;
    std::vector<double> zb;
    auto pass = [&](std::size_t n, std::size_t stride, std::size_t start, double h) {
      f.resize(n);
      out.resize(n);
      v.assign(n, 0);
      zb.assign(n + 1, 0.0);
      for (std::size_t i = 0; i < n; ++i) f[i] = g[start + i * stride];
      auto meet = [&](std::size_t q, std::size_t p) {
        const double a = h * static_cast<double>(q), b = h * static_cast<double>(p);
        return ((f[q] + a * a) - (f[p] + b * b)) / (2.0 * (a - b));
      };
      std::size_t k = 0;
      zb[0] = -inf;
      zb[1] = inf;
      for (std::size_t q = 1; q < n; ++q) {
        if (f[q] >= inf) continue;
        if (f[v[k]] >= inf) {
          v[k] = q;
          continue;
        }
        double s = meet(q, v[k]);
        while (k > 0 && s <= zb[k]) s = meet(q, v[--k]);
        v[++k] = q;
        zb[k] = s;
        zb[k + 1] = inf;
      }
      k = 0;
      for (std::size_t q = 0; q < n; ++q) {
        while (zb[k + 1] < h * static_cast<double>(q)) ++k;
        const double dq = h * (static_cast<double>(q) - static_cast<double>(v[k]));
        out[q] = f[v[k]] >= inf ? inf : dq * dq + f[v[k]];
      }
      for (std::size_t i = 0; i < n; ++i) g[start + i * stride] = out[i];
    };
    for (std::size_t z = 0; z < pz; ++z)
      for (std::size_t y = 0; y < py; ++y) pass(px, 1, px * (y + py * z), s_.sx);
    for (std::size_t z = 0; z < pz; ++z)
      for (std::size_t x = 0; x < px; ++x) pass(py, px, x + px * py * z, s_.sy);
    for (std::size_t y = 0; y < py; ++y)
      for (std::size_t x = 0; x < px; ++x) pass(pz, px * py, x + px * y, s_.sz);
    std::vector<double> d2(d_.size());
    for (std::size_t z = 0; z < d_.nz; ++z)
      for (std::size_t y = 0; y < d_.ny; ++y)
        for (std::size_t x = 0; x < d_.nx; ++x) d2[zones_.index(x, y, z)] = g[(x + 1) + px * ((y + 1) + py * (z + 1))];
    return d2;
  }

  /// Ball of `radius_mm` around voxel `c`, or empty when it leaves `zone` or touches a blocked voxel.
  std::vector<std::size_t> ball_in_zone(std::size_t c, double radius_mm, int zone) const {
    const auto cx = static_cast<std::int64_t>(c % d_.nx), cy = static_cast<std::int64_t>((c / d_.nx) % d_.ny),
               cz = static_cast<std::int64_t>(c / (d_.nx * d_.ny));
    const auto rx = static_cast<std::int64_t>(std::floor(radius_mm / s_.sx)),
               ry = static_cast<std::int64_t>(std::floor(radius_mm / s_.sy)),
               rz = static_cast<std::int64_t>(std::floor(radius_mm / s_.sz));
    std::vector<std::size_t> out;
    for (std::int64_t dz = -rz; dz <= rz; ++dz)
      for (std::int64_t dy = -ry; dy <= ry; ++dy)
        for (std::int64_t dx = -rx; dx <= rx; ++dx) {
          const double r2 = std::pow(dx * s_.sx, 2) + std::pow(dy * s_.sy, 2) + std::pow(dz * s_.sz, 2);
          if (r2 > radius_mm * radius_mm) continue;
          const std::int64_t x = cx + dx, y = cy + dy, z = cz + dz;
          if (x < 0 || y < 0 || z < 0 || x >= static_cast<std::int64_t>(d_.nx) ||
              y >= static_cast<std::int64_t>(d_.ny) || z >= static_cast<std::int64_t>(d_.nz))
            return {};
          const std::size_t i = zones_.index(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                                             static_cast<std::size_t>(z));
          if (zones_[i] != static_cast<float>(zone) || blocked_[i]) return {};
          out.push_back(i);
        }
    std::ranges::sort(out);
    return out;
  }

  /// Centre drawn among voxels whose clearance exceeds the drawn radius, so only earlier
  /// lesions can make an attempt fail.
  std::vector<std::size_t> place(int zone, double rmin, double rmax, LesionInfo& info) {
    const auto z = zone == kTransitionZone ? 0 : 1;
    const auto& candidates = zone_voxels_[z];
    const auto& room = clearance2_[z];
    if (candidates.empty()) throw PlacementFailed{};
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double r = rng_.uniform(rmin, rmax);
      const auto fits = static_cast<std::size_t>(
          std::ranges::partition_point(room, [&](double d2) { return d2 > r * r; }) - room.begin());
      if (fits == 0) continue;
      const std::size_t c = candidates[rng_.index(fits)];
      auto voxels = ball_in_zone(c, r, zone);
      if (voxels.empty()) continue;
      info.radius_mm = r;
      info.center = {c % d_.nx, (c / d_.nx) % d_.ny, c / (d_.nx * d_.ny)};
      return voxels;
    }
    throw PlacementFailed{};
  }

  /// Marks the voxels, their 26-neighbourhood and everything within min_gap_mm as
  /// unavailable for later placements.
  void block_around(const std::vector<std::size_t>& voxels) {
    const double gap = cfg_.min_gap_mm;
    const auto reach = [&](double s) { return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(gap / s))); };
    const std::int64_t rx = reach(s_.sx), ry = reach(s_.sy), rz = reach(s_.sz);
    for (auto i : voxels) {
      const auto x = static_cast<std::int64_t>(i % d_.nx), y = static_cast<std::int64_t>((i / d_.nx) % d_.ny),
                 z = static_cast<std::int64_t>(i / (d_.nx * d_.ny));
      for (std::int64_t dz = -rz; dz <= rz; ++dz)
        for (std::int64_t dy = -ry; dy <= ry; ++dy)
          for (std::int64_t dx = -rx; dx <= rx; ++dx) {
            const bool near = std::abs(dx) <= 1 && std::abs(dy) <= 1 && std::abs(dz) <= 1;
            const double r2 = std::pow(dx * s_.sx, 2) + std::pow(dy * s_.sy, 2) + std::pow(dz * s_.sz, 2);
            if (!near && r2 > gap * gap) continue;
            const std::int64_t qx = x + dx, qy = y + dy, qz = z + dz;
            if (qx < 0 || qy < 0 || qz < 0 || qx >= static_cast<std::int64_t>(d_.nx) ||
                qy >= static_cast<std::int64_t>(d_.ny) || qz >= static_cast<std::int64_t>(d_.nz))
              continue;
            blocked_[zones_.index(static_cast<std::size_t>(qx), static_cast<std::size_t>(qy),
                                  static_cast<std::size_t>(qz))] = 1;
          }
    }
  }

  Volume3 render_channel(std::size_t c, const std::vector<LesionInfo>& lesions,
                         const std::vector<std::vector<std::size_t>>& lesion_voxels,
                         const std::vector<std::vector<std::size_t>>& mimic_voxels) {
    // Low-frequency field: a few random plane waves.
    struct Wave {
      double kx, ky, kz, phase, amp;
    };
    std::array<Wave, 3> waves{};
    for (auto& w : waves) {
      const double theta = rng_.uniform(0.0, 2.0 * std::numbers::pi);
      const double k = rng_.uniform(0.05, 0.15);  // cycles per mm
      w = {k * std::cos(theta), k * std::sin(theta), rng_.uniform(-0.02, 0.02), rng_.uniform(0.0, 2.0 * std::numbers::pi),
           cfg_.smooth_field_amplitude * rng_.uniform(0.5, 1.0)};
    }
    std::vector<double> v(d_.size());
    for (std::size_t z = 0; z < d_.nz; ++z)
      for (std::size_t y = 0; y < d_.ny; ++y)
        for (std::size_t x = 0; x < d_.nx; ++x) {
          const auto p = position(x, y, z);
          const std::size_t i = zones_.index(x, y, z);
          double val = cfg_.base[static_cast<int>(zones_[i])][c];
          for (const auto& w : waves)
            val += w.amp * std::cos(2.0 * std::numbers::pi * (w.kx * p[0] + w.ky * p[1] + w.kz * p[2]) + w.phase);
          v[i] = val;
        }
    for (std::size_t l = 0; l < lesions.size(); ++l)
      for (auto i : lesion_voxels[l]) v[i] += cfg_.contrast[lesions[l].zone][c];
    if (c == static_cast<std::size_t>(Channel::t2w))
      for (const auto& m : mimic_voxels)
        for (auto i : m) v[i] += cfg_.mimic_t2w_contrast;
    Volume3 out(d_, s_);
    for (std::size_t i = 0; i < v.size(); ++i)
      out[i] = static_cast<float>(std::clamp(v[i] + cfg_.noise_sigma * rng_.normal(), 0.0, 1.0));
    return out;
  }

  const PhantomConfig& cfg_;
  Rng& rng_;
  Dims d_;
  Spacing s_;
  Volume3 zones_, lesions_;
  std::vector<std::uint8_t> blocked_;
  std::array<std::vector<std::size_t>, 2> zone_voxels_;  ///< by decreasing clearance
  std::array<std::vector<double>, 2> clearance2_;
};

}  // namespace detail

inline std::string case_id(const PhantomConfig& cfg, std::size_t index) {
  return fmt::format("{}_{:04d}", cfg.id_prefix, index);
}

/// Case `index` of the cohort. A case whose lesions cannot be placed is regenerated from
/// the next substream.
inline PhantomCase generate_case(const PhantomConfig& cfg, std::size_t index) {
  cfg.validate();
  for (std::size_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(cfg.seed, {0xca5e, index, attempt}));
    try {
      detail::PhantomBuilder builder(cfg, rng);
      auto c = builder.build(case_id(cfg, index));
      c.regenerations = attempt;
      return c;
    } catch (const detail::PlacementFailed&) {
      if (attempt >= 1000) throw ConfigError("phantom: lesion placement keeps failing; lesion radii too large?");
    }
  }
}

struct Cohort {
  std::vector<PhantomCase> cases;
  nlohmann::ordered_json manifest;
};

inline nlohmann::ordered_json to_json(const PhantomConfig& c) {
  nlohmann::ordered_json j;
  j["n_cases"] = c.n_cases;
  j["dims"] = {c.dims.nx, c.dims.ny, c.dims.nz};
  j["spacing_mm"] = {c.spacing.sx, c.spacing.sy, c.spacing.sz};
  j["prob_case_positive"] = c.prob_case_positive;
  j["pz_lesion_prob"] = c.pz_lesion_prob;
  j["lesions_per_positive"] = {c.min_lesions, c.max_lesions};
  j["lesion_radius_mm"] = {c.lesion_radius_min_mm, c.lesion_radius_max_mm};
  j["min_gap_mm"] = c.min_gap_mm;
  j["contrast"] = {{"tz", c.contrast.tz}, {"pz", c.contrast.pz}};
  j["base"] = {{"background", c.base.background}, {"tz", c.base.tz}, {"pz", c.base.pz}};
  j["noise_sigma"] = c.noise_sigma;
  j["smooth_field_amplitude"] = c.smooth_field_amplitude;
  j["max_pz_mimics"] = c.max_pz_mimics;
  j["mimic_radius_mm"] = {c.mimic_radius_min_mm, c.mimic_radius_max_mm};
  j["mimic_t2w_contrast"] = c.mimic_t2w_contrast;
  j["seed"] = c.seed;
  j["id_prefix"] = c.id_prefix;
  return j;
}

inline Cohort generate_cohort(const PhantomConfig& cfg) {
  cfg.validate();
  if (cfg.n_cases < 1) throw ConfigError("phantom: n_cases must be at least 1");
  Cohort cohort;
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    auto c = generate_case(cfg, i);
    nlohmann::ordered_json e;
    e["id"] = c.patient.id;
    e["has_cspca"] = c.patient.has_cspca;
    nlohmann::ordered_json lesions = nlohmann::ordered_json::array();
    for (const auto& l : c.lesions)
      lesions.push_back({{"label", l.label},
                         {"zone", l.zone == kTransitionZone ? "TZ" : "PZ"},
                         {"radius_mm", l.radius_mm},
                         {"voxels", l.voxel_count},
                         {"center", l.center}});
    e["lesions"] = lesions;
    e["pz_mimics"] = c.mimics;
    e["regenerations"] = c.regenerations;
    summary.push_back(e);
    cohort.cases.push_back(std::move(c));
  }
  cohort.manifest["config"] = to_json(cfg);
  cohort.manifest["seed"] = cfg.seed;
  cohort.manifest["cases"] = summary;
  return cohort;
}

inline std::vector<PatientCase> patients_of(const Cohort& c) {
  std::vector<PatientCase> out;
  for (const auto& p : c.cases) out.push_back(p.patient);
  return out;
}

}  // namespace cspca
