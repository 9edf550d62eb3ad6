// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cspca/volume.hpp"

namespace cspca {

/// Combines per-slice 2D maps (nz == 1 each) into one volume, slice i at z = i.
inline Volume3 stack_heatmaps(std::span<const Volume3> slices, const Spacing& spacing) {
  if (slices.empty()) throw ShapeError("slices", "no heatmap slices to stack");
  const Dims d0 = slices.front().dims();
  Volume3 out(Dims{d0.nx, d0.ny, slices.size()}, spacing);
  const std::size_t plane = d0.nx * d0.ny;
  for (std::size_t z = 0; z < slices.size(); ++z) {
    const auto& s = slices[z];
    if (s.dims().nz != 1 || s.dims().nx != d0.nx || s.dims().ny != d0.ny)
      throw ShapeError("slices", "slice " + std::to_string(z) + " does not match the first slice's dimensions");
    std::ranges::copy(s.voxels(), out.voxels().begin() + static_cast<std::ptrdiff_t>(z * plane));
  }
  return out;
}

enum class Connectivity : int { face = 6, edge = 18, vertex = 26 };

inline Connectivity connectivity_from_int(int c) {
  if (c == 6 || c == 18 || c == 26) return static_cast<Connectivity>(c);
  throw ConfigError("connectivity must be 6, 18 or 26");
}

/// Neighbour offsets (dx, dy, dz) for a connectivity.
inline std::vector<std::array<int, 3>> neighbour_offsets(Connectivity c) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (n == 0) continue;
        if (c == Connectivity::face && n > 1) continue;
        if (c == Connectivity::edge && n > 2) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

struct ComponentLabels {
  Dims dims;
  std::vector<std::int32_t> labels;  ///< 0 background, 1..count
  std::int32_t count = 0;
};

/// Labels each maximal connected region of ones. Labels follow the order of each
/// component's smallest linear index.
inline ComponentLabels connected_components(const Volume3& binary, Connectivity conn = Connectivity::vertex) {
  const auto d = binary.dims();
  for (float v : binary.voxels())
    if (v != 0.0f && v != 1.0f) throw ShapeError("binary", "connected_components needs a 0/1 volume");
  ComponentLabels out{d, std::vector<std::int32_t>(d.size(), 0), 0};
  const auto offsets = neighbour_offsets(conn);
  std::vector<std::size_t> stack;
  const auto nx = static_cast<std::int64_t>(d.nx), ny = static_cast<std::int64_t>(d.ny),
             nz = static_cast<std::int64_t>(d.nz);
  for (std::size_t seed = 0; seed < d.size(); ++seed) {
    if (binary[seed] == 0.0f || out.labels[seed] != 0) continue;
    const std::int32_t label = ++out.count;
    out.labels[seed] = label;
    stack.assign(1, seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const auto x = static_cast<std::int64_t>(i % d.nx);
      const auto y = static_cast<std::int64_t>((i / d.nx) % d.ny);
      const auto z = static_cast<std::int64_t>(i / (d.nx * d.ny));
      for (const auto& o : offsets) {
        const std::int64_t qx = x + o[0], qy = y + o[1], qz = z + o[2];
        if (qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny || qz >= nz) continue;
        const auto j = static_cast<std::size_t>(qx + nx * (qy + ny * qz));
        if (binary[j] != 0.0f && out.labels[j] == 0) {
          out.labels[j] = label;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

struct DetectorParams {
  double t_low = 0.15;
  double t_high = 0.35;
  std::size_t min_voxels = 4;
  Connectivity connectivity = Connectivity::vertex;

  void validate() const {
    if (!(0.0 <= t_low && t_low <= t_high && t_high <= 1.0))
      throw ConfigError("detector thresholds must satisfy 0 <= t_low <= t_high <= 1");
    if (min_voxels < 1) throw ConfigError("min_voxels must be at least 1");
  }
};

struct CandidateLesion {
  std::vector<std::size_t> voxels;  ///< ascending linear indices
  double score = 0.0;               ///< heatmap maximum over the voxels
  std::size_t peak_index = 0;       ///< first voxel attaining the maximum
  double volume_mm3 = 0.0;
};

/// Hysteresis candidates: components of {v >= t_low} reaching t_high somewhere, with at least
/// min_voxels voxels. Sorted by descending score, then ascending peak index.
inline std::vector<CandidateLesion> two_threshold_detect(const Volume3& heatmap, const DetectorParams& p) {
  p.validate();
  Volume3 low(heatmap.dims(), heatmap.spacing());
  for (std::size_t i = 0; i < heatmap.size(); ++i) low[i] = heatmap[i] >= p.t_low ? 1.0f : 0.0f;
  const auto cc = connected_components(low, p.connectivity);
  std::vector<CandidateLesion> cands(static_cast<std::size_t>(cc.count));
  for (std::size_t i = 0; i < cc.labels.size(); ++i) {
    if (cc.labels[i] == 0) continue;
    auto& c = cands[static_cast<std::size_t>(cc.labels[i] - 1)];
    if (c.voxels.empty() || heatmap[i] > c.score) {
      c.score = heatmap[i];
      c.peak_index = i;
    }
    c.voxels.push_back(i);
  }
  const double vv = heatmap.spacing().voxel_volume();
  std::vector<CandidateLesion> out;
  for (auto& c : cands) {
    if (c.score < p.t_high || c.voxels.size() < p.min_voxels) continue;
    c.volume_mm3 = static_cast<double>(c.voxels.size()) * vv;
    out.push_back(std::move(c));
  }
  std::ranges::sort(out, [](const CandidateLesion& a, const CandidateLesion& b) {
    return a.score != b.score ? a.score > b.score : a.peak_index < b.peak_index;
  });
  return out;
}

/// Rows of the per-patient candidate CSV.
inline std::string candidates_csv(const std::string& patient_id, std::span<const CandidateLesion> cands, const Dims& d,
                                  bool header = true) {
  std::string out = header ? "patient_id,candidate_rank,score,peak_x,peak_y,peak_z,voxel_count,volume_mm3\n" : "";
  for (std::size_t r = 0; r < cands.size(); ++r) {
    const auto& c = cands[r];
    const std::size_t x = c.peak_index % d.nx, y = (c.peak_index / d.nx) % d.ny, z = c.peak_index / (d.nx * d.ny);
    out += fmt::format("{},{},{:.9g},{},{},{},{},{:.6f}\n", patient_id, r + 1, c.score, x, y, z, c.voxels.size(),
                       c.volume_mm3);
  }
  return out;
}

}  // namespace cspca
