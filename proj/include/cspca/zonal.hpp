// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <string>

#include "cspca/nets.hpp"
#include "cspca/volume.hpp"

namespace cspca {

enum class ZonalMode { probabilistic, deterministic };

inline constexpr int kBackground = 0;
inline constexpr int kTransitionZone = 1;
inline constexpr int kPeripheralZone = 2;

/// Per-voxel TZ and PZ channels on the source grid; background is 1 - TZ - PZ.
struct ZonalMap {
  ZonalMode mode = ZonalMode::probabilistic;
  Volume3 tz;
  Volume3 pz;
};

/// Probabilistic TZ/PZ maps from the 3D network. The volume is zero-padded up to the pooling
/// period in-plane and cropped back afterwards.
template <class T>
ZonalMap predict_zones(const Network<T>& net, const Volume3& t2w) {
  const auto& d = t2w.dims();
  const auto period = net.pooling_period();
  auto round_up = [](std::size_t n, std::size_t p) { return (n + p - 1) / p * p; };
  const Extent padded{round_up(d.nx, period.x), round_up(d.ny, period.y), round_up(d.nz, period.z)};
  std::vector<T> in(padded.size(), T(0));
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) in[(z * padded.ny + y) * padded.nx + x] = t2w.at(x, y, z);

  ad::NoGradGuard no_grad;
  const auto p = net.forward(Tensor<T>({1, padded.nz, padded.ny, padded.nx}, std::move(in)));
  const auto v = p.values();
  ZonalMap out{ZonalMode::probabilistic, Volume3(d, t2w.spacing()), Volume3(d, t2w.spacing())};
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const std::size_t i = (z * padded.ny + y) * padded.nx + x;
        out.tz.at(x, y, z) = static_cast<float>(v[kTransitionZone * padded.size() + i]);
        out.pz.at(x, y, z) = static_cast<float>(v[kPeripheralZone * padded.size() + i]);
      }
  return out;
}

/// Probabilities closer than this count as tied (1 - 1/3 - 1/3 is not 1/3 in floating point).
inline constexpr double kZoneTieTolerance = 1e-6;

/// Argmax over {background, TZ, PZ}; ties go to the lower class index.
inline int zone_argmax(float tz, float pz) {
  const double bg = 1.0 - static_cast<double>(tz) - static_cast<double>(pz);
  int best = kBackground;
  double best_v = bg;
  if (tz > best_v + kZoneTieTolerance) {
    best = kTransitionZone;
    best_v = tz;
  }
  if (pz > best_v + kZoneTieTolerance) best = kPeripheralZone;
  return best;
}

inline ZonalMap to_deterministic(const ZonalMap& zm) {
  ZonalMap out{ZonalMode::deterministic, Volume3(zm.tz.dims(), zm.tz.spacing()), Volume3(zm.pz.dims(), zm.pz.spacing())};
  for (std::size_t i = 0; i < zm.tz.size(); ++i) {
    const int c = zone_argmax(zm.tz[i], zm.pz[i]);
    out.tz[i] = c == kTransitionZone ? 1.0f : 0.0f;
    out.pz[i] = c == kPeripheralZone ? 1.0f : 0.0f;
  }
  return out;
}

/// Label volume {0,1,2} from the map's argmax.
inline Volume3 zone_labels(const ZonalMap& zm) {
  Volume3 out(zm.tz.dims(), zm.tz.spacing());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(zone_argmax(zm.tz[i], zm.pz[i]));
  return out;
}

/// One-hot map lifted from a label volume.
inline ZonalMap zonal_from_labels(const Volume3& labels) {
  ZonalMap out{ZonalMode::deterministic, Volume3(labels.dims(), labels.spacing()), Volume3(labels.dims(), labels.spacing())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.tz[i] = labels[i] == kTransitionZone ? 1.0f : 0.0f;
    out.pz[i] = labels[i] == kPeripheralZone ? 1.0f : 0.0f;
  }
  return out;
}

/// Binary mask of voxels equal to `label`.
inline Volume3 mask_of(const Volume3& labels, float label) {
  Volume3 out(labels.dims(), labels.spacing());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == label ? 1.0f : 0.0f;
  return out;
}

/// Dice overlap of two binary masks; 1.0 when both are empty.
inline double dice(const Volume3& pred, const Volume3& gt) {
  if (pred.dims() != gt.dims()) throw ShapeError("dims", "dice needs masks on the same grid");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.0f, g = gt[i] != 0.0f;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

inline void write_zonal(const ZonalMap& zm, const std::filesystem::path& dir, const std::string& id) {
  std::filesystem::create_directories(dir);
  write_volume(zm.tz, dir / (id + ".tz"));
  write_volume(zm.pz, dir / (id + ".pz"));
}

inline ZonalMap read_zonal(const std::filesystem::path& dir, const std::string& id,
                           ZonalMode mode = ZonalMode::probabilistic) {
  ZonalMap zm{mode, read_volume(dir / (id + ".tz")), read_volume(dir / (id + ".pz"))};
  if (!zm.tz.same_grid(zm.pz)) throw ShapeError("zonal", "TZ and PZ maps of " + id + " disagree on grid");
  return zm;
}

}  // namespace cspca
