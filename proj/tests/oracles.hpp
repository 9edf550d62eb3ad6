// SPDX-License-Identifier: Apache-2.0
// Brute-force reference implementations used by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cspca/detector.hpp"
#include "cspca/froc.hpp"
#include "cspca/rng.hpp"

namespace cspca::oracle {

inline bool adjacent(std::size_t a, std::size_t b, const Dims& d, int conn) {
  const auto ax = static_cast<long>(a % d.nx), ay = static_cast<long>((a / d.nx) % d.ny),
             az = static_cast<long>(a / (d.nx * d.ny));
  const auto bx = static_cast<long>(b % d.nx), by = static_cast<long>((b / d.nx) % d.ny),
             bz = static_cast<long>(b / (d.nx * d.ny));
  const long dx = std::labs(ax - bx), dy = std::labs(ay - by), dz = std::labs(az - bz);
  if (dx > 1 || dy > 1 || dz > 1) return false;
  const long n = dx + dy + dz;
  if (n == 0) return false;
  return conn == 26 || (conn == 18 && n <= 2) || (conn == 6 && n == 1);
}

/// Components as voxel sets, via BFS with an O(n^2) neighbour scan. Sets ordered by smallest member.
inline std::vector<std::set<std::size_t>> components(const std::vector<bool>& on, const Dims& d, int conn) {
  std::vector<std::set<std::size_t>> out;
  std::vector<bool> seen(on.size(), false);
  // scan from the back so labels come out permuted relative to the implementation
  for (std::size_t s = on.size(); s-- > 0;) {
    if (!on[s] || seen[s]) continue;
    std::set<std::size_t> comp;
    std::deque<std::size_t> q{s};
    seen[s] = true;
    while (!q.empty()) {
      const auto i = q.front();
      q.pop_front();
      comp.insert(i);
      for (std::size_t j = 0; j < on.size(); ++j)
        if (on[j] && !seen[j] && adjacent(i, j, d, conn)) {
          seen[j] = true;
          q.push_back(j);
        }
    }
    out.push_back(std::move(comp));
  }
  std::ranges::sort(out, [](const auto& a, const auto& b) { return *a.begin() < *b.begin(); });
  return out;
}

struct Candidate {
  std::set<std::size_t> voxels;
  double score = 0.0;
  std::size_t peak = 0;
};

/// Threshold at t_low, flood-fill, keep components reaching t_high with enough voxels.
inline std::vector<Candidate> hysteresis(const Volume3& h, double t_low, double t_high, std::size_t min_voxels, int conn) {
  std::vector<bool> on(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) on[i] = h[i] >= t_low;
  std::vector<Candidate> out;
  for (auto& comp : components(on, h.dims(), conn)) {
    Candidate c;
    c.score = -1.0;
    for (auto i : comp)
      if (h[i] > c.score) {
        c.score = h[i];
        c.peak = i;
      }
    if (c.score < t_high || comp.size() < min_voxels) continue;
    c.voxels = std::move(comp);
    out.push_back(std::move(c));
  }
  std::ranges::sort(out, [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.peak < b.peak;
  });
  return out;
}

/// Smooth-ish random heatmap in [0,1]: a few Gaussian bumps plus noise, quantized to create ties.
inline Volume3 random_heatmap(Rng& rng, Dims d = {8, 8, 4}) {
  Volume3 v(d, Spacing{0.5, 0.5, 3.6});
  const int bumps = static_cast<int>(rng.integer(0, 4));
  std::vector<std::array<double, 4>> b;
  for (int k = 0; k < bumps; ++k)
    b.push_back({rng.uniform(0, double(d.nx)), rng.uniform(0, double(d.ny)), rng.uniform(0, double(d.nz)),
                 rng.uniform(0.3, 1.0)});
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        double val = 0.25 * rng.uniform();
        for (const auto& p : b) {
          const double r2 = (x - p[0]) * (x - p[0]) + (y - p[1]) * (y - p[1]) + 4.0 * (z - p[2]) * (z - p[2]);
          val = std::max(val, p[3] * std::exp(-r2 / 4.0));
        }
        v[x + d.nx * (y + d.ny * z)] = static_cast<float>(std::round(std::min(val, 1.0) * 40.0) / 40.0);
      }
  return v;
}

// ---------------------------------------------------------------------------
// FROC

struct SimCandidate {
  std::size_t peak = 0;
  double score = 0.0;
};

struct SimPatient {
  Volume3 gt;  ///< 0 background, 1..K lesions
  std::vector<SimCandidate> cands;
};

/// Up to 6 patients on a 10x1x1 grid with up to 3 lesions and up to 5 candidates each.
inline std::vector<SimPatient> random_froc_instance(Rng& rng) {
  std::vector<SimPatient> pts(static_cast<std::size_t>(rng.integer(1, 6)));
  for (auto& p : pts) {
    p.gt = Volume3(Dims{10, 1, 1}, Spacing{1, 1, 1});
    const int nl = static_cast<int>(rng.integer(0, 3));
    for (int l = 1; l <= nl; ++l) {
      const auto a = static_cast<std::size_t>(rng.integer(0, 9));
      const auto len = static_cast<std::size_t>(rng.integer(1, 3));
      for (std::size_t i = a; i < std::min<std::size_t>(10, a + len); ++i) p.gt[i] = static_cast<float>(l);
    }
    const int nc = static_cast<int>(rng.integer(0, 5));
    for (int c = 0; c < nc; ++c)
      p.cands.push_back({static_cast<std::size_t>(rng.integer(0, 9)), static_cast<double>(rng.integer(1, 8)) / 8.0});
  }
  // at least one lesion overall
  bool any = false;
  for (const auto& p : pts) any = any || count_lesions(p.gt) > 0;
  if (!any) pts.front().gt[0] = 1.0f;
  return pts;
}

/// Exhaustive sweep: for every threshold (each distinct score and minus infinity) count lesions whose best
/// hitting candidate reaches it and background-peaked candidates reaching it. Keeps max sensitivity per FP value.
inline std::vector<std::pair<double, double>> sweep(const std::vector<SimPatient>& pts) {
  std::set<double> taus{-1.0};
  std::size_t n_lesions = 0;
  for (const auto& p : pts) {
    for (const auto& c : p.cands) taus.insert(c.score);
    n_lesions += count_lesions(p.gt);
  }
  std::map<double, double> best;
  for (double tau : taus) {
    std::size_t tp = 0, fp = 0;
    for (const auto& p : pts) {
      std::map<int, double> lesion_best;
      for (const auto& c : p.cands) {
        const int l = static_cast<int>(p.gt[c.peak]);
        if (l == 0) {
          if (c.score >= tau) ++fp;
        } else {
          lesion_best[l] = std::max(lesion_best.count(l) ? lesion_best[l] : -2.0, c.score);
        }
      }
      for (const auto& [l, s] : lesion_best)
        if (s >= tau) ++tp;
    }
    const double f = static_cast<double>(fp) / static_cast<double>(pts.size());
    const double s = static_cast<double>(tp) / static_cast<double>(n_lesions);
    auto [it, inserted] = best.emplace(f, s);
    if (!inserted) it->second = std::max(it->second, s);
  }
  return {best.begin(), best.end()};
}

inline std::vector<CandidateLesion> to_candidates(const SimPatient& p) {
  std::vector<CandidateLesion> out;
  for (const auto& c : p.cands) {
    CandidateLesion l;
    l.voxels = {c.peak};
    l.peak_index = c.peak;
    l.score = c.score;
    out.push_back(l);
  }
  return out;
}

/// The five rows of the reference results table: Sens@0.5, Sens@1, Sens@2, Average.
struct TableRow {
  const char* label;
  double s05, s1, s2, average;
};

inline constexpr TableRow kReferenceTable[] = {
    {"Baseline", 0.760, 0.825, 0.825, 0.803},
    {"Early Fusion - Probabilistic", 0.795, 0.887, 0.887, 0.856},
    {"Late Fusion - Probabilistic", 0.774, 0.873, 0.873, 0.840},
    {"Early Fusion - Deterministic", 0.774, 0.802, 0.802, 0.793},
    {"Late Fusion - Deterministic", 0.774, 0.816, 0.816, 0.802},
};

/// A curve whose read-off at FP rates 0.5, 1 and 2 gives the three sensitivities.
inline FrocCurve curve_through(double s05, double s1, double s2) {
  FrocCurve c;
  c.n_patients = 1;
  c.n_lesions = 1;
  c.points = {{0.5, s05}, {1.0, s1}, {2.0, s2}};
  return c;
}

}  // namespace cspca::oracle
