// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cspca/detector.hpp"
#include "cspca/volume.hpp"

namespace cspca {

struct LesionHit {
  int lesion_label = 0;
  double score = 0.0;
};

/// Per-patient outcome of matching candidates against labelled ground truth.
struct MatchResult {
  std::size_t n_lesions = 0;
  std::vector<LesionHit> detections;    ///< each ground-truth lesion at most once
  std::vector<double> false_positives;  ///< scores of candidates hitting no lesion
  std::size_t redundant = 0;            ///< extra hits on an already credited lesion
};

/// Number of distinct positive labels in a lesion mask.
inline std::size_t count_lesions(const Volume3& gt) {
  std::set<float> labels;
  for (float v : gt.voxels())
    if (v > 0.0f) labels.insert(v);
  return labels.size();
}

/// A candidate hits lesion L iff its peak voxel lies in L. Candidates are visited by descending
/// score; the first to hit a lesion is credited, later hits on it are dropped.
inline MatchResult match_candidates(std::span<const CandidateLesion> cands, const Volume3& gt) {
  MatchResult r;
  r.n_lesions = count_lesions(gt);
  std::vector<const CandidateLesion*> order;
  for (const auto& c : cands) {
    if (c.peak_index >= gt.size()) throw ShapeError("grid", "candidate peak lies outside the ground-truth grid");
    order.push_back(&c);
  }
  std::ranges::stable_sort(order, [](const auto* a, const auto* b) { return a->score > b->score; });
  std::set<int> credited;
  for (const auto* c : order) {
    const float label = gt[c->peak_index];
    if (label <= 0.0f) {
      r.false_positives.push_back(c->score);
      continue;
    }
    const int l = static_cast<int>(label);
    if (credited.insert(l).second)
      r.detections.push_back({l, c->score});
    else
      ++r.redundant;
  }
  return r;
}

struct FrocPoint {
  double fp_per_patient = 0.0;
  double sensitivity = 0.0;
  bool operator==(const FrocPoint&) const = default;
};

struct FrocCurve {
  std::vector<FrocPoint> points;  ///< ascending fp, nondecreasing sensitivity
  std::size_t n_patients = 0;
  std::size_t n_lesions = 0;
};

/// Threshold sweep over the distinct candidate scores (descending) plus the all-candidates extreme.
/// Points sharing an FP rate keep the largest sensitivity.
inline FrocCurve froc_curve(std::span<const MatchResult> results) {
  if (results.empty()) throw ConfigError("froc_curve: no patients");
  FrocCurve curve;
  curve.n_patients = results.size();
  struct Event {
    double score;
    bool tp;
  };
  std::vector<Event> events;
  for (const auto& r : results) {
    curve.n_lesions += r.n_lesions;
    for (const auto& d : r.detections) events.push_back({d.score, true});
    for (double s : r.false_positives) events.push_back({s, false});
  }
  if (curve.n_lesions == 0) throw ConfigError("froc_curve: the ground truth contains no lesions");
  std::ranges::sort(events, [](const Event& a, const Event& b) { return a.score > b.score; });

  const double np = static_cast<double>(curve.n_patients), nl = static_cast<double>(curve.n_lesions);
  std::vector<FrocPoint> raw;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < events.size();) {
    const double tau = events[i].score;
    for (; i < events.size() && events[i].score == tau; ++i) (events[i].tp ? tp : fp)++;
    raw.push_back({static_cast<double>(fp) / np, static_cast<double>(tp) / nl});
  }
  raw.push_back({static_cast<double>(fp) / np, static_cast<double>(tp) / nl});

  for (const auto& p : raw) {
    if (!curve.points.empty() && curve.points.back().fp_per_patient == p.fp_per_patient) {
      curve.points.back().sensitivity = std::max(curve.points.back().sensitivity, p.sensitivity);
      continue;
    }
    curve.points.push_back(p);
  }
  return curve;
}

/// Sensitivity at an FP rate: linear interpolation between bracketing points, clamped at both ends.
inline double sensitivity_at(const FrocCurve& curve, double fp_rate) {
  const auto& p = curve.points;
  if (p.empty()) throw ConfigError("sensitivity_at: empty curve");
  if (fp_rate <= p.front().fp_per_patient) return p.front().sensitivity;
  if (fp_rate >= p.back().fp_per_patient) return p.back().sensitivity;
  const auto hi = std::ranges::upper_bound(p, fp_rate, {}, &FrocPoint::fp_per_patient);
  const auto lo = hi - 1;
  if (lo->fp_per_patient == fp_rate) return lo->sensitivity;
  const double t = (fp_rate - lo->fp_per_patient) / (hi->fp_per_patient - lo->fp_per_patient);
  return lo->sensitivity + t * (hi->sensitivity - lo->sensitivity);
}

inline double average_sensitivity(const FrocCurve& curve, std::span<const double> fp_rates) {
  if (fp_rates.empty()) throw ConfigError("average_sensitivity: no operating points");
  double s = 0.0;
  for (double f : fp_rates) s += sensitivity_at(curve, f);
  return s / static_cast<double>(fp_rates.size());
}

inline std::string froc_csv(const FrocCurve& curve) {
  std::string out = "fp_per_patient,sensitivity\n";
  for (const auto& p : curve.points) out += fmt::format("{:.17g},{:.17g}\n", p.fp_per_patient, p.sensitivity);
  return out;
}

/// Operating-point label as used in metrics.json ("0.5", "1", "2").
inline std::string fp_label(double f) { return fmt::format("{:g}", f); }

inline nlohmann::ordered_json froc_metrics(const FrocCurve& curve, std::span<const double> fp_rates) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json sens;
  for (double f : fp_rates) sens[fp_label(f)] = sensitivity_at(curve, f);
  j["sens_at"] = sens;
  j["average"] = average_sensitivity(curve, fp_rates);
  j["n_patients"] = curve.n_patients;
  j["n_lesions"] = curve.n_lesions;
  return j;
}

}  // namespace cspca
