// SPDX-License-Identifier: Apache-2.0
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "cspca/detector.hpp"
#include "oracles.hpp"

using namespace cspca;

namespace {

const Spacing kSp{0.5, 0.5, 3.6};

Volume3 zeros(Dims d) { return Volume3(d, kSp); }

std::size_t lin(const Dims& d, std::size_t x, std::size_t y, std::size_t z) { return x + d.nx * (y + d.ny * z); }

void expect_matches_oracle(const Volume3& h, const DetectorParams& p) {
  const auto got = two_threshold_detect(h, p);
  const auto want = oracle::hysteresis(h, p.t_low, p.t_high, p.min_voxels, static_cast<int>(p.connectivity));
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(std::set<std::size_t>(got[i].voxels.begin(), got[i].voxels.end()), want[i].voxels);
    EXPECT_EQ(got[i].score, want[i].score);
    EXPECT_EQ(got[i].peak_index, want[i].peak);
    EXPECT_DOUBLE_EQ(got[i].volume_mm3, static_cast<double>(want[i].voxels.size()) * kSp.voxel_volume());
  }
}

}  // namespace

TEST(StackHeatmaps, TwelveSlices) {
  std::vector<Volume3> slices;
  Rng rng(1);
  for (int z = 0; z < 12; ++z) {
    Volume3 s(Dims{96, 96, 1}, kSp);
    for (auto& v : s.voxels()) v = static_cast<float>(rng.uniform());
    slices.push_back(std::move(s));
  }
  const auto vol = stack_heatmaps(slices, kSp);
  EXPECT_EQ(vol.dims(), (Dims{96, 96, 12}));
  for (int k = 0; k < 100; ++k) {
    const auto x = static_cast<std::size_t>(rng.index(96)), y = static_cast<std::size_t>(rng.index(96)),
               z = static_cast<std::size_t>(rng.index(12));
    EXPECT_EQ(vol.at(x, y, z), slices[z].at(x, y, 0));
  }
}

TEST(StackHeatmaps, SingleSliceAndErrors) {
  std::vector<Volume3> one{Volume3(Dims{8, 8, 1}, kSp)};
  EXPECT_EQ(stack_heatmaps(one, kSp).dims().nz, 1u);
  EXPECT_THROW(stack_heatmaps(std::vector<Volume3>{}, kSp), ShapeError);
  std::vector<Volume3> bad{Volume3(Dims{8, 8, 1}, kSp), Volume3(Dims{8, 9, 1}, kSp)};
  EXPECT_THROW(stack_heatmaps(bad, kSp), ShapeError);
}

TEST(ConnectedComponents, AllZeros) { EXPECT_EQ(connected_components(zeros({8, 8, 4})).count, 0); }

TEST(ConnectedComponents, InPlaneDiagonal) {
  auto v = zeros({4, 4, 1});
  v[lin(v.dims(), 1, 1, 0)] = 1;
  v[lin(v.dims(), 2, 2, 0)] = 1;
  EXPECT_EQ(connected_components(v, Connectivity::vertex).count, 1);
  EXPECT_EQ(connected_components(v, Connectivity::edge).count, 1);
  EXPECT_EQ(connected_components(v, Connectivity::face).count, 2);
}

TEST(ConnectedComponents, CornerDiagonalNeedsVertex) {
  auto v = zeros({3, 3, 3});
  v[lin(v.dims(), 0, 0, 0)] = 1;
  v[lin(v.dims(), 1, 1, 1)] = 1;
  EXPECT_EQ(connected_components(v, Connectivity::vertex).count, 1);
  EXPECT_EQ(connected_components(v, Connectivity::edge).count, 2);
}

TEST(ConnectedComponents, NonBinaryRejected) {
  auto v = zeros({2, 2, 1});
  v[0] = 0.5f;
  EXPECT_THROW(connected_components(v), ShapeError);
}

TEST(ConnectedComponents, MatchesFloodFillUpToPermutation) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Dims d{8, 8, 4};
    auto v = zeros(d);
    const double density = rng.uniform(0.1, 0.6);
    std::vector<bool> on(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      on[i] = rng.bernoulli(density);
      v[i] = on[i] ? 1.0f : 0.0f;
    }
    for (int conn : {6, 18, 26}) {
      const auto cc = connected_components(v, connectivity_from_int(conn));
      const auto want = oracle::components(on, d, conn);
      ASSERT_EQ(static_cast<std::size_t>(cc.count), want.size());
      std::map<std::int32_t, std::set<std::size_t>> got;
      for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(cc.labels[i] != 0, on[i]);
        if (cc.labels[i]) got[cc.labels[i]].insert(i);
      }
      std::vector<std::set<std::size_t>> sets;
      for (auto& [label, s] : got) sets.push_back(s);
      // label order follows each component's smallest index, so sorted oracle sets line up
      EXPECT_EQ(sets, want);
    }
  }
}

TEST(TwoThreshold, AllZero) { EXPECT_TRUE(two_threshold_detect(zeros({8, 8, 4}), DetectorParams{}).empty()); }

TEST(TwoThreshold, PlateauWithPeak) {
  const Dims d{8, 8, 2};
  auto h = zeros(d);
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t x = 2; x < 6; ++x) h[lin(d, x, y, 1)] = 0.5f;
  h[lin(d, 3, 3, 1)] = 0.7f;
  DetectorParams p;
  p.t_low = 0.4;
  p.t_high = 0.6;
  const auto c = two_threshold_detect(h, p);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_FLOAT_EQ(static_cast<float>(c[0].score), 0.7f);
  EXPECT_EQ(c[0].voxels.size(), 12u);
  EXPECT_EQ(c[0].peak_index, lin(d, 3, 3, 1));

  h[lin(d, 3, 3, 1)] = 0.55f;
  EXPECT_TRUE(two_threshold_detect(h, p).empty());
}

TEST(TwoThreshold, MinVoxelsFilter) {
  const Dims d{6, 6, 1};
  auto h = zeros(d);
  h[lin(d, 1, 1, 0)] = 0.9f;
  h[lin(d, 2, 1, 0)] = 0.9f;
  DetectorParams p;
  p.min_voxels = 3;
  EXPECT_TRUE(two_threshold_detect(h, p).empty());
  p.min_voxels = 2;
  EXPECT_EQ(two_threshold_detect(h, p).size(), 1u);
}

TEST(TwoThreshold, OrderingTiesByPeakIndex) {
  const Dims d{8, 1, 1};
  auto h = zeros(d);
  h[6] = 0.8f;
  h[1] = 0.8f;
  h[3] = 0.9f;
  DetectorParams p;
  p.min_voxels = 1;
  const auto c = two_threshold_detect(h, p);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[0].peak_index, 3u);
  EXPECT_EQ(c[1].peak_index, 1u);
  EXPECT_EQ(c[2].peak_index, 6u);
}

TEST(TwoThreshold, InvalidParamsRejected) {
  DetectorParams p;
  p.t_low = 0.5;
  p.t_high = 0.4;
  EXPECT_THROW(two_threshold_detect(zeros({2, 2, 1}), p), ConfigError);
  p = {};
  p.min_voxels = 0;
  EXPECT_THROW(two_threshold_detect(zeros({2, 2, 1}), p), ConfigError);
  EXPECT_THROW(connectivity_from_int(8), ConfigError);
}

TEST(TwoThreshold, MatchesBruteForceOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = oracle::random_heatmap(rng);
    DetectorParams p;
    p.t_low = static_cast<double>(rng.integer(2, 20)) / 40.0;
    p.t_high = p.t_low + static_cast<double>(rng.integer(0, 16)) / 40.0;
    p.min_voxels = static_cast<std::size_t>(rng.integer(1, 5));
    p.connectivity = connectivity_from_int(std::array{6, 18, 26}[rng.index(3)]);
    SCOPED_TRACE(trial);
    expect_matches_oracle(h, p);
  }
}

TEST(TwoThreshold, CandidateInvariants) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = oracle::random_heatmap(rng);
    const DetectorParams p;
    const auto cands = two_threshold_detect(h, p);
    std::set<std::size_t> used;
    for (const auto& c : cands) {
      ASSERT_FALSE(c.voxels.empty());
      EXPECT_TRUE(std::ranges::is_sorted(c.voxels));
      EXPECT_TRUE(std::ranges::binary_search(c.voxels, c.peak_index));
      float mx = 0;
      for (auto i : c.voxels) {
        mx = std::max(mx, h[i]);
        EXPECT_TRUE(used.insert(i).second) << "candidates overlap";
      }
      EXPECT_EQ(c.score, mx);
      std::vector<bool> on(h.size(), false);
      for (auto i : c.voxels) on[i] = true;
      EXPECT_EQ(oracle::components(on, h.dims(), 26).size(), 1u);
    }
  }
}

TEST(TwoThreshold, RaisingHighThresholdOnlyRemoves) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = oracle::random_heatmap(rng);
    DetectorParams a;
    a.t_low = 0.2;
    a.t_high = 0.3;
    DetectorParams b = a;
    b.t_high = 0.6;
    const auto ca = two_threshold_detect(h, a), cb = two_threshold_detect(h, b);
    EXPECT_LE(cb.size(), ca.size());
    std::set<std::vector<std::size_t>> sa;
    for (const auto& c : ca) sa.insert(c.voxels);
    for (const auto& c : cb) EXPECT_TRUE(sa.contains(c.voxels));
  }
}

TEST(TwoThreshold, EqualThresholdsIsSingleThreshold) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = oracle::random_heatmap(rng);
    DetectorParams p;
    p.t_low = p.t_high = 0.35;
    p.min_voxels = 1;
    const auto cands = two_threshold_detect(h, p);
    std::vector<bool> on(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) on[i] = h[i] >= 0.35;
    EXPECT_EQ(cands.size(), oracle::components(on, h.dims(), 26).size());
  }
}

TEST(CandidateCsv, Format) {
  const Dims d{4, 4, 2};
  CandidateLesion c;
  c.voxels = {lin(d, 1, 2, 1)};
  c.peak_index = lin(d, 1, 2, 1);
  c.score = 0.5;
  c.volume_mm3 = 0.9;
  const std::vector<CandidateLesion> v{c};
  EXPECT_EQ(candidates_csv("p1", v, d),
            "patient_id,candidate_rank,score,peak_x,peak_y,peak_z,voxel_count,volume_mm3\np1,1,0.5,1,2,1,1,0.900000\n");
  EXPECT_EQ(candidates_csv("p1", v, d, false), "p1,1,0.5,1,2,1,1,0.900000\n");
}
