// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "cspca/rng.hpp"
#include "cspca/volume.hpp"
#include "test_util.hpp"

using namespace cspca;
using cspca::testing::TempDir;

namespace {

Volume3 iota_volume(Dims d, Spacing s) {
  std::vector<float> v(d.size());
  std::iota(v.begin(), v.end(), 0.0f);
  return Volume3(d, s, std::move(v));
}

Volume3 random_volume(Dims d, Spacing s, std::uint64_t seed) {
  Rng rng(seed);
  Volume3 v(d, s);
  for (auto& x : v.voxels()) x = static_cast<float>(rng.uniform(-3.0, 3.0));
  return v;
}

PatientCase tiny_case(const std::string& id, bool positive) {
  PatientCase c;
  c.id = id;
  for (auto& ch : c.channels) ch = Volume3(Dims{2, 2, 1}, Spacing{});
  c.lesion_mask = Volume3(Dims{2, 2, 1}, Spacing{});
  if (positive) c.lesion_mask[0] = 1.0f;
  c.has_cspca = positive;
  return c;
}

}  // namespace

TEST(Volume, RejectsInvalidGrids) {
  EXPECT_THROW(Volume3(Dims{0, 1, 1}, Spacing{}), ShapeError);
  EXPECT_THROW(Volume3(Dims{1, 1, 1}, Spacing{0.0, 1.0, 1.0}), ParseError);
  EXPECT_THROW(Volume3(Dims{1, 1, 1}, Spacing{1.0, std::nan(""), 1.0}), ParseError);
  EXPECT_THROW(Volume3(Dims{2, 2, 2}, Spacing{}, std::vector<float>(7)), ShapeError);
}

TEST(Volume, IndexIsXFastest) {
  const auto v = iota_volume(Dims{3, 4, 5}, Spacing{});
  EXPECT_EQ(v.at(1, 0, 0), 1.0f);
  EXPECT_EQ(v.at(0, 1, 0), 3.0f);
  EXPECT_EQ(v.at(0, 0, 1), 12.0f);
}

TEST(VolumeIo, RoundTripIsBitExact) {
  TempDir dir("vol");
  const auto v = iota_volume(Dims{2, 2, 2}, Spacing{0.5, 0.5, 3.6});
  write_volume(v, dir / "a");
  const auto r = read_volume(dir / "a");
  EXPECT_EQ(r.dims(), v.dims());
  EXPECT_EQ(r.spacing(), (Spacing{0.5, 0.5, 3.6}));
  EXPECT_TRUE(std::ranges::equal(r.voxels(), v.voxels()));
}

TEST(VolumeIo, RoundTripRandomVolumes) {
  TempDir dir("vol");
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s);
    const Dims d{1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(6)};
    const Spacing sp{rng.uniform(0.1, 5.0), rng.uniform(0.1, 5.0), rng.uniform(0.1, 5.0)};
    auto v = random_volume(d, sp, s + 100);
    v[0] = -0.0f;
    write_volume(v, dir / "r");
    const auto r = read_volume(dir / "r");
    EXPECT_EQ(r.dims(), d);
    EXPECT_EQ(r.spacing(), sp);
    EXPECT_EQ(std::memcmp(r.voxels().data(), v.voxels().data(), v.size() * 4), 0);
  }
}

TEST(VolumeIo, DeterministicBytesAndPayloadSize) {
  TempDir dir("vol");
  const auto v = random_volume(Dims{5, 3, 2}, Spacing{0.5, 0.5, 3.6}, 3);
  write_volume(v, dir / "a");
  write_volume(v, dir / "b");
  EXPECT_EQ(cspca::testing::slurp(dir / "a.volraw"), cspca::testing::slurp(dir / "b.volraw"));
  EXPECT_EQ(cspca::testing::slurp(dir / "a.volhdr.json"), cspca::testing::slurp(dir / "b.volhdr.json"));

  write_volume(Volume3(Dims{1, 1, 1}, Spacing{}), dir / "one");
  EXPECT_EQ(std::filesystem::file_size(dir / "one.volraw"), 4u);
  write_volume(Volume3(Dims{192, 192, 1}, Spacing{0.5, 0.5, 3.6}), dir / "slice");
  EXPECT_EQ(std::filesystem::file_size(dir / "slice.volraw"), 147456u);
}

TEST(VolumeIo, HeaderFormat) {
  TempDir dir("vol");
  write_volume(Volume3(Dims{2, 3, 4}, Spacing{0.5, 0.5, 3.6}), dir / "h");
  const auto j = nlohmann::json::parse(cspca::testing::slurp(dir / "h.volhdr.json"));
  EXPECT_EQ(j["dims"], nlohmann::json({2, 3, 4}));
  EXPECT_EQ(j["spacing_mm"], nlohmann::json({0.5, 0.5, 3.6}));
  EXPECT_EQ(j["dtype"], "f32le");
  EXPECT_EQ(j["order"], "x-fastest");
}

TEST(VolumeIo, PayloadMismatchIsReported) {
  TempDir dir("vol");
  write_volume(iota_volume(Dims{2, 2, 2}, Spacing{}), dir / "a");
  std::vector<float> seven(7, 1.0f);
  detail::write_bytes(dir / "a.volraw", seven.data(), seven.size() * 4);
  try {
    read_volume(dir / "a");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field(), "payload");
  }
}

TEST(VolumeIo, BadSpacingNamesTheField) {
  TempDir dir("vol");
  write_volume(iota_volume(Dims{1, 1, 1}, Spacing{}), dir / "a");
  detail::write_text(dir / "a.volhdr.json", R"({"dims":[1,1,1],"spacing_mm":[1,-1,1],"dtype":"f32le","order":"x-fastest"})");
  try {
    read_volume(dir / "a");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field(), "spacing_mm");
  }
  detail::write_text(dir / "a.volhdr.json", R"({"dims":[1,1],"spacing_mm":[1,1,1]})");
  EXPECT_THROW(read_volume(dir / "a"), ParseError);
}

TEST(VolumeIo, MissingFilesAreIoErrors) {
  TempDir dir("vol");
  EXPECT_THROW(read_volume(dir / "nothing"), IoError);
  write_volume(iota_volume(Dims{1, 1, 1}, Spacing{}), dir / "a");
  std::filesystem::remove(dir / "a.volraw");
  EXPECT_THROW(read_volume(dir / "a"), IoError);
}

TEST(Resample, IdentityIsExact) {
  const auto v = random_volume(Dims{7, 5, 3}, Spacing{0.5, 0.5, 3.6}, 9);
  const auto r = resample(v, v.spacing());
  EXPECT_EQ(r.dims(), v.dims());
  EXPECT_TRUE(std::ranges::equal(r.voxels(), v.voxels()));
}

TEST(Resample, DimsArithmetic) {
  const auto r = resample(Volume3(Dims{4, 4, 4}, Spacing{1, 1, 1}), Spacing{0.5, 0.5, 1.0});
  EXPECT_EQ(r.dims(), (Dims{8, 8, 4}));
  const auto tiny = resample(Volume3(Dims{1, 1, 1}, Spacing{1, 1, 1}), Spacing{10, 10, 10});
  EXPECT_EQ(tiny.dims(), (Dims{1, 1, 1}));
}

TEST(Resample, LinearInterpolationMidway) {
  Volume3 v(Dims{2, 1, 1}, Spacing{1, 1, 1}, std::vector<float>{1.0f, 2.0f});
  EXPECT_DOUBLE_EQ(sample_trilinear(v, 0.5, 0.0, 0.0), 1.5);
  // doubling resolution: centres at -0.25, 0.25, 0.75, 1.25 in source voxel coordinates
  const auto r = resample(v, Spacing{0.5, 1, 1});
  ASSERT_EQ(r.dims().nx, 4u);
  EXPECT_FLOAT_EQ(r[0], 1.0f);
  EXPECT_FLOAT_EQ(r[1], 1.25f);
  EXPECT_FLOAT_EQ(r[2], 1.75f);
  EXPECT_FLOAT_EQ(r[3], 2.0f);
}

TEST(Resample, StaysWithinSourceRange) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto v = random_volume(Dims{6, 5, 4}, Spacing{0.7, 0.9, 3.0}, s);
    const auto [lo, hi] = std::ranges::minmax(v.voxels());
    const auto r = resample(v, Spacing{0.5, 0.5, 1.3});
    for (float x : r.voxels()) {
      EXPECT_GE(x, lo);
      EXPECT_LE(x, hi);
    }
  }
}

TEST(Resample, RejectsNonPositiveSpacing) {
  EXPECT_THROW(resample(Volume3(Dims{2, 2, 2}, Spacing{}), Spacing{0, 1, 1}), ConfigError);
}

TEST(CenterCrop, DimsFromExtent) {
  const auto c = center_crop(Volume3(Dims{10, 10, 2}, Spacing{0.5, 0.5, 3.6}), 96.0, 96.0);
  EXPECT_EQ(c.dims(), (Dims{192, 192, 2}));
}

TEST(CenterCrop, FullExtentIsIdentity) {
  const auto v = random_volume(Dims{6, 4, 3}, Spacing{0.5, 0.5, 3.6}, 4);
  const auto c = center_crop(v, 3.0, 2.0);
  EXPECT_EQ(c.dims(), v.dims());
  EXPECT_TRUE(std::ranges::equal(c.voxels(), v.voxels()));
}

TEST(CenterCrop, PadsUndersizedSource) {
  const auto c = center_crop(Volume3(Dims{2, 2, 1}, Spacing{1, 1, 1}, 1.0f), 4.0, 4.0);
  ASSERT_EQ(c.dims(), (Dims{4, 4, 1}));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(c.at(x, y, 0), (x >= 1 && x <= 2 && y >= 1 && y <= 2) ? 1.0f : 0.0f);
}

TEST(CenterCrop, OddDifferenceFavoursLowerIndex) {
  const auto v = iota_volume(Dims{5, 1, 1}, Spacing{});
  const auto c = center_crop(v, 2.0, 1.0);
  EXPECT_EQ(c[0], 1.0f);
  EXPECT_EQ(c[1], 2.0f);
}

TEST(CenterCrop, NeverIncreasesMassOfNonnegativeInput) {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    Volume3 v(Dims{8, 6, 2}, Spacing{0.5, 0.5, 1});
    for (auto& x : v.voxels()) x = static_cast<float>(rng.uniform());
    const double ex = rng.uniform(0.5, 6.0), ey = rng.uniform(0.5, 6.0);
    const auto c = center_crop(v, ex, ey);
    EXPECT_EQ(c.dims().nx, static_cast<std::size_t>(std::max(1.0, std::round(ex / 0.5))));
    EXPECT_EQ(c.dims().ny, static_cast<std::size_t>(std::max(1.0, std::round(ey / 0.5))));
    double sv = 0, sc = 0;
    for (float x : v.voxels()) sv += x;
    for (float x : c.voxels()) sc += x;
    EXPECT_LE(sc, sv + 1e-9);
  }
}

TEST(PatientCase, ValidateChecksFlagAndGrid) {
  auto c = tiny_case("a", true);
  EXPECT_NO_THROW(c.validate());
  c.has_cspca = false;
  EXPECT_THROW(c.validate(), ParseError);
  c = tiny_case("b", false);
  c.channels[1] = Volume3(Dims{3, 2, 1}, Spacing{});
  EXPECT_THROW(c.validate(), ShapeError);
}

TEST(CaseManifest, RoundTrip) {
  TempDir dir("cases");
  std::vector<PatientCase> cases{tiny_case("p1", true), tiny_case("n1", false)};
  cases[0].zonal_gt = Volume3(Dims{2, 2, 1}, Spacing{}, 2.0f);
  write_cases(cases, dir.path());
  const auto r = read_cases(dir / "cases.json");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "p1");
  EXPECT_TRUE(r[0].has_cspca);
  ASSERT_TRUE(r[0].zonal_gt.has_value());
  EXPECT_FALSE(r[1].zonal_gt.has_value());
  EXPECT_TRUE(std::ranges::equal(r[0].lesion_mask.voxels(), cases[0].lesion_mask.voxels()));
}

// Independent largest-remainder oracle over exact integer fractions.
std::array<std::size_t, 3> lr_oracle(std::size_t n, std::array<unsigned, 3> w) {
  const std::size_t total = w[0] + w[1] + w[2];
  std::array<std::size_t, 3> q{};
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, index)
  std::size_t given = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    q[i] = n * w[i] / total;
    given += q[i];
    rem.push_back({n * w[i] % total, i});
  }
  std::ranges::stable_sort(rem, [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; k < n - given; ++k) ++q[rem[k].second];
  return q;
}

TEST(Split, ApportionMatchesOracle) {
  Rng rng(11);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = rng.index(1000);
    const std::array<unsigned, 3> w{1 + static_cast<unsigned>(rng.index(6)),
                                    1 + static_cast<unsigned>(rng.index(6)),
                                    1 + static_cast<unsigned>(rng.index(6))};
    EXPECT_EQ(apportion(n, w), lr_oracle(n, w)) << n;
  }
}

TEST(Split, CohortSizesOf848) {
  const auto plan = plan_split(848, 319, SplitRatios{});
  EXPECT_EQ(plan.total, (std::array<std::size_t, 3>{509, 170, 169}));
  EXPECT_EQ(plan.positive, (std::array<std::size_t, 3>{191, 64, 64}));
}

TEST(Split, FivePatientsOnePositive) {
  std::vector<PatientCase> cases;
  for (int i = 0; i < 5; ++i) cases.push_back(tiny_case("c" + std::to_string(i), i == 2));
  const auto s = stratified_split(cases, SplitRatios{}, 1);
  EXPECT_EQ(s.train.size(), 3u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
  int positives = 0;
  for (const auto* set : {&s.train, &s.val, &s.test})
    for (const auto& c : *set) positives += c.has_cspca;
  EXPECT_EQ(positives, 1);
}

TEST(Split, PartitionPropertiesAndDeterminism) {
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 5 + rng.index(200);
    std::vector<PatientCase> cases;
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = rng.bernoulli(0.38);
      npos += p;
      cases.push_back(tiny_case("c" + std::to_string(i), p));
    }
    const std::uint64_t seed = rng.next();
    const auto a = stratified_split_indices(std::span<const PatientCase>(cases), SplitRatios{}, seed);
    const auto b = stratified_split_indices(std::span<const PatientCase>(cases), SplitRatios{}, seed);
    EXPECT_EQ(a, b);
    std::set<std::size_t> all;
    std::size_t count = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      count += a[k].size();
      all.insert(a[k].begin(), a[k].end());
      const double share = static_cast<double>(n) * (k == 0 ? 0.6 : 0.2);
      EXPECT_LT(std::abs(static_cast<double>(a[k].size()) - share), 1.0 + 1e-9);
      std::size_t pos = 0;
      for (auto i : a[k]) pos += cases[i].has_cspca;
      const double pshare = static_cast<double>(npos) * (k == 0 ? 0.6 : 0.2);
      EXPECT_LT(std::abs(static_cast<double>(pos) - pshare), 1.0 + 1e-9);
    }
    EXPECT_EQ(count, n);
    EXPECT_EQ(all.size(), n);
  }
}

TEST(Split, RejectsZeroRatioAndEmptyInput) {
  std::vector<PatientCase> cases{tiny_case("a", false)};
  EXPECT_THROW(stratified_split(cases, SplitRatios{3, 0, 1}, 1), ConfigError);
  EXPECT_THROW(stratified_split(std::span<const PatientCase>(), SplitRatios{}, 1), ConfigError);
}

TEST(Preprocess, ResamplesAndCropsEveryMember) {
  PatientCase c = tiny_case("a", true);
  for (auto& ch : c.channels) ch = Volume3(Dims{8, 8, 2}, Spacing{1, 1, 3.6}, 1.0f);
  c.lesion_mask = Volume3(Dims{8, 8, 2}, Spacing{1, 1, 3.6});
  c.lesion_mask.at(4, 4, 1) = 1.0f;
  c.zonal_gt = Volume3(Dims{8, 8, 2}, Spacing{1, 1, 3.6}, 1.0f);
  const auto p = preprocess_case(c, PreprocessConfig{Spacing{0.5, 0.5, 3.6}, 6.0, 6.0});
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(p.lesion_mask.dims(), (Dims{12, 12, 2}));
  for (float v : p.lesion_mask.voxels()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}
