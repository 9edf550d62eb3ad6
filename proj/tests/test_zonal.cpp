// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cspca/phantom.hpp"
#include "cspca/training.hpp"
#include "cspca/zonal.hpp"
#include "test_util.hpp"

using namespace cspca;

namespace {

const Spacing kSp{0.5, 0.5, 3.6};

ZonalMap single_voxel(float tz, float pz) {
  return {ZonalMode::probabilistic, Volume3(Dims{1, 1, 1}, kSp, tz), Volume3(Dims{1, 1, 1}, kSp, pz)};
}

Volume3 mask(Dims d, std::initializer_list<std::size_t> on) {
  Volume3 v(d, kSp);
  for (auto i : on) v[i] = 1.0f;
  return v;
}

}  // namespace

TEST(PredictZones, ValidProbabilitiesAndDims) {
  const auto net = build_unet3d_aniso(UNet3DConfig{}, 3);
  Rng rng(1);
  // 30x22 is not a multiple of the pooling period, so padding and cropping are exercised
  Volume3 t2w(Dims{30, 22, 5}, kSp);
  for (auto& v : t2w.voxels()) v = static_cast<float>(rng.uniform());
  const auto zm = predict_zones(net, t2w);
  EXPECT_EQ(zm.mode, ZonalMode::probabilistic);
  EXPECT_EQ(zm.tz.dims(), t2w.dims());
  EXPECT_EQ(zm.pz.dims(), t2w.dims());
  EXPECT_EQ(zm.tz.spacing(), kSp);
  for (std::size_t i = 0; i < zm.tz.size(); ++i) {
    EXPECT_GE(zm.tz[i], 0.0f);
    EXPECT_GE(zm.pz[i], 0.0f);
    EXPECT_LE(double(zm.tz[i]) + zm.pz[i], 1.0 + 1e-6);
  }
}

TEST(PredictZones, PaddingDoesNotLeakIntoCrop) {
  // values inside the crop must match an exact-period input padded by hand with zeros
  const auto net = build_unet3d_aniso(UNet3DConfig{}, 4);
  Rng rng(2);
  Volume3 small(Dims{14, 10, 3}, kSp), padded(Dims{16, 12, 3}, kSp);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 10; ++y)
      for (std::size_t x = 0; x < 14; ++x) {
        const auto v = static_cast<float>(rng.uniform());
        small[x + 14 * (y + 10 * z)] = v;
        padded[x + 16 * (y + 12 * z)] = v;
      }
  const auto a = predict_zones(net, small), b = predict_zones(net, padded);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 10; ++y)
      for (std::size_t x = 0; x < 14; ++x) EXPECT_EQ(a.tz.at(x, y, z), b.tz.at(x, y, z));
}

TEST(Deterministic, ArgmaxAndTieRule) {
  auto d = to_deterministic(single_voxel(0.6f, 0.3f));
  EXPECT_EQ(d.mode, ZonalMode::deterministic);
  EXPECT_EQ(d.tz[0], 1.0f);
  EXPECT_EQ(d.pz[0], 0.0f);

  d = to_deterministic(single_voxel(1.0f / 3.0f, 1.0f / 3.0f));
  EXPECT_EQ(d.tz[0], 0.0f);
  EXPECT_EQ(d.pz[0], 0.0f);

  d = to_deterministic(single_voxel(0.45f, 0.45f));
  EXPECT_EQ(d.tz[0], 1.0f);
  EXPECT_EQ(d.pz[0], 0.0f);

  d = to_deterministic(single_voxel(0.1f, 0.8f));
  EXPECT_EQ(d.pz[0], 1.0f);
  d = to_deterministic(single_voxel(0.1f, 0.2f));
  EXPECT_EQ(d.tz[0] + d.pz[0], 0.0f);
}

TEST(Deterministic, OneHotAndAgreesWithArgmaxAwayFromTies) {
  Rng rng(3);
  Volume3 tz(Dims{20, 20, 2}, kSp), pz(Dims{20, 20, 2}, kSp);
  for (std::size_t i = 0; i < tz.size(); ++i) {
    const double a = rng.uniform(), b = rng.uniform() * (1.0 - a);
    tz[i] = static_cast<float>(a);
    pz[i] = static_cast<float>(b);
  }
  const ZonalMap zm{ZonalMode::probabilistic, tz, pz};
  const auto d = to_deterministic(zm);
  for (std::size_t i = 0; i < tz.size(); ++i) {
    const float t = d.tz[i], p = d.pz[i];
    EXPECT_TRUE((t == 0 && p == 0) || (t == 1 && p == 0) || (t == 0 && p == 1));
    const double v[3] = {1.0 - tz[i] - pz[i], tz[i], pz[i]};
    const int best = static_cast<int>(std::max_element(v, v + 3) - v);
    const double second = std::max({v[(best + 1) % 3], v[(best + 2) % 3]});
    if (v[best] - second > 1e-4) {
      EXPECT_EQ(static_cast<int>(zone_labels(d)[i]), best);
    }
  }
  // lifting a one-hot map and converting again changes nothing
  const auto again = to_deterministic(ZonalMap{ZonalMode::probabilistic, d.tz, d.pz});
  EXPECT_EQ(again.tz.voxels().size(), d.tz.voxels().size());
  EXPECT_TRUE(std::ranges::equal(again.tz.voxels(), d.tz.voxels()));
  EXPECT_TRUE(std::ranges::equal(again.pz.voxels(), d.pz.voxels()));
}

TEST(Deterministic, LabelsRoundTrip) {
  Volume3 labels(Dims{3, 1, 1}, kSp, std::vector<float>{0, 1, 2});
  const auto zm = zonal_from_labels(labels);
  EXPECT_TRUE(std::ranges::equal(zone_labels(zm).voxels(), labels.voxels()));
}

TEST(Dice, ClosedForms) {
  const Dims d{8, 1, 1};
  const auto a = mask(d, {0, 1, 2, 3});
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, mask(d, {4, 5})), 0.0);
  const auto b = mask(d, {2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
  EXPECT_EQ(dice(a, b), dice(b, a));
  EXPECT_EQ(dice(mask(d, {}), mask(d, {})), 1.0);
  EXPECT_THROW(dice(a, mask(Dims{4, 1, 1}, {})), ShapeError);
}

TEST(ZonalCache, RoundTrip) {
  cspca::testing::TempDir dir("zonal");
  Rng rng(5);
  ZonalMap zm{ZonalMode::probabilistic, Volume3(Dims{6, 5, 2}, kSp), Volume3(Dims{6, 5, 2}, kSp)};
  for (std::size_t i = 0; i < zm.tz.size(); ++i) {
    zm.tz[i] = static_cast<float>(rng.uniform() * 0.5);
    zm.pz[i] = static_cast<float>(rng.uniform() * 0.5);
  }
  write_zonal(zm, dir.path(), "case_0001");
  for (const char* stem : {"case_0001.tz", "case_0001.pz"}) {
    EXPECT_TRUE(std::filesystem::exists(header_path(dir / stem)));
    EXPECT_TRUE(std::filesystem::exists(payload_path(dir / stem)));
  }
  const auto back = read_zonal(dir.path(), "case_0001");
  EXPECT_TRUE(std::ranges::equal(back.tz.voxels(), zm.tz.voxels()));
  EXPECT_TRUE(std::ranges::equal(back.pz.voxels(), zm.pz.voxels()));
}

TEST(ZonalTraining, LossDropsOnTinyCohort) {
  PhantomConfig pc;
  pc.n_cases = 2;
  const auto cohort = generate_cohort(pc);
  std::vector<PatientCase> cases;
  for (const auto& c : cohort.cases) cases.push_back(preprocess_case(c.patient, PreprocessConfig{}));
  ZonalTrainConfig tc;
  tc.epochs = 30;
  const auto r = train_zonal(tc, UNet3DConfig{}, cases);
  ASSERT_EQ(r.log.size(), 30u);
  EXPECT_LT(r.log.back().mean_loss, 0.7 * r.log.front().mean_loss);
  EXPECT_EQ(r.best_epoch, 30u);
  const auto zm = predict_zones(r.net, cases[0].channel(Channel::t2w));
  EXPECT_EQ(zm.tz.dims(), cases[0].lesion_mask.dims());
}
