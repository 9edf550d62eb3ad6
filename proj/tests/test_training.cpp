// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "cspca/phantom.hpp"
#include "cspca/training.hpp"
#include "test_util.hpp"

using namespace cspca;
using ad::Tensor;

namespace {

Tensor<double> param(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, std::move(v), true);
}

void set_grad(Tensor<double>& t, std::vector<double> g) {
  t.zero_grad();
  auto dst = t.mutable_grad();
  std::ranges::copy(g, dst.begin());
}

std::vector<DetectorCase> phantom_cases(std::size_t n, double positive = 1.0, std::uint64_t seed = 2019) {
  PhantomConfig pc;
  pc.n_cases = n;
  pc.prob_case_positive = positive;
  pc.seed = seed;
  std::vector<DetectorCase> out;
  for (const auto& c : generate_cohort(pc).cases)
    out.push_back(make_detector_case(preprocess_case(c.patient, PreprocessConfig{})));
  return out;
}

UNet2DConfig small_net() {
  UNet2DConfig c;
  c.depth = 2;
  c.base_filters = 4;
  return c;
}

SliceSample random_slice(Rng& rng, std::size_t zonal_channels) {
  SliceSample s;
  s.nx = 16;
  s.ny = 12;
  s.image_channels = 3;
  s.zonal_channels = zonal_channels;
  s.image.resize(3 * s.plane());
  s.zonal.resize(zonal_channels * s.plane());
  s.label.resize(s.plane());
  for (auto& v : s.image) v = static_cast<float>(rng.uniform());
  for (auto& v : s.zonal) v = static_cast<float>(rng.uniform());
  for (auto& v : s.label) v = rng.bernoulli(0.2) ? 1 : 0;
  return s;
}

}  // namespace

TEST(Adam, FirstStepClosedForm) {
  auto p = param({0.0, 0.0, 0.0});
  set_grad(p, {1.0, 10.0, 0.0});
  AdamState st;
  AdamConfig cfg;
  std::vector<Tensor<double>> ps{p};
  adam_step(ps, st, cfg);
  const double step = -1e-5 * (1.0 / (1.0 + 1e-8));
  EXPECT_NEAR(p.values()[0], step, 1e-18);
  EXPECT_NEAR(p.values()[1], -1e-5 * (10.0 / (10.0 + 1e-8)), 1e-18);
  EXPECT_NEAR(p.values()[1], p.values()[0], 1e-13);
  EXPECT_EQ(p.values()[2], 0.0);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, SecondStepMatchesHandRecursion) {
  auto p = param({1.0});
  AdamState st;
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  std::vector<Tensor<double>> ps{p};
  double m = 0, v = 0, theta = 1.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * theta;
    set_grad(p, {g});
    adam_step(ps, st, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    theta -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.values()[0], theta, 1e-14);
  }
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  auto p = param({0.3, -0.2});
  set_grad(p, {5.0, -7.0});
  AdamState st;
  AdamConfig cfg;
  cfg.learning_rate = 0.0;
  std::vector<Tensor<double>> ps{p};
  adam_step(ps, st, cfg);
  EXPECT_EQ(p.values()[0], 0.3);
  EXPECT_EQ(p.values()[1], -0.2);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor<double> p({1}, {0.0}, true);
  p.named("enc0.conv1.weight");
  set_grad(p, {std::nan("")});
  AdamState st;
  std::vector<Tensor<double>> ps{p};
  try {
    adam_step(ps, st, AdamConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("enc0.conv1.weight"), std::string::npos);
  }
}

TEST(Augment, AllOffIsIdentity) {
  Rng rng(1), r2(2);
  const auto s = random_slice(rng, 2);
  const auto a = augment(s, AugmentConfig::none(), r2);
  EXPECT_EQ(a.image, s.image);
  EXPECT_EQ(a.zonal, s.zonal);
  EXPECT_EQ(a.label, s.label);
}

TEST(Augment, MirrorIsInvolutionAndKeepsMass) {
  Rng rng(3);
  const auto s = random_slice(rng, 2);
  auto m = s;
  mirror_lr(m);
  EXPECT_NE(m.image, s.image);
  EXPECT_EQ(std::ranges::count(m.label, 1), std::ranges::count(s.label, 1));
  EXPECT_EQ(m.label[0], s.label[s.nx - 1]);
  EXPECT_EQ(m.zonal[s.plane() + 1], s.zonal[s.plane() + s.nx - 2]);
  mirror_lr(m);
  EXPECT_EQ(m.image, s.image);
  EXPECT_EQ(m.zonal, s.zonal);
  EXPECT_EQ(m.label, s.label);
}

TEST(Augment, TranslationZeroFillsAndMovesAllPlanesAlike) {
  Rng rng(4);
  const auto s = random_slice(rng, 2);
  auto t = s;
  translate(t, 3, -2);
  for (std::size_t y = 0; y < s.ny; ++y)
    for (std::size_t x = 0; x < s.nx; ++x) {
      const long sx = long(x) - 3, sy = long(y) + 2;
      const bool inside = sx >= 0 && sy >= 0 && sx < long(s.nx) && sy < long(s.ny);
      const std::size_t src = inside ? std::size_t(sx) + s.nx * std::size_t(sy) : 0;
      const std::size_t dst = x + s.nx * y;
      EXPECT_EQ(t.label[dst], inside ? s.label[src] : 0);
      EXPECT_EQ(t.image[s.plane() * 2 + dst], inside ? s.image[s.plane() * 2 + src] : 0.0f);
      EXPECT_EQ(t.zonal[s.plane() + dst], inside ? s.zonal[s.plane() + src] : 0.0f);
    }
}

TEST(Augment, MasksStayBinaryAndZonalUntouchedByIntensity) {
  AugmentConfig cfg;
  cfg.probability = 1.0;
  Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    const auto s = random_slice(rng, 2);
    const auto a = augment(s, cfg, rng);
    for (auto v : a.label) EXPECT_TRUE(v == 0 || v == 1);
    for (auto v : a.zonal) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    // zonal values are a permutation or zero fill of the originals, never rescaled
    for (auto v : a.zonal)
      EXPECT_TRUE(v == 0.0f || std::ranges::find(s.zonal, v) != s.zonal.end());
  }
  AugmentConfig geo_off = cfg;
  geo_off.mirror = geo_off.translate = false;
  const auto s = random_slice(rng, 2);
  const auto a = augment(s, geo_off, rng);
  EXPECT_EQ(a.zonal, s.zonal);
  EXPECT_EQ(a.label, s.label);
  EXPECT_NE(a.image, s.image);
}

TEST(Batch, ChannelMajorLayout) {
  Rng rng(6);
  const std::vector<SliceSample> s{random_slice(rng, 2), random_slice(rng, 2)};
  const auto b = make_batch(s);
  EXPECT_EQ(b.image.shape(), (ad::Shape{3, 2, 12, 16}));
  ASSERT_TRUE(b.zonal.has_value());
  EXPECT_EQ(b.zonal->shape(), (ad::Shape{2, 2, 12, 16}));
  const std::size_t plane = 16 * 12;
  EXPECT_EQ(b.image.values()[(2 * 2 + 1) * plane + 5], s[1].image[2 * plane + 5]);
  EXPECT_EQ(b.zonal->values()[(1 * 2 + 0) * plane + 7], s[0].zonal[plane + 7]);
  EXPECT_EQ(b.labels[plane + 9], s[1].label[9]);
  std::vector<SliceSample> mixed{random_slice(rng, 2), random_slice(rng, 0)};
  EXPECT_THROW(make_batch(mixed), ShapeError);
}

TEST(SelectModel, Rules) {
  auto rec = [](std::size_t e, double a) { return CheckpointRecord{e, a, {}}; };
  const std::vector<CheckpointRecord> three{rec(10, 0.50), rec(20, 0.70), rec(30, 0.60)};
  EXPECT_EQ(select_model(three), 1u);
  EXPECT_EQ(select_model(std::vector<CheckpointRecord>{rec(5, 0.4)}), 0u);
  EXPECT_EQ(select_model(std::vector<CheckpointRecord>{rec(5, 0.803), rec(10, 0.856)}), 1u);
  EXPECT_EQ(select_model(std::vector<CheckpointRecord>{rec(5, 0.7), rec(10, 0.7)}), 0u);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(select_model(std::vector<CheckpointRecord>{rec(5, nan), rec(10, nan)}), 1u);
  EXPECT_THROW(select_model(std::vector<CheckpointRecord>{}), ConfigError);
}

TEST(SelectModel, FromCurves) {
  FrocCurve a, b;
  a.points = {{0.0, 0.803}};
  b.points = {{0.0, 0.856}};
  const std::vector<std::pair<std::size_t, FrocCurve>> curves{{5, a}, {10, b}};
  const std::vector<double> pts{0.5, 1, 2};
  EXPECT_EQ(select_model(curves, pts), 1u);
}

TEST(TrainDetector, ZeroEpochsKeepsInitialization) {
  const auto cases = phantom_cases(1);
  TrainConfig tc;
  tc.epochs = 0;
  const auto r = train_detector(tc, small_net(), cases, {}, DetectorParams{});
  EXPECT_EQ(r.net.snapshot(), build_unet2d(small_net(), derive_seed(tc.seed, {0xde7ec7})).snapshot());
}

TEST(TrainDetector, ZonalPresenceMustMatchFusion) {
  const auto cases = phantom_cases(1);
  auto cfg = small_net();
  cfg.fusion = FusionMode::early;
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train_detector(tc, cfg, cases, {}, DetectorParams{}), ConfigError);
}

TEST(TrainDetector, DeterministicAndWritesLog) {
  const auto cases = phantom_cases(2);
  TrainConfig tc;
  tc.epochs = 2;
  tc.eval_every = 1;
  tc.adam.learning_rate = 3e-4;
  cspca::testing::TempDir dir("train");
  const auto a = train_detector(tc, small_net(), std::span(cases).first(1), std::span(cases).subspan(1), DetectorParams{}, dir.path());
  const auto b = train_detector(tc, small_net(), std::span(cases).first(1), std::span(cases).subspan(1), DetectorParams{});
  ASSERT_EQ(a.checkpoints.size(), b.checkpoints.size());
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) EXPECT_EQ(a.checkpoints[i].weights, b.checkpoints[i].weights);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_epoch1" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_epoch2" / "manifest.json"));
  const auto log = cspca::testing::slurp(dir / "training_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,mean_loss,val_avg_sensitivity");
  EXPECT_EQ(std::ranges::count(log, '\n'), 3);
}

namespace {

TrainConfig overfit_config(double lr) {
  TrainConfig tc;
  tc.epochs = 200;
  tc.eval_every = 200;
  tc.adam.learning_rate = lr;
  tc.batch = 24;  // both cases in one step
  tc.augmentation = AugmentConfig::none();
  return tc;
}

}  // namespace

TEST(TrainDetector, OverfitsTwoCases) {
  const auto cases = phantom_cases(2);
  const auto tc = overfit_config(1e-4);
  const auto init = build_unet2d(UNet2DConfig{}, derive_seed(tc.seed, {0xde7ec7}));
  const double initial = mean_loss(init, cases, tc.class_weights);
  const auto r = train_detector(tc, UNet2DConfig{}, cases, cases, DetectorParams{});
  EXPECT_LT(mean_loss(r.net, cases, tc.class_weights), 0.1 * initial);
  EXPECT_EQ(sensitivity_at(evaluate_froc(r.net, cases, DetectorParams{}), 1.0), 1.0);
}

TEST(TrainDetector, OverfitEpochLossesMostlyDecrease) {
  const auto cases = phantom_cases(2);
  const auto r = train_detector(overfit_config(5e-5), UNet2DConfig{}, cases, cases, DetectorParams{});
  std::size_t down = 0;
  for (std::size_t i = 1; i < r.log.size(); ++i) down += r.log[i].mean_loss <= r.log[i - 1].mean_loss;
  EXPECT_GE(static_cast<double>(down), 0.9 * static_cast<double>(r.log.size() - 1) - 1e-9);
  EXPECT_LT(r.log.back().mean_loss, 0.2 * r.log.front().mean_loss);
}
