// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cspca/detector.hpp"
#include "cspca/froc.hpp"
#include "cspca/nets.hpp"
#include "cspca/rng.hpp"
#include "cspca/volume.hpp"
#include "cspca/zonal.hpp"

namespace cspca {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update from the parameters' accumulated gradients.
template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam", "state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].size())
      throw ShapeError(params[k].name(), "Adam moments do not match parameter size");
    const auto g = params[k].grad();
    if (!g.empty() && g.size() != params[k].size()) throw ShapeError(params[k].name(), "gradient size mismatch");
    for (T x : g)
      if (!std::isfinite(static_cast<double>(x)))
        throw NumericError("non-finite gradient in parameter '" + params[k].name() + "'");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto g = params[k].grad();
    auto theta = params[k].mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mh = m[i] / c1, vh = v[i] / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon));
    }
  }
}

template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state, const AdamConfig& cfg) {
  adam_step(std::span<Tensor<T>>(params), state, cfg);
}

// ---------------------------------------------------------------------------
// Slices and augmentation

/// One axial slice: image and zonal channels are channel-major {C, ny, nx}.
struct SliceSample {
  std::size_t nx = 0, ny = 0;
  std::size_t image_channels = 0, zonal_channels = 0;
  std::vector<float> image;
  std::vector<float> zonal;
  std::vector<std::uint8_t> label;  ///< 0/1 per pixel

  std::size_t plane() const { return nx * ny; }
};

struct AugmentConfig {
  bool mirror = true;
  bool translate = true;
  bool intensity_scale = true;
  bool noise = true;
  double probability = 0.5;  ///< per transform
  int max_shift = 8;
  double scale_lo = 0.9, scale_hi = 1.1;
  double noise_sigma = 0.02;

  static AugmentConfig none() { return {false, false, false, false}; }
};

namespace detail {

template <class V>
void mirror_planes(V& data, std::size_t channels, std::size_t nx, std::size_t ny) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < ny; ++y) {
      auto* row = data.data() + (c * ny + y) * nx;
      std::reverse(row, row + nx);
    }
}

template <class V>
void shift_planes(V& data, std::size_t channels, std::size_t nx, std::size_t ny, int dx, int dy) {
  V out(data.size(), typename V::value_type{});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < ny; ++y) {
      const auto sy = static_cast<std::int64_t>(y) - dy;
      if (sy < 0 || sy >= static_cast<std::int64_t>(ny)) continue;
      for (std::size_t x = 0; x < nx; ++x) {
        const auto sx = static_cast<std::int64_t>(x) - dx;
        if (sx < 0 || sx >= static_cast<std::int64_t>(nx)) continue;
        out[(c * ny + y) * nx + x] = data[(c * ny + static_cast<std::size_t>(sy)) * nx + static_cast<std::size_t>(sx)];
      }
    }
  data = std::move(out);
}

}  // namespace detail

/// Left-right mirror of every plane of the sample.
inline void mirror_lr(SliceSample& s) {
  detail::mirror_planes(s.image, s.image_channels, s.nx, s.ny);
  detail::mirror_planes(s.zonal, s.zonal_channels, s.nx, s.ny);
  detail::mirror_planes(s.label, 1, s.nx, s.ny);
}

/// Translation by (dx, dy) pixels with zero fill.
inline void translate(SliceSample& s, int dx, int dy) {
  detail::shift_planes(s.image, s.image_channels, s.nx, s.ny, dx, dy);
  detail::shift_planes(s.zonal, s.zonal_channels, s.nx, s.ny, dx, dy);
  detail::shift_planes(s.label, 1, s.nx, s.ny, dx, dy);
}

/// Random geometric transforms on all planes; intensity transforms on image channels only.
inline SliceSample augment(SliceSample s, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.mirror && rng.bernoulli(cfg.probability)) mirror_lr(s);
  if (cfg.translate && cfg.max_shift > 0 && rng.bernoulli(cfg.probability)) {
    const auto dx = static_cast<int>(rng.integer(-cfg.max_shift, cfg.max_shift));
    const auto dy = static_cast<int>(rng.integer(-cfg.max_shift, cfg.max_shift));
    translate(s, dx, dy);
  }
  if (cfg.intensity_scale && rng.bernoulli(cfg.probability)) {
    for (std::size_t c = 0; c < s.image_channels; ++c) {
      const auto f = static_cast<float>(rng.uniform(cfg.scale_lo, cfg.scale_hi));
      for (std::size_t i = 0; i < s.plane(); ++i) s.image[c * s.plane() + i] *= f;
    }
  }
  if (cfg.noise && rng.bernoulli(cfg.probability))
    for (auto& v : s.image) v += static_cast<float>(cfg.noise_sigma * rng.normal());
  return s;
}

// ---------------------------------------------------------------------------
// Detector data

/// A preprocessed case with its optional zonal channels on the same grid.
struct DetectorCase {
  std::string id;
  std::array<Volume3, 3> channels;
  Volume3 lesion_mask;
  std::optional<ZonalMap> zonal;

  const Dims& dims() const { return lesion_mask.dims(); }
};

inline DetectorCase make_detector_case(const PatientCase& p, std::optional<ZonalMap> zonal = std::nullopt) {
  if (zonal && (!zonal->tz.same_grid(p.lesion_mask) || !zonal->pz.same_grid(p.lesion_mask)))
    throw ShapeError("zonal", "zonal map of " + p.id + " is not on the case grid");
  return {p.id, p.channels, p.lesion_mask, std::move(zonal)};
}

inline SliceSample slice_of(const DetectorCase& c, std::size_t z) {
  const auto& d = c.dims();
  SliceSample s;
  s.nx = d.nx;
  s.ny = d.ny;
  s.image_channels = 3;
  s.zonal_channels = c.zonal ? 2 : 0;
  const std::size_t plane = s.plane();
  const auto off = static_cast<std::ptrdiff_t>(z * plane);
  for (const auto& ch : c.channels)
    s.image.insert(s.image.end(), ch.voxels().begin() + off, ch.voxels().begin() + off + static_cast<std::ptrdiff_t>(plane));
  if (c.zonal)
    for (const auto* ch : {&c.zonal->tz, &c.zonal->pz})
      s.zonal.insert(s.zonal.end(), ch->voxels().begin() + off, ch->voxels().begin() + off + static_cast<std::ptrdiff_t>(plane));
  s.label.resize(plane);
  for (std::size_t i = 0; i < plane; ++i) s.label[i] = c.lesion_mask.voxels()[z * plane + i] > 0.0f ? 1 : 0;
  return s;
}

struct SliceBatch {
  Tensor<float> image;
  std::optional<Tensor<float>> zonal;
  std::vector<std::uint8_t> labels;  ///< ordered like the output extent {B, ny, nx}
};

/// Stacks slices along z into {C, B, ny, nx} tensors.
inline SliceBatch make_batch(std::span<const SliceSample> slices) {
  if (slices.empty()) throw ShapeError("batch", "empty batch");
  const auto& f = slices.front();
  const std::size_t b = slices.size(), plane = f.plane();
  std::vector<float> img(f.image_channels * b * plane), zon(f.zonal_channels * b * plane);
  std::vector<std::uint8_t> lab(b * plane);
  for (std::size_t k = 0; k < b; ++k) {
    const auto& s = slices[k];
    if (s.nx != f.nx || s.ny != f.ny || s.image_channels != f.image_channels || s.zonal_channels != f.zonal_channels)
      throw ShapeError("batch", "slices in a batch must share shape and channels");
    for (std::size_t c = 0; c < s.image_channels; ++c)
      std::copy_n(s.image.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, img.begin() + static_cast<std::ptrdiff_t>((c * b + k) * plane));
    for (std::size_t c = 0; c < s.zonal_channels; ++c)
      std::copy_n(s.zonal.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, zon.begin() + static_cast<std::ptrdiff_t>((c * b + k) * plane));
    std::copy(s.label.begin(), s.label.end(), lab.begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  SliceBatch out{Tensor<float>({f.image_channels, b, f.ny, f.nx}, std::move(img)), std::nullopt, std::move(lab)};
  if (f.zonal_channels) out.zonal = Tensor<float>({f.zonal_channels, b, f.ny, f.nx}, std::move(zon));
  return out;
}

/// csPCa heatmap of a whole case: slice-wise 2D inference, restacked.
inline Volume3 predict_heatmap(const Network<float>& net, const DetectorCase& c) {
  const auto& d = c.dims();
  std::vector<SliceSample> slices;
  for (std::size_t z = 0; z < d.nz; ++z) slices.push_back(slice_of(c, z));
  const auto batch = make_batch(slices);
  const auto prob = forward_detector(net, batch.image, batch.zonal ? &*batch.zonal : nullptr);
  const std::size_t plane = d.nx * d.ny;
  std::vector<Volume3> maps;
  for (std::size_t z = 0; z < d.nz; ++z)
    maps.emplace_back(Dims{d.nx, d.ny, 1}, c.lesion_mask.spacing(),
                      std::vector<float>(prob.begin() + static_cast<std::ptrdiff_t>(z * plane),
                                         prob.begin() + static_cast<std::ptrdiff_t>((z + 1) * plane)));
  return stack_heatmaps(maps, c.lesion_mask.spacing());
}

/// Heatmap → candidates → match → FROC over a set of cases.
inline FrocCurve evaluate_froc(const Network<float>& net, std::span<const DetectorCase> cases,
                               const DetectorParams& params) {
  std::vector<MatchResult> results;
  for (const auto& c : cases) {
    const auto cands = two_threshold_detect(predict_heatmap(net, c), params);
    results.push_back(match_candidates(cands, c.lesion_mask));
  }
  return froc_curve(results);
}

// ---------------------------------------------------------------------------
// Detector training

struct TrainConfig {
  std::size_t epochs = 40;
  AdamConfig adam{};
  std::array<double, 2> class_weights{1.0, 25.0};
  std::size_t batch = 4;
  std::size_t eval_every = 5;
  std::vector<double> selection_points{0.5, 1.0, 2.0};
  AugmentConfig augmentation{};
  std::uint64_t seed = 2019;

  void validate() const {
    if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (selection_points.empty()) throw ConfigError("selection_points must not be empty");
    for (std::size_t i = 0; i < selection_points.size(); ++i)
      if (!(selection_points[i] > 0.0) || (i && !(selection_points[i] > selection_points[i - 1])))
        throw ConfigError("selection_points must be positive and strictly increasing");
    if (!(class_weights[0] >= 0.0 && class_weights[1] >= 0.0) || class_weights[0] + class_weights[1] == 0.0)
      throw ConfigError("class_weights must be nonnegative and not both zero");
  }
};

struct CheckpointRecord {
  std::size_t epoch = 0;
  double val_average = std::numeric_limits<double>::quiet_NaN();  ///< NaN when not evaluated
  std::vector<std::vector<float>> weights;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();  ///< NaN for epoch 0
  std::optional<double> val_average;
};

struct TrainResult {
  Network<float> net;  ///< best checkpoint loaded
  std::vector<CheckpointRecord> checkpoints;
  std::size_t best = 0;  ///< index into checkpoints
  std::vector<EpochLog> log;
};

/// Index of the checkpoint with the largest validation average; ties go to the earliest epoch.
/// Without any evaluated checkpoint the last one is chosen.
inline std::size_t select_model(std::span<const CheckpointRecord> checkpoints) {
  if (checkpoints.empty()) throw ConfigError("select_model: no checkpoints");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const double a = checkpoints[i].val_average;
    if (std::isnan(a)) continue;
    if (!best || a > checkpoints[*best].val_average ||
        (a == checkpoints[*best].val_average && checkpoints[i].epoch < checkpoints[*best].epoch))
      best = i;
  }
  return best.value_or(checkpoints.size() - 1);
}

/// Same rule from FROC curves.
inline std::size_t select_model(std::span<const std::pair<std::size_t, FrocCurve>> curves,
                                std::span<const double> selection_points) {
  std::vector<CheckpointRecord> recs;
  for (const auto& [epoch, curve] : curves) recs.push_back({epoch, average_sensitivity(curve, selection_points), {}});
  return select_model(recs);
}

/// Mean weighted cross entropy over all slices of `cases` without augmentation.
inline double mean_loss(const Network<float>& net, std::span<const DetectorCase> cases,
                        std::span<const double> class_weights) {
  ad::NoGradGuard no_grad;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& c : cases)
    for (std::size_t z = 0; z < c.dims().nz; ++z) {
      const auto s = slice_of(c, z);
      const auto b = make_batch(std::span<const SliceSample>(&s, 1));
      const auto p = detector_probabilities(net, b.image, b.zonal ? &*b.zonal : nullptr);
      total += ad::weighted_cross_entropy(p, b.labels, class_weights).item();
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

inline bool has_lesions(std::span<const DetectorCase> cases) {
  return std::ranges::any_of(cases, [](const DetectorCase& c) { return count_lesions(c.lesion_mask) > 0; });
}

inline std::string training_log_csv(std::span<const EpochLog> log) {
  std::string out = "epoch,mean_loss,val_avg_sensitivity\n";
  for (const auto& e : log)
    out += fmt::format("{},{},{}\n", e.epoch, std::isnan(e.mean_loss) ? std::string() : fmt::format("{:.9g}", e.mean_loss),
                       e.val_average ? fmt::format("{:.9g}", *e.val_average) : std::string());
  return out;
}

/// Slice-wise training of the 2D detector. Validation FROC runs every eval_every epochs and
/// at the last epoch; the returned network is the selected checkpoint. When `out_dir` is set,
/// checkpoints `ckpt_epoch<N>` and `training_log.csv` are written there.
inline TrainResult train_detector(const TrainConfig& cfg, const UNet2DConfig& net_cfg,
                                  std::span<const DetectorCase> train, std::span<const DetectorCase> val,
                                  const DetectorParams& params,
                                  const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate();
  params.validate();
  if (train.empty()) throw ConfigError("train_detector: empty training set");
  const bool wants_zonal = net_cfg.fusion != FusionMode::none;
  for (const auto* set : {&train, &val})
    for (const auto& c : *set)
      if (c.zonal.has_value() != wants_zonal)
        throw ConfigError("case " + c.id + (wants_zonal ? " lacks the zonal maps fusion needs" : " has zonal maps but fusion is none"));

  TrainResult r;
  r.net = build_unet2d<float>(net_cfg, derive_seed(cfg.seed, {0xde7ec7}));
  auto params_list = r.net.parameters();
  AdamState adam;
  const bool validate_froc = !val.empty() && has_lesions(val);

  auto checkpoint = [&](std::size_t epoch, bool evaluate) {
    CheckpointRecord rec{epoch, std::numeric_limits<double>::quiet_NaN(), r.net.snapshot()};
    if (evaluate && validate_froc)
      rec.val_average = average_sensitivity(evaluate_froc(r.net, val, params), cfg.selection_points);
    if (out_dir) save_checkpoint(r.net, *out_dir / fmt::format("ckpt_epoch{}", epoch), epoch);
    r.checkpoints.push_back(std::move(rec));
    return r.checkpoints.back().val_average;
  };

  if (cfg.epochs == 0) {
    const double a = checkpoint(0, true);
    r.log.push_back({0, std::numeric_limits<double>::quiet_NaN(), std::isnan(a) ? std::nullopt : std::optional(a)});
  }

  struct Ref {
    std::size_t c, z;
  };
  std::vector<Ref> refs;
  for (std::size_t c = 0; c < train.size(); ++c)
    for (std::size_t z = 0; z < train[c].dims().nz; ++z) refs.push_back({c, z});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, {0x0de5, epoch}));
    order_rng.shuffle(refs);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b0 = 0; b0 < refs.size(); b0 += cfg.batch) {
      std::vector<SliceSample> slices;
      for (std::size_t k = b0; k < std::min(refs.size(), b0 + cfg.batch); ++k) {
        Rng aug_rng(derive_seed(cfg.seed, {0xa06, epoch, refs[k].c, refs[k].z}));
        slices.push_back(augment(slice_of(train[refs[k].c], refs[k].z), cfg.augmentation, aug_rng));
      }
      const auto batch = make_batch(slices);
      const auto probs = detector_probabilities(r.net, batch.image, batch.zonal ? &*batch.zonal : nullptr);
      const auto loss = ad::weighted_cross_entropy(probs, batch.labels, cfg.class_weights);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError(fmt::format("non-finite loss at epoch {} step {}", epoch, steps));
      r.net.zero_grad();
      ad::backward(loss);
      try {
        adam_step(params_list, adam, cfg.adam);
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("epoch {} step {}: {}", epoch, steps, e.what()));
      }
      loss_sum += lv;
      ++steps;
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(steps), std::nullopt};
    const bool evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
    if (evaluate) {
      const double a = checkpoint(epoch, true);
      if (!std::isnan(a)) entry.val_average = a;
    }
    r.log.push_back(entry);
  }

  r.best = select_model(r.checkpoints);
  r.net.restore(r.checkpoints[r.best].weights);
  if (out_dir) detail::write_text(*out_dir / "training_log.csv", training_log_csv(r.log));
  return r;
}

// ---------------------------------------------------------------------------
// Zonal segmenter training

struct ZonalTrainConfig {
  std::size_t epochs = 60;
  AdamConfig adam{1e-3};
  std::array<double, 3> class_weights{1.0, 1.0, 1.0};
  bool mirror = true;
  std::uint64_t seed = 2019;
};

struct ZonalTrainResult {
  Network<float> net;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;  ///< val_average holds the validation loss when available
};

namespace detail {

/// {1, nz, ny', nx'} T2W tensor padded to the pooling period and per-voxel zone labels.
inline std::pair<Tensor<float>, std::vector<std::uint8_t>> zonal_sample(const Network<float>& net, const PatientCase& c,
                                                                        bool mirror) {
  if (!c.zonal_gt) throw ConfigError("case " + c.id + " has no zonal ground truth");
  const auto& t2w = c.channels[static_cast<int>(Channel::t2w)];
  const auto& d = t2w.dims();
  const auto p = net.pooling_period();
  auto up = [](std::size_t n, std::size_t q) { return (n + q - 1) / q * q; };
  const Extent e{up(d.nx, p.x), up(d.ny, p.y), up(d.nz, p.z)};
  std::vector<float> img(e.size(), 0.0f);
  std::vector<std::uint8_t> lab(e.size(), 0);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const std::size_t sx = mirror ? d.nx - 1 - x : x;
        const std::size_t i = (z * e.ny + y) * e.nx + x;
        img[i] = t2w.at(sx, y, z);
        lab[i] = static_cast<std::uint8_t>(c.zonal_gt->at(sx, y, z));
      }
  return {Tensor<float>({1, e.nz, e.ny, e.nx}, std::move(img)), std::move(lab)};
}

inline double zonal_loss(const Network<float>& net, std::span<const PatientCase> cases, std::span<const double> w) {
  ad::NoGradGuard no_grad;
  double s = 0.0;
  for (const auto& c : cases) {
    auto [x, y] = zonal_sample(net, c, false);
    s += ad::weighted_cross_entropy(net.forward(x), y, w).item();
  }
  return s / static_cast<double>(cases.size());
}

}  // namespace detail

/// Trains the 3D zonal segmenter one volume per step; keeps the epoch with the lowest
/// validation loss, or the last epoch without validation cases.
inline ZonalTrainResult train_zonal(const ZonalTrainConfig& cfg, const UNet3DConfig& net_cfg,
                                    std::span<const PatientCase> train, std::span<const PatientCase> val = {}) {
  if (train.empty()) throw ConfigError("train_zonal: empty training set");
  if (!(cfg.adam.learning_rate > 0.0)) throw ConfigError("zonal learning_rate must be positive");
  ZonalTrainResult r;
  r.net = build_unet3d_aniso<float>(net_cfg, derive_seed(cfg.seed, {0x20a1}));
  auto params = r.net.parameters();
  AdamState adam;
  std::vector<std::vector<float>> best = r.net.snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {0x20a2, epoch}));
    rng.shuffle(order);
    double sum = 0.0;
    for (auto i : order) {
      auto [x, y] = detail::zonal_sample(r.net, train[i], cfg.mirror && rng.bernoulli(0.5));
      const auto loss = ad::weighted_cross_entropy(r.net.forward(x), y, cfg.class_weights);
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError(fmt::format("zonal training: non-finite loss at epoch {}", epoch));
      r.net.zero_grad();
      ad::backward(loss);
      adam_step(params, adam, cfg.adam);
      sum += loss.item();
    }
    EpochLog entry{epoch, sum / static_cast<double>(train.size()), std::nullopt};
    if (!val.empty()) {
      const double vl = detail::zonal_loss(r.net, val, cfg.class_weights);
      entry.val_average = vl;
      if (vl < best_loss) {
        best_loss = vl;
        best = r.net.snapshot();
        r.best_epoch = epoch;
      }
    } else {
      best = r.net.snapshot();
      r.best_epoch = epoch;
    }
    r.log.push_back(entry);
  }
  r.net.restore(best);
  return r;
}

}  // namespace cspca
