// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cspca/errors.hpp"
#include "cspca/rng.hpp"

namespace cspca {

static_assert(std::endian::native == std::endian::little, "volume payloads are little-endian f32");

struct Dims {
  std::size_t nx = 1, ny = 1, nz = 1;

  std::size_t size() const noexcept { return nx * ny * nz; }
  bool operator==(const Dims&) const = default;
};

/// Voxel spacing in millimetres.
struct Spacing {
  double sx = 1.0, sy = 1.0, sz = 1.0;

  bool operator==(const Spacing&) const = default;
  double voxel_volume() const noexcept { return sx * sy * sz; }
};

/// Scalar 3D grid, x varying fastest, then y, then z.
class Volume3 {
 public:
  Volume3() = default;

  Volume3(Dims dims, Spacing spacing, float fill = 0.0f)
      : dims_(dims), spacing_(spacing), voxels_(dims.size(), fill) {
    validate();
  }

  Volume3(Dims dims, Spacing spacing, std::vector<float> voxels)
      : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    validate();
  }

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::size_t size() const noexcept { return voxels_.size(); }

  std::span<const float> voxels() const noexcept { return voxels_; }
  std::span<float> voxels() noexcept { return voxels_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) noexcept { return voxels_[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const noexcept { return voxels_[index(x, y, z)]; }
  float operator[](std::size_t i) const noexcept { return voxels_[i]; }
  float& operator[](std::size_t i) noexcept { return voxels_[i]; }

  bool same_grid(const Volume3& o) const noexcept { return dims_ == o.dims_ && spacing_ == o.spacing_; }

 private:
  void validate() const {
    if (dims_.nx == 0 || dims_.ny == 0 || dims_.nz == 0) throw ShapeError("dims", "all dimensions must be positive");
    for (double s : {spacing_.sx, spacing_.sy, spacing_.sz})
      if (!std::isfinite(s) || s <= 0.0) throw ParseError("spacing_mm", "spacing must be positive and finite");
    if (voxels_.size() != dims_.size())
      throw ShapeError("voxels", "expected " + std::to_string(dims_.size()) + " values, got " +
                                     std::to_string(voxels_.size()));
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<float> voxels_ = std::vector<float>(1, 0.0f);
};

// ---------------------------------------------------------------------------
// File format: <stem>.volhdr.json + <stem>.volraw

inline std::filesystem::path header_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".volhdr.json");
}
inline std::filesystem::path payload_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".volraw");
}

namespace detail {

inline std::filesystem::path strip_volume_suffix(const std::filesystem::path& p) {
  std::string s = p.string();
  for (std::string suffix : {".volhdr.json", ".volraw"})
    if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0)
      return s.substr(0, s.size() - suffix.size());
  return p;
}

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const void* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_bytes(p, text.data(), text.size());
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  const auto bytes = read_bytes(p);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.filename().string(), e.what());
  }
}

}  // namespace detail

/// Writes `vol` to `<stem>.volhdr.json` and `<stem>.volraw`. Output bytes depend only on the volume.
inline void write_volume(const Volume3& vol, const std::filesystem::path& stem_in) {
  const auto stem = detail::strip_volume_suffix(stem_in);
  const auto& d = vol.dims();
  const auto& s = vol.spacing();
  nlohmann::ordered_json hdr;
  hdr["dims"] = {d.nx, d.ny, d.nz};
  hdr["spacing_mm"] = {s.sx, s.sy, s.sz};
  hdr["dtype"] = "f32le";
  hdr["order"] = "x-fastest";
  detail::write_text(header_path(stem), hdr.dump() + "\n");
  detail::write_bytes(payload_path(stem), vol.voxels().data(), vol.size() * sizeof(float));
}

inline Volume3 read_volume(const std::filesystem::path& stem_in) {
  const auto stem = detail::strip_volume_suffix(stem_in);
  const auto hp = header_path(stem);
  const auto pp = payload_path(stem);
  if (!std::filesystem::exists(hp)) throw IoError("missing volume header " + hp.string());
  if (!std::filesystem::exists(pp)) throw IoError("missing volume payload " + pp.string());
  const auto hdr = detail::read_json(hp);

  auto triple = [&](const char* key) {
    if (!hdr.contains(key) || !hdr[key].is_array() || hdr[key].size() != 3)
      throw ParseError(key, "expected an array of three numbers");
    std::array<double, 3> v{};
    for (std::size_t i = 0; i < 3; ++i) {
      if (!hdr[key][i].is_number()) throw ParseError(key, "entry " + std::to_string(i) + " is not a number");
      v[i] = hdr[key][i].get<double>();
    }
    return v;
  };
  const auto dv = triple("dims");
  Dims dims;
  std::size_t* out[3] = {&dims.nx, &dims.ny, &dims.nz};
  for (std::size_t i = 0; i < 3; ++i) {
    if (dv[i] < 1 || dv[i] != std::floor(dv[i])) throw ParseError("dims", "dimensions must be positive integers");
    *out[i] = static_cast<std::size_t>(dv[i]);
  }
  const auto sv = triple("spacing_mm");
  for (double s : sv)
    if (!std::isfinite(s) || s <= 0.0) throw ParseError("spacing_mm", "spacing must be positive and finite");
  if (hdr.value("dtype", std::string("f32le")) != "f32le") throw ParseError("dtype", "only f32le is supported");
  if (hdr.value("order", std::string("x-fastest")) != "x-fastest")
    throw ParseError("order", "only x-fastest is supported");

  const auto bytes = detail::read_bytes(pp);
  if (bytes.size() != dims.size() * sizeof(float))
    throw ParseError("payload", "header declares " + std::to_string(dims.size()) + " voxels, payload holds " +
                                    std::to_string(bytes.size()) + " bytes");
  std::vector<float> voxels(dims.size());
  std::memcpy(voxels.data(), bytes.data(), bytes.size());
  return Volume3(dims, Spacing{sv[0], sv[1], sv[2]}, std::move(voxels));
}

// ---------------------------------------------------------------------------
// Resampling and cropping

/// Trilinear sample at continuous voxel coordinates, clamped to the grid.
inline double sample_trilinear(const Volume3& vol, double fx, double fy, double fz) {
  const auto& d = vol.dims();
  auto axis = [](double f, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
    f = std::clamp(f, 0.0, static_cast<double>(n - 1));
    const double fl = std::floor(f);
    i0 = static_cast<std::size_t>(fl);
    i1 = std::min(i0 + 1, n - 1);
    w = f - fl;
  };
  std::size_t x0, x1, y0, y1, z0, z1;
  double wx, wy, wz;
  axis(fx, d.nx, x0, x1, wx);
  axis(fy, d.ny, y0, y1, wy);
  axis(fz, d.nz, z0, z1, wz);
  auto lerp_x = [&](std::size_t y, std::size_t z) {
    return vol.at(x0, y, z) * (1.0 - wx) + vol.at(x1, y, z) * wx;
  };
  const double c0 = lerp_x(y0, z0) * (1.0 - wy) + lerp_x(y1, z0) * wy;
  const double c1 = lerp_x(y0, z1) * (1.0 - wy) + lerp_x(y1, z1) * wy;
  return c0 * (1.0 - wz) + c1 * wz;
}

inline std::size_t resampled_extent(std::size_t n, double s_in, double s_out) {
  const double v = std::round(static_cast<double>(n) * s_in / s_out);
  return v < 1.0 ? 1 : static_cast<std::size_t>(v);
}

/// Trilinear resampling with voxel-centre alignment and clamp-to-edge.
inline Volume3 resample(const Volume3& vol, const Spacing& target) {
  for (double s : {target.sx, target.sy, target.sz})
    if (!std::isfinite(s) || s <= 0.0) throw ConfigError("resample: target spacing must be positive");
  const auto& d = vol.dims();
  const auto& s = vol.spacing();
  const Dims out_dims{resampled_extent(d.nx, s.sx, target.sx), resampled_extent(d.ny, s.sy, target.sy),
                      resampled_extent(d.nz, s.sz, target.sz)};
  Volume3 out(out_dims, target);
  const double rx = target.sx / s.sx, ry = target.sy / s.sy, rz = target.sz / s.sz;
  for (std::size_t z = 0; z < out_dims.nz; ++z)
    for (std::size_t y = 0; y < out_dims.ny; ++y)
      for (std::size_t x = 0; x < out_dims.nx; ++x)
        out.at(x, y, z) = static_cast<float>(
            sample_trilinear(vol, (x + 0.5) * rx - 0.5, (y + 0.5) * ry - 0.5, (z + 0.5) * rz - 0.5));
  return out;
}

/// In-plane crop of `extent_x_mm` by `extent_y_mm` around the grid centre; zero-pads outside the source.
inline Volume3 center_crop(const Volume3& vol, double extent_x_mm, double extent_y_mm) {
  if (!(extent_x_mm > 0.0) || !(extent_y_mm > 0.0)) throw ConfigError("center_crop: extent must be positive");
  const auto& d = vol.dims();
  const auto& s = vol.spacing();
  const auto nx = static_cast<std::size_t>(std::max(1.0, std::round(extent_x_mm / s.sx)));
  const auto ny = static_cast<std::size_t>(std::max(1.0, std::round(extent_y_mm / s.sy)));
  // floor((n_in - n_out) / 2): ties go toward the lower index.
  auto offset = [](std::size_t n_in, std::size_t n_out) {
    const auto diff = static_cast<std::int64_t>(n_in) - static_cast<std::int64_t>(n_out);
    return diff >= 0 ? diff / 2 : -((-diff + 1) / 2);
  };
  const std::int64_t ox = offset(d.nx, nx), oy = offset(d.ny, ny);
  Volume3 out(Dims{nx, ny, d.nz}, s);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      const std::int64_t sy = static_cast<std::int64_t>(y) + oy;
      if (sy < 0 || sy >= static_cast<std::int64_t>(d.ny)) continue;
      for (std::size_t x = 0; x < nx; ++x) {
        const std::int64_t sx = static_cast<std::int64_t>(x) + ox;
        if (sx < 0 || sx >= static_cast<std::int64_t>(d.nx)) continue;
        out.at(x, y, z) = vol.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), z);
      }
    }
  return out;
}

/// Nearest-neighbour resampling for label volumes (same grid rules as `resample`).
inline Volume3 resample_labels(const Volume3& vol, const Spacing& target) {
  const auto& d = vol.dims();
  const auto& s = vol.spacing();
  const Dims out_dims{resampled_extent(d.nx, s.sx, target.sx), resampled_extent(d.ny, s.sy, target.sy),
                      resampled_extent(d.nz, s.sz, target.sz)};
  Volume3 out(out_dims, target);
  auto nearest = [](std::size_t i, double r, std::size_t n) {
    const double f = std::round((i + 0.5) * r - 0.5);
    return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(n - 1)));
  };
  const double rx = target.sx / s.sx, ry = target.sy / s.sy, rz = target.sz / s.sz;
  for (std::size_t z = 0; z < out_dims.nz; ++z)
    for (std::size_t y = 0; y < out_dims.ny; ++y)
      for (std::size_t x = 0; x < out_dims.nx; ++x)
        out.at(x, y, z) = vol.at(nearest(x, rx, d.nx), nearest(y, ry, d.ny), nearest(z, rz, d.nz));
  return out;
}

// ---------------------------------------------------------------------------
// Patient cases

enum class Channel : std::size_t { t2w = 0, adc = 1, dwi = 2 };
inline constexpr std::array<const char*, 3> kChannelNames = {"t2w", "adc", "dwi"};

struct PatientCase {
  std::string id;
  std::array<Volume3, 3> channels;  ///< T2W-like, ADC-like, high-b DWI-like
  Volume3 lesion_mask;              ///< 0 background, 1..K lesion labels
  std::optional<Volume3> zonal_gt;  ///< 0 background, 1 TZ, 2 PZ
  bool has_cspca = false;

  const Volume3& channel(Channel c) const { return channels[static_cast<std::size_t>(c)]; }

  /// Throws when member volumes disagree on grid or the positive flag contradicts the mask.
  void validate() const {
    for (const auto& c : channels)
      if (!c.same_grid(channels[0])) throw ShapeError("channels", "case " + id + " has mismatched channel grids");
    if (!lesion_mask.same_grid(channels[0])) throw ShapeError("lesion_mask", "case " + id + " grid mismatch");
    if (zonal_gt && !zonal_gt->same_grid(channels[0])) throw ShapeError("zonal_gt", "case " + id + " grid mismatch");
    const bool any = std::ranges::any_of(lesion_mask.voxels(), [](float v) { return v != 0.0f; });
    if (any != has_cspca) throw ParseError("has_cspca", "case " + id + " flag disagrees with its lesion mask");
  }
};

struct PreprocessConfig {
  Spacing target_spacing{0.5, 0.5, 3.6};
  double crop_x_mm = 32.0;
  double crop_y_mm = 32.0;
};

/// Resample then centre-crop every member volume of a case.
inline PatientCase preprocess_case(const PatientCase& in, const PreprocessConfig& cfg) {
  PatientCase out;
  out.id = in.id;
  out.has_cspca = in.has_cspca;
  auto image = [&](const Volume3& v) { return center_crop(resample(v, cfg.target_spacing), cfg.crop_x_mm, cfg.crop_y_mm); };
  auto labels = [&](const Volume3& v) {
    return center_crop(resample_labels(v, cfg.target_spacing), cfg.crop_x_mm, cfg.crop_y_mm);
  };
  for (std::size_t c = 0; c < 3; ++c) out.channels[c] = image(in.channels[c]);
  out.lesion_mask = labels(in.lesion_mask);
  if (in.zonal_gt) out.zonal_gt = labels(*in.zonal_gt);
  out.has_cspca = std::ranges::any_of(out.lesion_mask.voxels(), [](float v) { return v != 0.0f; });
  return out;
}

// Case manifest: {"cases":[{"id":..., "has_cspca":..., "channels":{"t2w":stem,...}, "lesion_mask":stem,
// "zonal_gt":stem}]} with stems relative to the manifest's directory.

inline void write_cases(std::span<const PatientCase> cases, const std::filesystem::path& dir,
                        const std::string& manifest_name = "cases.json") {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& c : cases) {
    nlohmann::ordered_json e;
    e["id"] = c.id;
    e["has_cspca"] = c.has_cspca;
    nlohmann::ordered_json ch;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string stem = c.id + "." + kChannelNames[i];
      write_volume(c.channels[i], dir / stem);
      ch[kChannelNames[i]] = stem;
    }
    e["channels"] = ch;
    write_volume(c.lesion_mask, dir / (c.id + ".lesion"));
    e["lesion_mask"] = c.id + ".lesion";
    if (c.zonal_gt) {
      write_volume(*c.zonal_gt, dir / (c.id + ".zones"));
      e["zonal_gt"] = c.id + ".zones";
    }
    list.push_back(e);
  }
  nlohmann::ordered_json m;
  m["cases"] = list;
  detail::write_text(dir / manifest_name, m.dump(2) + "\n");
}

inline std::vector<PatientCase> read_cases(const std::filesystem::path& manifest) {
  const auto dir = manifest.parent_path();
  const auto m = detail::read_json(manifest);
  if (!m.contains("cases") || !m["cases"].is_array()) throw ParseError("cases", "manifest lacks a cases array");
  std::vector<PatientCase> out;
  for (const auto& e : m["cases"]) {
    PatientCase c;
    try {
      c.id = e.at("id").get<std::string>();
      c.has_cspca = e.at("has_cspca").get<bool>();
      for (std::size_t i = 0; i < 3; ++i)
        c.channels[i] = read_volume(dir / e.at("channels").at(kChannelNames[i]).get<std::string>());
      c.lesion_mask = read_volume(dir / e.at("lesion_mask").get<std::string>());
      if (e.contains("zonal_gt")) c.zonal_gt = read_volume(dir / e["zonal_gt"].get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("cases", ex.what());
    }
    c.validate();
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stratified split

struct SplitRatios {
  unsigned train = 3, val = 1, test = 1;
};

/// Largest-remainder apportionment of `n` units over `weights`; equal remainders favour earlier entries.
inline std::array<std::size_t, 3> apportion(std::size_t n, const std::array<unsigned, 3>& weights) {
  const std::uint64_t total = std::uint64_t{weights[0]} + weights[1] + weights[2];
  std::array<std::size_t, 3> out{};
  std::array<std::uint64_t, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::uint64_t num = std::uint64_t{n} * weights[i];
    out[i] = static_cast<std::size_t>(num / total);
    rem[i] = num % total;
    assigned += out[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[order[k]];
  return out;
}

/// Per-set case counts: totals and positives are each apportioned by largest remainder,
/// negatives fill the rest of every set.
struct SplitPlan {
  std::array<std::size_t, 3> total{};
  std::array<std::size_t, 3> positive{};
  std::array<std::size_t, 3> negative() const {
    return {total[0] - positive[0], total[1] - positive[1], total[2] - positive[2]};
  }
};

inline SplitPlan plan_split(std::size_t n_cases, std::size_t n_positive, const SplitRatios& r) {
  if (r.train == 0 || r.val == 0 || r.test == 0) throw ConfigError("split ratios must be strictly positive");
  const std::array<unsigned, 3> w{r.train, r.val, r.test};
  SplitPlan plan{apportion(n_cases, w), apportion(n_positive, w)};
  auto neg = [&](std::size_t i) {
    return static_cast<std::int64_t>(plan.total[i]) - static_cast<std::int64_t>(plan.positive[i]);
  };
  // Independent roundings can ask a set for more positives than it has room for (tiny cohorts);
  // move the surplus positive to the set with the most negative slack.
  for (std::size_t i = 0; i < 3; ++i)
    while (neg(i) < 0) {
      std::size_t best = 3;
      for (std::size_t j = 0; j < 3; ++j)
        if (j != i && neg(j) > 0 && (best == 3 || neg(j) > neg(best))) best = j;
      if (best == 3) break;
      --plan.positive[i];
      ++plan.positive[best];
    }
  return plan;
}

struct Split {
  std::vector<PatientCase> train, val, test;
};

/// Stratified seeded split; within each output set the input order is preserved.
template <class Case>
std::array<std::vector<std::size_t>, 3> stratified_split_indices(std::span<const Case> cases, const SplitRatios& r,
                                                                 std::uint64_t seed) {
  if (cases.empty()) throw ConfigError("stratified_split: no cases");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < cases.size(); ++i) (cases[i].has_cspca ? pos : neg).push_back(i);
  const auto plan = plan_split(cases.size(), pos.size(), r);
  Rng rng_pos(derive_seed(seed, {0x5117, 1})), rng_neg(derive_seed(seed, {0x5117, 0}));
  rng_pos.shuffle(pos);
  rng_neg.shuffle(neg);
  std::array<std::vector<std::size_t>, 3> out;
  const auto negc = plan.negative();
  std::size_t ip = 0, in = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < plan.positive[s]; ++k) out[s].push_back(pos[ip++]);
    for (std::size_t k = 0; k < negc[s]; ++k) out[s].push_back(neg[in++]);
    std::ranges::sort(out[s]);
  }
  return out;
}

inline Split stratified_split(std::span<const PatientCase> cases, const SplitRatios& r, std::uint64_t seed) {
  const auto idx = stratified_split_indices(cases, r, seed);
  Split s;
  std::vector<PatientCase>* sets[3] = {&s.train, &s.val, &s.test};
  for (std::size_t k = 0; k < 3; ++k)
    for (auto i : idx[k]) sets[k]->push_back(cases[i]);
  return s;
}

}  // namespace cspca
