// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cspca/autodiff.hpp"
#include "cspca/volume.hpp"

namespace cspca {

using ad::Extent;
using ad::Shape;
using ad::Tensor;
using ad::Triple;

enum class FusionMode { none, early, late };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::none: return "none";
    case FusionMode::early: return "early";
    case FusionMode::late: return "late";
  }
  return "none";
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "early") return FusionMode::early;
  if (s == "late") return FusionMode::late;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

struct UNet2DConfig {
  std::size_t image_channels = 3;
  std::size_t zonal_channels = 2;  ///< P(TZ), P(PZ)
  FusionMode fusion = FusionMode::none;
  std::size_t depth = 3;
  std::size_t base_filters = 8;
  std::size_t out_classes = 2;  ///< background, csPCa

  std::size_t input_channels() const {
    return image_channels + (fusion == FusionMode::early ? zonal_channels : 0);
  }
  std::size_t late_channels() const { return fusion == FusionMode::late ? zonal_channels : 0; }
};

/// Anisotropic 3D segmenter: 3x3x1 kernels and 2x2x1 pooling, 3x3x3 at the bottleneck.
struct UNet3DConfig {
  std::size_t in_channels = 1;
  std::size_t depth = 2;
  std::size_t base_filters = 8;
  std::size_t out_classes = 3;  ///< background, TZ, PZ
};

enum class LayerKind { conv, relu, maxpool, upsample, concat, softmax };

inline const char* to_string(LayerKind k) {
  constexpr const char* names[] = {"conv", "relu", "maxpool", "upsample", "concat", "softmax"};
  return names[static_cast<int>(k)];
}

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  Triple kernel{1, 1, 1};
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Triple factor{1, 1, 1};
};

/// Encoder/decoder layout shared by both networks.
struct UNetTopology {
  std::size_t in_channels = 3;
  std::size_t base_filters = 8;
  std::size_t depth = 3;
  std::size_t out_classes = 2;
  std::size_t late_channels = 0;  ///< extra channels joined to the last feature map before the 1x1 head
  Triple level_kernel{3, 3, 1};
  Triple bottleneck_kernel{3, 3, 1};
  Triple pool{2, 2, 1};

  std::size_t filters(std::size_t level) const { return base_filters << level; }
};

inline UNetTopology topology_of(const UNet2DConfig& c) {
  if (c.image_channels == 0 || c.depth == 0 || c.base_filters == 0 || c.out_classes < 2)
    throw ConfigError("invalid 2D UNet configuration");
  return UNetTopology{c.input_channels(), c.base_filters, c.depth, c.out_classes, c.late_channels(),
                      {3, 3, 1},          {3, 3, 1},      {2, 2, 1}};
}

inline UNetTopology topology_of(const UNet3DConfig& c) {
  if (c.in_channels == 0 || c.depth == 0 || c.base_filters == 0 || c.out_classes < 2)
    throw ConfigError("invalid 3D UNet configuration");
  return UNetTopology{c.in_channels, c.base_filters, c.depth, c.out_classes, 0, {3, 3, 1}, {3, 3, 3}, {2, 2, 1}};
}

template <class T>
struct ConvLayer {
  LayerSpec spec;
  Tensor<T> weight;  ///< {out, in, kz, ky, kx}
  Tensor<T> bias;    ///< {out}
};

enum class NetworkKind { unet2d, unet3d };

/// A UNet with its parameters. Copies are deep.
template <class T>
class Network {
 public:
  Network() = default;

  Network(NetworkKind kind, UNetTopology topo, std::uint64_t seed) : kind_(kind), topo_(topo), seed_(seed) {
    build();
  }

  Network(const Network& o) : kind_(o.kind_), topo_(o.topo_), seed_(o.seed_), cfg2d_(o.cfg2d_), cfg3d_(o.cfg3d_), layers_(o.layers_) {
    copy_convs(o);
  }
  Network& operator=(const Network& o) {
    if (this != &o) {
      kind_ = o.kind_;
      topo_ = o.topo_;
      seed_ = o.seed_;
      cfg2d_ = o.cfg2d_;
      cfg3d_ = o.cfg3d_;
      layers_ = o.layers_;
      copy_convs(o);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  NetworkKind kind() const { return kind_; }
  const UNetTopology& topology() const { return topo_; }
  std::uint64_t seed() const { return seed_; }
  const std::optional<UNet2DConfig>& config2d() const { return cfg2d_; }
  const std::optional<UNet3DConfig>& config3d() const { return cfg3d_; }
  void set_config(const UNet2DConfig& c) { cfg2d_ = c; }
  void set_config(const UNet3DConfig& c) { cfg3d_ = c; }

  /// Full ordered layer graph, parameterless layers included.
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::vector<ConvLayer<T>>& convs() { return convs_; }
  const std::vector<ConvLayer<T>>& convs() const { return convs_; }

  ConvLayer<T>& conv(const std::string& name) {
    for (auto& c : convs_)
      if (c.spec.name == name) return c;
    throw ConfigError("network has no layer '" + name + "'");
  }
  const ConvLayer<T>& conv(const std::string& name) const { return const_cast<Network*>(this)->conv(name); }
  const ConvLayer<T>& first_conv() const { return convs_.front(); }
  const ConvLayer<T>& head() const { return convs_.back(); }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> p;
    for (const auto& c : convs_) {
      p.push_back(c.weight);
      p.push_back(c.bias);
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs_) n += c.weight.size() + c.bias.size();
    return n;
  }

  void zero_grad() {
    for (auto& c : convs_) {
      c.weight.zero_grad();
      c.bias.zero_grad();
    }
  }

  /// Spatial period the input extent must be a multiple of.
  Triple pooling_period() const {
    Triple p{1, 1, 1};
    for (std::size_t l = 0; l < topo_.depth; ++l) {
      p.x *= topo_.pool.x;
      p.y *= topo_.pool.y;
      p.z *= topo_.pool.z;
    }
    return p;
  }

  void check_input_extent(const Extent& e) const {
    const auto p = pooling_period();
    if (e.nx % p.x || e.ny % p.y || e.nz % p.z)
      throw ShapeError("input", "extent must be a multiple of the pooling period {" + std::to_string(p.x) + "," +
                                    std::to_string(p.y) + "," + std::to_string(p.z) + "}");
  }

  /// Pre-softmax class scores. `late` joins the last decoder feature map before the 1x1 head.
  Tensor<T> logits(const Tensor<T>& input, const Tensor<T>* late = nullptr) const {
    if (input.channels() != topo_.in_channels)
      throw ShapeError("channels", "network expects " + std::to_string(topo_.in_channels) + " input channels, got " +
                                       std::to_string(input.channels()));
    if ((late != nullptr) != (topo_.late_channels > 0))
      throw ShapeError("late_fusion", late ? "network has no late-fusion channels" : "late-fusion input missing");
    if (late && late->channels() != topo_.late_channels)
      throw ShapeError("late_fusion", "expected " + std::to_string(topo_.late_channels) + " channels");
    check_input_extent(input.extent());

    std::size_t ci = 0;
    auto apply = [&](const Tensor<T>& x) {
      const auto& c = convs_[ci++];
      return ad::relu(ad::conv(x, c.weight, c.bias, c.spec.kernel));
    };
    std::vector<Tensor<T>> skips;
    Tensor<T> x = input;
    for (std::size_t l = 0; l < topo_.depth; ++l) {
      x = apply(apply(x));
      skips.push_back(x);
      x = ad::maxpool(x, topo_.pool);
    }
    x = apply(apply(x));
    for (std::size_t l = topo_.depth; l-- > 0;) {
      x = apply(ad::upsample(x, topo_.pool));
      x = ad::concat_channels(x, skips[l]);
      x = apply(apply(x));
    }
    if (late) x = ad::concat_channels(x, *late);
    const auto& h = convs_[ci];
    return ad::conv(x, h.weight, h.bias, h.spec.kernel);
  }

  Tensor<T> forward(const Tensor<T>& input, const Tensor<T>* late = nullptr) const {
    return ad::softmax_channels(logits(input, late));
  }

  /// Copy of the parameter values in layer order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> s;
    for (const auto& p : parameters()) s.emplace_back(p.values().begin(), p.values().end());
    return s;
  }

  void restore(const std::vector<std::vector<T>>& s) {
    auto params = parameters();
    if (s.size() != params.size()) throw ShapeError("snapshot", "parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (s[i].size() != params[i].size()) throw ShapeError(params[i].name(), "parameter size mismatch");
      std::ranges::copy(s[i], params[i].mutable_values().begin());
    }
  }

  template <class U>
  Network<U> cast() const {
    Network<U> out;
    out.assign_structure(kind_, topo_, seed_, cfg2d_, cfg3d_, layers_);
    for (const auto& c : convs_) {
      ConvLayer<U> u;
      u.spec = c.spec;
      u.weight = Tensor<U>(c.weight.shape(), std::vector<U>(c.weight.values().begin(), c.weight.values().end()), true);
      u.weight.named(c.weight.name());
      u.bias = Tensor<U>(c.bias.shape(), std::vector<U>(c.bias.values().begin(), c.bias.values().end()), true);
      u.bias.named(c.bias.name());
      out.convs().push_back(std::move(u));
    }
    return out;
  }

  void assign_structure(NetworkKind kind, UNetTopology topo, std::uint64_t seed, std::optional<UNet2DConfig> c2,
                        std::optional<UNet3DConfig> c3, std::vector<LayerSpec> layers) {
    kind_ = kind;
    topo_ = topo;
    seed_ = seed;
    cfg2d_ = c2;
    cfg3d_ = c3;
    layers_ = std::move(layers);
    convs_.clear();
  }

 private:
  void copy_convs(const Network& o) {
    convs_.clear();
    for (const auto& c : o.convs_) {
      ConvLayer<T> d{c.spec, c.weight.detach(), c.bias.detach()};
      d.weight.set_requires_grad(true);
      d.bias.set_requires_grad(true);
      d.weight.named(c.weight.name());
      d.bias.named(c.bias.name());
      convs_.push_back(std::move(d));
    }
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out, Triple kernel) {
    LayerSpec s{LayerKind::conv, name, kernel, in, out, {1, 1, 1}};
    layers_.push_back(s);
    const std::size_t fan_in = in * kernel.volume();
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed_, {convs_.size()}));
    std::vector<T> w(out * fan_in);
    for (auto& v : w) v = static_cast<T>(rng.normal() * stddev);
    ConvLayer<T> c{s, Tensor<T>({out, in, kernel.z, kernel.y, kernel.x}, std::move(w), true),
                   Tensor<T>::zeros({out}, true)};
    c.weight.named(name + ".weight");
    c.bias.named(name + ".bias");
    convs_.push_back(std::move(c));
  }

  void add(LayerKind kind, const std::string& name, std::size_t channels, Triple factor = {1, 1, 1}) {
    layers_.push_back(LayerSpec{kind, name, {1, 1, 1}, channels, channels, factor});
  }

  void build() {
    const auto& t = topo_;
    std::size_t ch = t.in_channels;
    for (std::size_t l = 0; l < t.depth; ++l) {
      const std::string p = "enc" + std::to_string(l);
      add_conv(p + ".conv1", ch, t.filters(l), t.level_kernel);
      add(LayerKind::relu, p + ".relu1", t.filters(l));
      add_conv(p + ".conv2", t.filters(l), t.filters(l), t.level_kernel);
      add(LayerKind::relu, p + ".relu2", t.filters(l));
      add(LayerKind::maxpool, p + ".pool", t.filters(l), t.pool);
      ch = t.filters(l);
    }
    add_conv("bottleneck.conv1", ch, t.filters(t.depth), t.bottleneck_kernel);
    add(LayerKind::relu, "bottleneck.relu1", t.filters(t.depth));
    add_conv("bottleneck.conv2", t.filters(t.depth), t.filters(t.depth), t.bottleneck_kernel);
    add(LayerKind::relu, "bottleneck.relu2", t.filters(t.depth));
    for (std::size_t l = t.depth; l-- > 0;) {
      const std::string p = "dec" + std::to_string(l);
      add(LayerKind::upsample, p + ".upsample", t.filters(l + 1), t.pool);
      add_conv(p + ".upconv", t.filters(l + 1), t.filters(l), t.level_kernel);
      add(LayerKind::relu, p + ".uprelu", t.filters(l));
      layers_.push_back(LayerSpec{LayerKind::concat, p + ".skip", {1, 1, 1}, t.filters(l), 2 * t.filters(l), {1, 1, 1}});
      add_conv(p + ".conv1", 2 * t.filters(l), t.filters(l), t.level_kernel);
      add(LayerKind::relu, p + ".relu1", t.filters(l));
      add_conv(p + ".conv2", t.filters(l), t.filters(l), t.level_kernel);
      add(LayerKind::relu, p + ".relu2", t.filters(l));
    }
    if (t.late_channels)
      layers_.push_back(LayerSpec{LayerKind::concat, "late_fusion", {1, 1, 1}, t.filters(0),
                                  t.filters(0) + t.late_channels, {1, 1, 1}});
    add_conv("head", t.filters(0) + t.late_channels, t.out_classes, {1, 1, 1});
    add(LayerKind::softmax, "softmax", t.out_classes);
  }

  NetworkKind kind_ = NetworkKind::unet2d;
  UNetTopology topo_{};
  std::uint64_t seed_ = 0;
  std::optional<UNet2DConfig> cfg2d_;
  std::optional<UNet3DConfig> cfg3d_;
  std::vector<LayerSpec> layers_;
  std::vector<ConvLayer<T>> convs_;
};

template <class T = float>
Network<T> build_unet2d(const UNet2DConfig& cfg, std::uint64_t seed) {
  Network<T> net(NetworkKind::unet2d, topology_of(cfg), seed);
  net.set_config(cfg);
  return net;
}

template <class T = float>
Network<T> build_unet3d_aniso(const UNet3DConfig& cfg, std::uint64_t seed) {
  Network<T> net(NetworkKind::unet3d, topology_of(cfg), seed);
  net.set_config(cfg);
  return net;
}

/// Fusion network carrying a baseline's weights, with every weight reading a zonal channel zeroed.
/// Its output equals the baseline's on any input.
template <class T>
Network<T> graft_baseline(const Network<T>& baseline, FusionMode fusion, std::uint64_t seed = 0) {
  if (!baseline.config2d() || baseline.config2d()->fusion != FusionMode::none)
    throw ConfigError("graft_baseline needs a 2D baseline network");
  auto cfg = *baseline.config2d();
  cfg.fusion = fusion;
  auto out = build_unet2d<T>(cfg, seed);
  const std::size_t first = 0, last = out.convs().size() - 1;
  for (std::size_t i = 0; i < out.convs().size(); ++i) {
    auto& dst = out.convs()[i];
    const auto& src = baseline.convs()[i];
    std::ranges::copy(src.bias.values(), dst.bias.mutable_values().begin());
    const bool widened = (fusion == FusionMode::early && i == first) || (fusion == FusionMode::late && i == last);
    if (!widened) {
      std::ranges::copy(src.weight.values(), dst.weight.mutable_values().begin());
      continue;
    }
    const std::size_t cout = dst.spec.out_channels, kvol = dst.spec.kernel.volume();
    const std::size_t cin_src = src.spec.in_channels, cin_dst = dst.spec.in_channels;
    auto w = dst.weight.mutable_values();
    std::ranges::fill(w, T(0));
    const auto sw = src.weight.values();
    for (std::size_t o = 0; o < cout; ++o)
      std::copy_n(sw.begin() + static_cast<std::ptrdiff_t>(o * cin_src * kvol), cin_src * kvol,
                  w.begin() + static_cast<std::ptrdiff_t>(o * cin_dst * kvol));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detector forward

/// Softmax output of the 2D detector for a stack of slices.
/// image: {C_img, B, ny, nx}; zonal: {C_zonal, B, ny, nx}, required iff the net fuses zonal maps.
template <class T>
Tensor<T> detector_probabilities(const Network<T>& net, const Tensor<T>& image, const Tensor<T>* zonal) {
  if (!net.config2d()) throw ConfigError("detector_probabilities needs a 2D detector network");
  const auto& cfg = *net.config2d();
  if ((zonal != nullptr) != (cfg.fusion != FusionMode::none))
    throw ConfigError(zonal ? "zonal input given to a network without fusion" : "fusion network needs a zonal input");
  if (zonal) {
    const auto& a = image.shape();
    const auto& b = zonal->shape();
    if (a.size() != b.size() || !std::equal(a.begin() + 1, a.end(), b.begin() + 1))
      throw ShapeError("zonal", "zonal map " + ad::shape_string(b) + " does not match image " + ad::shape_string(a));
  }
  switch (cfg.fusion) {
    case FusionMode::none: return net.forward(image);
    case FusionMode::early: return net.forward(ad::concat_channels(image, *zonal));
    case FusionMode::late: return net.forward(image, zonal);
  }
  return {};
}

/// csPCa probability map (channel 1 of the softmax), same spatial shape as the input.
template <class T>
std::vector<T> forward_detector(const Network<T>& net, const Tensor<T>& image, const Tensor<T>* zonal) {
  ad::NoGradGuard no_grad;
  const auto p = detector_probabilities(net, image, zonal);
  const std::size_t n = p.extent().size();
  return {p.values().begin() + static_cast<std::ptrdiff_t>(n), p.values().begin() + static_cast<std::ptrdiff_t>(2 * n)};
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + <dir>/<layer>.<weight|bias>.f32

inline nlohmann::ordered_json to_json(const UNet2DConfig& c) {
  nlohmann::ordered_json j;
  j["image_channels"] = c.image_channels;
  j["zonal_channels"] = c.zonal_channels;
  j["fusion_mode"] = to_string(c.fusion);
  j["depth"] = c.depth;
  j["base_filters"] = c.base_filters;
  j["out_classes"] = c.out_classes;
  return j;
}

inline nlohmann::ordered_json to_json(const UNet3DConfig& c) {
  nlohmann::ordered_json j;
  j["in_channels"] = c.in_channels;
  j["depth"] = c.depth;
  j["base_filters"] = c.base_filters;
  j["out_classes"] = c.out_classes;
  return j;
}

template <class T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& dir, std::size_t epoch) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["kind"] = net.kind() == NetworkKind::unet2d ? "unet2d" : "unet3d";
  if (net.config2d()) m["config"] = to_json(*net.config2d());
  if (net.config3d()) m["config"] = to_json(*net.config3d());
  m["seed"] = net.seed();
  m["epoch"] = epoch;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& c : net.convs()) {
    nlohmann::ordered_json l;
    l["name"] = c.spec.name;
    l["kernel"] = {c.spec.kernel.x, c.spec.kernel.y, c.spec.kernel.z};
    l["in_channels"] = c.spec.in_channels;
    l["out_channels"] = c.spec.out_channels;
    for (const auto* p : {&c.weight, &c.bias}) {
      const std::string key = p == &c.weight ? "weight" : "bias";
      const std::string stem = c.spec.name + "." + key;
      std::vector<float> blob(p->values().begin(), p->values().end());
      detail::write_bytes(dir / (stem + ".f32"), blob.data(), blob.size() * sizeof(float));
      l[key] = {{"shape", p->shape()}, {"file", stem}};
    }
    layers.push_back(l);
  }
  m["layers"] = layers;
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

struct LoadedCheckpoint {
  Network<float> net;
  std::size_t epoch = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto m = detail::read_json(dir / "manifest.json");
  LoadedCheckpoint out;
  try {
    const auto kind = m.at("kind").get<std::string>();
    const auto seed = m.at("seed").get<std::uint64_t>();
    const auto& c = m.at("config");
    if (kind == "unet2d") {
      UNet2DConfig cfg;
      cfg.image_channels = c.at("image_channels").get<std::size_t>();
      cfg.zonal_channels = c.at("zonal_channels").get<std::size_t>();
      cfg.fusion = fusion_mode_from_string(c.at("fusion_mode").get<std::string>());
      cfg.depth = c.at("depth").get<std::size_t>();
      cfg.base_filters = c.at("base_filters").get<std::size_t>();
      cfg.out_classes = c.at("out_classes").get<std::size_t>();
      out.net = build_unet2d<float>(cfg, seed);
    } else if (kind == "unet3d") {
      UNet3DConfig cfg;
      cfg.in_channels = c.at("in_channels").get<std::size_t>();
      cfg.depth = c.at("depth").get<std::size_t>();
      cfg.base_filters = c.at("base_filters").get<std::size_t>();
      cfg.out_classes = c.at("out_classes").get<std::size_t>();
      out.net = build_unet3d_aniso<float>(cfg, seed);
    } else {
      throw ParseError("kind", "unknown network kind '" + kind + "'");
    }
    out.epoch = m.at("epoch").get<std::size_t>();
    const auto& layers = m.at("layers");
    if (layers.size() != out.net.convs().size()) throw ParseError("layers", "layer count does not match config");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& conv = out.net.convs()[i];
      if (layers[i].at("name").get<std::string>() != conv.spec.name)
        throw ParseError("layers", "unexpected layer " + layers[i]["name"].get<std::string>());
      for (auto* p : {&conv.weight, &conv.bias}) {
        const auto& entry = layers[i].at(p == &conv.weight ? "weight" : "bias");
        if (entry.at("shape").get<Shape>() != p->shape()) throw ParseError(p->name(), "shape mismatch");
        const auto bytes = detail::read_bytes(dir / (entry.at("file").get<std::string>() + ".f32"));
        if (bytes.size() != p->size() * sizeof(float)) throw ParseError(p->name(), "blob size mismatch");
        std::memcpy(p->mutable_values().data(), bytes.data(), bytes.size());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest", e.what());
  }
  return out;
}

}  // namespace cspca
