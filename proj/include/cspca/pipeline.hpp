// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cspca/detector.hpp"
#include "cspca/froc.hpp"
#include "cspca/nets.hpp"
#include "cspca/phantom.hpp"
#include "cspca/training.hpp"
#include "cspca/volume.hpp"
#include "cspca/zonal.hpp"

namespace cspca {

/// Failure inside a pipeline stage, tagged with the stage and (when known) the case.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string case_id, const std::string& what)
      : Error(fmt::format("stage '{}'{}: {}", stage, case_id.empty() ? "" : " (case " + case_id + ")", what)),
        stage_(std::move(stage)),
        case_id_(std::move(case_id)) {}
  const std::string& stage() const noexcept { return stage_; }
  const std::string& case_id() const noexcept { return case_id_; }

 private:
  std::string stage_, case_id_;
};

// ---------------------------------------------------------------------------
// Experiments

enum class ZonalInput { absent, probabilistic, deterministic };

inline std::string to_string(ZonalInput z) {
  switch (z) {
    case ZonalInput::absent: return "absent";
    case ZonalInput::probabilistic: return "probabilistic";
    case ZonalInput::deterministic: return "deterministic";
  }
  return "absent";
}

struct ExperimentSpec {
  std::string name;
  std::string label;  ///< row label of the results table
  FusionMode fusion = FusionMode::none;
  ZonalInput zonal = ZonalInput::absent;

  void validate() const {
    if ((fusion == FusionMode::none) != (zonal == ZonalInput::absent))
      throw ConfigError("experiment " + name + ": fusion none must go with absent zonal input and vice versa");
    if ((name == "baseline") != (zonal == ZonalInput::absent))
      throw ConfigError("experiment " + name + ": only the baseline runs without zonal input");
  }
};

inline const std::vector<ExperimentSpec>& standard_experiments() {
  static const std::vector<ExperimentSpec> specs{
      {"baseline", "Baseline", FusionMode::none, ZonalInput::absent},
      {"early_prob", "Early Fusion - Probabilistic", FusionMode::early, ZonalInput::probabilistic},
      {"late_prob", "Late Fusion - Probabilistic", FusionMode::late, ZonalInput::probabilistic},
      {"early_det", "Early Fusion - Deterministic", FusionMode::early, ZonalInput::deterministic},
      {"late_det", "Late Fusion - Deterministic", FusionMode::late, ZonalInput::deterministic},
  };
  return specs;
}

inline const ExperimentSpec& experiment_by_name(const std::string& name) {
  for (const auto& s : standard_experiments())
    if (s.name == name) return s;
  throw ConfigError("unknown experiment '" + name + "'");
}

// ---------------------------------------------------------------------------
// Configuration

struct ZonalStageConfig {
  std::size_t n_cases = 16;
  UNet3DConfig net{};
  ZonalTrainConfig train{};
};

struct PipelineConfig {
  std::uint64_t seed = 2019;
  PhantomConfig phantom{};
  PreprocessConfig preprocess{};
  SplitRatios split{};
  ZonalStageConfig zonal{};
  UNet2DConfig detector_net{};
  DetectorParams detector{};
  TrainConfig train{};
  std::vector<double> fp_rates{0.5, 1.0, 2.0};
  std::vector<std::string> experiments{"baseline", "early_prob", "late_prob", "early_det", "late_det"};
  bool verbose = false;

  /// Per-stage seeds derived from the master seed.
  std::uint64_t phantom_seed() const { return derive_seed(seed, {1}); }
  std::uint64_t split_seed() const { return derive_seed(seed, {2}); }
  std::uint64_t zonal_cohort_seed() const { return derive_seed(seed, {3}); }
  std::uint64_t zonal_train_seed() const { return derive_seed(seed, {4}); }
  std::uint64_t detector_seed() const { return derive_seed(seed, {5}); }

  PhantomConfig detector_cohort() const {
    auto p = phantom;
    p.seed = phantom_seed();
    p.id_prefix = "case";
    return p;
  }
  PhantomConfig zonal_cohort() const {
    auto p = phantom;
    p.seed = zonal_cohort_seed();
    p.n_cases = zonal.n_cases;
    p.id_prefix = "zonal";
    return p;
  }
  TrainConfig detector_train() const {
    auto t = train;
    t.seed = detector_seed();
    t.selection_points = fp_rates;
    return t;
  }
  ZonalTrainConfig zonal_train() const {
    auto t = zonal.train;
    t.seed = zonal_train_seed();
    return t;
  }

  void validate() const {
    phantom.validate();
    detector.validate();
    detector_train().validate();
    if (fp_rates.empty()) throw ConfigError("froc.fp_rates must not be empty");
    for (std::size_t i = 0; i < fp_rates.size(); ++i)
      if (!(fp_rates[i] > 0.0) || (i && !(fp_rates[i] > fp_rates[i - 1])))
        throw ConfigError("froc.fp_rates must be positive and strictly increasing");
    if (experiments.empty()) throw ConfigError("no experiments selected");
    for (const auto& e : experiments) experiment_by_name(e).validate();
    if (zonal.n_cases < 1 && needs_zonal()) throw ConfigError("zonal.n_cases must be at least 1");
    for (double s : {preprocess.target_spacing.sx, preprocess.target_spacing.sy, preprocess.target_spacing.sz})
      if (!(s > 0.0)) throw ConfigError("preprocess.target_spacing_mm must be positive");
    if (!(preprocess.crop_x_mm > 0.0 && preprocess.crop_y_mm > 0.0)) throw ConfigError("preprocess.crop_mm must be positive");
    if (split.train == 0 || split.val == 0 || split.test == 0) throw ConfigError("split ratios must be positive");
  }

  bool needs_zonal() const {
    return std::ranges::any_of(experiments, [](const std::string& e) { return experiment_by_name(e).zonal != ZonalInput::absent; });
  }
};

namespace detail {

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

template <class V, std::size_t N>
void read_array(const nlohmann::json& j, const char* key, std::array<V, N>& out, const std::string& section) {
  if (!j.contains(key)) return;
  std::vector<V> v;
  read_opt(j, key, v, section);
  if (v.size() != N) throw ConfigError(fmt::format("{}.{} needs {} values", section, key, N));
  std::copy(v.begin(), v.end(), out.begin());
}

inline const nlohmann::json& section(const nlohmann::json& root, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!root.contains(name)) return empty;
  if (!root.at(name).is_object()) throw ConfigError(std::string("section '") + name + "' must be an object");
  return root.at(name);
}

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  for (const auto& [k, _] : j.items())
    if (std::ranges::none_of(allowed, [&](const char* a) { return k == a; }))
      throw ConfigError("unknown configuration key '" + where + "." + k + "'");
}

}  // namespace detail

/// Builds a configuration from JSON; absent keys keep their defaults.
inline PipelineConfig config_from_json(const nlohmann::json& root) {
  using detail::read_array;
  using detail::read_opt;
  if (!root.is_object()) throw ConfigError("configuration must be a JSON object");
  static const std::set<std::string> known{"seed",  "phantom", "preprocess", "split",       "zonal",
                                           "detector", "train", "froc",       "experiments", "verbose"};
  for (const auto& [k, _] : root.items())
    if (!known.contains(k)) throw ConfigError("unknown configuration key '" + k + "'");
  PipelineConfig c;
  read_opt(root, "seed", c.seed, "root");
  read_opt(root, "verbose", c.verbose, "root");
  read_opt(root, "experiments", c.experiments, "root");

  {
    const auto& j = detail::section(root, "phantom");
    detail::check_keys(j, "phantom", {"n_cases", "dims", "spacing_mm", "prob_case_positive", "pz_lesion_prob", "lesions_per_positive", "lesion_radius_mm", "min_gap_mm", "contrast", "base", "noise_sigma", "smooth_field_amplitude", "max_pz_mimics", "mimic_radius_mm", "mimic_t2w_contrast"});
    auto& p = c.phantom;
    read_opt(j, "n_cases", p.n_cases, "phantom");
    std::array<std::size_t, 3> dims{p.dims.nx, p.dims.ny, p.dims.nz};
    read_array(j, "dims", dims, "phantom");
    p.dims = {dims[0], dims[1], dims[2]};
    std::array<double, 3> sp{p.spacing.sx, p.spacing.sy, p.spacing.sz};
    read_array(j, "spacing_mm", sp, "phantom");
    p.spacing = {sp[0], sp[1], sp[2]};
    read_opt(j, "prob_case_positive", p.prob_case_positive, "phantom");
    read_opt(j, "pz_lesion_prob", p.pz_lesion_prob, "phantom");
    std::array<int, 2> lp{p.min_lesions, p.max_lesions};
    read_array(j, "lesions_per_positive", lp, "phantom");
    p.min_lesions = lp[0];
    p.max_lesions = lp[1];
    std::array<double, 2> lr{p.lesion_radius_min_mm, p.lesion_radius_max_mm};
    read_array(j, "lesion_radius_mm", lr, "phantom");
    p.lesion_radius_min_mm = lr[0];
    p.lesion_radius_max_mm = lr[1];
    if (j.contains("contrast")) {
      detail::check_keys(j.at("contrast"), "phantom.contrast", {"tz", "pz"});
      read_array(j.at("contrast"), "tz", p.contrast.tz, "phantom.contrast");
      read_array(j.at("contrast"), "pz", p.contrast.pz, "phantom.contrast");
    }
    if (j.contains("base")) {
      detail::check_keys(j.at("base"), "phantom.base", {"background", "tz", "pz"});
      read_array(j.at("base"), "background", p.base.background, "phantom.base");
      read_array(j.at("base"), "tz", p.base.tz, "phantom.base");
      read_array(j.at("base"), "pz", p.base.pz, "phantom.base");
    }
    read_opt(j, "noise_sigma", p.noise_sigma, "phantom");
    read_opt(j, "smooth_field_amplitude", p.smooth_field_amplitude, "phantom");
    read_opt(j, "min_gap_mm", p.min_gap_mm, "phantom");
    read_opt(j, "max_pz_mimics", p.max_pz_mimics, "phantom");
    std::array<double, 2> mr{p.mimic_radius_min_mm, p.mimic_radius_max_mm};
    read_array(j, "mimic_radius_mm", mr, "phantom");
    p.mimic_radius_min_mm = mr[0];
    p.mimic_radius_max_mm = mr[1];
    read_opt(j, "mimic_t2w_contrast", p.mimic_t2w_contrast, "phantom");
  }
  {
    const auto& j = detail::section(root, "preprocess");
    detail::check_keys(j, "preprocess", {"target_spacing_mm", "crop_mm"});
    std::array<double, 3> ts{c.preprocess.target_spacing.sx, c.preprocess.target_spacing.sy,
                             c.preprocess.target_spacing.sz};
    read_array(j, "target_spacing_mm", ts, "preprocess");
    c.preprocess.target_spacing = {ts[0], ts[1], ts[2]};
    std::array<double, 2> crop{c.preprocess.crop_x_mm, c.preprocess.crop_y_mm};
    read_array(j, "crop_mm", crop, "preprocess");
    c.preprocess.crop_x_mm = crop[0];
    c.preprocess.crop_y_mm = crop[1];
  }
  {
    const auto& j = detail::section(root, "split");
    detail::check_keys(j, "split", {"ratios"});
    std::array<unsigned, 3> r{c.split.train, c.split.val, c.split.test};
    read_array(j, "ratios", r, "split");
    c.split = {r[0], r[1], r[2]};
  }
  {
    const auto& j = detail::section(root, "zonal");
    detail::check_keys(j, "zonal", {"n_cases", "depth", "base_filters", "epochs", "learning_rate", "mirror"});
    read_opt(j, "n_cases", c.zonal.n_cases, "zonal");
    read_opt(j, "depth", c.zonal.net.depth, "zonal");
    read_opt(j, "base_filters", c.zonal.net.base_filters, "zonal");
    read_opt(j, "epochs", c.zonal.train.epochs, "zonal");
    read_opt(j, "learning_rate", c.zonal.train.adam.learning_rate, "zonal");
    read_opt(j, "mirror", c.zonal.train.mirror, "zonal");
  }
  {
    const auto& j = detail::section(root, "detector");
    detail::check_keys(j, "detector", {"depth", "base_filters", "t_low", "t_high", "min_voxels", "connectivity"});
    read_opt(j, "depth", c.detector_net.depth, "detector");
    read_opt(j, "base_filters", c.detector_net.base_filters, "detector");
    read_opt(j, "t_low", c.detector.t_low, "detector");
    read_opt(j, "t_high", c.detector.t_high, "detector");
    read_opt(j, "min_voxels", c.detector.min_voxels, "detector");
    int conn = static_cast<int>(c.detector.connectivity);
    read_opt(j, "connectivity", conn, "detector");
    c.detector.connectivity = connectivity_from_int(conn);
  }
  {
    const auto& j = detail::section(root, "train");
    detail::check_keys(j, "train", {"epochs", "learning_rate", "betas", "epsilon", "class_weights", "batch", "eval_every", "augmentation"});
    auto& t = c.train;
    read_opt(j, "epochs", t.epochs, "train");
    read_opt(j, "learning_rate", t.adam.learning_rate, "train");
    std::array<double, 2> betas{t.adam.beta1, t.adam.beta2};
    read_array(j, "betas", betas, "train");
    t.adam.beta1 = betas[0];
    t.adam.beta2 = betas[1];
    read_opt(j, "epsilon", t.adam.epsilon, "train");
    read_array(j, "class_weights", t.class_weights, "train");
    read_opt(j, "batch", t.batch, "train");
    read_opt(j, "eval_every", t.eval_every, "train");
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      detail::check_keys(a, "train.augmentation", {"mirror", "translate", "intensity_scale", "noise", "probability", "max_shift", "scale_range", "noise_sigma"});
      auto& g = t.augmentation;
      read_opt(a, "mirror", g.mirror, "train.augmentation");
      read_opt(a, "translate", g.translate, "train.augmentation");
      read_opt(a, "intensity_scale", g.intensity_scale, "train.augmentation");
      read_opt(a, "noise", g.noise, "train.augmentation");
      read_opt(a, "probability", g.probability, "train.augmentation");
      read_opt(a, "max_shift", g.max_shift, "train.augmentation");
      std::array<double, 2> sr{g.scale_lo, g.scale_hi};
      read_array(a, "scale_range", sr, "train.augmentation");
      g.scale_lo = sr[0];
      g.scale_hi = sr[1];
      read_opt(a, "noise_sigma", g.noise_sigma, "train.augmentation");
    }
  }
  {
    const auto& j = detail::section(root, "froc");
    detail::check_keys(j, "froc", {"fp_rates"});
    read_opt(j, "fp_rates", c.fp_rates, "froc");
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["phantom"] = to_json(c.phantom);
  j["phantom"].erase("seed");
  j["phantom"].erase("id_prefix");
  j["preprocess"] = {{"target_spacing_mm", {c.preprocess.target_spacing.sx, c.preprocess.target_spacing.sy,
                                            c.preprocess.target_spacing.sz}},
                     {"crop_mm", {c.preprocess.crop_x_mm, c.preprocess.crop_y_mm}}};
  j["split"] = {{"ratios", {c.split.train, c.split.val, c.split.test}}};
  j["zonal"] = {{"n_cases", c.zonal.n_cases},
                {"depth", c.zonal.net.depth},
                {"base_filters", c.zonal.net.base_filters},
                {"epochs", c.zonal.train.epochs},
                {"learning_rate", c.zonal.train.adam.learning_rate},
                {"mirror", c.zonal.train.mirror}};
  j["detector"] = {{"depth", c.detector_net.depth},
                   {"base_filters", c.detector_net.base_filters},
                   {"t_low", c.detector.t_low},
                   {"t_high", c.detector.t_high},
                   {"min_voxels", c.detector.min_voxels},
                   {"connectivity", static_cast<int>(c.detector.connectivity)}};
  const auto& t = c.train;
  const auto& g = t.augmentation;
  j["train"] = {{"epochs", t.epochs},
                {"learning_rate", t.adam.learning_rate},
                {"betas", {t.adam.beta1, t.adam.beta2}},
                {"epsilon", t.adam.epsilon},
                {"class_weights", t.class_weights},
                {"batch", t.batch},
                {"eval_every", t.eval_every},
                {"augmentation",
                 {{"mirror", g.mirror},
                  {"translate", g.translate},
                  {"intensity_scale", g.intensity_scale},
                  {"noise", g.noise},
                  {"probability", g.probability},
                  {"max_shift", g.max_shift},
                  {"scale_range", {g.scale_lo, g.scale_hi}},
                  {"noise_sigma", g.noise_sigma}}}};
  j["froc"] = {{"fp_rates", c.fp_rates}};
  j["experiments"] = c.experiments;
  return j;
}

inline PipelineConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {}) {
  nlohmann::json j;
  try {
    j = detail::read_json(path);
  } catch (const Error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  auto c = config_from_json(j);
  if (seed_override) c.seed = *seed_override;
  return c;
}

// ---------------------------------------------------------------------------
// Hashing for the fairness check

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 initialisation failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t n) {
    EVP_DigestUpdate(ctx_, data, n);
    return *this;
  }
  Sha256& update(const std::string& s) { return update(s.data(), s.size()); }
  Sha256& update(const Volume3& v) {
    const auto& d = v.dims();
    update(fmt::format("{}x{}x{}|{:.17g},{:.17g},{:.17g}|", d.nx, d.ny, d.nz, v.spacing().sx, v.spacing().sy,
                       v.spacing().sz));
    return update(v.voxels().data(), v.voxels().size_bytes());
  }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    EVP_DigestFinal_ex(ctx_, md, &n);
    std::string out;
    for (unsigned int i = 0; i < n; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

// ---------------------------------------------------------------------------
// Shared stages

struct PreparedData {
  std::vector<PatientCase> cases;        ///< preprocessed detector cohort
  std::vector<PatientCase> zonal_cases;  ///< preprocessed zonal-training cohort
  std::array<std::vector<std::size_t>, 3> split;  ///< train, val, test indices into `cases`
  nlohmann::ordered_json cohort_manifest;
  nlohmann::ordered_json zonal_manifest;
  std::string input_hash;  ///< preprocessed detector inputs + split
};

struct ZonalStage {
  Network<float> net;
  std::size_t best_epoch = 0;
  std::map<std::string, ZonalMap> probabilistic;  ///< per detector case id
  std::map<std::string, double> dice_tz, dice_pz;
  std::string hash;
};

inline void log_if(const PipelineConfig& c, const std::string& msg) {
  if (c.verbose) fmt::print(stderr, "[cspca] {}\n", msg);
}

inline std::vector<PatientCase> preprocess_all(const std::vector<PatientCase>& in, const PreprocessConfig& cfg) {
  std::vector<PatientCase> out;
  for (const auto& c : in) {
    try {
      out.push_back(preprocess_case(c, cfg));
    } catch (const Error& e) {
      throw StageError("preprocess", c.id, e.what());
    }
  }
  return out;
}

inline std::string split_hash(const std::array<std::vector<std::size_t>, 3>& s, const std::vector<PatientCase>& cases) {
  Sha256 h;
  for (const auto& set : s) {
    for (auto i : set) h.update(cases[i].id + ",");
    h.update("|");
  }
  return h.hex();
}

inline PreparedData prepare_data(const PipelineConfig& cfg) {
  PreparedData d;
  Cohort cohort, zcohort;
  try {
    cohort = generate_cohort(cfg.detector_cohort());
    if (cfg.needs_zonal()) zcohort = generate_cohort(cfg.zonal_cohort());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("phantom", "", e.what());
  }
  d.cohort_manifest = cohort.manifest;
  d.zonal_manifest = zcohort.manifest;
  d.cases = preprocess_all(patients_of(cohort), cfg.preprocess);
  d.zonal_cases = preprocess_all(patients_of(zcohort), cfg.preprocess);
  try {
    d.split = stratified_split_indices(std::span<const PatientCase>(d.cases), cfg.split, cfg.split_seed());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("split", "", e.what());
  }
  Sha256 h;
  for (const auto& c : d.cases) {
    h.update(c.id);
    for (const auto& ch : c.channels) h.update(ch);
    h.update(c.lesion_mask);
  }
  h.update(split_hash(d.split, d.cases));
  d.input_hash = h.hex();
  return d;
}

inline ZonalStage run_zonal_stage(const PipelineConfig& cfg, const PreparedData& d) {
  ZonalStage z;
  ZonalTrainResult r;
  try {
    r = train_zonal(cfg.zonal_train(), cfg.zonal.net, d.zonal_cases);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("train-zones", "", e.what());
  }
  z.net = r.net;
  z.best_epoch = r.best_epoch;
  Sha256 h;
  for (const auto& c : d.cases) {
    try {
      auto zm = predict_zones(z.net, c.channel(Channel::t2w));
      const auto labels = zone_labels(zm);
      if (c.zonal_gt) {
        z.dice_tz[c.id] = dice(mask_of(labels, kTransitionZone), mask_of(*c.zonal_gt, kTransitionZone));
        z.dice_pz[c.id] = dice(mask_of(labels, kPeripheralZone), mask_of(*c.zonal_gt, kPeripheralZone));
      }
      h.update(zm.tz).update(zm.pz);
      z.probabilistic.emplace(c.id, std::move(zm));
    } catch (const Error& e) {
      throw StageError("predict-zones", c.id, e.what());
    }
  }
  z.hash = h.hex();
  return z;
}

inline std::optional<ZonalMap> zonal_for(const ExperimentSpec& spec, const ZonalStage* z, const std::string& id) {
  if (spec.zonal == ZonalInput::absent) return std::nullopt;
  if (!z) throw StageError("fusion", id, "experiment " + spec.name + " needs zonal maps");
  const auto it = z->probabilistic.find(id);
  if (it == z->probabilistic.end()) throw StageError("fusion", id, "no zonal map cached");
  return spec.zonal == ZonalInput::deterministic ? to_deterministic(it->second) : it->second;
}

// ---------------------------------------------------------------------------
// Reports

struct ExperimentReport {
  ExperimentSpec spec;
  bool ok = false;
  std::string error;
  FrocCurve curve;
  std::map<double, double> sens_at;
  double average = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  double wall_seconds = 0.0;
};

/// Deterministic metrics of one experiment (no timing).
inline nlohmann::ordered_json metrics_json(const ExperimentReport& r, const std::vector<double>& fp_rates) {
  nlohmann::ordered_json j;
  j["experiment"] = r.spec.name;
  j["label"] = r.spec.label;
  j["fusion_mode"] = to_string(r.spec.fusion);
  j["zonal_mode"] = to_string(r.spec.zonal);
  j["ok"] = r.ok;
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  auto m = froc_metrics(r.curve, fp_rates);
  j["sens_at"] = m["sens_at"];
  j["average"] = m["average"];
  j["n_patients"] = m["n_patients"];
  j["n_lesions"] = m["n_lesions"];
  j["best_epoch"] = r.best_epoch;
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (const auto& p : r.curve.points) curve.push_back({p.fp_per_patient, p.sensitivity});
  j["froc_curve"] = curve;
  return j;
}

/// Trains and evaluates one experiment on the shared data.
inline ExperimentReport run_pipeline(const ExperimentSpec& spec, const PipelineConfig& cfg, const PreparedData& d,
                                     const ZonalStage* zonal, const std::optional<std::filesystem::path>& out_dir = {}) {
  spec.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport r;
  r.spec = spec;
  auto build = [&](const std::vector<std::size_t>& idx) {
    std::vector<DetectorCase> out;
    for (auto i : idx) out.push_back(make_detector_case(d.cases[i], zonal_for(spec, zonal, d.cases[i].id)));
    return out;
  };
  const auto train = build(d.split[0]), val = build(d.split[1]), test = build(d.split[2]);
  auto net_cfg = cfg.detector_net;
  net_cfg.fusion = spec.fusion;
  TrainResult tr;
  try {
    tr = train_detector(cfg.detector_train(), net_cfg, train, val, cfg.detector,
                        out_dir ? std::optional(*out_dir / "checkpoints") : std::nullopt);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("train-detector", "", e.what());
  }
  r.best_epoch = tr.checkpoints[tr.best].epoch;
  r.log = tr.log;
  std::vector<MatchResult> results;
  for (const auto& c : test) {
    try {
      const auto cands = two_threshold_detect(predict_heatmap(tr.net, c), cfg.detector);
      results.push_back(match_candidates(cands, c.lesion_mask));
    } catch (const Error& e) {
      throw StageError("detect", c.id, e.what());
    }
  }
  try {
    r.curve = froc_curve(results);
  } catch (const Error& e) {
    throw StageError("evaluate", "", e.what());
  }
  for (double f : cfg.fp_rates) r.sens_at[f] = sensitivity_at(r.curve, f);
  r.average = average_sensitivity(r.curve, cfg.fp_rates);
  r.ok = true;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct MatrixReport {
  std::vector<ExperimentReport> experiments;
  std::string input_hash;
  std::string zonal_hash;
  std::optional<double> zonal_dice_tz, zonal_dice_pz;
  std::size_t zonal_best_epoch = 0;
  double wall_seconds = 0.0;
};

inline std::string table_csv(const MatrixReport& m, const std::vector<double>& fp_rates) {
  std::string out = "Experiment";
  for (double f : fp_rates) out += fmt::format(",Sens@{}FP{}", fp_label(f), f > 1.0 ? "s" : "");
  out += ",Average\n";
  for (const auto& r : m.experiments) {
    out += r.spec.label;
    for (double f : fp_rates) out += r.ok ? fmt::format(",{:.6f}", r.sens_at.at(f)) : std::string(",");
    out += r.ok ? fmt::format(",{:.6f}\n", r.average) : std::string(",\n");
  }
  return out;
}

inline nlohmann::ordered_json matrix_metrics_json(const MatrixReport& m, const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["input_hash"] = m.input_hash;
  j["zonal_hash"] = m.zonal_hash;
  if (m.zonal_dice_tz) {
    j["zonal_dice"] = {{"tz", *m.zonal_dice_tz}, {"pz", *m.zonal_dice_pz}};
    j["zonal_best_epoch"] = m.zonal_best_epoch;
  }
  nlohmann::ordered_json ex = nlohmann::ordered_json::array();
  for (const auto& r : m.experiments) ex.push_back(metrics_json(r, cfg.fp_rates));
  j["experiments"] = ex;
  return j;
}

/// Mean over the values of a map, or nullopt when empty.
inline std::optional<double> mean_of(const std::map<std::string, double>& m) {
  if (m.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& [_, v] : m) s += v;
  return s / static_cast<double>(m.size());
}

// ---------------------------------------------------------------------------
// Plots

/// Per-experiment FROC polylines as CSV and one overlaid SVG.
inline void emit_plots(const std::vector<ExperimentReport>& reports, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string overlay = "experiment,fp_per_patient,sensitivity\n";
  constexpr double left = 60, top = 20, width = 520, height = 360;
  double xmax = 2.0;
  for (const auto& r : reports)
    if (r.ok && !r.curve.points.empty()) xmax = std::max(xmax, r.curve.points.back().fp_per_patient);
  auto px = [&](double fp) { return left + fp / xmax * width; };
  auto py = [&](double s) { return top + (1.0 - s) * height; };
  static constexpr const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\">\n"
      "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n</g>\n"
      "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">false positives per patient (0 to {:g})</text>\n"
      "<text x=\"15\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">sensitivity</text>\n",
      left + width + 20, top + height + 50, left + width + 20, top + height + 50, left, top + height, left + width,
      top + height, left, top, left, top + height, left + width / 2, top + height + 35, xmax, top + height / 2,
      top + height / 2);
  std::size_t k = 0;
  for (const auto& r : reports) {
    if (!r.ok) continue;
    detail::write_text(dir / (r.spec.name + ".froc.csv"), froc_csv(r.curve));
    std::string pts;
    for (const auto& p : r.curve.points) {
      overlay += fmt::format("{},{:.17g},{:.17g}\n", r.spec.name, p.fp_per_patient, p.sensitivity);
      pts += fmt::format("{}{:.4f},{:.4f}", pts.empty() ? "" : " ", px(p.fp_per_patient), py(p.sensitivity));
    }
    svg += fmt::format("<polyline id=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                       r.spec.name, colours[k % 6], pts);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{}</text>\n", left + width - 170,
                       top + height - 15 - 14.0 * static_cast<double>(k), colours[k % 6], r.spec.label);
    ++k;
  }
  svg += "</svg>\n";
  detail::write_text(dir / "froc_overlay.csv", overlay);
  detail::write_text(dir / "froc_overlay.svg", svg);
}

// ---------------------------------------------------------------------------
// Matrix

/// Runs every configured experiment on one cohort, split and zonal model. With `out_dir`,
/// writes table1.csv, metrics.json, report.json and per-experiment folders.
inline MatrixReport run_matrix(const PipelineConfig& cfg, const std::optional<std::filesystem::path>& out_dir = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  MatrixReport m;
  log_if(cfg, fmt::format("seed {}: generating and preprocessing cohort", cfg.seed));
  const auto data = prepare_data(cfg);
  m.input_hash = data.input_hash;
  std::optional<ZonalStage> zonal;
  if (cfg.needs_zonal()) {
    log_if(cfg, "training zonal segmenter");
    zonal = run_zonal_stage(cfg, data);
    m.zonal_hash = zonal->hash;
    m.zonal_best_epoch = zonal->best_epoch;
    m.zonal_dice_tz = mean_of(zonal->dice_tz);
    m.zonal_dice_pz = mean_of(zonal->dice_pz);
  }
  for (const auto& name : cfg.experiments) {
    const auto& spec = experiment_by_name(name);
    log_if(cfg, "experiment " + name);
    const auto dir = out_dir ? std::optional(*out_dir / name) : std::nullopt;
    try {
      m.experiments.push_back(run_pipeline(spec, cfg, data, zonal ? &*zonal : nullptr, dir));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      ExperimentReport r;
      r.spec = spec;
      r.error = e.what();
      m.experiments.push_back(std::move(r));
    }
    const auto& r = m.experiments.back();
    log_if(cfg, r.ok ? fmt::format("  average sensitivity {:.4f} (best epoch {})", r.average, r.best_epoch)
                     : "  failed: " + r.error);
  }
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    detail::write_text(*out_dir / "table1.csv", table_csv(m, cfg.fp_rates));
    detail::write_text(*out_dir / "metrics.json", matrix_metrics_json(m, cfg).dump(2) + "\n");
    nlohmann::ordered_json rep;
    rep["config"] = to_json(cfg);
    rep["input_hash"] = m.input_hash;
    rep["zonal_hash"] = m.zonal_hash;
    rep["wall_seconds"] = m.wall_seconds;
    nlohmann::ordered_json ex = nlohmann::ordered_json::array();
    for (const auto& r : m.experiments) {
      auto e = metrics_json(r, cfg.fp_rates);
      e["input_hash"] = m.input_hash;
      e["wall_seconds"] = r.wall_seconds;
      ex.push_back(e);
      const auto dir = *out_dir / r.spec.name;
      std::filesystem::create_directories(dir);
      detail::write_text(dir / "metrics.json", metrics_json(r, cfg.fp_rates).dump(2) + "\n");
      if (r.ok) detail::write_text(dir / "froc.csv", froc_csv(r.curve));
    }
    rep["experiments"] = ex;
    detail::write_text(*out_dir / "report.json", rep.dump(2) + "\n");
    detail::write_text(*out_dir / "cohort_manifest.json", data.cohort_manifest.dump(2) + "\n");
    emit_plots(m.experiments, *out_dir / "plots");
  }
  return m;
}

/// Mean average sensitivity per experiment over several master seeds.
struct SeedSummary {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> averages;  ///< per experiment, one per seed (failed runs skipped)

  std::optional<double> mean(const std::string& name) const {
    const auto it = averages.find(name);
    if (it == averages.end() || it->second.empty()) return std::nullopt;
    double s = 0.0;
    for (double v : it->second) s += v;
    return s / static_cast<double>(it->second.size());
  }
};

inline nlohmann::ordered_json summary_json(const SeedSummary& s) {
  nlohmann::ordered_json j;
  j["seeds"] = s.seeds;
  nlohmann::ordered_json ex;
  for (const auto& spec : standard_experiments()) {
    const auto it = s.averages.find(spec.name);
    if (it == s.averages.end()) continue;
    ex[spec.name] = {{"averages", it->second}, {"mean_average", s.mean(spec.name).value_or(0.0)}};
  }
  j["experiments"] = ex;
  const auto b = s.mean("baseline"), e = s.mean("early_prob");
  if (b && e) {
    j["early_prob_minus_baseline"] = *e - *b;
    j["early_prob_at_least_baseline"] = *e >= *b;
  }
  return j;
}

inline SeedSummary run_seeds(PipelineConfig cfg, const std::vector<std::uint64_t>& seeds,
                             const std::optional<std::filesystem::path>& out_dir = {}) {
  SeedSummary s;
  s.seeds = seeds;
  for (auto seed : seeds) {
    cfg.seed = seed;
    const auto m = run_matrix(cfg, out_dir ? std::optional(*out_dir / fmt::format("seed_{}", seed)) : std::nullopt);
    for (const auto& r : m.experiments)
      if (r.ok) s.averages[r.spec.name].push_back(r.average);
  }
  if (out_dir) detail::write_text(*out_dir / "summary.json", summary_json(s).dump(2) + "\n");
  return s;
}

}  // namespace cspca
