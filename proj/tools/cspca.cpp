// SPDX-License-Identifier: Apache-2.0
// Command-line driver for the csPCa detection pipeline.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cspca/cspca.hpp"

namespace fs = std::filesystem;
using namespace cspca;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool verbose = false;

  PipelineConfig load() const {
    PipelineConfig c;
    if (!config.empty()) c = load_config(config, seed);
    else if (seed) c.seed = *seed;
    if (verbose) c.verbose = true;
    c.validate();
    return c;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override the master seed");
  app->add_flag("-v,--verbose", c.verbose, "progress messages on stderr");
}

std::vector<std::size_t> read_split_set(const fs::path& split_file, const std::string& set,
                                        const std::vector<PatientCase>& cases) {
  const auto j = detail::read_json(split_file);
  if (!j.contains(set)) throw ParseError(set, "split file has no '" + set + "' list");
  std::vector<std::size_t> out;
  for (const auto& id : j.at(set)) {
    const auto s = id.get<std::string>();
    const auto it = std::ranges::find(cases, s, &PatientCase::id);
    if (it == cases.end()) throw ParseError(set, "case " + s + " is not in the manifest");
    out.push_back(static_cast<std::size_t>(it - cases.begin()));
  }
  return out;
}

std::vector<DetectorCase> detector_cases(const std::vector<PatientCase>& cases, const std::vector<std::size_t>& idx,
                                         const ExperimentSpec& spec, const std::string& zones_dir) {
  std::vector<DetectorCase> out;
  for (auto i : idx) {
    std::optional<ZonalMap> z;
    if (spec.zonal != ZonalInput::absent) {
      if (zones_dir.empty()) throw ConfigError("experiment " + spec.name + " needs --zones");
      try {
        z = read_zonal(zones_dir, cases[i].id);
      } catch (const Error& e) {
        throw StageError("fusion", cases[i].id, e.what());
      }
      if (spec.zonal == ZonalInput::deterministic) z = to_deterministic(*z);
    }
    out.push_back(make_detector_case(cases[i], std::move(z)));
  }
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Reads the candidate CSV written by `detect` back into per-patient candidate lists.
std::map<std::string, std::vector<CandidateLesion>> read_candidates(const fs::path& p, const std::vector<PatientCase>& cases) {
  std::map<std::string, std::vector<CandidateLesion>> out;
  for (const auto& c : cases) out[c.id];
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::string line;
  std::getline(in, line);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 8) throw ParseError(fmt::format("row {}", row), "expected 8 fields");
    const auto it = std::ranges::find(cases, f[0], &PatientCase::id);
    if (it == cases.end()) throw ParseError(fmt::format("row {}", row), "unknown patient " + f[0]);
    const auto& d = it->lesion_mask.dims();
    CandidateLesion c;
    try {
      c.score = std::stod(f[2]);
      const auto x = std::stoul(f[3]), y = std::stoul(f[4]), z = std::stoul(f[5]);
      if (x >= d.nx || y >= d.ny || z >= d.nz) throw ParseError(fmt::format("row {}", row), "peak outside the grid");
      c.peak_index = x + d.nx * (y + d.ny * z);
      c.volume_mm3 = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw ParseError(fmt::format("row {}", row), "malformed number");
    }
    out[f[0]].push_back(std::move(c));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"csPCa detection pipeline on synthetic prostate phantoms"};
  app.require_subcommand(1);
  Common common;

  // phantom gen
  auto* phantom = app.add_subcommand("phantom", "synthetic cohort tools");
  phantom->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "generate a phantom cohort");
  std::string gen_out;
  bool gen_zonal = false;
  add_common(gen, common);
  gen->add_option("-o,--out", gen_out, "output directory")->required();
  gen->add_flag("--zonal-cohort", gen_zonal, "generate the zonal-training cohort instead");

  auto* pre = app.add_subcommand("preprocess", "resample and centre-crop a cohort");
  std::string pre_in, pre_out;
  add_common(pre, common);
  pre->add_option("-i,--in", pre_in, "case manifest")->required()->check(CLI::ExistingFile);
  pre->add_option("-o,--out", pre_out, "output directory")->required();

  auto* split = app.add_subcommand("split", "stratified train/val/test split");
  std::string split_in, split_out;
  add_common(split, common);
  split->add_option("-i,--in", split_in, "case manifest")->required()->check(CLI::ExistingFile);
  split->add_option("-o,--out", split_out, "split JSON file")->required();

  auto* tz = app.add_subcommand("train-zones", "train the 3D zonal segmenter");
  std::string tz_in, tz_out;
  add_common(tz, common);
  tz->add_option("-i,--in", tz_in, "preprocessed zonal-training manifest")->required()->check(CLI::ExistingFile);
  tz->add_option("-o,--out", tz_out, "checkpoint directory")->required();

  auto* pz = app.add_subcommand("predict-zones", "write probabilistic zonal maps");
  std::string pz_model, pz_in, pz_out;
  bool pz_det = false;
  add_common(pz, common);
  pz->add_option("-m,--model", pz_model, "zonal checkpoint directory")->required()->check(CLI::ExistingDirectory);
  pz->add_option("-i,--in", pz_in, "case manifest")->required()->check(CLI::ExistingFile);
  pz->add_option("-o,--out", pz_out, "output directory")->required();
  pz->add_flag("--deterministic", pz_det, "write one-hot maps instead");

  auto* td = app.add_subcommand("train-detector", "train the 2D detector for one experiment");
  std::string td_in, td_split, td_zones, td_out, td_exp = "baseline";
  add_common(td, common);
  td->add_option("-i,--in", td_in, "preprocessed case manifest")->required()->check(CLI::ExistingFile);
  td->add_option("-s,--split", td_split, "split JSON")->required()->check(CLI::ExistingFile);
  td->add_option("-e,--experiment", td_exp, "baseline|early_prob|late_prob|early_det|late_det");
  td->add_option("-z,--zones", td_zones, "directory of probabilistic zonal maps");
  td->add_option("-o,--out", td_out, "output directory")->required();

  auto* det = app.add_subcommand("detect", "heatmaps and two-threshold candidates");
  std::string det_model, det_in, det_split, det_set = "test", det_zones, det_out;
  bool det_det = false;
  add_common(det, common);
  det->add_option("-m,--model", det_model, "detector checkpoint directory")->required()->check(CLI::ExistingDirectory);
  det->add_option("-i,--in", det_in, "preprocessed case manifest")->required()->check(CLI::ExistingFile);
  det->add_option("-s,--split", det_split, "split JSON (all cases when omitted)");
  det->add_option("--set", det_set, "split set to process");
  det->add_option("-z,--zones", det_zones, "directory of probabilistic zonal maps");
  det->add_flag("--deterministic", det_det, "convert zonal maps to one-hot");
  det->add_option("-o,--out", det_out, "candidate CSV")->required();

  auto* ev = app.add_subcommand("evaluate", "FROC evaluation of candidate lists");
  std::string ev_cands, ev_in, ev_split, ev_set = "test", ev_out;
  add_common(ev, common);
  ev->add_option("--candidates", ev_cands, "candidate CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("-i,--in", ev_in, "preprocessed case manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("-s,--split", ev_split, "split JSON (all cases when omitted)");
  ev->add_option("--set", ev_set, "split set to evaluate");
  ev->add_option("-o,--out", ev_out, "output directory")->required();

  auto* mx = app.add_subcommand("matrix", "run the five-experiment comparison");
  std::string mx_out;
  std::vector<std::uint64_t> mx_seeds;
  add_common(mx, common);
  mx->add_option("-o,--out", mx_out, "output directory")->required();
  mx->add_option("--seeds", mx_seeds, "several master seeds; writes seed_<n>/ folders and summary.json")
      ->delimiter(',');

  auto* pl = app.add_subcommand("plots", "FROC plot data from a matrix output directory");
  std::string pl_in, pl_out;
  pl->add_option("-i,--in", pl_in, "matrix output directory")->required()->check(CLI::ExistingDirectory);
  pl->add_option("-o,--out", pl_out, "plot directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = common.load();
      const auto pc = gen_zonal ? cfg.zonal_cohort() : cfg.detector_cohort();
      const auto cohort = generate_cohort(pc);
      const auto cases = patients_of(cohort);
      write_cases(cases, gen_out);
      detail::write_text(fs::path(gen_out) / "phantom_manifest.json", cohort.manifest.dump(2) + "\n");
      fmt::print("{} cases written to {}\n", cases.size(), gen_out);
    } else if (pre->parsed()) {
      const auto cfg = common.load();
      const auto cases = preprocess_all(read_cases(pre_in), cfg.preprocess);
      write_cases(cases, pre_out);
      fmt::print("{} cases preprocessed into {}\n", cases.size(), pre_out);
    } else if (split->parsed()) {
      const auto cfg = common.load();
      const auto cases = read_cases(split_in);
      const auto idx = stratified_split_indices(std::span<const PatientCase>(cases), cfg.split, cfg.split_seed());
      nlohmann::ordered_json j;
      const char* names[] = {"train", "val", "test"};
      for (std::size_t k = 0; k < 3; ++k) {
        j[names[k]] = nlohmann::ordered_json::array();
        for (auto i : idx[k]) j[names[k]].push_back(cases[i].id);
      }
      j["hash"] = split_hash(idx, cases);
      detail::write_text(split_out, j.dump(2) + "\n");
      fmt::print("split {}/{}/{} written to {}\n", idx[0].size(), idx[1].size(), idx[2].size(), split_out);
    } else if (tz->parsed()) {
      const auto cfg = common.load();
      const auto cases = read_cases(tz_in);
      ZonalTrainResult r;
      try {
        r = train_zonal(cfg.zonal_train(), cfg.zonal.net, cases);
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw StageError("train-zones", "", e.what());
      }
      save_checkpoint(r.net, tz_out, r.best_epoch);
      fmt::print("zonal model (epoch {}) saved to {}\n", r.best_epoch, tz_out);
    } else if (pz->parsed()) {
      const auto model = load_checkpoint(pz_model);
      const auto cases = read_cases(pz_in);
      for (const auto& c : cases) {
        try {
          auto zm = predict_zones(model.net, c.channel(Channel::t2w));
          write_zonal(pz_det ? to_deterministic(zm) : zm, pz_out, c.id);
        } catch (const Error& e) {
          throw StageError("predict-zones", c.id, e.what());
        }
      }
      fmt::print("zonal maps for {} cases written to {}\n", cases.size(), pz_out);
    } else if (td->parsed()) {
      const auto cfg = common.load();
      const auto& spec = experiment_by_name(td_exp);
      const auto cases = read_cases(td_in);
      const auto train = detector_cases(cases, read_split_set(td_split, "train", cases), spec, td_zones);
      const auto val = detector_cases(cases, read_split_set(td_split, "val", cases), spec, td_zones);
      auto net_cfg = cfg.detector_net;
      net_cfg.fusion = spec.fusion;
      TrainResult r;
      try {
        r = train_detector(cfg.detector_train(), net_cfg, train, val, cfg.detector, fs::path(td_out));
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw StageError("train-detector", "", e.what());
      }
      const auto epoch = r.checkpoints[r.best].epoch;
      save_checkpoint(r.net, fs::path(td_out) / "model", epoch);
      fmt::print("selected epoch {} saved to {}\n", epoch, (fs::path(td_out) / "model").string());
    } else if (det->parsed()) {
      const auto cfg = common.load();
      const auto model = load_checkpoint(det_model);
      const auto cases = read_cases(det_in);
      const auto idx = det_split.empty() ? all_indices(cases.size()) : read_split_set(det_split, det_set, cases);
      const auto& c2 = model.net.config2d();
      if (!c2) throw ConfigError("detect needs a 2D detector checkpoint");
      ExperimentSpec spec{"custom", "custom", c2->fusion,
                          c2->fusion == FusionMode::none ? ZonalInput::absent
                          : det_det                      ? ZonalInput::deterministic
                                                         : ZonalInput::probabilistic};
      std::string csv = "patient_id,candidate_rank,score,peak_x,peak_y,peak_z,voxel_count,volume_mm3\n";
      for (const auto& dc : detector_cases(cases, idx, spec, det_zones)) {
        try {
          csv += candidates_csv(dc.id, two_threshold_detect(predict_heatmap(model.net, dc), cfg.detector), dc.dims(), false);
        } catch (const Error& e) {
          throw StageError("detect", dc.id, e.what());
        }
      }
      detail::write_text(det_out, csv);
      fmt::print("candidates for {} cases written to {}\n", idx.size(), det_out);
    } else if (ev->parsed()) {
      const auto cfg = common.load();
      const auto all = read_cases(ev_in);
      std::vector<PatientCase> cases;
      for (auto i : ev_split.empty() ? all_indices(all.size()) : read_split_set(ev_split, ev_set, all)) cases.push_back(all[i]);
      const auto cands = read_candidates(ev_cands, cases);
      std::vector<MatchResult> results;
      for (const auto& c : cases) results.push_back(match_candidates(cands.at(c.id), c.lesion_mask));
      FrocCurve curve;
      try {
        curve = froc_curve(results);
      } catch (const Error& e) {
        throw StageError("evaluate", "", e.what());
      }
      fs::create_directories(ev_out);
      detail::write_text(fs::path(ev_out) / "froc.csv", froc_csv(curve));
      detail::write_text(fs::path(ev_out) / "metrics.json", froc_metrics(curve, cfg.fp_rates).dump(2) + "\n");
      fmt::print("average sensitivity {:.4f}\n", average_sensitivity(curve, cfg.fp_rates));
    } else if (mx->parsed()) {
      const auto cfg = common.load();
      if (mx_seeds.empty()) {
        const auto m = run_matrix(cfg, fs::path(mx_out));
        fmt::print("{}", table_csv(m, cfg.fp_rates));
        for (const auto& r : m.experiments)
          if (!r.ok) fmt::print(stderr, "experiment {} failed: {}\n", r.spec.name, r.error);
      } else {
        const auto s = run_seeds(cfg, mx_seeds, fs::path(mx_out));
        fmt::print("{}\n", summary_json(s).dump(2));
      }
    } else if (pl->parsed()) {
      std::vector<ExperimentReport> reports;
      for (const auto& spec : standard_experiments()) {
        const auto f = fs::path(pl_in) / spec.name / "froc.csv";
        if (!fs::exists(f)) continue;
        ExperimentReport r;
        r.spec = spec;
        r.ok = true;
        std::ifstream in(f);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          const auto comma = line.find(',');
          if (comma == std::string::npos) throw ParseError(f.string(), "malformed row");
          r.curve.points.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
        }
        reports.push_back(std::move(r));
      }
      emit_plots(reports, pl_out);
      fmt::print("plots for {} experiments written to {}\n", reports.size(), pl_out);
    }
  } catch (const ConfigError& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitStage;
  }
  return 0;
}
