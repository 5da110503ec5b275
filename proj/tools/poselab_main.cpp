// poselab: one binary for the whole pipeline — dataset generation, joint
// training with fixed routing, routing construction, checkpoint-replay
// gradient diagnostics, evaluation, and report aggregation.
//
// Exit codes: 0 ok, 2 usage/config, 3 data, 4 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poselab/dataset_io.hpp"
#include "poselab/diagnostics.hpp"
#include "poselab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "poselab 0.1.0";

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

json base_manifest(const std::string& subcommand) {
  return {{"tool", kVersion},
          {"subcommand", subcommand},
          {"config", json::object()},
          {"seeds", json::object()},
          {"inputs", json::object()},
          {"outputs", json::object()},
          {"status", "running"},
          {"wall_s", 0.0}};
}

void write_manifest(const fs::path& path, const json& m) {
  poselab::atomic_write_file(path.string(), m.dump(2) + "\n");
}

json load_config_json(const std::string& path) {
  std::string text;
  try {
    text = poselab::read_file(path);
  } catch (const poselab::IoError& e) {
    throw poselab::ConfigError(e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw poselab::ConfigError("config " + path + ": " + e.what());
  }
}

void require_schema_v1(const json& j, const std::string& path) {
  if (!j.contains("v") || !j.at("v").is_number_integer() ||
      j.at("v").get<int>() != 1)
    throw poselab::ConfigError("config " + path +
                               ": missing or unsupported schema version \"v\"");
}

// ---------------------------------------------------------------- gen-data

poselab::GenConfig parse_gen_config(const json& j, const std::string& path) {
  require_schema_v1(j, path);
  for (const char* key :
       {"k", "g_default", "n", "per_category", "sigma", "seed", "split",
        "profile"})
    if (!j.contains(key))
      throw poselab::ConfigError("config " + path + ": missing key \"" +
                                 key + "\"");
  poselab::GenConfig g;
  g.k = j.at("k").get<int>();
  g.g_default = j.at("g_default").get<int>();
  g.n = j.at("n").get<int>();
  g.per_category = j.at("per_category").get<int>();
  g.sigma = j.at("sigma").get<double>();
  g.seed = j.at("seed").get<std::uint64_t>();
  g.split = j.at("split").get<std::string>();
  g.profile = poselab::profile_from_string(j.at("profile").get<std::string>());
  return g;
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("gen-data");
  manifest["inputs"]["config"] = config_path;
  manifest["outputs"]["data"] = out;
  try {
    const json cfg_json = load_config_json(config_path);
    const poselab::GenConfig cfg = parse_gen_config(cfg_json, config_path);
    manifest["config"] = cfg_json;
    manifest["seeds"]["dataset"] = cfg.seed;
    poselab::Dataset data = poselab::make_dataset(cfg);
    poselab::write_dataset(data, out);
    for (int c = 0; c < cfg.k; ++c)
      std::cout << "category " << c << ": "
                << data.indices_of_category(c).size() << " instances\n";
    std::cout << "wrote " << out << " (" << data.instances.size()
              << " instances)\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    throw;
  }
}

// ------------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out, const std::string& routing_override) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("train");
  manifest["inputs"] = {{"config", config_path}, {"data", data_path}};
  manifest["outputs"]["rundir"] = out;
  const fs::path outdir(out);
  fs::create_directories(outdir);
  try {
    poselab::TrainConfig cfg =
        poselab::TrainConfig::from_json(load_config_json(config_path));
    if (!routing_override.empty()) {
      static const std::set<std::string> kNames = {
          "none", "random", "quantile", "quantile+refine"};
      if (kNames.count(routing_override)) {
        cfg.routing = routing_override;
      } else {
        cfg.routing = "file";
        cfg.routing_file = routing_override;
      }
      cfg.validate();
    }
    const poselab::Dataset data = poselab::read_dataset(data_path);

    poselab::RoutingTable routing;
    if (cfg.routing == "quantile+refine") {
      const poselab::DifficultyTable diff =
          poselab::DifficultyTable::load(cfg.difficulty_file);
      routing = poselab::quantile_partition(diff, cfg.groups);
      const poselab::PilotFn pilot = poselab::make_training_pilot(
          cfg, data, routing, diff, {}, &std::cout);
      poselab::refine_boundaries(routing, diff, cfg.groups, pilot);
      cfg.model.num_groups = routing.num_groups();
      cfg.model.capacity.clear();
      for (const auto& [g, cap] : routing.alpha) cfg.model.capacity[g] = cap;
      cfg.model.validate();
    } else {
      routing = poselab::resolve_routing(cfg, data);
    }
    routing.save((outdir / "routing.json").string());

    poselab::Dataset eval_data;
    const poselab::Dataset* eval_ptr = nullptr;
    if (!cfg.eval_data.empty()) {
      eval_data = poselab::read_dataset(cfg.eval_data);
      manifest["inputs"]["eval_data"] = cfg.eval_data;
      eval_ptr = &eval_data;
    }

    manifest["config"] = cfg.to_json();
    manifest["seeds"]["train"] = cfg.seed;
    manifest["seeds"]["dataset"] = data.header.seed;

    poselab::ParamStore params;
    poselab::TrainResult res =
        poselab::train(cfg, data, routing, params, outdir, eval_ptr, nullptr,
                       &std::cout);
    std::cout << "final mean_loss=" << res.epoch_mean_loss.back() << " over "
              << res.steps << " steps\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(outdir / "manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(outdir / "manifest.json", manifest);
    throw;
  }
}

// ------------------------------------------------------------------- group

int cmd_group(const std::string& difficulty_path, int num_groups,
              const std::string& out, bool refine,
              const std::string& pilot_data_path,
              const std::string& pilot_scores_path,
              const std::string& pilot_config_path, std::uint64_t seed,
              const std::string& estimator) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("group");
  manifest["inputs"]["difficulty"] = difficulty_path;
  manifest["outputs"]["routing"] = out;
  manifest["seeds"]["pilot"] = seed;
  try {
    const poselab::DifficultyTable diff =
        poselab::DifficultyTable::load(difficulty_path);
    poselab::RoutingTable routing =
        poselab::quantile_partition(diff, num_groups, estimator);
    if (refine) {
      poselab::PilotFn pilot;
      if (!pilot_scores_path.empty()) {
        // fixture: {"<category>": {"<group>": score}}; used by tests to pin
        // the Eq. 13 comparison without training anything
        const json scores = load_config_json(pilot_scores_path);
        manifest["inputs"]["pilot_scores"] = pilot_scores_path;
        pilot = [scores](int cat, int grp) -> double {
          const std::string c = std::to_string(cat), g = std::to_string(grp);
          if (!scores.contains(c) || !scores.at(c).contains(g))
            throw poselab::ConfigError("pilot scores: no entry for category " +
                                       c + " group " + g);
          return scores.at(c).at(g).get<double>();
        };
      } else if (!pilot_data_path.empty()) {
        const poselab::Dataset pilot_data =
            poselab::read_dataset(pilot_data_path);
        manifest["inputs"]["pilot_data"] = pilot_data_path;
        poselab::TrainConfig pcfg;
        if (!pilot_config_path.empty())
          pcfg = poselab::TrainConfig::from_json(
              load_config_json(pilot_config_path));
        pcfg.seed = seed;
        pilot = poselab::make_training_pilot(pcfg, pilot_data, routing, diff,
                                             {}, &std::cout);
      } else {
        throw poselab::ConfigError(
            "--refine needs --pilot-data (or --pilot-scores)");
      }
      poselab::refine_boundaries(routing, diff, num_groups, pilot);
    }
    routing.save(out);
    manifest["config"] = {{"G", num_groups}, {"refine", refine}};
    for (const auto& [c, g] : routing.gamma)
      std::cout << "category " << c << " -> group " << g << " ("
                << routing.alpha.at(g) << ")\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    throw;
  }
}

// ---------------------------------------------------------------- diagnose

std::vector<std::pair<int, fs::path>> list_checkpoints(const fs::path& rundir) {
  std::vector<std::pair<int, fs::path>> out;
  const fs::path dir = rundir / "checkpoints";
  if (!fs::is_directory(dir))
    throw poselab::ConfigError("no checkpoints directory under " +
                               rundir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    int epoch = 0;
    const std::string name = entry.path().filename().string();
    if (std::sscanf(name.c_str(), "epoch_%d.ckpt", &epoch) == 1)
      out.emplace_back(epoch, entry.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty())
    throw poselab::ConfigError("no checkpoints found under " + dir.string());
  return out;
}

int cmd_diagnose(const std::string& rundir_path, const std::string& data_path,
                 std::uint64_t subset_seed, const std::string& out,
                 int batches_per_category, int batch_size, bool frequency,
                 int from_epoch, int to_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("diagnose");
  manifest["inputs"] = {{"rundir", rundir_path}, {"data", data_path}};
  manifest["outputs"]["diag"] = out;
  manifest["seeds"]["subset"] = subset_seed;
  const fs::path outdir(out);
  fs::create_directories(outdir);
  try {
    const fs::path rundir(rundir_path);
    const json run_manifest = load_config_json((rundir / "manifest.json").string());
    const poselab::TrainConfig tcfg =
        poselab::TrainConfig::from_json(run_manifest.at("config"));

    poselab::ReplayConfig rcfg;
    rcfg.batches_per_category = batches_per_category;
    rcfg.batch_size = batch_size > 0 ? batch_size : tcfg.batch_size;
    rcfg.subset_seed = subset_seed;
    rcfg.frequency_weighted = frequency;
    manifest["config"] = {{"batches_per_category", rcfg.batches_per_category},
                          {"batch_size", rcfg.batch_size},
                          {"frequency_weighted", rcfg.frequency_weighted},
                          {"from_epoch", from_epoch},
                          {"to_epoch", to_epoch}};

    const poselab::Dataset data = poselab::read_dataset(data_path);
    const poselab::BatchPlan plan = poselab::make_batch_plan(data, rcfg);

    std::vector<poselab::ContentionReport> reports;
    for (const auto& [epoch, path] : list_checkpoints(rundir)) {
      if (from_epoch > 0 && epoch < from_epoch) continue;
      if (to_epoch > 0 && epoch > to_epoch) continue;
      const poselab::Checkpoint ckpt =
          poselab::load_checkpoint(path.string());
      poselab::RoutingTable routing =
          ckpt.routing.is_null()
              ? poselab::single_group_routing(data.categories())
              : poselab::RoutingTable::from_json(ckpt.routing);
      const poselab::CategoryGradientTable table = poselab::replay_gradients(
          ckpt.params, ckpt.model_config, routing, tcfg.loss, data, plan,
          ckpt.epoch, rcfg.frequency_weighted);
      reports.push_back(poselab::contention_stats(table));
      std::cout << "epoch " << ckpt.epoch << ": replayed "
                << table.blocks.size() << " blocks\n";
    }
    if (reports.empty())
      throw poselab::ConfigError("epoch range selected no checkpoints");
    poselab::write_contention_outputs(outdir, reports);
    std::cout << "wrote " << reports.size() << " contention reports to " << out
              << "\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(outdir / "manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(outdir / "manifest.json", manifest);
    throw;
  }
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_path,
                 const std::string& thresholds_str, const std::string& out) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("evaluate");
  manifest["inputs"] = {{"ckpt", ckpt_path}, {"data", data_path}};
  manifest["outputs"]["eval"] = out;
  try {
    const poselab::EvalThresholds th =
        poselab::EvalThresholds::parse(thresholds_str);
    manifest["config"] = th.to_json();
    const poselab::Checkpoint ckpt = poselab::load_checkpoint(ckpt_path);
    const poselab::Dataset data = poselab::read_dataset(data_path);
    const poselab::RoutingTable routing =
        ckpt.routing.is_null()
            ? poselab::single_group_routing(data.categories())
            : poselab::RoutingTable::from_json(ckpt.routing);
    const poselab::PoseModel model(ckpt.model_config);
    const poselab::EvalReport rep =
        poselab::evaluate_model(ckpt.params, model, routing, data, th);
    poselab::atomic_write_file(out, rep.to_json().dump(2) + "\n");
    for (const auto& [c, ce] : rep.categories)
      std::cout << "category " << c << ": success " << ce.success_rate << " ("
                << ce.count << " instances)\n";
    std::cout << "macro success " << rep.macro_success << "\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    throw;
  }
}

// ------------------------------------------------------------------ report

json parse_timeseries_csv(const fs::path& path) {
  const std::string text = poselab::read_file(path.string());
  json rows = json::array();
  size_t pos = text.find('\n');  // skip header
  while (pos != std::string::npos && pos + 1 < text.size()) {
    const size_t end = text.find('\n', pos + 1);
    const std::string line = text.substr(
        pos + 1, end == std::string::npos ? std::string::npos : end - pos - 1);
    pos = end;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t c0 = 0;
    for (size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        cells.push_back(line.substr(c0, i - c0));
        c0 = i + 1;
      }
    if (cells.size() != 6)
      throw poselab::DataError(poselab::DataErrorCode::kBadHeader,
                               "timeseries row with " +
                                   std::to_string(cells.size()) + " cells in " +
                                   path.string());
    rows.push_back({{"epoch", std::stoi(cells[0])},
                    {"block", cells[1]},
                    {"mu_cc", std::stod(cells[2])},
                    {"var_cc", std::stod(cells[3])},
                    {"nbar", std::stod(cells[4])},
                    {"r_theta", std::stod(cells[5])}});
  }
  return rows;
}

int cmd_report(const std::vector<std::string>& diag_dirs,
               const std::vector<std::string>& eval_paths,
               const std::string& out) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = base_manifest("report");
  manifest["inputs"] = {{"diag", diag_dirs}, {"evals", eval_paths}};
  manifest["outputs"]["summary"] = out;
  try {
    json runs = json::object();
    for (const auto& d : diag_dirs) {
      const fs::path dir(d);
      if (!fs::is_directory(dir))
        throw poselab::ConfigError("diag directory not found: " + d);
      const fs::path ts = dir / "timeseries.csv";
      if (!fs::exists(ts))
        throw poselab::ConfigError("no timeseries.csv under " + d);
      std::string id = dir.filename().string();
      if (id.empty()) id = dir.parent_path().filename().string();
      runs[id] = {{"path", d}, {"timeseries", parse_timeseries_csv(ts)}};
    }
    json evals = json::object();
    for (const auto& p : eval_paths) {
      json e;
      try {
        e = json::parse(poselab::read_file(p));
      } catch (const json::exception& ex) {
        throw poselab::DataError(poselab::DataErrorCode::kBadHeader,
                                 "eval report " + p + ": " + ex.what());
      }
      evals[fs::path(p).filename().string()] = {{"path", p}, {"report", e}};
    }
    const json summary = {{"runs", runs}, {"evals", evals}};
    poselab::atomic_write_file(out, summary.dump(2) + "\n");
    std::cout << "summarized " << runs.size() << " run(s) and " << evals.size()
              << " eval report(s) into " << out << "\n";
    manifest["status"] = "ok";
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    return 0;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["wall_s"] = seconds_since(t0);
    write_manifest(out + ".manifest.json", manifest);
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-category pose learning lab"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "generator config JSON")->required();
  gen->add_option("--out", gen_out, "output dataset path (.dcpd)")->required();

  auto* tr = app.add_subcommand("train", "train a model with fixed routing");
  std::string tr_config, tr_data, tr_out, tr_routing;
  tr->add_option("--config", tr_config, "train config JSON")->required();
  tr->add_option("--data", tr_data, "training dataset (.dcpd)")->required();
  tr->add_option("--out", tr_out, "run directory")->required();
  tr->add_option("--routing", tr_routing,
                 "override: none|random|quantile|quantile+refine or a "
                 "routing.json path");

  auto* gr = app.add_subcommand("group", "build a routing table (Algorithm 1)");
  std::string gr_difficulty, gr_out, gr_pilot_data, gr_pilot_scores,
      gr_pilot_config, gr_estimator;
  int gr_g = 3;
  bool gr_refine = false;
  std::uint64_t gr_seed = 0;
  gr->add_option("--difficulty", gr_difficulty,
                 "difficulty proxies JSON {category: T_c}")
      ->required();
  gr->add_option("--G", gr_g, "number of groups")->required();
  gr->add_option("--out", gr_out, "output routing JSON")->required();
  gr->add_flag("--refine", gr_refine, "run pilot boundary refinement");
  gr->add_option("--pilot-data", gr_pilot_data,
                 "training data for pilot runs (with --refine)");
  gr->add_option("--pilot-scores", gr_pilot_scores,
                 "fixed pilot scores JSON {category: {group: score}} instead "
                 "of pilot training");
  gr->add_option("--pilot-config", gr_pilot_config,
                 "train config JSON for pilot runs (defaults otherwise)");
  gr->add_option("--seed", gr_seed, "pilot training seed");
  gr->add_option("--estimator", gr_estimator,
                 "reference estimator id recorded in provenance");

  auto* di = app.add_subcommand("diagnose",
                                "replay checkpoints and measure contention");
  std::string di_rundir, di_data, di_out;
  std::uint64_t di_seed = 11;
  int di_bpc = 8, di_bs = 0, di_from = 0, di_to = 0;
  bool di_freq = false;
  di->add_option("--rundir", di_rundir, "training run directory")->required();
  di->add_option("--data", di_data, "dataset to draw the diagnostic subset from")
      ->required();
  di->add_option("--subset-seed", di_seed, "diagnostic subset seed");
  di->add_option("--out", di_out, "output directory")->required();
  di->add_option("--batches-per-category", di_bpc, "replay batches per category");
  di->add_option("--batch-size", di_bs,
                 "replay batch size (default: the run's training batch size)");
  di->add_flag("--frequency", di_freq,
               "weight complement averages by batch counts instead of "
               "uniformly");
  di->add_option("--from-epoch", di_from, "first epoch to replay (0 = all)");
  di->add_option("--to-epoch", di_to, "last epoch to replay (0 = all)");

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_out, ev_th = "10,0.1,0.15";
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "evaluation dataset (.dcpd)")->required();
  ev->add_option("--thresholds", ev_th, "rot_deg,trans,scale (strict <)");
  ev->add_option("--out", ev_out, "output eval JSON")->required();

  auto* re = app.add_subcommand("report", "aggregate diagnostics and evals");
  std::vector<std::string> re_diag, re_evals;
  std::string re_out;
  re->add_option("--diag", re_diag, "diagnose output directories")
      ->required()
      ->expected(-1);
  re->add_option("--evals", re_evals, "eval report JSONs")->expected(-1);
  re->add_option("--out", re_out, "output summary JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_out);
    if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_routing);
    if (gr->parsed())
      return cmd_group(gr_difficulty, gr_g, gr_out, gr_refine, gr_pilot_data,
                       gr_pilot_scores, gr_pilot_config, gr_seed, gr_estimator);
    if (di->parsed())
      return cmd_diagnose(di_rundir, di_data, di_seed, di_out, di_bpc, di_bs,
                          di_freq, di_from, di_to);
    if (ev->parsed()) return cmd_evaluate(ev_ckpt, ev_data, ev_th, ev_out);
    if (re->parsed()) return cmd_report(re_diag, re_evals, re_out);
  } catch (const poselab::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const poselab::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const poselab::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const poselab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
