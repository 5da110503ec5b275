#pragma once

// End-to-end joint training with fixed routing, per-epoch checkpointing,
// and the strict-threshold evaluation protocol that supplies difficulty
// proxies for the grouping stage.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "poselab/checkpoint.hpp"
#include "poselab/grouping.hpp"
#include "poselab/losses.hpp"
#include "poselab/model.hpp"
#include "poselab/optimizer.hpp"
#include "poselab/synthdata.hpp"

namespace poselab {

struct EvalThresholds {
  double rot_deg = 10.0;
  double trans = 0.1;
  double scale_rel = 0.15;

  void validate() const {
    if (rot_deg < 0.0 || trans < 0.0 || scale_rel < 0.0)
      throw ConfigError("thresholds must be nonnegative");
  }

  // "10,0.1,0.15"
  static EvalThresholds parse(const std::string& s) {
    EvalThresholds t;
    char c1 = 0, c2 = 0;
    std::istringstream in(s);
    if (!(in >> t.rot_deg >> c1 >> t.trans >> c2 >> t.scale_rel) || c1 != ',' ||
        c2 != ',' || (in >> std::ws, !in.eof()))
      throw ConfigError("thresholds: expected \"rot_deg,trans,scale\", got \"" +
                        s + "\"");
    t.validate();
    return t;
  }

  nlohmann::json to_json() const {
    return {{"rot_deg", rot_deg}, {"trans", trans}, {"scale_rel", scale_rel}};
  }
};

struct CategoryEval {
  int count = 0;
  double success_rate = 0.0;
  double mean_rot_deg = 0.0;
  double mean_trans = 0.0;
  double mean_scale_rel = 0.0;
};

struct EvalReport {
  EvalThresholds thresholds;
  std::map<int, CategoryEval> categories;
  std::vector<int> missing;  // in routing but absent from the split
  double macro_success = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json jc = nlohmann::json::object();
    for (const auto& [c, e] : categories)
      jc[std::to_string(c)] = {{"count", e.count},
                               {"success_rate", e.success_rate},
                               {"mean_rot_deg", e.mean_rot_deg},
                               {"mean_trans", e.mean_trans},
                               {"mean_scale_rel", e.mean_scale_rel}};
    return {{"thresholds", thresholds.to_json()},
            {"categories", jc},
            {"missing_categories", missing},
            {"macro_success", macro_success}};
  }
};

// Per-instance pose errors against ground truth.
struct PoseErrors {
  double rot_deg = 0.0;
  double trans = 0.0;
  double scale_rel = 0.0;  // max per-axis relative error
};

inline PoseErrors pose_errors(const Pose& pred, const Pose& gt) {
  PoseErrors e;
  e.rot_deg = geodesic_deg(pred.R, gt.R);
  double t2 = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = pred.t[a] - gt.t[a];
    t2 += d * d;
    e.scale_rel = std::max(e.scale_rel, std::abs(pred.s[a] - gt.s[a]) / gt.s[a]);
  }
  e.trans = std::sqrt(t2);
  return e;
}

// Success is strict on all three thresholds; boundary values fail.
inline bool pose_success(const PoseErrors& e, const EvalThresholds& th) {
  return e.rot_deg < th.rot_deg && e.trans < th.trans &&
         e.scale_rel < th.scale_rel;
}

inline EvalReport evaluate_model(const ParamStore& params, const PoseModel& model,
                                 const RoutingTable& routing, const Dataset& data,
                                 const EvalThresholds& th) {
  th.validate();
  EvalReport rep;
  rep.thresholds = th;
  std::set<int> seen;
  for (const auto& inst : data.instances) {
    seen.insert(inst.category);
    auto it = routing.gamma.find(inst.category);
    if (it == routing.gamma.end())
      throw ConfigError("evaluate: category " + std::to_string(inst.category) +
                        " has no routing entry");
    Tape tape;
    auto fwd = model.forward_instance(tape, params, inst.observed, it->second);
    const PoseErrors e = pose_errors(pose_from_prediction(fwd.pose), inst.pose);
    CategoryEval& ce = rep.categories[inst.category];
    ce.count += 1;
    ce.success_rate += pose_success(e, th) ? 1.0 : 0.0;
    ce.mean_rot_deg += e.rot_deg;
    ce.mean_trans += e.trans;
    ce.mean_scale_rel += e.scale_rel;
  }
  double macro = 0.0;
  for (auto& [c, ce] : rep.categories) {
    ce.success_rate /= ce.count;
    ce.mean_rot_deg /= ce.count;
    ce.mean_trans /= ce.count;
    ce.mean_scale_rel /= ce.count;
    macro += ce.success_rate;
  }
  if (!rep.categories.empty()) macro /= static_cast<double>(rep.categories.size());
  rep.macro_success = macro;
  for (const auto& [c, g] : routing.gamma)
    if (!seen.count(c)) rep.missing.push_back(c);
  return rep;
}

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  AdamConfig adam;
  int epochs = 30;
  int batch_size = 16;
  double lr_min = 2e-5;
  double lr_max = 5e-4;
  int lr_cycle = 600;
  std::uint64_t seed = 0;
  // routing source: none | random | quantile | quantile+refine | file
  std::string routing = "none";
  std::string routing_file;     // when routing == "file"
  std::string difficulty_file;  // difficulty proxies {cat: T_c}, quantile modes
  int groups = 3;               // G for random/quantile modes
  int eval_every = 0;           // 0 disables in-training evaluation
  std::string eval_data;        // held-out split path; empty = train split
  EvalThresholds thresholds;

  void validate() const {
    model.validate();
    loss.validate();
    thresholds.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr_min < lr_max)) throw ConfigError("lr_min must be < lr_max");
    if (lr_min <= 0.0) throw ConfigError("lr_min must be positive");
    if (lr_cycle < 1) throw ConfigError("lr_cycle must be >= 1");
    if (groups < 1) throw ConfigError("groups must be >= 1");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    static const std::set<std::string> kSources = {
        "none", "random", "quantile", "quantile+refine", "file"};
    if (!kSources.count(routing))
      throw ConfigError("unknown routing source \"" + routing + "\"");
    if (routing == "file" && routing_file.empty())
      throw ConfigError("routing \"file\" needs routing_file");
    if ((routing == "quantile" || routing == "quantile+refine") &&
        difficulty_file.empty())
      throw ConfigError("routing \"" + routing + "\" needs difficulty_file");
  }

  nlohmann::json to_json() const {
    return {{"v", 1},
            {"model", model.to_json()},
            {"loss", loss.to_json()},
            {"adam",
             {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr_min", lr_min},
            {"lr_max", lr_max},
            {"lr_cycle", lr_cycle},
            {"seed", seed},
            {"routing", routing},
            {"routing_file", routing_file},
            {"difficulty_file", difficulty_file},
            {"groups", groups},
            {"eval_every", eval_every},
            {"eval_data", eval_data},
            {"thresholds", thresholds.to_json()}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    if (!j.contains("v") || j.at("v").get<int>() != 1)
      throw ConfigError("config: missing or unsupported schema version \"v\"");
    TrainConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("loss")) c.loss = LossWeights::from_json(j.at("loss"));
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_cycle = j.value("lr_cycle", c.lr_cycle);
    c.seed = j.value("seed", c.seed);
    c.routing = j.value("routing", c.routing);
    c.routing_file = j.value("routing_file", c.routing_file);
    c.difficulty_file = j.value("difficulty_file", c.difficulty_file);
    c.groups = j.value("groups", c.groups);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_data = j.value("eval_data", c.eval_data);
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      c.thresholds.rot_deg = t.value("rot_deg", c.thresholds.rot_deg);
      c.thresholds.trans = t.value("trans", c.thresholds.trans);
      c.thresholds.scale_rel = t.value("scale_rel", c.thresholds.scale_rel);
    }
    c.validate();
    return c;
  }
};

// Builds the routing table named by cfg.routing and syncs the model's group
// count and capacity map to it. "none" is the fully shared baseline: one
// high-capacity branch for everything.
inline RoutingTable resolve_routing(TrainConfig& cfg, const Dataset& data) {
  std::vector<int> cats;
  for (int c = 0; c < data.header.k; ++c) cats.push_back(c);
  RoutingTable r;
  if (cfg.routing == "none") {
    r = single_group_routing(cats);
  } else if (cfg.routing == "random") {
    r = random_routing(cats, cfg.groups, cfg.seed);
  } else if (cfg.routing == "file") {
    r = RoutingTable::load(cfg.routing_file);
  } else if (cfg.routing == "quantile") {
    DifficultyTable d = DifficultyTable::load(cfg.difficulty_file);
    r = quantile_partition(d, cfg.groups);
  } else {  // quantile+refine needs pilot training runs; the CLI wires those
    throw ConfigError(
        "routing \"quantile+refine\" requires a pilot; build the table with "
        "the group subcommand (or pass routing \"file\")");
  }
  r.validate();
  cfg.model.num_groups = r.num_groups();
  cfg.model.capacity.clear();
  for (const auto& [g, cap] : r.alpha) cfg.model.capacity[g] = cap;
  cfg.model.validate();
  return r;
}

struct StepEvent {
  int epoch = 0;        // 1-based
  long global_step = 0; // 0-based across the whole run
  int category = 0;
  int group = 0;
  double lr = 0.0;
  double loss = 0.0;
  const GradMap* grads = nullptr;
  const ParamStore* params = nullptr;  // post-step values and moments
};

struct TrainHooks {
  std::function<void(const StepEvent&)> after_step;
};

struct TrainResult {
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_last_lr;
  std::map<int, EvalReport> evals;  // epoch -> report, when eval ran
  long steps = 0;
};

namespace detail {

struct BatchRef {
  int category = 0;
  std::vector<int> idx;
};

// Single-category mini-batches: per-category seeded shuffle, chunked (last
// partial batch kept), then the batch order itself is shuffled.
inline std::vector<BatchRef> epoch_batches(const Dataset& data, int batch_size,
                                           Rng& rng) {
  std::vector<BatchRef> out;
  for (int c = 0; c < data.header.k; ++c) {
    std::vector<int> idx = data.indices_of_category(c);
    rng.shuffle(idx);
    for (size_t ofs = 0; ofs < idx.size(); ofs += batch_size) {
      BatchRef b;
      b.category = c;
      const size_t end = std::min(idx.size(), ofs + batch_size);
      b.idx.assign(idx.begin() + ofs, idx.begin() + end);
      out.push_back(std::move(b));
    }
  }
  rng.shuffle(out);
  return out;
}

}  // namespace detail

// One forward+backward over a single-category batch; returns the mean loss
// and the gradient map for the step.
inline double batch_gradients(const PoseModel& model, const ParamStore& params,
                              const LossWeights& w, const Dataset& data,
                              const detail::BatchRef& batch, int group,
                              GradMap& grads) {
  Tape tape;
  Value total = tape.scalar_const(0.0);
  for (int i : batch.idx) {
    const Instance& inst = data.instances[i];
    Value pts = tape.constant(inst.observed);
    auto fwd = model.forward_instance(tape, params, inst.observed, group);
    LossBreakdown lb = instance_loss(tape, params, model, pts, fwd, inst.pose, w);
    total = add(total, lb.total);
  }
  total = scalar_mul(total, 1.0 / static_cast<double>(batch.idx.size()));
  const double loss = total.scalar();
  if (!std::isfinite(loss))
    throw NumericalError("non-finite batch loss at category " +
                         std::to_string(batch.category));
  grads = tape.gradients(total, params);
  return loss;
}

// Trains in place. When outdir is empty nothing is written (pilot mode);
// otherwise checkpoints/epoch_%04d.ckpt and metrics.csv land under outdir.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const RoutingTable& routing, ParamStore& params,
                         const std::filesystem::path& outdir,
                         const Dataset* eval_data = nullptr,
                         const TrainHooks* hooks = nullptr,
                         std::ostream* progress = nullptr) {
  cfg.validate();
  routing.validate();
  for (int c = 0; c < data.header.k; ++c)
    if (!routing.gamma.count(c))
      throw ConfigError("routing covers no group for category " +
                        std::to_string(c));

  const PoseModel model(cfg.model);
  if (params.count() == 0) model.init_params(params, cfg.seed);

  const bool write = !outdir.empty();
  if (write) std::filesystem::create_directories(outdir / "checkpoints");

  std::vector<int> cat_ids;
  for (int c = 0; c < data.header.k; ++c) cat_ids.push_back(c);

  TrainResult res;
  std::string csv = "epoch,mean_loss,lr";
  if (cfg.eval_every > 0)
    for (int c : cat_ids) csv += ",eval_" + std::to_string(c);
  csv += "\n";

  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, 0x45504f43ULL /* "EPOC" */, epoch));
    const auto batches = detail::epoch_batches(data, cfg.batch_size, erng);
    double loss_sum = 0.0;
    double lr = cfg.lr_min;
    for (const auto& b : batches) {
      const int group = routing.gamma.at(b.category);
      GradMap grads;
      const double loss =
          batch_gradients(model, params, cfg.loss, data, b, group, grads);
      lr = cyclic_lr(step, cfg.lr_min, cfg.lr_max, cfg.lr_cycle);
      const std::set<std::string> active = {"psi", "omega",
                                            "phi_" + std::to_string(group)};
      adam_step(params, grads, lr, active, cfg.adam);
      loss_sum += loss;
      if (hooks && hooks->after_step) {
        StepEvent ev;
        ev.epoch = epoch;
        ev.global_step = step;
        ev.category = b.category;
        ev.group = group;
        ev.lr = lr;
        ev.loss = loss;
        ev.grads = &grads;
        ev.params = &params;
        hooks->after_step(ev);
      }
      ++step;
    }
    const double mean_loss = loss_sum / static_cast<double>(batches.size());
    res.epoch_mean_loss.push_back(mean_loss);
    res.epoch_last_lr.push_back(lr);

    if (write) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
      save_checkpoint((outdir / "checkpoints" / name).string(), epoch,
                      cfg.model, routing.to_json(), params);
    }

    csv += std::to_string(epoch) + "," + format_double(mean_loss) + "," +
           format_double(lr);
    if (cfg.eval_every > 0) {
      const bool due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
      if (due) {
        const Dataset& ed = eval_data ? *eval_data : data;
        EvalReport rep =
            evaluate_model(params, model, routing, ed, cfg.thresholds);
        for (int c : cat_ids) {
          auto it = rep.categories.find(c);
          csv += ",";
          csv += it == rep.categories.end() ? "" : format_double(it->second.success_rate);
        }
        res.evals[epoch] = std::move(rep);
      } else {
        for (size_t c = 0; c < cat_ids.size(); ++c) csv += ",";
      }
    }
    csv += "\n";
    if (progress)
      (*progress) << "epoch " << epoch << "/" << cfg.epochs
                  << " mean_loss=" << mean_loss << " lr=" << lr << "\n";
  }
  res.steps = step;
  if (write) atomic_write_file((outdir / "metrics.csv").string(), csv);
  return res;
}

// Pilot evaluator for boundary refinement: trains a throwaway model for a
// few epochs on a fixed fraction of the data under the candidate assignment
// and scores the probed category by negated mean pose error on that subset.
// Success rates are useless that early (all zero), so the score stays
// continuous: higher is better, as Eq-13-style comparison expects.
struct PilotBudget {
  int epochs = 3;
  double fraction = 0.25;
};

inline Dataset pilot_subset(const Dataset& data, double fraction,
                            std::uint64_t seed) {
  Dataset sub;
  sub.header = data.header;
  Rng rng(derive_seed(seed, 0x50494c4fULL /* "PILO" */));
  for (int c = 0; c < data.header.k; ++c) {
    std::vector<int> idx = data.indices_of_category(c);
    rng.shuffle(idx);
    const size_t keep = std::max<size_t>(
        1, static_cast<size_t>(fraction * static_cast<double>(idx.size())));
    for (size_t i = 0; i < keep && i < idx.size(); ++i)
      sub.instances.push_back(data.instances[idx[i]]);
  }
  return sub;
}

inline PilotFn make_training_pilot(const TrainConfig& base, const Dataset& data,
                                   const RoutingTable& current,
                                   const DifficultyTable& diff,
                                   PilotBudget budget = {},
                                   std::ostream* progress = nullptr) {
  // one shared subset; candidate tables are derived from the live gamma so
  // sequential refinement sees earlier moves
  auto subset = std::make_shared<Dataset>(
      pilot_subset(data, budget.fraction, base.seed));
  const RoutingTable* live = &current;
  TrainConfig cfg = base;
  cfg.epochs = budget.epochs;
  cfg.eval_every = 0;
  return [cfg, subset, live, diff, progress](int category, int group) -> double {
    RoutingTable cand = *live;
    cand.gamma[category] = group;
    cand.alpha = allocate_capacity(cand.gamma, diff, cand.num_groups());
    cand.provenance = {{"method", "pilot"}};
    TrainConfig c = cfg;
    c.model.num_groups = cand.num_groups();
    c.model.capacity.clear();
    for (const auto& [g, cap] : cand.alpha) c.model.capacity[g] = cap;
    ParamStore params;
    train(c, *subset, cand, params, {});
    const PoseModel model(c.model);
    EvalThresholds wide;  // thresholds unused by the continuous score
    EvalReport rep = evaluate_model(params, model, cand, *subset, wide);
    const CategoryEval& ce = rep.categories.at(category);
    const double score = -(ce.mean_rot_deg * M_PI / 180.0 + ce.mean_trans +
                           ce.mean_scale_rel);
    if (progress)
      (*progress) << "pilot category " << category << " as group " << group
                  << " score " << score << "\n";
    return score;
  };
}

}  // namespace poselab
