#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselab/io_util.hpp"
#include "poselab/rng.hpp"

namespace poselab {

// Per-category difficulty proxy T_c in [0, 1] (higher = easier, e.g. a
// success rate on held-out data). Difficulty is d(c) = 1 - T_c.
struct DifficultyTable {
  std::map<int, double> proxy;

  static DifficultyTable from_proxy(std::map<int, double> t) {
    for (const auto& [c, v] : t)
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("difficulty proxy for category " +
                                    std::to_string(c) + " outside [0,1]");
    DifficultyTable d;
    d.proxy = std::move(t);
    return d;
  }

  double difficulty(int c) const { return 1.0 - proxy.at(c); }

  std::vector<int> categories() const {
    std::vector<int> out;
    for (const auto& [c, v] : proxy) out.push_back(c);
    return out;
  }

  // {"0": 0.97, "1": 0.84, ...}
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [c, v] : proxy) j[std::to_string(c)] = v;
    return j;
  }

  static DifficultyTable from_json(const nlohmann::json& j) {
    std::map<int, double> t;
    for (auto it = j.begin(); it != j.end(); ++it)
      t[std::stoi(it.key())] = it.value().get<double>();
    return from_proxy(std::move(t));
  }

  void save(const std::string& path) const {
    atomic_write_file(path, to_json().dump(2) + "\n");
  }

  static DifficultyTable load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataErrorCode::kBadHeader,
                      std::string("difficulty table: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw DataError(DataErrorCode::kBadHeader,
                      std::string("difficulty table: ") + e.what());
    }
  }
};

// ascending difficulty, ties broken by ascending category id
inline std::vector<int> difficulty_order(const DifficultyTable& t) {
  std::vector<int> order = t.categories();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = t.difficulty(a), db = t.difficulty(b);
    return da < db || (da == db && a < b);
  });
  return order;
}

// b_g = floor(g * K / G) for g = 1..G; group g holds sorted positions
// (b_{g-1}, b_g]
inline std::vector<int> quantile_boundaries(int k, int g) {
  if (g < 1 || g > k)
    throw std::invalid_argument("quantile_boundaries: need 1 <= G <= K");
  std::vector<int> b(static_cast<size_t>(g));
  for (int i = 1; i <= g; ++i)
    b[i - 1] = static_cast<int>(static_cast<long long>(i) * k / g);
  return b;
}

// group -> 'H' if the group's mean difficulty is strictly below the median
// category difficulty, else 'L' (hard groups get the constrained branch).
// Median over all categories; even counts average the two middle values.
inline std::map<int, char> allocate_capacity(const std::map<int, int>& gamma,
                                             const DifficultyTable& t,
                                             int num_groups) {
  std::vector<double> all;
  for (const auto& [c, grp] : gamma) all.push_back(t.difficulty(c));
  std::sort(all.begin(), all.end());
  const size_t k = all.size();
  const double median =
      k % 2 == 1 ? all[k / 2] : 0.5 * (all[k / 2 - 1] + all[k / 2]);

  std::map<int, double> sum;
  std::map<int, int> count;
  for (const auto& [c, grp] : gamma) {
    sum[grp] += t.difficulty(c);
    count[grp] += 1;
  }
  std::map<int, char> alpha;
  for (int g = 1; g <= num_groups; ++g) {
    if (!count.count(g)) {
      alpha[g] = 'L';  // unused branch; capacity is moot but must be defined
      continue;
    }
    alpha[g] = sum[g] / count[g] < median ? 'H' : 'L';
  }
  return alpha;
}

struct RoutingTable {
  std::map<int, int> gamma;   // category -> group (1-based)
  std::map<int, char> alpha;  // group -> 'H' | 'L'
  nlohmann::json provenance = nlohmann::json::object();

  int num_groups() const {
    int g = 0;
    for (const auto& [grp, c] : alpha) g = std::max(g, grp);
    return g;
  }

  void validate() const {
    if (gamma.empty()) throw ConfigError("routing: empty gamma");
    for (const auto& [c, grp] : gamma) {
      if (!alpha.count(grp))
        throw ConfigError("routing: category " + std::to_string(c) +
                          " routed to group " + std::to_string(grp) +
                          " with no capacity entry");
    }
    for (const auto& [grp, cap] : alpha) {
      if (grp < 1)
        throw ConfigError("routing: group ids are 1-based, got " +
                          std::to_string(grp));
      if (cap != 'H' && cap != 'L')
        throw ConfigError("routing: capacity must be 'H' or 'L'");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json jg = nlohmann::json::object(), ja = nlohmann::json::object();
    for (const auto& [c, grp] : gamma) jg[std::to_string(c)] = grp;
    for (const auto& [grp, cap] : alpha)
      ja[std::to_string(grp)] = std::string(1, cap);
    return {{"gamma", jg}, {"alpha", ja}, {"provenance", provenance}};
  }

  static RoutingTable from_json(const nlohmann::json& j) {
    RoutingTable r;
    try {
      for (const auto& [k, v] : j.at("gamma").items())
        r.gamma[std::stoi(k)] = v.get<int>();
      for (const auto& [k, v] : j.at("alpha").items())
        r.alpha[std::stoi(k)] = v.get<std::string>().at(0);
      r.provenance = j.value("provenance", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("routing: ") + e.what());
    }
    r.validate();
    return r;
  }

  void save(const std::string& path) const {
    atomic_write_file(path, to_json().dump(2) + "\n");
  }

  static RoutingTable load(const std::string& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("routing file " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

// difficulty-quantile partition (no refinement): sort ascending, cut at the
// quantile boundaries, then allocate capacity
inline RoutingTable quantile_partition(const DifficultyTable& t, int num_groups,
                                       const std::string& estimator = "") {
  const std::vector<int> order = difficulty_order(t);
  const std::vector<int> bounds =
      quantile_boundaries(static_cast<int>(order.size()), num_groups);
  RoutingTable r;
  int g = 1;
  for (size_t pos = 0; pos < order.size(); ++pos) {
    while (static_cast<int>(pos) >= bounds[g - 1]) ++g;
    r.gamma[order[pos]] = g;
  }
  r.alpha = allocate_capacity(r.gamma, t, num_groups);
  r.provenance = {{"method", "quantile"},
                  {"estimator", estimator},
                  {"boundaries", bounds},
                  {"order", order},
                  {"refinement", nlohmann::json::array()},
                  {"warnings", nlohmann::json::array()}};
  return r;
}

// pilot(category, group) -> score, higher is better
using PilotFn = std::function<double(int, int)>;

// Single left-to-right pass over internal boundaries: the last category of
// group g (in difficulty order) moves to group g+1 iff the pilot score
// improves (strictly). A move that would empty group g is skipped and
// logged. Capacity is re-allocated afterwards.
inline void refine_boundaries(RoutingTable& r, const DifficultyTable& t,
                              int num_groups, const PilotFn& pilot) {
  const std::vector<int> order = difficulty_order(t);
  const std::vector<int> bounds =
      quantile_boundaries(static_cast<int>(order.size()), num_groups);
  nlohmann::json log = nlohmann::json::array();
  for (int g = 1; g < num_groups; ++g) {
    const int boundary_pos = bounds[g - 1];  // 1-indexed position b_g
    const int cat = order[boundary_pos - 1];
    int members = 0;
    for (const auto& [c, grp] : r.gamma)
      if (grp == g) ++members;
    nlohmann::json entry = {{"boundary", g}, {"category", cat}};
    if (r.gamma.at(cat) != g) {
      // an earlier probe already moved it; boundaries are probed once
      entry["skipped"] = "category no longer in group";
      log.push_back(entry);
      continue;
    }
    if (members <= 1) {
      entry["skipped"] = "move would empty group";
      log.push_back(entry);
      continue;
    }
    const double s_keep = pilot(cat, g);
    const double s_move = pilot(cat, g + 1);
    const bool moved = s_move > s_keep;
    if (moved) r.gamma[cat] = g + 1;
    entry["score_keep"] = s_keep;
    entry["score_move"] = s_move;
    entry["moved"] = moved;
    log.push_back(entry);
  }
  r.alpha = allocate_capacity(r.gamma, t, num_groups);
  r.provenance["method"] = "quantile+refine";
  r.provenance["refinement"] = log;
}

// trivial routings used by the trainer's baseline/random modes
inline RoutingTable single_group_routing(const std::vector<int>& categories) {
  RoutingTable r;
  for (int c : categories) r.gamma[c] = 1;
  r.alpha[1] = 'H';
  r.provenance = {{"method", "none"}};
  return r;
}

inline RoutingTable random_routing(const std::vector<int>& categories,
                                   int num_groups, std::uint64_t seed) {
  // random balanced assignment; capacities alternate H/L so the branch mix
  // matches what a difficulty-aware table of the same G would produce
  std::vector<int> cats = categories;
  Rng rng(derive_seed(seed, 0x524f5554ULL /* "ROUT" */));
  rng.shuffle(cats);
  RoutingTable r;
  for (size_t i = 0; i < cats.size(); ++i)
    r.gamma[cats[i]] = 1 + static_cast<int>(i % num_groups);
  for (int g = 1; g <= num_groups; ++g) r.alpha[g] = g % 2 == 1 ? 'H' : 'L';
  r.provenance = {{"method", "random"}, {"seed", seed}};
  return r;
}

}  // namespace poselab
