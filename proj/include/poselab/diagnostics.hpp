#pragma once

// Offline checkpoint-replay gradient diagnostics: per-category gradient
// collection over a fixed subset, pairwise/aggregate interaction cosines,
// the shared/deviation decomposition, and its closed-form oracles.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "poselab/checkpoint.hpp"
#include "poselab/grouping.hpp"
#include "poselab/losses.hpp"
#include "poselab/synthdata.hpp"

namespace poselab {

struct ReplayConfig {
  int batches_per_category = 8;
  int batch_size = 16;
  std::uint64_t subset_seed = 11;
  bool frequency_weighted = false;  // batch-count weights for the complement
};

// Fixed diagnostic subset: the same plan is replayed at every checkpoint.
struct BatchPlan {
  int batch_size = 0;
  std::vector<std::vector<std::vector<int>>> batches;  // [cat][batch][row]
};

inline BatchPlan make_batch_plan(const Dataset& data, const ReplayConfig& cfg) {
  if (cfg.batches_per_category < 1 || cfg.batch_size < 1)
    throw ConfigError("replay: batches_per_category and batch_size must be >= 1");
  BatchPlan plan;
  plan.batch_size = cfg.batch_size;
  plan.batches.resize(data.header.k);
  Rng rng(derive_seed(cfg.subset_seed, 0x44494147ULL /* "DIAG" */));
  for (int c = 0; c < data.header.k; ++c) {
    std::vector<int> idx = data.indices_of_category(c);
    if (idx.empty())
      throw DataError(DataErrorCode::kBadHeader,
                      "replay: category " + std::to_string(c) +
                          " has zero batches in the diagnostic subset");
    rng.shuffle(idx);
    auto& cat = plan.batches[c];
    cat.resize(cfg.batches_per_category);
    size_t cursor = 0;
    for (auto& b : cat)
      for (int i = 0; i < cfg.batch_size; ++i) {
        b.push_back(idx[cursor]);
        cursor = (cursor + 1) % idx.size();  // cycle small categories
      }
  }
  return plan;
}

// Per-(epoch, block) flattened category gradients. Block vectors concatenate
// the block's parameters in sorted-name order; "phi" is the union of all
// branch blocks, which also get their own per-branch entries when G > 1.
struct CategoryGradientTable {
  int epoch = 0;
  std::vector<std::string> blocks;
  std::map<std::string, std::vector<std::vector<double>>> g_c;
  std::map<std::string, std::vector<std::vector<double>>> g_not;
  std::vector<int> batch_count;
};

namespace detail {

inline bool in_block(const std::string& param_block, const std::string& block) {
  if (block == "phi") return param_block.rfind("phi_", 0) == 0;
  return param_block == block;
}

inline std::vector<std::string> block_params(const ParamStore& s,
                                             const std::string& block) {
  std::vector<std::string> names;  // ParamStore iterates name-sorted
  for (const auto& [name, e] : s)
    if (in_block(e.block, block)) names.push_back(name);
  return names;
}

inline void accumulate_flat(const GradMap& grads,
                            const std::vector<std::string>& names,
                            std::vector<double>& acc) {
  size_t ofs = 0;
  for (const auto& n : names) {
    const Tensor& g = grads.at(n);
    for (std::int64_t k = 0; k < g.size(); ++k) acc[ofs + k] += g[k];
    ofs += static_cast<size_t>(g.size());
  }
}

inline double vdot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double vnorm(const std::vector<double>& a) {
  return std::sqrt(vdot(a, a));
}

}  // namespace detail

// One replay pass: forward+backward per planned batch at frozen parameters,
// no updates, averaged per category (and complement) per block.
inline CategoryGradientTable replay_gradients(const ParamStore& params,
                                              const ModelConfig& mcfg,
                                              const RoutingTable& routing,
                                              const LossWeights& weights,
                                              const Dataset& data,
                                              const BatchPlan& plan,
                                              int epoch,
                                              bool frequency_weighted = false) {
  const PoseModel model(mcfg);
  const int k = static_cast<int>(plan.batches.size());
  CategoryGradientTable table;
  table.epoch = epoch;
  table.blocks = {"psi", "phi", "omega"};
  if (mcfg.num_groups > 1)
    for (int g = 1; g <= mcfg.num_groups; ++g)
      table.blocks.push_back("phi_" + std::to_string(g));

  std::map<std::string, std::vector<std::string>> names;
  std::map<std::string, size_t> width;
  for (const auto& b : table.blocks) {
    names[b] = detail::block_params(params, b);
    size_t w = 0;
    for (const auto& n : names[b]) w += static_cast<size_t>(params.at(n).value.size());
    width[b] = w;
    table.g_c[b].assign(k, {});
    table.g_not[b].assign(k, {});
    for (auto& v : table.g_c[b]) v.assign(w, 0.0);
  }
  table.batch_count.assign(k, 0);

  for (int c = 0; c < k; ++c) {
    const int group = routing.gamma.at(c);
    for (const auto& batch : plan.batches[c]) {
      Tape tape;
      Value total = tape.scalar_const(0.0);
      for (int i : batch) {
        const Instance& inst = data.instances[i];
        Value pts = tape.constant(inst.observed);
        auto fwd = model.forward_instance(tape, params, inst.observed, group);
        total = add(total,
                    instance_loss(tape, params, model, pts, fwd, inst.pose, weights).total);
      }
      total = scalar_mul(total, 1.0 / static_cast<double>(batch.size()));
      GradMap grads = tape.gradients(total, params);
      for (const auto& b : table.blocks)
        detail::accumulate_flat(grads, names[b], table.g_c[b][c]);
      table.batch_count[c] += 1;
    }
    for (const auto& b : table.blocks)
      for (auto& x : table.g_c[b][c]) x /= static_cast<double>(table.batch_count[c]);
  }

  // complement averages: uniform over the other categories by default,
  // batch-count weighted under the frequency flag
  for (const auto& b : table.blocks) {
    for (int c = 0; c < k; ++c) {
      std::vector<double> acc(width[b], 0.0);
      double wsum = 0.0;
      for (int o = 0; o < k; ++o) {
        if (o == c) continue;
        const double w =
            frequency_weighted ? static_cast<double>(table.batch_count[o]) : 1.0;
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += w * table.g_c[b][o][j];
        wsum += w;
      }
      if (wsum > 0.0)
        for (auto& x : acc) x /= wsum;
      table.g_not[b][c] = std::move(acc);
    }
  }
  return table;
}

// cosine similarity between two category gradients (Eq. 2)
inline double s_cc(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = detail::vnorm(a), nb = detail::vnorm(b);
  if (na == 0.0 || nb == 0.0)
    throw std::domain_error("s_cc: cosine undefined for a zero gradient vector");
  return detail::vdot(a, b) / (na * nb);
}

// category-to-all score (Eqs. 3-4): cosine against the complement mean
inline double s_ca(const std::vector<double>& g_c,
                   const std::vector<double>& g_not_c) {
  return s_cc(g_c, g_not_c);
}

// shared/deviation split (Eq. 7): u is the uniform mean, v_c the residuals
struct Decomposition {
  std::vector<double> u;
  std::vector<std::vector<double>> v;
  std::vector<double> uv_dot;  // per-category orthogonality residuals
};

inline Decomposition decompose(const std::vector<std::vector<double>>& g) {
  if (g.empty()) throw std::invalid_argument("decompose: no gradients");
  Decomposition d;
  d.u.assign(g[0].size(), 0.0);
  for (const auto& gc : g)
    for (size_t j = 0; j < d.u.size(); ++j) d.u[j] += gc[j];
  for (auto& x : d.u) x /= static_cast<double>(g.size());
  d.v.resize(g.size());
  for (size_t c = 0; c < g.size(); ++c) {
    d.v[c].resize(d.u.size());
    for (size_t j = 0; j < d.u.size(); ++j) d.v[c][j] = g[c][j] - d.u[j];
    d.uv_dot.push_back(detail::vdot(d.u, d.v[c]));
  }
  return d;
}

// r_theta = mean_c ||v_c||^2 / ||u||^2 (Eq. 9); infinity when u vanishes
inline double heterogeneity_ratio(const Decomposition& d,
                                  std::string* warning = nullptr) {
  const double u2 = detail::vdot(d.u, d.u);
  double vbar = 0.0;
  for (const auto& vc : d.v) vbar += detail::vdot(vc, vc);
  vbar /= static_cast<double>(d.v.size());
  if (u2 == 0.0) {
    if (warning) *warning = "heterogeneity ratio undefined: shared gradient is zero";
    return std::numeric_limits<double>::infinity();
  }
  return vbar / u2;
}

enum class ClosedFormMode { kExact, kApprox };

// S_cc from the decomposition: exact keeps the <u,v> cross terms, approx
// drops them (the near-orthogonality regime).
inline double closed_form_scc(const std::vector<double>& u,
                              const std::vector<double>& vc,
                              const std::vector<double>& vcp,
                              ClosedFormMode mode) {
  const double u2 = detail::vdot(u, u);
  const double vv = detail::vdot(vc, vcp);
  const double c2 = detail::vdot(vc, vc), p2 = detail::vdot(vcp, vcp);
  if (mode == ClosedFormMode::kApprox)
    return (u2 + vv) / (std::sqrt(u2 + c2) * std::sqrt(u2 + p2));
  const double uc = detail::vdot(u, vc), up = detail::vdot(u, vcp);
  return (u2 + uc + up + vv) /
         (std::sqrt(u2 + 2.0 * uc + c2) * std::sqrt(u2 + 2.0 * up + p2));
}

// S_ca analog against the complement deviation mean v_not
inline double closed_form_sca(const std::vector<double>& u,
                              const std::vector<double>& vc,
                              const std::vector<double>& v_not,
                              ClosedFormMode mode) {
  return closed_form_scc(u, vc, v_not, mode);
}

// normalized deviation magnitudes and deviation correlations
struct NormalizedForms {
  std::vector<double> alpha;           // ||v_c||^2 / ||u||^2
  std::vector<double> beta;            // ||v_not_c||^2 / ||u||^2
  std::vector<std::vector<double>> rho;  // deviation cosines, 1 on diagonal
  std::vector<double> rho_not;         // corr(v_c, v_not_c)
};

inline NormalizedForms normalized_forms(const Decomposition& d) {
  const size_t k = d.v.size();
  const double u2 = detail::vdot(d.u, d.u);
  NormalizedForms nf;
  nf.rho.assign(k, std::vector<double>(k, 1.0));
  for (size_t c = 0; c < k; ++c)
    nf.alpha.push_back(u2 > 0.0 ? detail::vdot(d.v[c], d.v[c]) / u2
                                : std::numeric_limits<double>::infinity());
  for (size_t c = 0; c < k; ++c)
    for (size_t o = c + 1; o < k; ++o) {
      const double nc = detail::vnorm(d.v[c]), no = detail::vnorm(d.v[o]);
      const double r = (nc == 0.0 || no == 0.0)
                           ? 0.0
                           : detail::vdot(d.v[c], d.v[o]) / (nc * no);
      nf.rho[c][o] = nf.rho[o][c] = r;
    }
  for (size_t c = 0; c < k; ++c) {
    std::vector<double> vn(d.u.size(), 0.0);
    for (size_t o = 0; o < k; ++o)
      if (o != c)
        for (size_t j = 0; j < vn.size(); ++j) vn[j] += d.v[o][j];
    for (auto& x : vn) x /= static_cast<double>(k - 1);
    const double nn = detail::vnorm(vn), nc = detail::vnorm(d.v[c]);
    nf.beta.push_back(u2 > 0.0 ? nn * nn / u2
                               : std::numeric_limits<double>::infinity());
    nf.rho_not.push_back(nc == 0.0 || nn == 0.0
                             ? 0.0
                             : detail::vdot(d.v[c], vn) / (nc * nn));
  }
  return nf;
}

// rewritten predictions in (alpha, rho) variables; algebraically equal to
// the approx closed forms
inline double rewritten_scc(double alpha_c, double alpha_cp, double rho) {
  return (1.0 + rho * std::sqrt(alpha_c * alpha_cp)) /
         std::sqrt((1.0 + alpha_c) * (1.0 + alpha_cp));
}

inline double rewritten_sca(double alpha_c, double beta_c, double rho_not) {
  return (1.0 + rho_not * std::sqrt(alpha_c * beta_c)) /
         std::sqrt((1.0 + alpha_c) * (1.0 + beta_c));
}

struct BlockStats {
  double mu_cc = 0.0;
  double var_cc = 0.0;
  double nbar = 0.0;
  double r_theta = 0.0;
  std::vector<std::vector<double>> s_cc_matrix;  // NaN where excluded
  std::vector<double> s_ca_vec;                  // NaN where excluded
  std::vector<double> n_c;
  std::vector<double> alpha, beta, uv_dot;
  double mean_rho = 0.0;
  int excluded_pairs = 0;
  std::vector<std::string> warnings;
};

struct ContentionReport {
  int epoch = 0;
  std::vector<std::string> blocks;  // stable order for CSV emission
  std::map<std::string, BlockStats> stats;
};

inline BlockStats block_stats(const std::vector<std::vector<double>>& g,
                              const std::vector<std::vector<double>>& g_not) {
  const size_t k = g.size();
  BlockStats st;
  st.s_cc_matrix.assign(k, std::vector<double>(k, 1.0));
  std::vector<double> norms(k);
  for (size_t c = 0; c < k; ++c) norms[c] = detail::vnorm(g[c]);

  double sum = 0.0, sum2 = 0.0;
  int pairs = 0;
  for (size_t c = 0; c < k; ++c)
    for (size_t o = c + 1; o < k; ++o) {
      if (norms[c] == 0.0 || norms[o] == 0.0) {
        st.s_cc_matrix[c][o] = st.s_cc_matrix[o][c] =
            std::numeric_limits<double>::quiet_NaN();
        st.excluded_pairs += 1;
        continue;
      }
      const double s = detail::vdot(g[c], g[o]) / (norms[c] * norms[o]);
      st.s_cc_matrix[c][o] = st.s_cc_matrix[o][c] = s;
      sum += s;
      sum2 += s * s;
      pairs += 1;
    }
  if (st.excluded_pairs > 0)
    st.warnings.push_back(std::to_string(st.excluded_pairs) +
                          " zero-gradient pair(s) excluded from mu/var");
  if (pairs > 0) {
    st.mu_cc = sum / pairs;
    st.var_cc = sum2 / pairs - st.mu_cc * st.mu_cc;  // population variance
  }

  int ca_count = 0;
  double ca_sum = 0.0;
  for (size_t c = 0; c < k; ++c) {
    const double nn = detail::vnorm(g_not[c]);
    if (norms[c] == 0.0 || nn == 0.0) {
      st.s_ca_vec.push_back(std::numeric_limits<double>::quiet_NaN());
      st.n_c.push_back(std::numeric_limits<double>::quiet_NaN());
      st.warnings.push_back("S_ca undefined for category " + std::to_string(c));
      continue;
    }
    const double s = detail::vdot(g[c], g_not[c]) / (norms[c] * nn);
    st.s_ca_vec.push_back(s);
    st.n_c.push_back(1.0 - s);
    ca_sum += 1.0 - s;
    ca_count += 1;
  }
  if (ca_count > 0) st.nbar = ca_sum / ca_count;

  Decomposition d = decompose(g);
  st.uv_dot = d.uv_dot;
  std::string warn;
  st.r_theta = heterogeneity_ratio(d, &warn);
  if (!warn.empty()) st.warnings.push_back(warn);
  NormalizedForms nf = normalized_forms(d);
  st.alpha = nf.alpha;
  st.beta = nf.beta;
  double rho_sum = 0.0;
  int rho_n = 0;
  for (size_t c = 0; c < k; ++c)
    for (size_t o = c + 1; o < k; ++o) {
      rho_sum += nf.rho[c][o];
      rho_n += 1;
    }
  if (rho_n > 0) st.mean_rho = rho_sum / rho_n;
  return st;
}

inline ContentionReport contention_stats(const CategoryGradientTable& table) {
  ContentionReport rep;
  rep.epoch = table.epoch;
  rep.blocks = table.blocks;
  for (const auto& b : table.blocks)
    rep.stats[b] = block_stats(table.g_c.at(b), table.g_not.at(b));
  return rep;
}

inline nlohmann::json contention_report_json(const ContentionReport& rep) {
  nlohmann::json jb = nlohmann::json::object();
  for (const auto& b : rep.blocks) {
    const BlockStats& st = rep.stats.at(b);
    jb[b] = {{"mu_cc", st.mu_cc},
             {"var_cc", st.var_cc},
             {"nbar", st.nbar},
             {"r_theta", st.r_theta},
             {"s_cc", st.s_cc_matrix},
             {"s_ca", st.s_ca_vec},
             {"n_c", st.n_c},
             {"alpha", st.alpha},
             {"beta", st.beta},
             {"uv_dot", st.uv_dot},
             {"mean_rho", st.mean_rho},
             {"excluded_pairs", st.excluded_pairs},
             {"warnings", st.warnings}};
  }
  return {{"epoch", rep.epoch}, {"blocks", jb}};
}

// diag/ layout: contention_epoch_%04d.json, s_cc_epoch_%04d_<block>.csv,
// and one timeseries.csv across epochs
inline void write_contention_outputs(const std::filesystem::path& dir,
                                     const std::vector<ContentionReport>& reps) {
  std::filesystem::create_directories(dir);
  std::string ts = "epoch,block,mu_cc,var_cc,nbar,r_theta\n";
  for (const auto& rep : reps) {
    char name[48];
    std::snprintf(name, sizeof(name), "contention_epoch_%04d.json", rep.epoch);
    atomic_write_file((dir / name).string(),
                      contention_report_json(rep).dump(2) + "\n");
    for (const auto& b : rep.blocks) {
      const BlockStats& st = rep.stats.at(b);
      ts += std::to_string(rep.epoch) + "," + b + "," + format_double(st.mu_cc) +
            "," + format_double(st.var_cc) + "," + format_double(st.nbar) + "," +
            format_double(st.r_theta) + "\n";
      std::string m;
      for (const auto& row : st.s_cc_matrix) {
        for (size_t j = 0; j < row.size(); ++j) {
          if (j) m += ",";
          m += std::isnan(row[j]) ? "" : format_double(row[j]);
        }
        m += "\n";
      }
      std::snprintf(name, sizeof(name), "s_cc_epoch_%04d_%s.csv", rep.epoch,
                    b.c_str());
      atomic_write_file((dir / name).string(), m);
    }
  }
  atomic_write_file((dir / "timeseries.csv").string(), ts);
}

struct ScalingRow {
  double r = 0.0;
  double mean_scc = 0.0;
  double predicted = 0.0;
};

// Synthetic check of the S = 1/(1+r) law: u plus K mutually orthogonal
// deviations of relative squared norm r, direct cosines measured.
inline std::vector<ScalingRow> scaling_law_check(const std::vector<double>& r_grid,
                                                 int trials, int k, int dim,
                                                 std::uint64_t seed) {
  if (dim < k + 1) throw std::invalid_argument("scaling_law_check: dim < k+1");
  std::vector<ScalingRow> out;
  for (double r : r_grid) {
    double acc = 0.0;
    int cnt = 0;
    for (int trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(seed, 0x53434c41ULL /* "SCLA" */, trial));
      std::vector<std::vector<double>> basis;  // u first, then deviation dirs
      for (int b = 0; b < k + 1; ++b) {
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.normal(0.0, 1.0);
        for (int pass = 0; pass < 2; ++pass)  // re-orthogonalize for 1e-9 slack
          for (const auto& p : basis) {
            const double d = detail::vdot(v, p);
            for (int j = 0; j < dim; ++j) v[j] -= d * p[j];
          }
        const double n = detail::vnorm(v);
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
      }
      const double umag = std::exp(rng.uniform(std::log(0.1), std::log(10.0)));
      std::vector<std::vector<double>> g(k, std::vector<double>(dim));
      const double vmag = std::sqrt(r) * umag;
      for (int c = 0; c < k; ++c)
        for (int j = 0; j < dim; ++j)
          g[c][j] = umag * basis[0][j] + vmag * basis[c + 1][j];
      for (int c = 0; c < k; ++c)
        for (int o = c + 1; o < k; ++o) {
          acc += s_cc(g[c], g[o]);
          cnt += 1;
        }
    }
    out.push_back({r, acc / cnt, 1.0 / (1.0 + r)});
  }
  return out;
}

}  // namespace poselab
