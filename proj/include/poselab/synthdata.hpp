#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "poselab/geometry.hpp"
#include "poselab/rng.hpp"
#include "poselab/tensor.hpp"

namespace poselab {

// Superellipsoid family with an angular bump term. Every category shares a
// fixed asymmetric radial modulation so that orientation is identifiable
// (plain superellipsoids have 180-degree rotational symmetries, which would
// make ground-truth rotation unrecoverable even for "easy" categories).
struct CategorySpec {
  int id = 0;
  double e1_lo = 0.85, e1_hi = 1.15;  // elevation exponent range
  double e2_lo = 0.85, e2_hi = 1.15;  // azimuth exponent range
  double bump_amp = 0.05;             // < 0.3 keeps shapes star-convex
  int bump_freq = 3;
  int difficulty_rank = 0;

  bool operator==(const CategorySpec&) const = default;
};

enum class Profile { kUniform, kGraded };

inline Profile profile_from_string(const std::string& s) {
  if (s == "uniform") return Profile::kUniform;
  if (s == "graded") return Profile::kGraded;
  throw std::invalid_argument("unknown difficulty profile: " + s);
}

inline const char* profile_to_string(Profile p) {
  return p == Profile::kUniform ? "uniform" : "graded";
}

// graded: exponent-range width and bump amplitude grow linearly with the
// category index; uniform: identical specs apart from id
inline std::vector<CategorySpec> make_category_specs(int k, Profile profile,
                                                     std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("make_category_specs: K must be >= 1");
  std::vector<CategorySpec> out(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) {
    CategorySpec& sp = out[c];
    sp.id = c;
    if (profile == Profile::kUniform) continue;  // keep defaults
    Rng rng(derive_seed(seed, 0x53504543ULL /* "SPEC" */,
                        static_cast<std::uint64_t>(c)));
    const double ramp = k > 1 ? static_cast<double>(c) / (k - 1) : 0.0;
    const double w1 = 0.1 + 0.5 * ramp;
    const double w2 = 0.1 + 0.5 * ramp;
    const double c1 = 1.0 + rng.uniform(-0.04, 0.04);
    const double c2 = 1.0 + rng.uniform(-0.04, 0.04);
    sp.e1_lo = c1 - 0.5 * w1;
    sp.e1_hi = c1 + 0.5 * w1;
    sp.e2_lo = c2 - 0.5 * w2;
    sp.e2_hi = c2 + 0.5 * w2;
    sp.bump_amp = 0.02 + 0.25 * ramp;
    sp.bump_freq = 2 + c;
    sp.difficulty_rank = c;
  }
  return out;
}

struct Instance {
  int category = 0;
  std::uint32_t record_seed = 0;
  Tensor canonical;  // [N,3], f32-quantized
  Tensor observed;   // [N,3], f32-quantized
  Pose pose;
  double sigma = 0.0;
};

namespace detail {

inline double sgnpow(double c, double e) {
  if (c == 0.0) return 0.0;
  return (c > 0.0 ? 1.0 : -1.0) * std::pow(std::fabs(c), e);
}

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

// One instance, fully determined by (spec, n, sigma, seed). Draw order is
// part of the format: exponents, axes, surface angles, pose, then noise.
inline Instance sample_instance(const CategorySpec& spec, int n, double sigma,
                                std::uint32_t seed) {
  if (n < 1) throw std::invalid_argument("sample_instance: N must be >= 1");
  if (sigma < 0.0) throw std::invalid_argument("sample_instance: sigma < 0");
  Rng rng(seed);
  Instance inst;
  inst.category = spec.id;
  inst.record_seed = seed;
  inst.sigma = sigma;

  const double e1 = rng.uniform(spec.e1_lo, spec.e1_hi);
  const double e2 = rng.uniform(spec.e2_lo, spec.e2_hi);
  const double ax = rng.uniform(0.6, 1.0);
  const double ay = rng.uniform(0.6, 1.0);
  const double az = rng.uniform(0.6, 1.0);

  std::vector<double> pts(3 * static_cast<size_t>(n));
  double max_abs[3] = {0.0, 0.0, 0.0};
  for (int i = 0; i < n; ++i) {
    const double eta = std::asin(rng.uniform(-1.0, 1.0));
    const double omega = rng.uniform(-M_PI, M_PI);
    const double ce = std::cos(eta), se = std::sin(eta);
    const double co = std::cos(omega), so = std::sin(omega);
    double x = ax * detail::sgnpow(ce, e1) * detail::sgnpow(co, e2);
    double y = ay * detail::sgnpow(ce, e1) * detail::sgnpow(so, e2);
    double z = az * detail::sgnpow(se, e1);
    // orientation markers: a one-sided +x bulge and a +z polar dimple make
    // all three axes (and their signs) identifiable from gross shape, which
    // a plain superellipsoid's 180-degree flip symmetries would forbid
    const double asym = 1.0 + 0.45 * std::max(co * ce, 0.0);
    const double dimple = 1.0 - 0.5 * std::pow(std::max(se, 0.0), 6.0);
    const double bump =
        1.0 + spec.bump_amp * std::sin(spec.bump_freq * omega) *
                  std::cos(spec.bump_freq * eta);
    const double radial = asym * dimple * bump;
    x *= radial;
    y *= radial;
    z *= radial;
    pts[3 * i + 0] = x;
    pts[3 * i + 1] = y;
    pts[3 * i + 2] = z;
    max_abs[0] = std::max(max_abs[0], std::fabs(x));
    max_abs[1] = std::max(max_abs[1], std::fabs(y));
    max_abs[2] = std::max(max_abs[2], std::fabs(z));
  }
  // normalize each canonical axis to half-extent 0.5; anisotropy lives
  // entirely in the pose scale, which keeps per-axis canonical spread a
  // function of shape alone
  for (int a = 0; a < 3; ++a) {
    const double scale = max_abs[a] > 0.0 ? 0.5 / max_abs[a] : 1.0;
    for (int i = 0; i < n; ++i) pts[3 * i + a] *= scale;
  }

  inst.pose.R = quat_to_mat(rng.unit_quaternion());
  for (int a = 0; a < 3; ++a) inst.pose.t[a] = rng.uniform(-1.0, 1.0);
  for (int a = 0; a < 3; ++a)
    inst.pose.s[a] = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));

  inst.canonical = Tensor::zeros({n, 3});
  inst.observed = Tensor::zeros({n, 3});
  for (int i = 0; i < n; ++i) {
    Vec3 p{pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]};
    Vec3 obs = forward_map(p, inst.pose);
    for (int a = 0; a < 3; ++a) {
      // coordinates are quantized through f32 at creation so that the file
      // format round-trips bit-exactly
      inst.canonical.at(i, a) = detail::quantize_f32(p[a]);
      inst.observed.at(i, a) =
          detail::quantize_f32(obs[a] + (sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0));
    }
  }
  return inst;
}

struct DatasetHeader {
  int k = 6;
  int g_default = 3;
  int n = 256;
  std::uint64_t seed = 0;
  double sigma = 0.01;
  std::string split = "train";
  std::string profile = "graded";
  std::vector<CategorySpec> specs;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Instance> instances;  // grouped by category, category-major

  std::vector<int> indices_of_category(int c) const {
    std::vector<int> out;
    for (size_t i = 0; i < instances.size(); ++i)
      if (instances[i].category == c) out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> categories() const {
    std::vector<int> out;
    for (int c = 0; c < header.k; ++c) out.push_back(c);
    return out;
  }
};

struct GenConfig {
  int k = 6;
  int g_default = 3;
  int n = 256;
  int per_category = 400;
  double sigma = 0.01;
  std::uint64_t seed = 0;
  std::string split = "train";
  Profile profile = Profile::kGraded;
};

inline std::uint32_t record_seed_for(std::uint64_t dataset_seed,
                                     const std::string& split, int category,
                                     int index) {
  return static_cast<std::uint32_t>(
      derive_seed(dataset_seed, fnv1a(split),
                  static_cast<std::uint64_t>(category),
                  static_cast<std::uint64_t>(index)));
}

inline Dataset make_dataset(const GenConfig& cfg) {
  if (cfg.per_category < 1)
    throw std::invalid_argument("make_dataset: per_category must be >= 1");
  Dataset d;
  d.header.k = cfg.k;
  d.header.g_default = cfg.g_default;
  d.header.n = cfg.n;
  d.header.seed = cfg.seed;
  d.header.sigma = cfg.sigma;
  d.header.split = cfg.split;
  d.header.profile = profile_to_string(cfg.profile);
  d.header.specs = make_category_specs(cfg.k, cfg.profile, cfg.seed);
  d.instances.reserve(static_cast<size_t>(cfg.k) * cfg.per_category);
  for (int c = 0; c < cfg.k; ++c)
    for (int i = 0; i < cfg.per_category; ++i)
      d.instances.push_back(
          sample_instance(d.header.specs[c], cfg.n, cfg.sigma,
                          record_seed_for(cfg.seed, cfg.split, c, i)));
  return d;
}

}  // namespace poselab
