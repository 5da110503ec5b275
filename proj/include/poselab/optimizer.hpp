#pragma once

#include <cmath>
#include <set>
#include <string>

#include "poselab/param_store.hpp"

namespace poselab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Block-sparse Adam: only parameters whose block is active are touched, so
// inactive branches see exactly-zero moment deltas. Bias correction uses a
// per-parameter step counter; a branch's schedule freezes while it is
// inactive and resumes where it left off.
inline void adam_step(ParamStore& store, const GradMap& grads, double lr,
                      const std::set<std::string>& active_blocks,
                      const AdamConfig& cfg = {}) {
  for (auto& [name, e] : store) {
    if (!active_blocks.count(e.block)) continue;
    const Tensor& g = grads.at(name);
    if (!g.same_shape(e.value))
      throw std::invalid_argument("adam: gradient shape mismatch for " + name);
    e.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
    for (std::int64_t k = 0; k < e.value.size(); ++k) {
      e.m[k] = cfg.beta1 * e.m[k] + (1.0 - cfg.beta1) * g[k];
      e.v[k] = cfg.beta2 * e.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = e.m[k] / bc1;
      const double vhat = e.v[k] / bc2;
      e.value[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// triangular cyclic schedule: lr_min at step 0, lr_max at cycle/2, back to
// lr_min at the cycle boundary
inline double cyclic_lr(long long step, double lr_min, double lr_max,
                        long long cycle) {
  if (cycle < 2) return lr_max;
  const long long pos = step % cycle;
  const double half = static_cast<double>(cycle) / 2.0;
  const double frac = static_cast<double>(pos) < half
                          ? static_cast<double>(pos) / half
                          : (static_cast<double>(cycle - pos)) / half;
  return lr_min + (lr_max - lr_min) * frac;
}

}  // namespace poselab
