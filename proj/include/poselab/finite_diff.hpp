#pragma once

#include <functional>

#include "poselab/param_store.hpp"
#include "poselab/tensor.hpp"

namespace poselab {

// Central-difference gradient oracle. Rebuilds the forward pass through `f`
// for every +/- eps probe, so it is independent of the tape's backward rules.
inline GradMap finite_difference_gradient(
    const std::function<double(const ParamStore&)>& f, ParamStore& params,
    double eps = 1e-5) {
  GradMap out;
  for (auto& [name, entry] : params) {
    Tensor grad = Tensor::zeros(entry.value.shape);
    for (std::int64_t k = 0; k < entry.value.size(); ++k) {
      const double orig = entry.value[k];
      entry.value[k] = orig + eps;
      const double fp = f(params);
      entry.value[k] = orig - eps;
      const double fm = f(params);
      entry.value[k] = orig;
      grad[k] = (fp - fm) / (2.0 * eps);
    }
    out[name] = std::move(grad);
  }
  return out;
}

// |a - b| <= max(abs_floor, rel * max(|a|, |b|)), elementwise over two maps
inline bool grads_close(const GradMap& a, const GradMap& b, double rel = 1e-4,
                        double abs_floor = 1e-7, std::string* why = nullptr) {
  for (const auto& [name, ga] : a) {
    auto it = b.find(name);
    if (it == b.end()) {
      if (why) *why = "missing key " + name;
      return false;
    }
    const Tensor& gb = it->second;
    if (!ga.same_shape(gb)) {
      if (why) *why = "shape mismatch at " + name;
      return false;
    }
    for (std::int64_t k = 0; k < ga.size(); ++k) {
      const double tol =
          std::max(abs_floor, rel * std::max(std::fabs(ga[k]), std::fabs(gb[k])));
      if (std::fabs(ga[k] - gb[k]) > tol) {
        if (why)
          *why = name + "[" + std::to_string(k) + "]: " +
                 std::to_string(ga[k]) + " vs " + std::to_string(gb[k]);
        return false;
      }
    }
  }
  return a.size() == b.size();
}

}  // namespace poselab
