#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace poselab {

// Dense row-major tensor of doubles, rank 0..2. Rank 0 is a scalar with
// shape {} and exactly one element.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Shape shape;
  std::vector<double> data;

  Tensor() = default;  // "unset" sentinel: empty data, used for grad slots

  static Tensor zeros(const Shape& s) { return full(s, 0.0); }

  static Tensor full(const Shape& s, double v) {
    validate_shape(s);
    Tensor t;
    t.shape = s;
    t.data.assign(static_cast<size_t>(shape_numel(s)), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }

  static Tensor from(const Shape& s, std::vector<double> d) {
    validate_shape(s);
    if (static_cast<std::int64_t>(d.size()) != shape_numel(s))
      throw TensorError("tensor data size " + std::to_string(d.size()) +
                        " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = s;
    t.data = std::move(d);
    return t;
  }

  bool unset() const { return data.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? shape[0] : 1); }
  int cols() const { return rank() == 2 ? shape[1] : 1; }

  double& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  double scalar_value() const {
    if (rank() != 0 || data.size() != 1)
      throw TensorError("expected rank-0 tensor, got shape " + shape_str(shape));
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

 private:
  static void validate_shape(const Shape& s) {
    if (s.size() > 2) throw TensorError("rank > 2 unsupported: " + shape_str(s));
    for (int d : s)
      if (d <= 0) throw TensorError("nonpositive dimension in shape " + shape_str(s));
  }
};

}  // namespace poselab
