#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "poselab/tensor.hpp"

namespace poselab {

// Block labels: "psi" (shared encoder), "omega" (pose head), "phi_<g>"
// (branch g, 1-based). Branch 0 is not a valid label.
inline bool valid_block_label(const std::string& b) {
  if (b == "psi" || b == "omega") return true;
  if (b.rfind("phi_", 0) != 0 || b.size() <= 4) return false;
  for (size_t i = 4; i < b.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(b[i]))) return false;
  return b[4] != '0';  // no leading zero; smallest valid branch is phi_1
}

struct ParamEntry {
  Tensor value;
  std::string block;
  // Adam state; moments stay zero until the owning block first steps
  Tensor m, v;
  std::int64_t step = 0;
};

// Named parameter collection. std::map keeps iteration order deterministic
// (sorted by name), which the flatten conventions rely on.
class ParamStore {
 public:
  void add(const std::string& name, const std::string& block, Tensor init) {
    if (!valid_block_label(block))
      throw std::invalid_argument("bad block label: " + block);
    if (entries_.count(name))
      throw std::invalid_argument("duplicate parameter: " + name);
    ParamEntry e;
    e.block = block;
    e.m = Tensor::zeros(init.shape);
    e.v = e.m;
    e.value = std::move(init);
    entries_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  ParamEntry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }
  const ParamEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }

  size_t count() const { return entries_.size(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::set<std::string> blocks() const {
    std::set<std::string> out;
    for (const auto& [n, e] : entries_) out.insert(e.block);
    return out;
  }

  // names in a block, sorted (map order): the canonical flatten order
  std::vector<std::string> names_in_block(const std::string& block) const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_)
      if (e.block == block) out.push_back(n);
    return out;
  }

  std::int64_t block_size(const std::string& block) const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_)
      if (e.block == block) n += e.value.size();
    return n;
  }

 private:
  std::map<std::string, ParamEntry> entries_;
};

// Gradient of a scalar loss with respect to every parameter in a store.
// Unreachable parameters map to exact-zero tensors of matching shape.
using GradMap = std::map<std::string, Tensor>;

}  // namespace poselab
