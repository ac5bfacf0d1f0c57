#pragma once

#include <map>
#include <string>
#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Named-array checkpoint container: "<path>.manifest" is a text file listing
// config key/values and tensor names + shapes in order; "<path>.bin" holds
// the arrays concatenated in manifest order as little-endian f32 or f64.
// save -> load -> save is byte-identical at either precision.
class Checkpoint {
 public:
  enum class Precision { kF32, kF64 };

  Precision precision = Precision::kF64;
  std::map<std::string, std::string> config;         // free-form metadata
  std::vector<std::pair<std::string, Tensor>> arrays;  // manifest order

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;
  const Tensor& require(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace chunklm
