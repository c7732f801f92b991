#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "melodi/tensor.hpp"

namespace melodi {

// Owns every named parameter of a model. Initial values depend only on
// (seed, name), so adding or reordering parameters never shifts the values
// of the others.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor normal(const std::string& name, Shape shape, real stddev);
  Tensor constant(const std::string& name, Shape shape, real value);
  Tensor add(const std::string& name, Tensor tensor, bool trainable = true);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  const Parameter* find(const std::string& name) const;
  std::size_t scalar_count() const;
  std::uint64_t seed() const { return seed_; }

  void zero_grad();

 private:
  std::uint64_t seed_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace melodi
