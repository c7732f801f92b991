#include "melodi/params.hpp"

#include <random>
#include <stdexcept>

#include "melodi/rng.hpp"

namespace melodi {

Tensor ParameterStore::normal(const std::string& name, Shape shape, real stddev) {
  std::mt19937_64 gen(stream_key({seed_, fnv1a(name)}));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<real> values(numel(shape));
  for (real& v : values) v = static_cast<real>(dist(gen));
  return add(name, Tensor::from(std::move(shape), std::move(values), true));
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, real value) {
  return add(name, Tensor::full(std::move(shape), value, true));
}

Tensor ParameterStore::add(const std::string& name, Tensor tensor, bool trainable) {
  if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.node()->requires_grad = trainable;
  index_.emplace(name, params_.size());
  params_.push_back({name, tensor, trainable});
  return tensor;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  const auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

}  // namespace melodi
