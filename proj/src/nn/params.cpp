// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/nn/params.hpp"

#include <cmath>
#include <stdexcept>

namespace lipdistill::nn {

void ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  index_.emplace(name, values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
}

std::size_t ParameterSet::index(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + std::string(name));
  return it->second;
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  if (a.names() != b.names()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!lipdistill::bitwise_equal(a.values()[i], b.values()[i])) return false;
  }
  return true;
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable)
    : params_(&params) {
  vars_.reserve(params.size());
  for (const Tensor& t : params.values()) {
    vars_.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  }
}

BoundParams::BoundParams(const ParameterSet& params, std::vector<ad::Var> vars)
    : params_(&params), vars_(std::move(vars)) {
  if (vars_.size() != params.size()) throw std::invalid_argument("bound params: count mismatch");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (vars_[i].shape() != params.values()[i].shape()) {
      throw std::invalid_argument("bound params: shape mismatch for " + params.names()[i]);
    }
  }
}

std::vector<Tensor> BoundParams::gradients() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const ad::Var& v : vars_) out.push_back(v.tape().gradient(v));
  return out;
}

Rng& Context::dropout_rng() const {
  if (rng == nullptr) throw std::logic_error("training-mode forward pass needs a dropout stream");
  return *rng;
}

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Shape shape, Rng& rng) {
  return uniform_init(std::move(shape),
                      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

}  // namespace lipdistill::nn
