// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lipdistill/autodiff.hpp"
#include "lipdistill/random.hpp"
#include "lipdistill/tensor.hpp"

namespace lipdistill::nn {

/// Named, ordered parameter tensors of one model.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value);

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }
  std::size_t index(std::string_view name) const;
  const Tensor& get(std::string_view name) const { return values_[index(name)]; }
  Tensor& get(std::string_view name) { return values_[index(name)]; }

  std::size_t size() const { return values_.size(); }
  std::size_t element_count() const;
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b);

/// A ParameterSet copied onto a tape, either as tracked leaves or as constants.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable);
  /// Wraps vars already on a tape, one per parameter in ParameterSet order.
  BoundParams(const ParameterSet& params, std::vector<ad::Var> vars);

  ad::Var operator[](std::string_view name) const { return vars_[params_->index(name)]; }
  const std::vector<ad::Var>& vars() const { return vars_; }

  /// Gradients in ParameterSet order; call after Tape::backward.
  std::vector<Tensor> gradients() const;

 private:
  const ParameterSet* params_;
  std::vector<ad::Var> vars_;
};

/// Everything a forward pass needs besides its input.
struct Context {
  ad::Tape& tape;
  const BoundParams& params;
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; required when training

  Rng& dropout_rng() const;
};

// Initialisers. Draws are made in call order from rng.
Tensor uniform_init(Shape shape, double bound, Rng& rng);
Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Shape shape, Rng& rng);

}  // namespace lipdistill::nn
