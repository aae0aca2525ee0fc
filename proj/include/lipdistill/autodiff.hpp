// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive applied to tracked values together with a
// closure that pushes the output gradient back to the inputs. Tapes are
// single-use and single-threaded: build one per forward pass, call backward()
// once, read gradients, drop it.
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <vector>

#include "lipdistill/tensor.hpp"

namespace lipdistill::ad {

class Tape;

/// Raised by operations that refuse NaN inputs (softmax and friends).
class NonFiniteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked input: receives a gradient after backward().
  Var leaf(Tensor value);
  /// Untracked input: forward only, never receives a gradient.
  Var constant(Tensor value);

  /// Records an op output. The node is tracked iff any input is tracked; untracked
  /// nodes drop their backward closure.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

  /// Reverse sweep from a tracked scalar. May be called once per tape.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of a node after backward(); zeros when the loss does not reach it.
  Tensor gradient(Var v) const;

  /// Used by backward closures: the node's own upstream gradient.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Used by backward closures: lazily zero-initialised gradient buffer of an input.
  Tensor& accumulator(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward);

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// ---- elementwise --------------------------------------------------------------
// Binary ops accept equal shapes, a single-element operand, or an operand whose
// shape equals the other's with the last dimension replaced by 1.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var exp(Var a);
/// Throws on any non-positive input.
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var scale(Var a, double c);
Var neg(Var a);

// ---- linear algebra -----------------------------------------------------------

Var matmul(Var a, Var b);
/// a[..×N] + b[N], with b broadcast over the leading dimensions.
Var add_bias(Var a, Var b);

// ---- reductions ---------------------------------------------------------------

Var sum(Var a, std::size_t axis);
Var mean(Var a, std::size_t axis);
Var max(Var a, std::size_t axis);
Var sum_all(Var a);
Var mean_all(Var a);

// ---- normalisation ------------------------------------------------------------

/// Softmax over the last axis, stabilised by max-subtraction. Rejects NaN.
Var softmax(Var a);
Var log_softmax(Var a);

// ---- shape --------------------------------------------------------------------

Var reshape(Var a, Shape shape);
Var transpose(Var a);
/// Rows [begin, end) along the first axis.
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// Concatenates 2-D tensors with equal row counts along the column axis.
Var concat_cols(const std::vector<Var>& parts);
/// Concatenates tensors along the first axis.
Var concat_rows(const std::vector<Var>& parts);

// ---- stochastic ---------------------------------------------------------------

/// Inverted dropout; the identity when training is false or rate is 0.
Var dropout(Var a, double rate, std::mt19937_64& rng, bool training);

// ---- convolution --------------------------------------------------------------

/// x[N×Cin×H×W] * w[Cout×Cin×K×K] + b[Cout]; stride 1, same padding (odd K).
Var conv2d(Var x, Var w, Var b);
/// 2×2 average pooling with stride 2 over the last two axes of x[N×C×H×W].
Var avg_pool2x2(Var x);
/// Time-major 1-D convolution: x[T×Cin] * w[K×Cin×Cout] + b[Cout]; same padding.
Var conv1d(Var x, Var w, Var b);

}  // namespace lipdistill::ad
