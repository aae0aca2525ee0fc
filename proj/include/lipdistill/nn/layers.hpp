// SPDX-License-Identifier: Apache-2.0
//
// Building blocks shared by the audio teacher and the visual student. Each
// block owns only its name prefix and dimensions; the tensors live in a
// ParameterSet and are looked up through the forward Context.
#pragma once

#include <string>
#include <vector>

#include "lipdistill/nn/params.hpp"

namespace lipdistill::nn {

struct Linear {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;

  void init(ParameterSet& params, Rng& rng) const;
  /// x[..×in] -> x·W + b, shape [..×out].
  ad::Var forward(const Context& ctx, ad::Var x) const;
};

/// Per-direction GRU weights in row-vector convention:
///   z = σ(x·W_z + h·U_z + b_z), r = σ(x·W_r + h·U_r + b_r)
///   c = tanh(x·W_h + (r⊙h)·U_h + b_h), h' = (1 − z)⊙h + z⊙c
struct GruVars {
  ad::Var w_z, w_r, w_h;  // [in×H]
  ad::Var u_z, u_r, u_h;  // [H×H]
  ad::Var b_z, b_r, b_h;  // [H]
};

/// One GRU step built from tape primitives. x_t [1×in], h_prev [1×H] -> [1×H].
ad::Var gru_cell(ad::Var x_t, ad::Var h_prev, const GruVars& p);

/// Full scan over x[T×in] from a zero state as a single fused tape node.
/// The reverse direction reads time backwards but writes outputs in input order.
ad::Var gru_scan(ad::Var x, const GruVars& p, bool reverse);

/// Same result as gru_scan, unrolled through gru_cell. Kept as the reference
/// the fused kernel is tested against.
ad::Var gru_scan_reference(ad::Var x, const GruVars& p, bool reverse);

struct EncoderVars {
  ad::Var frame_states;     // [T×2H]
  ad::Var sequence_vector;  // [2H], temporal mean of frame_states
};

struct EncoderOutput {
  Tensor frame_states;
  Tensor sequence_vector;
};

struct BiGru {
  std::string name;
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t layers = 3;
  double dropout = 0.0;  // between stacked layers, training only
  bool fused = true;

  std::size_t output_dim() const { return 2 * hidden; }
  std::string direction_prefix(std::size_t layer, bool backward) const;
  GruVars bind(const Context& ctx, std::size_t layer, bool backward) const;

  void init(ParameterSet& params, Rng& rng) const;
  /// x[T×in] -> final-layer states [T×2H] and their temporal mean.
  EncoderVars forward(const Context& ctx, ad::Var x) const;
};

/// Squeeze-and-excitation gate. Accepts [N×C×H×W] (gated per leading sample)
/// or time-major [T×C] (one gate for the whole sequence).
struct SeBlock {
  std::string name;
  std::size_t channels = 0;
  std::size_t reduction = 4;

  std::size_t reduced() const;
  void init(ParameterSet& params, Rng& rng) const;
  ad::Var gate(const Context& ctx, ad::Var x) const;  // values in (0,1)
  ad::Var forward(const Context& ctx, ad::Var x) const;
};

/// y = shortcut(x) + F(x), F = conv → relu → conv (→ SE). The shortcut is the
/// identity when in == out, otherwise a 1×1 projection.
struct ResidualBlock2d {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  bool use_se = true;
  std::size_t reduction = 4;
  std::size_t kernel = 3;

  bool has_projection() const { return in != out; }
  void init(ParameterSet& params, Rng& rng) const;
  /// x[N×in×H×W] -> [N×out×H×W]
  ad::Var forward(const Context& ctx, ad::Var x) const;
};

/// Time-major 1-D counterpart of ResidualBlock2d: x[T×in] -> [T×out].
struct ResidualBlock1d {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  bool use_se = false;
  std::size_t reduction = 4;
  std::size_t kernel = 3;

  bool has_projection() const { return in != out; }
  void init(ParameterSet& params, Rng& rng) const;
  ad::Var forward(const Context& ctx, ad::Var x) const;
};

struct ClassifierHead {
  Linear fc;
  double dropout = 0.0;

  void init(ParameterSet& params, Rng& rng) const { fc.init(params, rng); }
  /// seq_vec[D] -> logits[N]
  ad::Var forward(const Context& ctx, ad::Var seq_vec) const;
};

}  // namespace lipdistill::nn
