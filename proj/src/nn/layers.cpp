// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/nn/layers.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "lipdistill/kernels.hpp"

namespace lipdistill::nn {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

// ---- Linear -------------------------------------------------------------------

void Linear::init(ParameterSet& params, Rng& rng) const {
  params.add(name + ".weight", xavier_init(in, out, {in, out}, rng));
  params.add(name + ".bias", Tensor({out}));
}

ad::Var Linear::forward(const Context& ctx, ad::Var x) const {
  const Shape shape = x.shape();
  require(!shape.empty() && shape.back() == in,
          name + ": expected trailing dimension " + std::to_string(in) + ", got " +
              shape_to_string(shape));
  const std::size_t rows = x.value().size() / in;
  ad::Var y = ad::matmul(ad::reshape(x, {rows, in}), ctx.params[name + ".weight"]);
  y = ad::add_bias(y, ctx.params[name + ".bias"]);
  Shape out_shape = shape;
  out_shape.back() = out;
  return ad::reshape(y, out_shape);
}

// ---- GRU ----------------------------------------------------------------------

ad::Var gru_cell(ad::Var x_t, ad::Var h_prev, const GruVars& p) {
  using namespace ad;
  const std::size_t hidden = p.u_z.shape()[0];
  require(x_t.value().rank() == 2 && x_t.shape()[0] == 1 && x_t.shape()[1] == p.w_z.shape()[0],
          "gru_cell: input " + shape_to_string(x_t.shape()) + " does not match weights " +
              shape_to_string(p.w_z.shape()));
  require(h_prev.value().rank() == 2 && h_prev.shape()[0] == 1 && h_prev.shape()[1] == hidden,
          "gru_cell: state " + shape_to_string(h_prev.shape()) + " does not match hidden size " +
              std::to_string(hidden));
  Var z = sigmoid(add_bias(add(matmul(x_t, p.w_z), matmul(h_prev, p.u_z)), p.b_z));
  Var r = sigmoid(add_bias(add(matmul(x_t, p.w_r), matmul(h_prev, p.u_r)), p.b_r));
  Var c = tanh(add_bias(add(matmul(x_t, p.w_h), matmul(mul(r, h_prev), p.u_h)), p.b_h));
  Var one_minus_z = sub(x_t.tape().constant(Tensor::scalar(1.0)), z);
  return add(mul(one_minus_z, h_prev), mul(z, c));
}

ad::Var gru_scan_reference(ad::Var x, const GruVars& p, bool reverse) {
  require(x.value().rank() == 2, "gru_scan: input must be [T×in]");
  const std::size_t steps = x.shape()[0];
  const std::size_t hidden = p.u_z.shape()[0];
  ad::Var h = x.tape().constant(Tensor({1, hidden}));
  std::vector<ad::Var> outs(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    h = gru_cell(ad::slice_rows(x, t, t + 1), h, p);
    outs[t] = h;
  }
  return ad::concat_rows(outs);
}

namespace {

// Forward activations kept for the hand-written backward sweep.
struct GruTrace {
  std::size_t steps = 0, in = 0, hidden = 0;
  bool reverse = false;
  std::vector<double> z, r, c, h_prev, rh;  // each [T×H], indexed by time
};

}  // namespace

ad::Var gru_scan(ad::Var x, const GruVars& p, bool reverse) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "gru_scan: input must be [T×in]");
  const std::size_t steps = xv.dim(0), in = xv.dim(1);
  const std::size_t hidden = p.u_z.shape()[0];
  require(p.w_z.shape() == Shape{in, hidden} && p.w_r.shape() == Shape{in, hidden} &&
              p.w_h.shape() == Shape{in, hidden},
          "gru_scan: input width " + std::to_string(in) + " does not match weights " +
              shape_to_string(p.w_z.shape()));
  require(p.u_z.shape() == Shape{hidden, hidden} && p.u_r.shape() == Shape{hidden, hidden} &&
              p.u_h.shape() == Shape{hidden, hidden} && p.b_z.shape() == Shape{hidden} &&
              p.b_r.shape() == Shape{hidden} && p.b_h.shape() == Shape{hidden},
          "gru_scan: inconsistent recurrent parameter shapes");

  auto tr = std::make_shared<GruTrace>();
  tr->steps = steps;
  tr->in = in;
  tr->hidden = hidden;
  tr->reverse = reverse;
  const std::size_t th = steps * hidden;
  tr->z.assign(th, 0.0);
  tr->r.assign(th, 0.0);
  tr->c.assign(th, 0.0);
  tr->h_prev.assign(th, 0.0);
  tr->rh.assign(th, 0.0);

  // Input projections for all steps at once.
  std::vector<double> xz(th, 0.0), xr(th, 0.0), xh(th, 0.0);
  kernels::gemm_nn(xv.raw(), p.w_z.value().raw(), xz.data(), steps, in, hidden);
  kernels::gemm_nn(xv.raw(), p.w_r.value().raw(), xr.data(), steps, in, hidden);
  kernels::gemm_nn(xv.raw(), p.w_h.value().raw(), xh.data(), steps, in, hidden);

  const double* uz = p.u_z.value().raw();
  const double* ur = p.u_r.value().raw();
  const double* uh = p.u_h.value().raw();
  const double* bz = p.b_z.value().raw();
  const double* br = p.b_r.value().raw();
  const double* bh = p.b_h.value().raw();

  Tensor out({steps, hidden});
  std::vector<double> az(hidden), ar(hidden), ah(hidden), h(hidden, 0.0);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const std::size_t o = t * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      az[j] = xz[o + j] + bz[j];
      ar[j] = xr[o + j] + br[j];
      ah[j] = xh[o + j] + bh[j];
    }
    kernels::gemm_nn(h.data(), uz, az.data(), 1, hidden, hidden);
    kernels::gemm_nn(h.data(), ur, ar.data(), 1, hidden, hidden);
    double* rh = tr->rh.data() + o;
    for (std::size_t j = 0; j < hidden; ++j) {
      tr->h_prev[o + j] = h[j];
      tr->z[o + j] = sigmoid(az[j]);
      tr->r[o + j] = sigmoid(ar[j]);
      rh[j] = tr->r[o + j] * h[j];
    }
    kernels::gemm_nn(rh, uh, ah.data(), 1, hidden, hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
      const double c = std::tanh(ah[j]);
      const double z = tr->z[o + j];
      tr->c[o + j] = c;
      h[j] = (1.0 - z) * h[j] + z * c;
      out[o + j] = h[j];
    }
  }

  const std::size_t ix = x.id();
  const std::vector<std::size_t> ids{p.w_z.id(), p.w_r.id(), p.w_h.id(), p.u_z.id(), p.u_r.id(),
                                     p.u_h.id(), p.b_z.id(), p.b_r.id(), p.b_h.id()};
  return x.tape().record(
      std::move(out), {x, p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h},
      [tr, ix, ids](ad::Tape& tape, std::size_t self) {
        const std::size_t steps = tr->steps, in = tr->in, hidden = tr->hidden;
        const std::size_t th = steps * hidden;
        const Tensor& g = tape.grad(self);
        const double* uz = tape.value(ids[3]).raw();
        const double* ur = tape.value(ids[4]).raw();
        const double* uh = tape.value(ids[5]).raw();

        std::vector<double> gz(th, 0.0), gr(th, 0.0), gh(th, 0.0);
        std::vector<double> carry(hidden, 0.0), dh(hidden), drh(hidden);
        for (std::size_t s = steps; s-- > 0;) {
          const std::size_t t = tr->reverse ? steps - 1 - s : s;
          const std::size_t o = t * hidden;
          for (std::size_t j = 0; j < hidden; ++j) {
            const double d = g[o + j] + carry[j];
            const double z = tr->z[o + j], c = tr->c[o + j], hp = tr->h_prev[o + j];
            dh[j] = d * (1.0 - z);
            gh[o + j] = d * z * (1.0 - c * c);
            gz[o + j] = d * (c - hp) * z * (1.0 - z);
          }
          std::fill(drh.begin(), drh.end(), 0.0);
          kernels::gemm_nt(gh.data() + o, uh, drh.data(), 1, hidden, hidden);
          for (std::size_t j = 0; j < hidden; ++j) {
            const double r = tr->r[o + j];
            gr[o + j] = drh[j] * tr->h_prev[o + j] * r * (1.0 - r);
            dh[j] += drh[j] * r;
          }
          kernels::gemm_nt(gz.data() + o, uz, dh.data(), 1, hidden, hidden);
          kernels::gemm_nt(gr.data() + o, ur, dh.data(), 1, hidden, hidden);
          carry.swap(dh);
        }

        const double* xv = tape.value(ix).raw();
        const std::vector<double>* gates[3] = {&gz, &gr, &gh};
        for (int k = 0; k < 3; ++k) {
          const std::vector<double>& gk = *gates[k];
          if (tape.requires_grad(ids[k])) {
            kernels::gemm_tn(xv, gk.data(), tape.accumulator(ids[k]).raw(), steps, in, hidden);
          }
          if (tape.requires_grad(ids[3 + k])) {
            const double* lhs = k == 2 ? tr->rh.data() : tr->h_prev.data();
            kernels::gemm_tn(lhs, gk.data(), tape.accumulator(ids[3 + k]).raw(), steps, hidden,
                             hidden);
          }
          if (tape.requires_grad(ids[6 + k])) {
            double* gb = tape.accumulator(ids[6 + k]).raw();
            for (std::size_t t = 0; t < steps; ++t) {
              for (std::size_t j = 0; j < hidden; ++j) gb[j] += gk[t * hidden + j];
            }
          }
          if (tape.requires_grad(ix)) {
            kernels::gemm_nt(gk.data(), tape.value(ids[k]).raw(), tape.accumulator(ix).raw(),
                             steps, hidden, in);
          }
        }
      });
}

std::string BiGru::direction_prefix(std::size_t layer, bool backward) const {
  return name + ".l" + std::to_string(layer) + (backward ? ".bwd" : ".fwd");
}

GruVars BiGru::bind(const Context& ctx, std::size_t layer, bool backward) const {
  const std::string p = direction_prefix(layer, backward);
  return GruVars{ctx.params[p + ".w_z"], ctx.params[p + ".w_r"], ctx.params[p + ".w_h"],
                 ctx.params[p + ".u_z"], ctx.params[p + ".u_r"], ctx.params[p + ".u_h"],
                 ctx.params[p + ".b_z"], ctx.params[p + ".b_r"], ctx.params[p + ".b_h"]};
}

void BiGru::init(ParameterSet& params, Rng& rng) const {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t width = l == 0 ? in : 2 * hidden;
    for (bool bwd : {false, true}) {
      const std::string p = direction_prefix(l, bwd);
      for (const char* gate : {"z", "r", "h"}) {
        params.add(p + ".w_" + gate, xavier_init(width, hidden, {width, hidden}, rng));
      }
      for (const char* gate : {"z", "r", "h"}) {
        params.add(p + ".u_" + gate, xavier_init(hidden, hidden, {hidden, hidden}, rng));
      }
      for (const char* gate : {"z", "r", "h"}) params.add(p + ".b_" + gate, Tensor({hidden}));
    }
  }
}

EncoderVars BiGru::forward(const Context& ctx, ad::Var x) const {
  if (x.value().rank() != 2 || x.shape()[0] == 0) {
    throw std::invalid_argument(name + ": expected a non-empty [T×" + std::to_string(in) +
                                "] sequence");
  }
  require(x.shape()[1] == in, name + ": input width " + std::to_string(x.shape()[1]) +
                                  " != " + std::to_string(in));
  ad::Var h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    const GruVars f = bind(ctx, l, false);
    const GruVars b = bind(ctx, l, true);
    ad::Var hf = fused ? gru_scan(h, f, false) : gru_scan_reference(h, f, false);
    ad::Var hb = fused ? gru_scan(h, b, true) : gru_scan_reference(h, b, true);
    h = ad::concat_cols({hf, hb});
    if (l + 1 < layers && ctx.training && dropout > 0.0) {
      h = ad::dropout(h, dropout, ctx.dropout_rng(), true);
    }
  }
  return EncoderVars{h, ad::mean(h, 0)};
}

// ---- squeeze and excitation -----------------------------------------------------

std::size_t SeBlock::reduced() const { return std::max<std::size_t>(1, channels / reduction); }

void SeBlock::init(ParameterSet& params, Rng& rng) const {
  const std::size_t r = reduced();
  params.add(name + ".fc1.weight", xavier_init(channels, r, {channels, r}, rng));
  params.add(name + ".fc1.bias", Tensor({r}));
  params.add(name + ".fc2.weight", xavier_init(r, channels, {r, channels}, rng));
  params.add(name + ".fc2.bias", Tensor({channels}));
}

ad::Var SeBlock::gate(const Context& ctx, ad::Var x) const {
  const Shape& s = x.shape();
  ad::Var squeezed;
  if (s.size() == 4 && s[1] == channels) {
    squeezed = ad::mean(ad::reshape(x, {s[0], channels, s[2] * s[3]}), 2);  // [N×C]
  } else if (s.size() == 2 && s[1] == channels) {
    squeezed = ad::reshape(ad::mean(x, 0), {1, channels});  // [1×C]
  } else {
    throw std::invalid_argument(name + ": unsupported input " + shape_to_string(s));
  }
  ad::Var e = ad::add_bias(ad::matmul(squeezed, ctx.params[name + ".fc1.weight"]),
                           ctx.params[name + ".fc1.bias"]);
  e = ad::relu(e);
  e = ad::add_bias(ad::matmul(e, ctx.params[name + ".fc2.weight"]),
                   ctx.params[name + ".fc2.bias"]);
  return ad::sigmoid(e);
}

ad::Var SeBlock::forward(const Context& ctx, ad::Var x) const {
  const Shape s = x.shape();
  ad::Var g = gate(ctx, x);
  if (s.size() == 4) {
    ad::Var flat = ad::reshape(x, {s[0] * s[1], s[2] * s[3]});
    return ad::reshape(ad::mul(flat, ad::reshape(g, {s[0] * s[1], 1})), s);
  }
  ad::Var xt = ad::transpose(x);  // [C×T]
  return ad::transpose(ad::mul(xt, ad::reshape(g, {channels, 1})));
}

// ---- residual blocks -------------------------------------------------------------

void ResidualBlock2d::init(ParameterSet& params, Rng& rng) const {
  const std::size_t k2 = kernel * kernel;
  params.add(name + ".conv1.weight",
             uniform_init({out, in, kernel, kernel}, std::sqrt(3.0 / double(in * k2)), rng));
  params.add(name + ".conv1.bias", Tensor({out}));
  params.add(name + ".conv2.weight",
             uniform_init({out, out, kernel, kernel}, std::sqrt(3.0 / double(out * k2)), rng));
  params.add(name + ".conv2.bias", Tensor({out}));
  if (has_projection()) {
    params.add(name + ".proj.weight", uniform_init({out, in, 1, 1}, std::sqrt(3.0 / double(in)), rng));
    params.add(name + ".proj.bias", Tensor({out}));
  }
  if (use_se) SeBlock{name + ".se", out, reduction}.init(params, rng);
}

ad::Var ResidualBlock2d::forward(const Context& ctx, ad::Var x) const {
  if (x.value().rank() != 4 || x.shape()[1] != in) {
    throw std::invalid_argument(name + ": expected " + std::to_string(in) +
                                " input channels, got " + shape_to_string(x.shape()));
  }
  ad::Var f = ad::conv2d(x, ctx.params[name + ".conv1.weight"], ctx.params[name + ".conv1.bias"]);
  f = ad::relu(f);
  f = ad::conv2d(f, ctx.params[name + ".conv2.weight"], ctx.params[name + ".conv2.bias"]);
  if (use_se) f = SeBlock{name + ".se", out, reduction}.forward(ctx, f);
  ad::Var shortcut = has_projection() ? ad::conv2d(x, ctx.params[name + ".proj.weight"],
                                                   ctx.params[name + ".proj.bias"])
                                      : x;
  return ad::add(shortcut, f);
}

void ResidualBlock1d::init(ParameterSet& params, Rng& rng) const {
  params.add(name + ".conv1.weight",
             uniform_init({kernel, in, out}, std::sqrt(3.0 / double(in * kernel)), rng));
  params.add(name + ".conv1.bias", Tensor({out}));
  params.add(name + ".conv2.weight",
             uniform_init({kernel, out, out}, std::sqrt(3.0 / double(out * kernel)), rng));
  params.add(name + ".conv2.bias", Tensor({out}));
  if (has_projection()) {
    params.add(name + ".proj.weight", uniform_init({1, in, out}, std::sqrt(3.0 / double(in)), rng));
    params.add(name + ".proj.bias", Tensor({out}));
  }
  if (use_se) SeBlock{name + ".se", out, reduction}.init(params, rng);
}

ad::Var ResidualBlock1d::forward(const Context& ctx, ad::Var x) const {
  if (x.value().rank() != 2 || x.shape()[1] != in) {
    throw std::invalid_argument(name + ": expected [T×" + std::to_string(in) + "], got " +
                                shape_to_string(x.shape()));
  }
  ad::Var f = ad::conv1d(x, ctx.params[name + ".conv1.weight"], ctx.params[name + ".conv1.bias"]);
  f = ad::relu(f);
  f = ad::conv1d(f, ctx.params[name + ".conv2.weight"], ctx.params[name + ".conv2.bias"]);
  if (use_se) f = SeBlock{name + ".se", out, reduction}.forward(ctx, f);
  ad::Var shortcut = has_projection() ? ad::conv1d(x, ctx.params[name + ".proj.weight"],
                                                   ctx.params[name + ".proj.bias"])
                                      : x;
  return ad::add(shortcut, f);
}

// ---- head -------------------------------------------------------------------------

ad::Var ClassifierHead::forward(const Context& ctx, ad::Var seq_vec) const {
  ad::Var x = seq_vec;
  if (ctx.training && dropout > 0.0) x = ad::dropout(x, dropout, ctx.dropout_rng(), true);
  return fc.forward(ctx, x);
}

}  // namespace lipdistill::nn
