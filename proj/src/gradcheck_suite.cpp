// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>

#include "lipdistill/alignment.hpp"
#include "lipdistill/losses.hpp"
#include "lipdistill/nn/models.hpp"

namespace lipdistill {

namespace {

using ad::Var;
using nn::Context;

struct Case {
  std::vector<Tensor> params;
  ScalarFn fn;
};

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * normal(rng);
  return t;
}

/// Scalar read-out with a nonzero, non-uniform gradient everywhere:
/// Σ c⊙y + ½Σ y².
Var probe(Var y, const Tensor& c) {
  ad::Tape& t = y.tape();
  return ad::add(ad::sum_all(ad::mul(y, t.constant(c))), ad::scale(ad::sum_all(ad::mul(y, y)), 0.5));
}

/// Probe with weights drawn on first use, once the output shape is known.
Var probe_once(Var y, std::optional<Tensor>& weights, std::uint64_t seed) {
  if (!weights) {
    Rng rng = derive_stream(seed, {0x9808E});
    weights = randn(y.shape(), rng);
  }
  return probe(y, *weights);
}

nn::ModelConfig tiny_model() {
  nn::ModelConfig m;
  m.visual_frames = 4;
  m.visual_channels = 1;
  m.frame_size = 8;
  m.visual_widths = {2, 3};
  m.audio_frames = 10;
  m.audio_bins = 4;
  m.audio_widths = {3, 3, 3};
  m.feature_dim = 3;
  m.se_reduction = 2;
  m.hidden_size = 2;
  m.gru_layers = 3;
  m.num_classes = 3;
  m.dropout = 0.2;
  return m;
}

/// A layer owning a ParameterSet plus one input tensor; every parameter and the
/// input are checked.
template <typename Forward>
Case layer_case(std::shared_ptr<nn::ParameterSet> params, Tensor input, bool training,
                std::uint64_t seed, Forward forward) {
  Case c;
  c.params = params->values();
  c.params.push_back(std::move(input));
  auto weights = std::make_shared<std::optional<Tensor>>();
  c.fn = [params, training, seed, forward, weights](ad::Tape& tape, const std::vector<Var>& v) {
    std::vector<Var> pv(v.begin(), v.end() - 1);
    nn::BoundParams bound(*params, pv);
    Rng drop = derive_stream(seed, {0xD809});
    Context ctx{tape, bound, training, &drop};
    return probe_once(forward(ctx, v.back()), *weights, seed);
  };
  return c;
}

/// A pure function of a few tensors.
Case tensor_case(std::vector<Tensor> params, std::uint64_t seed,
                 std::function<Var(ad::Tape&, const std::vector<Var>&)> f) {
  auto weights = std::make_shared<std::optional<Tensor>>();
  Case c;
  c.params = std::move(params);
  c.fn = [f, weights, seed](ad::Tape& tape, const std::vector<Var>& v) {
    Var y = f(tape, v);
    if (y.value().size() == 1) return ad::sum_all(y);
    return probe_once(y, *weights, seed);
  };
  return c;
}

nn::GruVars gru_vars(const std::vector<Var>& v, std::size_t offset) {
  return {v[offset], v[offset + 1], v[offset + 2], v[offset + 3], v[offset + 4],
          v[offset + 5], v[offset + 6], v[offset + 7], v[offset + 8]};
}

std::vector<Tensor> gru_tensors(std::size_t in, std::size_t hidden, Rng& rng) {
  std::vector<Tensor> out;
  for (int i = 0; i < 3; ++i) out.push_back(randn({in, hidden}, rng, 0.6));
  for (int i = 0; i < 3; ++i) out.push_back(randn({hidden, hidden}, rng, 0.6));
  for (int i = 0; i < 3; ++i) out.push_back(randn({hidden}, rng, 0.3));
  return out;
}

using Builder = std::function<Case(std::uint64_t)>;

const std::vector<std::pair<std::string, Builder>>& registry() {
  static const std::vector<std::pair<std::string, Builder>> all = {
      {"matmul_bias",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {1});
         return tensor_case({randn({3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)}, seed,
                            [](ad::Tape&, const std::vector<Var>& v) {
                              return ad::tanh(ad::add_bias(ad::matmul(v[0], v[1]), v[2]));
                            });
       }},
      {"elementwise",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {2});
         return tensor_case({randn({2, 3}, rng), randn({2, 3}, rng), randn({2, 1}, rng)}, seed,
                            [](ad::Tape& t, const std::vector<Var>& v) {
                              Var num = ad::add(ad::mul(v[0], ad::sigmoid(v[1])), ad::tanh(v[2]));
                              Var den = ad::add(ad::exp(v[1]), t.constant(Tensor::scalar(1.0)));
                              Var pos = ad::log(ad::add(ad::exp(v[0]), ad::exp(v[2])));
                              return ad::sub(ad::div(num, den), ad::neg(ad::scale(pos, 0.3)));
                            });
       }},
      {"softmax_reductions",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {3});
         return tensor_case({randn({3, 4}, rng)}, seed, [](ad::Tape&, const std::vector<Var>& v) {
           Var a = ad::log_softmax(v[0]);
           Var b = ad::softmax(v[0]);
           return ad::concat_cols({ad::reshape(ad::sum(a, 1), {3, 1}), ad::reshape(ad::max(b, 1), {3, 1}),
                                   ad::reshape(ad::mean(ad::transpose(v[0]), 0), {3, 1})});
         });
       }},
      {"conv2d",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {4});
         return tensor_case({randn({2, 2, 5, 5}, rng), randn({3, 2, 3, 3}, rng, 0.5), randn({3}, rng)},
                            seed, [](ad::Tape&, const std::vector<Var>& v) {
                              return ad::avg_pool2x2(ad::conv2d(v[0], v[1], v[2]));
                            });
       }},
      {"conv1d",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {5});
         return tensor_case({randn({6, 3}, rng), randn({3, 3, 4}, rng, 0.5), randn({4}, rng)}, seed,
                            [](ad::Tape&, const std::vector<Var>& v) { return ad::conv1d(v[0], v[1], v[2]); });
       }},
      {"linear",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {6});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::Linear layer{"fc", 3, 4};
         layer.init(*params, rng);
         return layer_case(params, randn({2, 3}, rng), false, seed,
                           [layer](const Context& ctx, Var x) { return layer.forward(ctx, x); });
       }},
      {"gru_cell",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {7});
         auto p = gru_tensors(3, 2, rng);
         p.push_back(randn({1, 3}, rng));
         p.push_back(randn({1, 2}, rng, 0.5));
         return tensor_case(p, seed, [](ad::Tape&, const std::vector<Var>& v) {
           return nn::gru_cell(v[9], v[10], gru_vars(v, 0));
         });
       }},
      {"gru_scan",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {8});
         auto p = gru_tensors(3, 2, rng);
         p.push_back(randn({5, 3}, rng));
         return tensor_case(p, seed, [](ad::Tape&, const std::vector<Var>& v) {
           const auto g = gru_vars(v, 0);
           return ad::concat_cols({nn::gru_scan(v[9], g, false), nn::gru_scan(v[9], g, true)});
         });
       }},
      {"bigru",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {9});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::BiGru gru{"enc", 3, 2, 3, 0.3};
         gru.init(*params, rng);
         // biases start at zero; move them off it so their gradients are exercised
         for (std::size_t i = 0; i < params->size(); ++i) {
           if (params->values()[i].rank() == 1) params->values()[i] = randn(params->values()[i].shape(), rng, 0.3);
         }
         return layer_case(params, randn({4, 3}, rng), true, seed, [gru](const Context& ctx, Var x) {
           const auto enc = gru.forward(ctx, x);
           return ad::concat_rows({ad::reshape(enc.frame_states, {8, 2}),
                                   ad::reshape(enc.sequence_vector, {2, 2})});
         });
       }},
      {"se_block",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {10});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::SeBlock se{"se", 4, 2};
         se.init(*params, rng);
         return layer_case(params, randn({2, 4, 3, 3}, rng), false, seed,
                           [se](const Context& ctx, Var x) { return se.forward(ctx, x); });
       }},
      {"se_block_sequence",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {11});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::SeBlock se{"se", 4, 2};
         se.init(*params, rng);
         return layer_case(params, randn({5, 4}, rng), false, seed,
                           [se](const Context& ctx, Var x) { return se.forward(ctx, x); });
       }},
      {"residual_block2d",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {12});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::ResidualBlock2d block{"res", 2, 3, true, 2, 3};
         block.init(*params, rng);
         return layer_case(params, randn({2, 2, 4, 4}, rng), false, seed,
                           [block](const Context& ctx, Var x) { return block.forward(ctx, x); });
       }},
      {"residual_block1d",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {13});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::ResidualBlock1d block{"res", 3, 4, false, 2, 3};
         block.init(*params, rng);
         return layer_case(params, randn({6, 3}, rng), false, seed,
                           [block](const Context& ctx, Var x) { return block.forward(ctx, x); });
       }},
      {"visual_frontend",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {14});
         auto model = std::make_shared<nn::StudentModel>(tiny_model(), true, seed);
         auto params = std::shared_ptr<nn::ParameterSet>(model, &model->params());
         return layer_case(params, randn(model->input_shape(), rng), true, seed,
                           [model](const Context& ctx, Var x) { return model->frontend(ctx, x); });
       }},
      {"audio_frontend",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {15});
         auto model = std::make_shared<nn::TeacherModel>(tiny_model(), seed);
         auto params = std::shared_ptr<nn::ParameterSet>(model, &model->params());
         return layer_case(params, randn(model->input_shape(), rng), false, seed,
                           [model](const Context& ctx, Var x) { return model->frontend(ctx, x); });
       }},
      {"classifier_head",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {16});
         auto params = std::make_shared<nn::ParameterSet>();
         const nn::ClassifierHead head{nn::Linear{"head", 4, 3}, 0.3};
         head.init(*params, rng);
         return layer_case(params, randn({4}, rng), true, seed,
                           [head](const Context& ctx, Var x) { return head.forward(ctx, x); });
       }},
      {"label_smoothed_ce",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {17});
         const Tensor q = loss::SmoothedTarget::make(5, seed % 5, 0.1).distribution;
         return tensor_case({randn({5}, rng)}, seed, [q](ad::Tape&, const std::vector<Var>& v) {
           return loss::label_smoothed_ce(v[0], q);
         });
       }},
      {"mixup_ce",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {18});
         const double lambda = uniform(rng, 0.0, 1.0);
         Tensor q({2, 4});
         for (std::size_t i = 0; i < 2; ++i) {
           const Tensor m = loss::mix(loss::SmoothedTarget::make(4, i, 0.1).distribution,
                                      loss::SmoothedTarget::make(4, 3 - i, 0.1).distribution, lambda);
           for (std::size_t k = 0; k < 4; ++k) q[i * 4 + k] = m[k];
         }
         return tensor_case({randn({2, 4}, rng)}, seed, [q](ad::Tape&, const std::vector<Var>& v) {
           return loss::label_smoothed_ce(v[0], q);
         });
       }},
      {"seq_kd",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {19});
         const Tensor teacher = randn({6}, rng);
         return tensor_case({randn({6}, rng)}, seed, [teacher](ad::Tape&, const std::vector<Var>& v) {
           return loss::seq_kd_loss(teacher, v[0]);
         });
       }},
      {"frame_kd",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {20});
         const Tensor teacher = randn({4, 3}, rng);
         return tensor_case({randn({4, 3}, rng)}, seed, [teacher](ad::Tape&, const std::vector<Var>& v) {
           return loss::frame_kd_loss(v[0], teacher);
         });
       }},
      {"alignment",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {21});
         const auto map = align::build_alignment_map(14, 4, 1.5, 5);
         return tensor_case({randn({14, 3}, rng)}, seed, [map](ad::Tape&, const std::vector<Var>& v) {
           return align::apply_alignment(map, v[0]);
         });
       }},
      {"teacher_objective",
       [](std::uint64_t seed) {
         Rng rng = derive_stream(seed, {22});
         auto model = std::make_shared<nn::TeacherModel>(tiny_model(), seed);
         const Tensor input = randn(model->input_shape(), rng);
         const Tensor q = loss::SmoothedTarget::make(3, seed % 3, 0.1).distribution;
         Case c;
         c.params = model->params().values();
         c.fn = [model, input, q, seed](ad::Tape& tape, const std::vector<Var>& v) {
           nn::BoundParams bound(model->params(), v);
           Rng drop = derive_stream(seed, {0xD809});
           Context ctx{tape, bound, true, &drop};
           const auto enc = model->encode(ctx, tape.constant(input));
           return loss::label_smoothed_ce(model->logits(ctx, enc.sequence_vector), q);
         };
         return c;
       }},
      {"student_objective",
       [](std::uint64_t seed) {
         // base + λ1·KD1 + λ2·KD2 on a tiny student against fixed teacher targets
         Rng rng = derive_stream(seed, {23});
         const nn::ModelConfig cfg = tiny_model();
         auto student = std::make_shared<nn::StudentModel>(cfg, true, seed);
         const nn::TeacherModel teacher(cfg, seed + 1);
         const auto map = align::build_alignment_map(cfg.audio_frames, cfg.visual_frames, 3.0, 7);
         Tensor teacher_seq, teacher_frames;
         {
           ad::Tape tape;
           nn::BoundParams bound(tape, teacher.params(), false);
           Context ctx{tape, bound, false, nullptr};
           const auto enc = teacher.encode(ctx, tape.constant(randn(teacher.input_shape(), rng)));
           teacher_seq = enc.sequence_vector.value();
           teacher_frames = align::apply_alignment(map, enc.frame_states.value());
         }
         const Tensor input = randn(student->input_shape(), rng);
         const Tensor q = loss::SmoothedTarget::make(3, seed % 3, 0.1).distribution;
         loss::DistillConfig dc;
         dc.kd1_enabled = dc.kd2_enabled = true;
         Case c;
         c.params = student->params().values();
         c.fn = [=](ad::Tape& tape, const std::vector<Var>& v) {
           nn::BoundParams bound(student->params(), v);
           Rng drop = derive_stream(seed, {0xD809});
           Context ctx{tape, bound, true, &drop};
           const auto enc = student->encode(ctx, tape.constant(input));
           const Var base = loss::label_smoothed_ce(student->logits(ctx, enc.sequence_vector), q);
           return loss::total_loss(base, loss::seq_kd_loss(teacher_seq, enc.sequence_vector),
                                   loss::frame_kd_loss(enc.frame_states, teacher_frames), dc);
         };
         return c;
       }},
  };
  return all;
}

}  // namespace

std::vector<std::string> gradcheck_components() {
  std::vector<std::string> names;
  for (const auto& [name, builder] : registry()) names.push_back(name);
  return names;
}

std::vector<ComponentResult> run_gradcheck_suite(const std::vector<std::uint64_t>& seeds,
                                                 const GradCheckOptions& options,
                                                 const std::vector<std::string>& only) {
  for (const auto& name : only) {
    bool known = false;
    for (const auto& [n, b] : registry()) known = known || n == name;
    if (!known) throw std::invalid_argument("unknown gradcheck component '" + name + "'");
  }
  std::vector<ComponentResult> out;
  for (const auto& [name, builder] : registry()) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    for (std::uint64_t seed : seeds) {
      Case c = builder(seed);
      out.push_back({name, seed, finite_diff_check(c.fn, c.params, options)});
    }
  }
  return out;
}

}  // namespace lipdistill
