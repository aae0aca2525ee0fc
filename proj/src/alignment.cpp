// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/alignment.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lipdistill::align {

double AlignmentMap::weight(std::size_t j, std::size_t t) const {
  if (t < first[j] || t >= first[j] + weights[j].size()) return 0.0;
  return weights[j][t - first[j]];
}

Tensor AlignmentMap::dense() const {
  Tensor out({visual_frames, audio_frames});
  for (std::size_t j = 0; j < visual_frames; ++j) {
    for (std::size_t k = 0; k < weights[j].size(); ++k) {
      out[j * audio_frames + first[j] + k] = weights[j][k];
    }
  }
  return out;
}

AlignmentMap build_alignment_map(std::size_t audio_frames, std::size_t visual_frames,
                                 double sigma, std::size_t window) {
  if (visual_frames == 0) throw std::invalid_argument("alignment: need at least one visual frame");
  if (audio_frames < visual_frames) {
    throw std::invalid_argument("alignment: " + std::to_string(audio_frames) +
                                " audio frames is fewer than " + std::to_string(visual_frames) +
                                " visual frames");
  }
  if (window == 0 || window % 2 == 0) {
    throw std::invalid_argument("alignment: window must be odd and positive, got " +
                                std::to_string(window));
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw std::invalid_argument("alignment: sigma must be positive and finite");
  }

  AlignmentMap map;
  map.audio_frames = audio_frames;
  map.visual_frames = visual_frames;
  map.window = window;
  map.sigma = sigma;
  const long half = static_cast<long>(window / 2);
  const long last = static_cast<long>(audio_frames) - 1;
  for (std::size_t j = 0; j < visual_frames; ++j) {
    // floor((j + 0.5)·T_a/J) in exact integer arithmetic
    const std::size_t c = ((2 * j + 1) * audio_frames) / (2 * visual_frames);
    const long lo = std::max(0L, static_cast<long>(c) - half);
    const long hi = std::min(last, static_cast<long>(c) + half);
    std::vector<double> row;
    double total = 0.0;
    for (long t = lo; t <= hi; ++t) {
      const double k = static_cast<double>(t - static_cast<long>(c));
      row.push_back(std::exp(-k * k / (2.0 * sigma * sigma)));
      total += row.back();
    }
    for (double& w : row) w /= total;
    map.centers.push_back(c);
    map.first.push_back(static_cast<std::size_t>(lo));
    map.weights.push_back(std::move(row));
  }
  return map;
}

namespace {

void check_rows(const AlignmentMap& map, const Tensor& states) {
  if (states.rank() != 2 || states.dim(0) != map.audio_frames) {
    throw std::invalid_argument("apply_alignment: expected [" + std::to_string(map.audio_frames) +
                                "×D] audio states, got " + shape_to_string(states.shape()));
  }
}

void combine(const AlignmentMap& map, const double* src, std::size_t width, double* dst) {
  for (std::size_t j = 0; j < map.visual_frames; ++j) {
    double* out = dst + j * width;
    for (std::size_t k = 0; k < map.weights[j].size(); ++k) {
      const double w = map.weights[j][k];
      const double* in = src + (map.first[j] + k) * width;
      for (std::size_t d = 0; d < width; ++d) out[d] += w * in[d];
    }
  }
}

}  // namespace

Tensor apply_alignment(const AlignmentMap& map, const Tensor& audio_states) {
  check_rows(map, audio_states);
  const std::size_t width = audio_states.dim(1);
  Tensor out({map.visual_frames, width});
  combine(map, audio_states.raw(), width, out.raw());
  return out;
}

ad::Var apply_alignment(const AlignmentMap& map, ad::Var audio_states) {
  Tensor out = apply_alignment(map, audio_states.value());
  const std::size_t width = out.dim(1);
  const std::size_t ia = audio_states.id();
  return audio_states.tape().record(
      std::move(out), {audio_states}, [map, ia, width](ad::Tape& t, std::size_t self) {
        // transpose of the forward combination
        const Tensor& g = t.grad(self);
        double* ga = t.accumulator(ia).raw();
        for (std::size_t j = 0; j < map.visual_frames; ++j) {
          for (std::size_t k = 0; k < map.weights[j].size(); ++k) {
            const double w = map.weights[j][k];
            double* dst = ga + (map.first[j] + k) * width;
            for (std::size_t d = 0; d < width; ++d) dst[d] += w * g[j * width + d];
          }
        }
      });
}

}  // namespace lipdistill::align
