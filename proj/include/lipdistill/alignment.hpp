// SPDX-License-Identifier: Apache-2.0
//
// Gaussian-shaped sliding-window correspondence between the audio and visual
// time axes. Visual frame j draws from a window of audio frames centred on
//   c_j = floor((j + 0.5) · T_a / J)
// with weights exp(-k² / 2σ²) for offsets k in [-(w-1)/2, (w-1)/2]. Offsets that
// fall outside the audio sequence are dropped and the row is renormalised, so
// every row is a convex combination of audio states.
#pragma once

#include <cstddef>
#include <vector>

#include "lipdistill/autodiff.hpp"

namespace lipdistill::align {

struct AlignmentMap {
  std::size_t audio_frames = 0;
  std::size_t visual_frames = 0;
  std::size_t window = 0;
  double sigma = 0.0;
  std::vector<std::size_t> centers;           // one per visual frame
  std::vector<std::size_t> first;             // first audio index with nonzero weight
  std::vector<std::vector<double>> weights;   // contiguous nonzero run per row

  /// Weight of audio frame t in row j (0 outside the window).
  double weight(std::size_t j, std::size_t t) const;
  /// Dense [J×T_a] copy.
  Tensor dense() const;
};

/// Throws std::invalid_argument when T_a < J, J == 0, the window is even or
/// zero, or sigma is not positive.
AlignmentMap build_alignment_map(std::size_t audio_frames, std::size_t visual_frames,
                                 double sigma, std::size_t window);

/// audio_states[T_a×D] -> [J×D]. Differentiable in audio_states; the weights
/// themselves are constants.
ad::Var apply_alignment(const AlignmentMap& map, ad::Var audio_states);
Tensor apply_alignment(const AlignmentMap& map, const Tensor& audio_states);

}  // namespace lipdistill::align
