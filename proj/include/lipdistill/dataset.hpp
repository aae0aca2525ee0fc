// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired audio-visual word corpus and the data-side transforms used
// by the teacher and student pipelines.
//
// Each class owns a visual trajectory (a mix of mouth-shaped blobs whose
// weights move over the word) and an audio trajectory (moving spectral bumps).
// Classes listed in a confusable pair share the visual trajectory exactly.
// Outside the word the clip shows a weaker rendering of some other word in
// both modalities, so the word boundary carries information.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lipdistill/random.hpp"
#include "lipdistill/tensor.hpp"

namespace lipdistill::data {

struct Boundary {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  bool operator==(const Boundary&) const = default;
};

struct AVSample {
  Tensor visual;  // [T_v × 1 × R × R], grayscale, uncropped
  Tensor audio;   // [T_a × F]
  std::size_t label = 0;
  Boundary boundary_v;
  Boundary boundary_a;
};

enum class Split : std::uint64_t { kTrain = 0, kVal = 1, kTest = 2 };
const char* split_name(Split split);
Split parse_split(const std::string& name);

struct SynthConfig {
  std::size_t num_classes = 20;
  std::size_t train_per_class = 60;
  std::size_t val_per_class = 10;
  std::size_t test_per_class = 20;
  std::size_t visual_frames = 29;
  std::size_t raw_frame_size = 18;  // rendered size; the network sees a crop
  std::size_t audio_frames = 139;
  std::size_t audio_bins = 20;
  std::size_t word_frames = 13;     // nominal word length, varies by ±1
  std::size_t boundary_jitter = 2;  // max shift of the word centre in frames
  double visual_noise = 1.0;
  double audio_noise = 0.3;
  double distractor_level = 0.6;
  double audio_margin = 1.0;
  std::vector<std::pair<std::size_t, std::size_t>> confusable_pairs{{0, 1}, {2, 3}, {4, 5}, {6, 7}};
  std::uint64_t seed = 2024;

  /// Throws std::invalid_argument.
  void validate() const;
  std::size_t per_class(Split split) const;
};

/// Per-class generative parameters. Deterministic in (seed, class).
class Prototypes {
 public:
  explicit Prototypes(const SynthConfig& cfg);

  /// Noiseless grayscale frame [R×R] at relative word position tau ∈ [0, 1].
  Tensor visual(std::size_t label, double tau) const;
  /// Noiseless spectral frame [F] at relative word position tau.
  Tensor audio(std::size_t label, double tau) const;

  /// Distance between two classes' audio trajectories sampled at 32 positions.
  double audio_distance(std::size_t a, std::size_t b) const;

 private:
  struct Wave {
    double offset, amplitude, frequency, phase;
    double at(double tau) const;
  };
  struct VisualClass {
    std::vector<Wave> weights;  // one per blob
  };
  struct AudioClass {
    std::vector<double> centre;
    std::vector<Wave> drift;
    std::vector<Wave> gain;
  };

  AudioClass draw_audio(std::size_t label, std::uint64_t attempt) const;

  SynthConfig cfg_;
  std::vector<Tensor> blobs_;  // [R×R] each
  std::vector<VisualClass> visual_;
  std::vector<AudioClass> audio_;
};

struct AVDataset {
  SynthConfig config;
  std::vector<AVSample> train;
  std::vector<AVSample> val;
  std::vector<AVSample> test;

  const std::vector<AVSample>& split(Split s) const;
};

/// Pure in (config.seed, split, index); `parallel` only changes the schedule.
AVSample generate_sample(const SynthConfig& cfg, const Prototypes& protos, Split split,
                         std::size_t index);
AVDataset generate_dataset(const SynthConfig& cfg, bool parallel = true);

/// Visual boundary mapped onto the audio axis, rounded half up.
Boundary scale_boundary(Boundary b, std::size_t from_frames, std::size_t to_frames);

// ---- transforms -----------------------------------------------------------------

/// Appends a per-frame channel that is 1 inside [start, end) and 0 elsewhere.
Tensor attach_word_boundary_indicator(const Tensor& visual, Boundary boundary);
/// Zeroes audio frames outside [start, end); shape is preserved.
Tensor word_isolate(const Tensor& audio, Boundary boundary);
/// One random time band of width ≤ max_time and one frequency band of width ≤
/// max_freq set to zero. The identity when training is false.
Tensor spec_augment(const Tensor& audio, std::size_t max_time, std::size_t max_freq, Rng& rng,
                    bool training);

enum class CropMode { kRandom, kCenter };
/// frames[T×C×H×W] with C = 1 or 3 -> [T×1×out×out]. Grayscale is the plain
/// channel mean. One crop offset per call, shared by all frames.
Tensor grayscale_and_crop(const Tensor& frames, std::size_t out_h, std::size_t out_w, Rng& rng,
                          CropMode mode);

// ---- dump / load ----------------------------------------------------------------

/// Writes manifest.json plus <split>_visual.bin / <split>_audio.bin (float64,
/// little endian). Returns the manifest path.
std::filesystem::path dump_dataset(const AVDataset& ds, const std::filesystem::path& dir);
AVDataset load_dataset(const std::filesystem::path& dir);

}  // namespace lipdistill::data
