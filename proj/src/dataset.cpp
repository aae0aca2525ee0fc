// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/dataset.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace lipdistill::data {

static_assert(std::endian::native == std::endian::little,
              "dataset and checkpoint blobs are written in host order");

namespace {

constexpr std::uint64_t kProtoKey = 0x50524F54;   // class parameters
constexpr std::uint64_t kSampleKey = 0x53414D50;  // per-sample stream
constexpr std::size_t kAudioSamples = 32;
constexpr double kAudioWidth = 1.2;  // bump width in bins
constexpr double kFrequencies[] = {0.5, 1.0, 1.5, 2.0};
constexpr double kTint[3] = {0.1, 0.0, -0.1};  // RGB around the gray level

void fail(const std::string& msg) { throw std::invalid_argument("synth config: " + msg); }

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

void SynthConfig::validate() const {
  if (num_classes < 2) fail("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (train_per_class + val_per_class + test_per_class == 0) fail("no samples requested");
  if (visual_frames < 1 || audio_bins < 1 || raw_frame_size < 2) fail("dimensions must be >= 1");
  if (audio_frames < visual_frames) fail("audio_frames must be >= visual_frames");
  if (word_frames < 2) fail("word_frames must be >= 2");
  if (word_frames + 1 + 2 * boundary_jitter > visual_frames) {
    fail("word_frames + 1 + 2·boundary_jitter must fit in visual_frames");
  }
  if (!(visual_noise >= 0.0) || !(audio_noise >= 0.0)) fail("noise levels must be >= 0");
  if (!(distractor_level >= 0.0)) fail("distractor_level must be >= 0");
  if (!(audio_margin >= 0.0)) fail("audio_margin must be >= 0");
  std::vector<bool> used(num_classes, false);
  for (const auto& [a, b] : confusable_pairs) {
    if (a >= num_classes || b >= num_classes) {
      fail("confusable pair (" + std::to_string(a) + ", " + std::to_string(b) +
           ") references a class outside [0, " + std::to_string(num_classes) + ")");
    }
    if (a == b || used[a] || used[b]) fail("confusable pairs must be disjoint");
    used[a] = used[b] = true;
  }
}

std::size_t SynthConfig::per_class(Split split) const {
  switch (split) {
    case Split::kTrain: return train_per_class;
    case Split::kVal: return val_per_class;
    case Split::kTest: return test_per_class;
  }
  return 0;
}

// ---- prototypes -------------------------------------------------------------------

double Prototypes::Wave::at(double tau) const {
  return offset + amplitude * std::sin(2.0 * std::numbers::pi * frequency * tau + phase);
}

namespace {

double draw_frequency(Rng& rng) { return kFrequencies[uniform_int(rng, 0, 3)]; }

}  // namespace

Prototypes::AudioClass Prototypes::draw_audio(std::size_t label, std::uint64_t attempt) const {
  Rng rng = derive_stream(cfg_.seed, {kProtoKey, 1, label, attempt});
  AudioClass c;
  const double top = static_cast<double>(cfg_.audio_bins) - 1.0;
  for (int m = 0; m < 4; ++m) {
    c.centre.push_back(uniform(rng, 0.0, top));
    c.drift.push_back({0.0, uniform(rng, 0.0, 2.0), draw_frequency(rng), uniform(rng, 0.0, 6.3)});
    c.gain.push_back(
        {uniform(rng, 0.6, 1.2), uniform(rng, 0.2, 0.5), draw_frequency(rng), uniform(rng, 0.0, 6.3)});
  }
  return c;
}

Prototypes::Prototypes(const SynthConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t r = cfg_.raw_frame_size;
  const double s = static_cast<double>(r) / 18.0;
  const double mid = (static_cast<double>(r) - 1.0) / 2.0;
  // opening, upper lip, lower lip, two corners: {dy, dx, sy, sx}
  const double layout[5][4] = {
      {0, 0, 1.5, 3.5}, {-3, 0, 1.0, 4.0}, {3, 0, 1.0, 4.0}, {0, -5, 1.5, 1.5}, {0, 5, 1.5, 1.5}};
  for (const auto& b : layout) {
    Tensor blob({r, r});
    const double cy = mid + b[0] * s, cx = mid + b[1] * s, sy = b[2] * s, sx = b[3] * s;
    for (std::size_t y = 0; y < r; ++y) {
      for (std::size_t x = 0; x < r; ++x) {
        const double dy = (static_cast<double>(y) - cy) / sy;
        const double dx = (static_cast<double>(x) - cx) / sx;
        blob[y * r + x] = std::exp(-0.5 * (dy * dy + dx * dx));
      }
    }
    blobs_.push_back(std::move(blob));
  }

  for (std::size_t c = 0; c < cfg_.num_classes; ++c) {
    Rng rng = derive_stream(cfg_.seed, {kProtoKey, 0, c});
    VisualClass v;
    for (std::size_t m = 0; m < blobs_.size(); ++m) {
      v.weights.push_back(
          {uniform(rng, -0.3, 0.3), uniform(rng, 0.6, 1.4), draw_frequency(rng), uniform(rng, 0.0, 6.3)});
    }
    visual_.push_back(std::move(v));
    audio_.push_back(draw_audio(c, 0));
  }
  for (const auto& [a, b] : cfg_.confusable_pairs) {
    visual_[b] = visual_[a];
    // redraw the partner's audio until the pair is audibly distinct
    for (std::uint64_t attempt = 1; audio_distance(a, b) < cfg_.audio_margin; ++attempt) {
      if (attempt > 1000) throw std::runtime_error("synth: audio_margin cannot be met");
      audio_[b] = draw_audio(b, attempt);
    }
  }
}

Tensor Prototypes::visual(std::size_t label, double tau) const {
  const std::size_t r = cfg_.raw_frame_size;
  Tensor out({r, r});
  const auto& weights = visual_.at(label).weights;
  for (std::size_t m = 0; m < blobs_.size(); ++m) {
    const double w = weights[m].at(tau);
    const Tensor& blob = blobs_[m];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * blob[i];
  }
  return out;
}

Tensor Prototypes::audio(std::size_t label, double tau) const {
  const AudioClass& c = audio_.at(label);
  Tensor out({cfg_.audio_bins});
  for (std::size_t m = 0; m < c.centre.size(); ++m) {
    const double mu = c.centre[m] + c.drift[m].at(tau);
    const double gain = c.gain[m].at(tau);
    for (std::size_t f = 0; f < cfg_.audio_bins; ++f) {
      const double d = (static_cast<double>(f) - mu) / kAudioWidth;
      out[f] += gain * std::exp(-0.5 * d * d);
    }
  }
  return out;
}

double Prototypes::audio_distance(std::size_t a, std::size_t b) const {
  double total = 0.0;
  for (std::size_t k = 0; k < kAudioSamples; ++k) {
    const double tau = (static_cast<double>(k) + 0.5) / kAudioSamples;
    const Tensor pa = audio(a, tau), pb = audio(b, tau);
    for (std::size_t f = 0; f < pa.size(); ++f) total += (pa[f] - pb[f]) * (pa[f] - pb[f]);
  }
  return std::sqrt(total);
}

// ---- generation -------------------------------------------------------------------

const std::vector<AVSample>& AVDataset::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
  }
  throw std::invalid_argument("bad split");
}

Boundary scale_boundary(Boundary b, std::size_t from_frames, std::size_t to_frames) {
  auto scale = [&](std::size_t v) { return (2 * v * to_frames + from_frames) / (2 * from_frames); };
  Boundary out{scale(b.start), scale(b.end)};
  if (out.end <= out.start) out.end = out.start + 1;
  return out;
}

AVSample generate_sample(const SynthConfig& cfg, const Prototypes& protos, Split split,
                         std::size_t index) {
  Rng rng = derive_stream(cfg.seed, {kSampleKey, static_cast<std::uint64_t>(split), index});
  AVSample s;
  s.label = index % cfg.num_classes;

  const long jitter = static_cast<long>(cfg.boundary_jitter);
  const std::size_t length = cfg.word_frames + static_cast<std::size_t>(uniform_int(rng, 0, 2)) - 1;
  const long start = static_cast<long>(cfg.visual_frames - length) / 2 + uniform_int(rng, -jitter, jitter);
  s.boundary_v = {static_cast<std::size_t>(start), static_cast<std::size_t>(start) + length};
  s.boundary_a = scale_boundary(s.boundary_v, cfg.visual_frames, cfg.audio_frames);

  auto other = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(cfg.num_classes) - 2));
  if (other >= s.label) ++other;
  const double phase = uniform(rng, 0.0, 1.0);

  // Relative word position of a frame; frames outside the word follow the
  // distractor, wrapped into [0, 1).
  auto position = [](double t, Boundary b) {
    return (t + 0.5 - static_cast<double>(b.start)) / static_cast<double>(b.end - b.start);
  };
  auto wrap = [phase](double tau) { return tau + phase - std::floor(tau + phase); };

  const std::size_t r = cfg.raw_frame_size;
  const std::size_t plane = r * r;
  s.visual = Tensor({cfg.visual_frames, 1, r, r});
  for (std::size_t t = 0; t < cfg.visual_frames; ++t) {
    const bool inside = t >= s.boundary_v.start && t < s.boundary_v.end;
    const double tau = position(static_cast<double>(t), s.boundary_v);
    Tensor gray = inside ? protos.visual(s.label, tau) : protos.visual(other, wrap(tau));
    const double level = inside ? 1.0 : cfg.distractor_level;
    double* dst = s.visual.raw() + t * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      // render three tinted channels with independent noise, then average
      double acc = 0.0;
      for (double tint : kTint) acc += level * gray[i] * (1.0 + tint) + cfg.visual_noise * normal(rng);
      dst[i] = acc / 3.0;
    }
  }

  s.audio = Tensor({cfg.audio_frames, cfg.audio_bins});
  for (std::size_t t = 0; t < cfg.audio_frames; ++t) {
    const bool inside = t >= s.boundary_a.start && t < s.boundary_a.end;
    const double tau = position(static_cast<double>(t), s.boundary_a);
    Tensor spec = inside ? protos.audio(s.label, tau) : protos.audio(other, wrap(tau));
    const double level = inside ? 1.0 : cfg.distractor_level;
    double* dst = s.audio.raw() + t * cfg.audio_bins;
    for (std::size_t f = 0; f < cfg.audio_bins; ++f) {
      dst[f] = level * spec[f] + cfg.audio_noise * normal(rng);
    }
  }
  return s;
}

AVDataset generate_dataset(const SynthConfig& cfg, bool parallel) {
  cfg.validate();
  const Prototypes protos(cfg);
  AVDataset ds;
  ds.config = cfg;
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    const std::size_t n = cfg.per_class(split) * cfg.num_classes;
    std::vector<AVSample> out(n);
    const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
    for (long i = 0; i < count; ++i) {
      out[static_cast<std::size_t>(i)] = generate_sample(cfg, protos, split, static_cast<std::size_t>(i));
    }
    (split == Split::kTrain ? ds.train : split == Split::kVal ? ds.val : ds.test) = std::move(out);
  }
  return ds;
}

// ---- transforms -------------------------------------------------------------------

namespace {

void check_boundary(Boundary b, std::size_t frames, const char* what) {
  if (!(b.start < b.end && b.end <= frames)) {
    throw std::invalid_argument(std::string(what) + ": boundary [" + std::to_string(b.start) +
                                ", " + std::to_string(b.end) + ") invalid for " +
                                std::to_string(frames) + " frames");
  }
}

}  // namespace

Tensor attach_word_boundary_indicator(const Tensor& visual, Boundary boundary) {
  if (visual.rank() != 4) throw std::invalid_argument("boundary indicator: expected [T×C×H×W]");
  const std::size_t frames = visual.dim(0), channels = visual.dim(1);
  const std::size_t plane = visual.dim(2) * visual.dim(3);
  check_boundary(boundary, frames, "boundary indicator");
  Tensor out({frames, channels + 1, visual.dim(2), visual.dim(3)});
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = visual.raw() + t * channels * plane;
    double* dst = out.raw() + t * (channels + 1) * plane;
    std::copy(src, src + channels * plane, dst);
    const double flag = (t >= boundary.start && t < boundary.end) ? 1.0 : 0.0;
    std::fill(dst + channels * plane, dst + (channels + 1) * plane, flag);
  }
  return out;
}

Tensor word_isolate(const Tensor& audio, Boundary boundary) {
  if (audio.rank() != 2) throw std::invalid_argument("word_isolate: expected [T×F]");
  check_boundary(boundary, audio.dim(0), "word_isolate");
  Tensor out = audio;
  const std::size_t bins = audio.dim(1);
  std::fill(out.raw(), out.raw() + boundary.start * bins, 0.0);
  std::fill(out.raw() + boundary.end * bins, out.raw() + out.size(), 0.0);
  return out;
}

Tensor spec_augment(const Tensor& audio, std::size_t max_time, std::size_t max_freq, Rng& rng,
                    bool training) {
  if (audio.rank() != 2) throw std::invalid_argument("spec_augment: expected [T×F]");
  const std::size_t frames = audio.dim(0), bins = audio.dim(1);
  if (max_time >= frames || max_freq >= bins) {
    throw std::invalid_argument("spec_augment: mask widths must be smaller than the axes");
  }
  if (!training) return audio;
  Tensor out = audio;
  const auto tw = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(max_time)));
  const auto t0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(frames - tw)));
  const auto fw = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(max_freq)));
  const auto f0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(bins - fw)));
  std::fill(out.raw() + t0 * bins, out.raw() + (t0 + tw) * bins, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(out.raw() + t * bins + f0, out.raw() + t * bins + f0 + fw, 0.0);
  }
  return out;
}

Tensor grayscale_and_crop(const Tensor& frames, std::size_t out_h, std::size_t out_w, Rng& rng,
                          CropMode mode) {
  if (frames.rank() != 4 || (frames.dim(1) != 1 && frames.dim(1) != 3)) {
    throw std::invalid_argument("grayscale_and_crop: expected [T×1×H×W] or [T×3×H×W], got " +
                                shape_to_string(frames.shape()));
  }
  const std::size_t t_len = frames.dim(0), channels = frames.dim(1);
  const std::size_t h = frames.dim(2), w = frames.dim(3);
  if (out_h > h || out_w > w || out_h == 0 || out_w == 0) {
    throw std::invalid_argument("grayscale_and_crop: crop " + std::to_string(out_h) + "×" +
                                std::to_string(out_w) + " does not fit frames " +
                                std::to_string(h) + "×" + std::to_string(w));
  }
  std::size_t oy = (h - out_h) / 2, ox = (w - out_w) / 2;
  if (mode == CropMode::kRandom) {
    oy = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(h - out_h)));
    ox = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(w - out_w)));
  }
  Tensor out({t_len, 1, out_h, out_w});
  const double inv = 1.0 / static_cast<double>(channels);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          acc += frames[((t * channels + c) * h + oy + y) * w + ox + x];
        }
        out[(t * out_h + y) * out_w + x] = channels == 1 ? acc : acc * inv;
      }
    }
  }
  return out;
}

// ---- dump / load ------------------------------------------------------------------

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json synth_json(const SynthConfig& c) {
  json pairs = json::array();
  for (const auto& [a, b] : c.confusable_pairs) pairs.push_back({a, b});
  return {{"num_classes", c.num_classes},       {"train_per_class", c.train_per_class},
          {"val_per_class", c.val_per_class},   {"test_per_class", c.test_per_class},
          {"visual_frames", c.visual_frames},   {"raw_frame_size", c.raw_frame_size},
          {"audio_frames", c.audio_frames},     {"audio_bins", c.audio_bins},
          {"word_frames", c.word_frames},       {"boundary_jitter", c.boundary_jitter},
          {"visual_noise", c.visual_noise},     {"audio_noise", c.audio_noise},
          {"distractor_level", c.distractor_level}, {"audio_margin", c.audio_margin},
          {"confusable_pairs", pairs},          {"seed", c.seed}};
}

SynthConfig synth_from(const json& j) {
  SynthConfig c;
  j.at("num_classes").get_to(c.num_classes);
  j.at("train_per_class").get_to(c.train_per_class);
  j.at("val_per_class").get_to(c.val_per_class);
  j.at("test_per_class").get_to(c.test_per_class);
  j.at("visual_frames").get_to(c.visual_frames);
  j.at("raw_frame_size").get_to(c.raw_frame_size);
  j.at("audio_frames").get_to(c.audio_frames);
  j.at("audio_bins").get_to(c.audio_bins);
  j.at("word_frames").get_to(c.word_frames);
  j.at("boundary_jitter").get_to(c.boundary_jitter);
  j.at("visual_noise").get_to(c.visual_noise);
  j.at("audio_noise").get_to(c.audio_noise);
  j.at("distractor_level").get_to(c.distractor_level);
  j.at("audio_margin").get_to(c.audio_margin);
  j.at("seed").get_to(c.seed);
  c.confusable_pairs.clear();
  for (const auto& p : j.at("confusable_pairs")) {
    c.confusable_pairs.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
  }
  return c;
}

void write_blob(const fs::path& path, const std::vector<const Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const Tensor* t : tensors) {
    out.write(reinterpret_cast<const char*>(t->raw()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<double> read_blob(const fs::path& path, std::size_t expected) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw std::runtime_error("cannot read " + path.string());
  if (bytes != expected * sizeof(double)) {
    throw std::runtime_error("corrupt dataset file " + path.string() + ": " +
                             std::to_string(bytes) + " bytes, expected " +
                             std::to_string(expected * sizeof(double)));
  }
  std::vector<double> data(expected);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("read failed: " + path.string());
  return data;
}

constexpr int kDatasetVersion = 1;

}  // namespace

fs::path dump_dataset(const AVDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& c = ds.config;
  json manifest = {{"format", "lipdistill-dataset"},
                   {"version", kDatasetVersion},
                   {"dtype", "float64-le"},
                   {"seed", c.seed},
                   {"config", synth_json(c)}};
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    const auto& samples = ds.split(split);
    const std::string name = split_name(split);
    std::vector<const Tensor*> visual, audio;
    json labels = json::array(), bv = json::array(), ba = json::array();
    for (const auto& s : samples) {
      visual.push_back(&s.visual);
      audio.push_back(&s.audio);
      labels.push_back(s.label);
      bv.push_back({s.boundary_v.start, s.boundary_v.end});
      ba.push_back({s.boundary_a.start, s.boundary_a.end});
    }
    write_blob(dir / (name + "_visual.bin"), visual);
    write_blob(dir / (name + "_audio.bin"), audio);
    manifest["splits"][name] = {
        {"count", samples.size()},
        {"visual_shape", {c.visual_frames, 1, c.raw_frame_size, c.raw_frame_size}},
        {"audio_shape", {c.audio_frames, c.audio_bins}},
        {"visual_file", name + "_visual.bin"},
        {"audio_file", name + "_audio.bin"},
        {"labels", labels},
        {"boundary_v", bv},
        {"boundary_a", ba}};
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return path;
}

AVDataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt dataset manifest: " + std::string(e.what()));
  }
  if (manifest.value("version", 0) != kDatasetVersion) {
    throw std::runtime_error("dataset version mismatch: expected " +
                             std::to_string(kDatasetVersion));
  }
  AVDataset ds;
  ds.config = synth_from(manifest.at("config"));
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    const json& js = manifest.at("splits").at(split_name(split));
    const auto count = js.at("count").get<std::size_t>();
    const auto vshape = js.at("visual_shape").get<Shape>();
    const auto ashape = js.at("audio_shape").get<Shape>();
    const std::size_t vsize = shape_size(vshape), asize = shape_size(ashape);
    const auto vdata = read_blob(dir / js.at("visual_file").get<std::string>(), count * vsize);
    const auto adata = read_blob(dir / js.at("audio_file").get<std::string>(), count * asize);
    std::vector<AVSample> samples(count);
    for (std::size_t i = 0; i < count; ++i) {
      auto& s = samples[i];
      s.visual = Tensor(vshape, std::vector<double>(vdata.begin() + static_cast<long>(i * vsize),
                                                    vdata.begin() + static_cast<long>((i + 1) * vsize)));
      s.audio = Tensor(ashape, std::vector<double>(adata.begin() + static_cast<long>(i * asize),
                                                   adata.begin() + static_cast<long>((i + 1) * asize)));
      s.label = js.at("labels").at(i).get<std::size_t>();
      s.boundary_v = {js.at("boundary_v").at(i).at(0), js.at("boundary_v").at(i).at(1)};
      s.boundary_a = {js.at("boundary_a").at(i).at(0), js.at("boundary_a").at(i).at(1)};
    }
    (split == Split::kTrain ? ds.train : split == Split::kVal ? ds.val : ds.test) = std::move(samples);
  }
  return ds;
}

}  // namespace lipdistill::data
