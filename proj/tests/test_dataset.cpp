#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "lipdistill/dataset.hpp"
#include "test_util.hpp"

using namespace lipdistill;
using namespace lipdistill::data;

namespace {

SynthConfig small() {
  SynthConfig c;
  c.num_classes = 6;
  c.train_per_class = 4;
  c.val_per_class = 2;
  c.test_per_class = 3;
  c.confusable_pairs = {{0, 1}, {2, 3}};
  return c;
}

double tau_of(std::size_t t, Boundary b) {
  return (double(t) + 0.5 - double(b.start)) / double(b.end - b.start);
}

// Squared distance between a sample and class c's noiseless word, compared on
// frames inside the word only.
double visual_distance(const AVSample& s, const Prototypes& p, std::size_t c, std::size_t r) {
  double d = 0.0;
  for (std::size_t t = s.boundary_v.start; t < s.boundary_v.end; ++t) {
    const Tensor proto = p.visual(c, tau_of(t, s.boundary_v));
    for (std::size_t i = 0; i < r * r; ++i) d += std::pow(s.visual[t * r * r + i] - proto[i], 2);
  }
  return d;
}

double audio_distance(const AVSample& s, const Prototypes& p, std::size_t c, std::size_t f) {
  double d = 0.0;
  for (std::size_t t = s.boundary_a.start; t < s.boundary_a.end; ++t) {
    const Tensor proto = p.audio(c, tau_of(t, s.boundary_a));
    for (std::size_t i = 0; i < f; ++i) d += std::pow(s.audio[t * f + i] - proto[i], 2);
  }
  return d;
}

}  // namespace

TEST_CASE("default geometry and split sizes") {
  const SynthConfig cfg;
  CHECK(cfg.num_classes == 20);
  CHECK(cfg.confusable_pairs.size() == 4);
  CHECK(cfg.train_per_class == 60);
  CHECK(cfg.val_per_class == 10);
  CHECK(cfg.test_per_class == 20);
  const SynthConfig c = small();
  const AVDataset ds = generate_dataset(c);
  CHECK(ds.train.size() == 24);
  CHECK(ds.val.size() == 12);
  CHECK(ds.test.size() == 18);
  for (const auto& s : ds.train) {
    CHECK(s.visual.shape() == Shape{29, 1, c.raw_frame_size, c.raw_frame_size});
    CHECK(s.audio.shape() == Shape{139, 20});
    CHECK(s.label < c.num_classes);
  }
  // labels cycle so every class is balanced
  for (std::size_t i = 0; i < ds.test.size(); ++i) CHECK(ds.test[i].label == i % 6);
}

TEST_CASE("generation is a pure function of seed, split and index") {
  const SynthConfig c = small();
  const Prototypes p(c);
  const AVSample a = generate_sample(c, p, Split::kVal, 5);
  const AVSample b = generate_sample(c, p, Split::kVal, 5);
  CHECK(bitwise_equal(a.visual, b.visual));
  CHECK(bitwise_equal(a.audio, b.audio));
  CHECK(a.boundary_v == b.boundary_v);
  const AVSample other_split = generate_sample(c, p, Split::kTest, 5);
  CHECK_FALSE(bitwise_equal(a.visual, other_split.visual));

  const AVDataset serial = generate_dataset(c, false);
  const AVDataset parallel = generate_dataset(c, true);
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (std::size_t i = 0; i < serial.split(sp).size(); ++i) {
      CHECK(bitwise_equal(serial.split(sp)[i].visual, parallel.split(sp)[i].visual));
      CHECK(bitwise_equal(serial.split(sp)[i].audio, parallel.split(sp)[i].audio));
    }
  }
  CHECK(bitwise_equal(serial.train[3].visual, generate_sample(c, p, Split::kTrain, 3).visual));

  SynthConfig reseeded = c;
  reseeded.seed = c.seed + 1;
  CHECK_FALSE(bitwise_equal(generate_dataset(reseeded).train[0].audio, serial.train[0].audio));
}

TEST_CASE("confusable pairs share visuals exactly and differ in audio by the margin") {
  const SynthConfig c;
  const Prototypes p(c);
  for (const auto& [a, b] : c.confusable_pairs) {
    for (double tau : {0.0, 0.13, 0.5, 0.77, 0.99}) {
      CHECK(bitwise_equal(p.visual(a, tau), p.visual(b, tau)));
      CHECK_FALSE(bitwise_equal(p.audio(a, tau), p.audio(b, tau)));
    }
    CHECK(p.audio_distance(a, b) >= c.audio_margin);
  }
  CHECK_FALSE(bitwise_equal(p.visual(8, 0.5), p.visual(9, 0.5)));
}

TEST_CASE("noiseless data without pairs is solved by a nearest-prototype oracle") {
  SynthConfig c = small();
  c.confusable_pairs.clear();
  c.visual_noise = 0.0;
  c.audio_noise = 0.0;
  c.num_classes = 10;
  const AVDataset ds = generate_dataset(c);
  const Prototypes p(c);
  std::size_t hits_v = 0, hits_a = 0;
  for (const auto& s : ds.test) {
    std::size_t best_v = 0, best_a = 0;
    double dv = std::numeric_limits<double>::infinity(), da = dv;
    for (std::size_t k = 0; k < c.num_classes; ++k) {
      const double v = visual_distance(s, p, k, c.raw_frame_size);
      const double a = audio_distance(s, p, k, c.audio_bins);
      if (v < dv) dv = v, best_v = k;
      if (a < da) da = a, best_a = k;
    }
    hits_v += best_v == s.label;
    hits_a += best_a == s.label;
  }
  CHECK(hits_v == ds.test.size());
  CHECK(hits_a == ds.test.size());
}

TEST_CASE("boundaries are valid and consistent across modalities") {
  SynthConfig c = small();
  c.train_per_class = 40;
  const AVDataset ds = generate_dataset(c);
  for (const auto& s : ds.train) {
    CHECK(s.boundary_v.start < s.boundary_v.end);
    CHECK(s.boundary_v.end <= c.visual_frames);
    CHECK(s.boundary_a.end <= c.audio_frames);
    const std::size_t len = s.boundary_v.end - s.boundary_v.start;
    CHECK(len + 1 >= c.word_frames);
    CHECK(len <= c.word_frames + 1);
    CHECK(std::abs(double(s.boundary_a.start) / 139.0 - double(s.boundary_v.start) / 29.0) <= 1.0 / 29.0);
    CHECK(std::abs(double(s.boundary_a.end) / 139.0 - double(s.boundary_v.end) / 29.0) <= 1.0 / 29.0);
  }
  CHECK(scale_boundary({10, 20}, 29, 139) == Boundary{48, 96});
  CHECK(scale_boundary({0, 29}, 29, 139) == Boundary{0, 139});
}

TEST_CASE("config validation") {
  SynthConfig c;
  CHECK_NOTHROW(c.validate());
  c.num_classes = 1;
  c.confusable_pairs.clear();
  CHECK_THROWS_AS(generate_dataset(c), std::invalid_argument);
  c = {};
  c.confusable_pairs = {{0, 20}};
  CHECK_THROWS(c.validate());
  c = {};
  c.confusable_pairs = {{0, 1}, {1, 2}};
  CHECK_THROWS(c.validate());
  c = {};
  c.visual_noise = -0.1;
  CHECK_THROWS(c.validate());
  c = {};
  c.audio_frames = 20;
  CHECK_THROWS(c.validate());
  CHECK(parse_split("val") == Split::kVal);
  CHECK(std::string(split_name(Split::kTest)) == "test");
  CHECK_THROWS(parse_split("dev"));
}

TEST_CASE("word boundary indicator channel") {
  Rng rng = derive_stream(1, {});
  const Tensor v = testutil::random_tensor({29, 1, 4, 4}, rng);
  const Tensor out = attach_word_boundary_indicator(v, {10, 20});
  CHECK(out.shape() == Shape{29, 2, 4, 4});
  for (std::size_t t = 0; t < 29; ++t) {
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(out[(t * 2 + 0) * 16 + i] == v[t * 16 + i]);
      CHECK(out[(t * 2 + 1) * 16 + i] == ((t >= 10 && t < 20) ? 1.0 : 0.0));
    }
  }
  const Tensor all = attach_word_boundary_indicator(v, {0, 29});
  for (std::size_t t = 0; t < 29; ++t) CHECK(all[(t * 2 + 1) * 16 + 5] == 1.0);
  CHECK_THROWS(attach_word_boundary_indicator(v, {5, 30}));
  CHECK_THROWS(attach_word_boundary_indicator(v, {5, 5}));
}

TEST_CASE("word isolation") {
  Rng rng = derive_stream(2, {});
  const Tensor a = testutil::random_tensor({139, 20}, rng);
  CHECK(bitwise_equal(word_isolate(a, {0, 139}), a));
  const Tensor one = word_isolate(a, {40, 41});
  for (std::size_t t = 0; t < 139; ++t) {
    for (std::size_t f = 0; f < 20; ++f) {
      if (t == 40) {
        CHECK(one.at(t, f) == a.at(t, f));
      } else {
        CHECK(one.at(t, f) == 0.0);
      }
    }
  }
  const Tensor iso = word_isolate(a, {30, 90});
  CHECK(bitwise_equal(word_isolate(iso, {30, 90}), iso));
  CHECK(iso.shape() == a.shape());
}

TEST_CASE("spectrogram masking") {
  Rng rng = derive_stream(3, {});
  const Tensor a = testutil::random_tensor({139, 20}, rng, 0.5, 1.0);
  Rng r0 = derive_stream(4, {});
  CHECK(bitwise_equal(spec_augment(a, 0, 0, r0, true), a));
  CHECK(bitwise_equal(spec_augment(a, 20, 4, r0, false), a));
  CHECK_THROWS(spec_augment(a, 139, 4, r0, true));
  CHECK_THROWS(spec_augment(a, 20, 20, r0, true));

  for (int trial = 0; trial < 30; ++trial) {
    Rng r1 = derive_stream(5, {std::uint64_t(trial)});
    Rng r2 = derive_stream(5, {std::uint64_t(trial)});
    const Tensor m1 = spec_augment(a, 20, 4, r1, true);
    CHECK(bitwise_equal(m1, spec_augment(a, 20, 4, r2, true)));
    CHECK(m1.shape() == a.shape());
    // zero rows are contiguous and at most 20 long; zero columns at most 4 wide
    std::size_t rows = 0, first = 139, last = 0;
    for (std::size_t t = 0; t < 139; ++t) {
      bool zero = true;
      for (std::size_t f = 0; f < 20; ++f) zero = zero && m1.at(t, f) == 0.0;
      if (zero) {
        ++rows;
        first = std::min(first, t);
        last = t;
      }
    }
    CHECK(rows <= 20);
    if (rows) CHECK(last - first + 1 == rows);
    std::size_t cols = 0;
    for (std::size_t f = 0; f < 20; ++f) {
      bool zero = true;
      for (std::size_t t = 0; t < 139; ++t) zero = zero && m1.at(t, f) == 0.0;
      cols += zero;
    }
    CHECK(cols <= 4);
    // everything outside the two bands is untouched
    for (std::size_t t = 0; t < 139; ++t)
      for (std::size_t f = 0; f < 20; ++f) CHECK((m1.at(t, f) == 0.0 || m1.at(t, f) == a.at(t, f)));
  }
}

TEST_CASE("grayscale and crop") {
  Rng rng = derive_stream(6, {});
  const Tensor one = testutil::random_tensor({3, 1, 6, 6}, rng);
  CHECK(bitwise_equal(grayscale_and_crop(one, 6, 6, rng, CropMode::kRandom), one));

  Tensor rgb({3, 3, 6, 6});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 36; ++i) rgb[(t * 3 + c) * 36 + i] = one[t * 36 + i];
  const Tensor g = grayscale_and_crop(rgb, 6, 6, rng, CropMode::kCenter);
  CHECK(max_abs_diff(g, one) < 1e-15);

  Tensor mixed({1, 3, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    mixed[i] = 0.3;
    mixed[4 + i] = 0.6;
    mixed[8 + i] = 0.9;
  }
  CHECK(std::abs(grayscale_and_crop(mixed, 2, 2, rng, CropMode::kCenter)[0] - 0.6) < 1e-15);

  // centre crop offset is floor((H - out) / 2)
  Tensor idx({1, 1, 7, 7});
  for (std::size_t i = 0; i < 49; ++i) idx[i] = double(i);
  const Tensor cc = grayscale_and_crop(idx, 4, 4, rng, CropMode::kCenter);
  CHECK(cc.shape() == Shape{1, 1, 4, 4});
  CHECK(cc[0] == double(1 * 7 + 1));

  // a random crop uses one offset for every frame
  Tensor frames({4, 1, 7, 7});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 49; ++i) frames[t * 49 + i] = double(i);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor rc = grayscale_and_crop(frames, 4, 4, rng, CropMode::kRandom);
    for (std::size_t t = 1; t < 4; ++t) CHECK(rc[t * 16] == rc[0]);
    const auto oy = std::size_t(rc[0]) / 7, ox = std::size_t(rc[0]) % 7;
    CHECK(oy <= 3);
    CHECK(ox <= 3);
  }
  CHECK_THROWS(grayscale_and_crop(one, 7, 6, rng, CropMode::kCenter));
  CHECK_THROWS(grayscale_and_crop(Tensor({3, 2, 6, 6}), 4, 4, rng, CropMode::kCenter));
}

TEST_CASE("dump and load round-trip bitwise; damaged files are rejected") {
  const SynthConfig c = small();
  const AVDataset ds = generate_dataset(c);
  const auto dir = testutil::scratch("dataset_roundtrip");
  const auto manifest = dump_dataset(ds, dir);
  CHECK(manifest.filename() == "manifest.json");
  const AVDataset back = load_dataset(dir);
  CHECK(back.config.seed == c.seed);
  CHECK(back.config.confusable_pairs == c.confusable_pairs);
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest}) {
    REQUIRE(back.split(sp).size() == ds.split(sp).size());
    for (std::size_t i = 0; i < ds.split(sp).size(); ++i) {
      const auto& a = ds.split(sp)[i];
      const auto& b = back.split(sp)[i];
      CHECK(bitwise_equal(a.visual, b.visual));
      CHECK(bitwise_equal(a.audio, b.audio));
      CHECK(a.label == b.label);
      CHECK(a.boundary_v == b.boundary_v);
      CHECK(a.boundary_a == b.boundary_a);
    }
  }
  // re-dumping produces byte-identical files
  const auto dir2 = testutil::scratch("dataset_roundtrip2");
  dump_dataset(back, dir2);
  for (const char* name : {"manifest.json", "train_visual.bin", "test_audio.bin"}) {
    std::ifstream a(dir / name, std::ios::binary), b(dir2 / name, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
  std::filesystem::resize_file(dir2 / "val_audio.bin", 100);
  CHECK_THROWS(load_dataset(dir2));
  CHECK_THROWS(load_dataset(testutil::scratch("dataset_empty")));
}
