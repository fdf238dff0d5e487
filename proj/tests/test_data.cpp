#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "capsnet/data.hpp"

using namespace capsnet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_floats(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

const MnistDataset& small_corpus() {
  static MnistDataset ds = [] {
    auto dir = fresh_dir("capsnet_corpus_src");
    write_digit_corpus(dir.string(), 200, 80, 9);
    return load_mnist_dir(dir.string(), "train");
  }();
  return ds;
}

}  // namespace

TEST_CASE("digit corpus: write, load, ranges, determinism") {
  auto dir = fresh_dir("capsnet_corpus_a");
  write_digit_corpus(dir.string(), 200, 80, 9);
  auto train = load_mnist_dir(dir.string(), "train");
  auto test = load_mnist_dir(dir.string(), "test");
  CHECK(train.count == 200);
  CHECK(test.count == 80);

  bool seen[10] = {};
  for (int64_t i = 0; i < train.count; ++i) {
    REQUIRE(train.label(i) <= 9);
    seen[train.label(i)] = true;
  }
  for (bool s : seen) CHECK(s);

  float lo = 1e9f, hi = -1e9f;
  for (int64_t i = 0; i < train.count; ++i) {
    auto img = train.image<float>(i);
    for (int64_t k = 0; k < img.numel(); ++k) {
      lo = std::min(lo, img.data()[k]);
      hi = std::max(hi, img.data()[k]);
    }
  }
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);

  // the same seed writes byte-identical files
  auto dir2 = fresh_dir("capsnet_corpus_b");
  write_digit_corpus(dir2.string(), 200, 80, 9);
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                        "test-images-idx3-ubyte", "test-labels-idx1-ubyte"}) {
    CHECK(slurp(dir / f) == slurp(dir2 / f));
  }
  // train and test streams are distinct
  CHECK(slurp(dir / "train-images-idx3-ubyte") !=
        slurp(dir / "test-images-idx3-ubyte"));
}

TEST_CASE("idx parsing: magic, truncation, count mismatch") {
  auto dir = fresh_dir("capsnet_idx_errors");
  write_digit_corpus(dir.string(), 8, 4, 1);
  auto images = (dir / "train-images-idx3-ubyte").string();
  auto labels = (dir / "train-labels-idx1-ubyte").string();

  CHECK_THROWS_WITH_AS(load_mnist(labels, labels, "train"),
                       doctest::Contains("unexpected magic"), FormatError);

  auto bytes = slurp(images);
  bytes.resize(bytes.size() - 10);
  std::ofstream(dir / "trunc", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()),
             std::streamsize(bytes.size()));
  CHECK_THROWS_WITH_AS(load_mnist((dir / "trunc").string(), labels, "train"),
                       doctest::Contains("expected"), FormatError);

  std::vector<uint8_t> short_labels(4, 3);
  write_idx_labels((dir / "short-labels").string(), short_labels);
  CHECK_THROWS_WITH_AS(
      load_mnist(images, (dir / "short-labels").string(), "train"),
      doctest::Contains("count mismatch"), FormatError);

  CHECK_THROWS_AS(load_mnist((dir / "missing").string(), labels, "train"),
                  FormatError);
  CHECK_THROWS_AS(load_mnist_dir((dir / "nowhere").string(), "train"),
                  FormatError);
}

TEST_CASE("real corpus invariants when MNIST_DIR is supplied") {
  const char* mnist = std::getenv("MNIST_DIR");
  if (mnist == nullptr) return;  // external files are optional in this sandbox
  auto train = load_mnist_dir(mnist, "train");
  auto test = load_mnist_dir(mnist, "test");
  CHECK(train.count == 60000);
  CHECK(test.count == 10000);
}

TEST_CASE("overlay: identity, idempotence, commutativity, shape errors") {
  Rng rng(4);
  auto x = Tensor<double>::zeros({5, 5});
  auto y = Tensor<double>::zeros({5, 5});
  for (int64_t i = 0; i < 25; ++i) {
    x.data()[i] = rng.uniform();
    y.data()[i] = rng.uniform();
  }
  auto zeros = Tensor<double>::zeros({5, 5});
  auto with_zero = overlay(x, zeros);
  auto self = overlay(x, x);
  for (int64_t i = 0; i < 25; ++i) {
    CHECK(with_zero.data()[i] == x.data()[i]);
    CHECK(self.data()[i] == x.data()[i]);
  }
  auto ab = overlay(x, y);
  auto ba = overlay(y, x);
  for (int64_t i = 0; i < 25; ++i) CHECK(ab.data()[i] == ba.data()[i]);

  CHECK_THROWS_AS(overlay(x, Tensor<double>::zeros({5, 4})), ShapeError);
}

TEST_CASE("generator: pure function of seed and index") {
  const auto& src = small_corpus();
  GeneratorConfig cfg;
  cfg.seed = 77;
  auto a = generate_sample(cfg, 123, src);
  auto b = generate_sample(cfg, 123, src);
  CHECK(same_floats(a.image, b.image));
  CHECK(a.labels == b.labels);

  auto c = generate_sample(cfg, 124, src);
  bool differs = !same_floats(a.image, c.image) || a.labels != c.labels;
  CHECK(differs);

  cfg.seed = 78;
  auto d = generate_sample(cfg, 123, src);
  CHECK_FALSE(same_floats(a.image, d.image));
}

TEST_CASE("generator: zero-shift single is the digit centered in the border") {
  const auto& src = small_corpus();
  GeneratorConfig cfg;
  cfg.p_single = 1.0;
  cfg.max_shift = 0;
  cfg.canvas = 36;
  cfg.seed = 5;
  auto s = generate_sample(cfg, 0, src);
  REQUIRE(s.labels.size() == 1);

  for (int64_t r = 0; r < 36; ++r) {
    for (int64_t c = 0; c < 36; ++c) {
      bool border = r < 4 || r >= 32 || c < 4 || c >= 32;
      if (border) CHECK(s.image.at({r, c}) == 0.0f);
    }
  }
  // the centered block reproduces one source digit exactly
  bool found = false;
  for (int64_t i = 0; i < src.count && !found; ++i) {
    if (src.label(i) != s.labels[0]) continue;
    auto digit = src.image<float>(i);
    bool same = true;
    for (int64_t r = 0; r < 28 && same; ++r) {
      for (int64_t c = 0; c < 28; ++c) {
        if (digit.at({r, c}) != s.image.at({r + 4, c + 4})) {
          same = false;
          break;
        }
      }
    }
    found = same;
  }
  CHECK(found);
}

TEST_CASE("generator: configuration validation") {
  GeneratorConfig cfg;
  cfg.p_single = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = GeneratorConfig{};
  cfg.canvas = 30;  // cannot hold 28 + 2*4
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = GeneratorConfig{};
  CHECK_THROWS_AS(generate_sample(cfg, 0, MnistDataset{}), InputError);
}

TEST_CASE("generator: single fraction and distinct labels at scale") {
  const auto& src = small_corpus();
  GeneratorConfig cfg;
  cfg.seed = 2024;
  int64_t n = 60000;
  auto rep = dataset_stats(
      [&](int64_t i) { return generate_sample(cfg, i, src); }, n);
  CHECK(rep.conforming());
  CHECK(rep.singles + rep.overlaps == n);
  CHECK(std::abs(rep.single_fraction - 1.0 / 6.0) < 0.01);

  double sigma = std::sqrt((1.0 / 6.0) * (5.0 / 6.0) / double(n));
  CHECK(std::abs(rep.single_fraction - 1.0 / 6.0) < 3 * sigma + 1e-12);
}

TEST_CASE("dataset stats: negative controls are caught") {
  auto broken_labels = [](int64_t) {
    LabeledSample s;
    s.image = Tensor<float>::zeros({36, 36});
    s.labels = {3, 3};  // same-class overlap
    return s;
  };
  auto rep = dataset_stats(broken_labels, 50);
  CHECK(rep.distinct_violations == 50);
  CHECK_FALSE(rep.conforming());

  auto broken_range = [](int64_t) {
    LabeledSample s;
    s.image = Tensor<float>::full({36, 36}, 2.0f);
    s.labels = {1};
    return s;
  };
  rep = dataset_stats(broken_range, 10);
  CHECK(rep.range_violations == 10);

  auto broken_shape = [](int64_t) {
    LabeledSample s;
    s.image = Tensor<float>::zeros({35, 35});
    s.labels = {1};
    return s;
  };
  rep = dataset_stats(broken_shape, 10);
  CHECK(rep.shape_violations == 10);
}

TEST_CASE("sample archive: round trip, determinism, corruption") {
  const auto& src = small_corpus();
  auto dir = fresh_dir("capsnet_archive");
  GeneratorConfig cfg;
  cfg.seed = 31337;
  auto path = (dir / "samples.bin").string();
  write_sample_archive(path, cfg, 50, src);

  auto ar = read_sample_archive(path);
  CHECK(ar.count == 50);
  CHECK(ar.cfg.seed == cfg.seed);
  CHECK(ar.cfg.p_single == cfg.p_single);
  CHECK(ar.cfg.max_shift == cfg.max_shift);
  CHECK(ar.cfg.canvas == cfg.canvas);
  for (int64_t i : {int64_t(0), int64_t(7), int64_t(49)}) {
    auto direct = generate_sample(cfg, i, src);
    auto cached = ar.sample(i);
    CHECK(same_floats(direct.image, cached.image));
    CHECK(direct.labels == cached.labels);
  }

  auto path2 = (dir / "samples2.bin").string();
  write_sample_archive(path2, cfg, 50, src);
  CHECK(slurp(path) == slurp(path2));

  auto bytes = slurp(path);
  bytes[0] = 'X';
  std::ofstream(dir / "bad-magic", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()),
             std::streamsize(bytes.size()));
  CHECK_THROWS_WITH_AS(read_sample_archive((dir / "bad-magic").string()),
                       doctest::Contains("magic"), FormatError);

  bytes = slurp(path);
  bytes.resize(bytes.size() - 100);
  std::ofstream(dir / "short", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()),
             std::streamsize(bytes.size()));
  CHECK_THROWS_AS(read_sample_archive((dir / "short").string()), FormatError);
}

TEST_CASE("model input: grayscale replicated across channels") {
  const auto& src = small_corpus();
  GeneratorConfig cfg;
  cfg.seed = 8;
  auto s = generate_sample(cfg, 3, src);
  auto x = to_model_input<double>(s, 3);
  CHECK(x.shape() == Shape{3, 36, 36});
  for (int64_t c = 1; c < 3; ++c) {
    for (int64_t i = 0; i < 36 * 36; ++i) {
      CHECK(x.data()[c * 36 * 36 + i] == x.data()[i]);
    }
  }
  CHECK(x.at({0, 18, 18}) == doctest::Approx(double(s.image.at({18, 18}))));
}
