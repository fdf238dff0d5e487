#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsnet/tensor.hpp"

namespace capsnet {

// A loaded digit corpus (28x28 grayscale). Pixels are kept as the original
// bytes; image() scales to [0,1] on access.
struct MnistDataset {
  int64_t count = 0;
  std::vector<uint8_t> pixels;  // count*28*28 row-major
  std::vector<uint8_t> labels;  // count entries, 0..9
  std::string split;            // "train" or "test"

  template <typename T>
  Tensor<T> image(int64_t i) const;  // [28,28] in [0,1]
  int label(int64_t i) const { return labels[static_cast<size_t>(i)]; }
};

// Big-endian IDX ingestion. The images file must carry magic 0x00000803
// with [N,28,28] dimensions, the labels file 0x00000801 with [N]; parse
// failures throw FormatError naming the byte offset.
MnistDataset load_mnist(const std::string& images_path,
                        const std::string& labels_path, std::string split);

// Resolves conventional file names inside `dir` for the given split
// ("test" also accepts the historical t10k- prefix).
MnistDataset load_mnist_dir(const std::string& dir, const std::string& split);

void write_idx_images(const std::string& path,
                      const std::vector<uint8_t>& pixels, int64_t count);
void write_idx_labels(const std::string& path,
                      const std::vector<uint8_t>& labels);

// Two-digit composition settings. A sample is a pure function of
// (seed, index): with probability p_single one shifted digit, otherwise two
// digits of distinct classes shifted independently and overlaid.
struct GeneratorConfig {
  double p_single = 1.0 / 6.0;
  int max_shift = 4;
  int canvas = 36;  // 28 + 2*max_shift
  uint64_t seed = 0;

  void validate() const;
};

struct LabeledSample {
  Tensor<float> image;      // [canvas,canvas] in [0,1]
  std::vector<int> labels;  // 1 or 2 distinct digits, ascending
};

// Pixel-wise maximum; shapes must match exactly.
template <typename T>
Tensor<T> overlay(const Tensor<T>& a, const Tensor<T>& b);

LabeledSample generate_sample(const GeneratorConfig& cfg, int64_t index,
                              const MnistDataset& source);

// Grayscale replicated across `channels` for the model input.
template <typename T>
Tensor<T> to_model_input(const LabeledSample& sample, int64_t channels);

struct DatasetStatsReport {
  int64_t n = 0;
  int64_t singles = 0;
  int64_t overlaps = 0;
  double single_fraction = 0;
  int64_t distinct_violations = 0;  // overlap samples without 2 distinct labels
  int64_t shape_violations = 0;
  int64_t range_violations = 0;

  bool conforming() const {
    return distinct_violations == 0 && shape_violations == 0 &&
           range_violations == 0;
  }
};

DatasetStatsReport dataset_stats(
    const std::function<LabeledSample(int64_t)>& sample_at, int64_t n,
    int canvas = 36);

// Cached-sample archive: fixed magic, a JSON header carrying the generator
// config and count, then per sample canvas^2 image bytes (values*255, exact
// on the byte lattice) and a little-endian u16 label bitmask.
void write_sample_archive(const std::string& path, const GeneratorConfig& cfg,
                          int64_t count, const MnistDataset& source);

struct SampleArchive {
  GeneratorConfig cfg;
  int64_t count = 0;
  std::vector<uint8_t> images;  // count * canvas^2
  std::vector<uint16_t> masks;  // bit c set when digit c is present

  LabeledSample sample(int64_t i) const;
};

SampleArchive read_sample_archive(const std::string& path);

// Deterministic stroke-rendered digit corpus in IDX layout, used where no
// external corpus is available. Train and test streams are disjoint RNG
// streams of the same renderer.
std::vector<uint8_t> render_digit(int digit, Rng& rng);  // 28*28 bytes
MnistDataset synth_digit_corpus(int64_t n, uint64_t seed,
                                const std::string& split);  // in memory
void write_digit_corpus(const std::string& dir, int64_t n_train,
                        int64_t n_test, uint64_t seed);

}  // namespace capsnet
