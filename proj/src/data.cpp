#include "capsnet/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace capsnet {
namespace {

constexpr int64_t kDigitSide = 28;
constexpr char kArchiveMagic[8] = {'C', 'A', 'P', 'S', 'D', 'A', 'T', '1'};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

uint32_t be32(const std::vector<uint8_t>& b, size_t offset,
              const std::string& path) {
  if (offset + 4 > b.size()) {
    throw FormatError(path + ": truncated at offset " +
                      std::to_string(b.size()) + " (need 4 bytes at " +
                      std::to_string(offset) + ")");
  }
  return (uint32_t(b[offset]) << 24) | (uint32_t(b[offset + 1]) << 16) |
         (uint32_t(b[offset + 2]) << 8) | uint32_t(b[offset + 3]);
}

std::string hex32(uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

void check_magic(uint32_t got, uint32_t want, const std::string& path) {
  if (got != want) {
    throw FormatError(path + ": unexpected magic " + hex32(got) +
                      " at offset 0 (expected " + hex32(want) + ")");
  }
}

void put_be32(std::ofstream& out, uint32_t v) {
  char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

}  // namespace

template <typename T>
Tensor<T> MnistDataset::image(int64_t i) const {
  Tensor<T> out = Tensor<T>::zeros({kDigitSide, kDigitSide});
  const uint8_t* src = pixels.data() + i * kDigitSide * kDigitSide;
  for (int64_t k = 0; k < kDigitSide * kDigitSide; ++k) {
    out.data()[k] = T(src[k]) / T(255);
  }
  return out;
}

MnistDataset load_mnist(const std::string& images_path,
                        const std::string& labels_path, std::string split) {
  auto ib = read_file(images_path);
  check_magic(be32(ib, 0, images_path), 0x00000803, images_path);
  int64_t n = be32(ib, 4, images_path);
  int64_t h = be32(ib, 8, images_path);
  int64_t w = be32(ib, 12, images_path);
  if (h != kDigitSide || w != kDigitSide) {
    throw FormatError(images_path + ": expected 28x28 images, got " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  size_t need = 16 + size_t(n) * kDigitSide * kDigitSide;
  if (ib.size() != need) {
    throw FormatError(images_path + ": expected " + std::to_string(need) +
                      " bytes for " + std::to_string(n) + " images, file has " +
                      std::to_string(ib.size()));
  }

  auto lb = read_file(labels_path);
  check_magic(be32(lb, 0, labels_path), 0x00000801, labels_path);
  int64_t ln = be32(lb, 4, labels_path);
  if (lb.size() != 8 + size_t(ln)) {
    throw FormatError(labels_path + ": expected " + std::to_string(8 + ln) +
                      " bytes for " + std::to_string(ln) +
                      " labels, file has " + std::to_string(lb.size()));
  }
  if (ln != n) {
    throw FormatError("image/label count mismatch: " + std::to_string(n) +
                      " images vs " + std::to_string(ln) + " labels");
  }

  MnistDataset ds;
  ds.count = n;
  ds.split = std::move(split);
  ds.pixels.assign(ib.begin() + 16, ib.end());
  ds.labels.assign(lb.begin() + 8, lb.end());
  for (int64_t i = 0; i < n; ++i) {
    if (ds.labels[size_t(i)] > 9) {
      throw FormatError(labels_path + ": label " +
                        std::to_string(int(ds.labels[size_t(i)])) +
                        " out of range at index " + std::to_string(i));
    }
  }
  return ds;
}

MnistDataset load_mnist_dir(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  auto pick = [&](std::vector<std::string> names) {
    for (const auto& n : names) {
      if (fs::exists(fs::path(dir) / n)) return (fs::path(dir) / n).string();
    }
    throw FormatError("no " + split + " IDX files found in " + dir);
  };
  if (split == "train") {
    return load_mnist(
        pick({"train-images-idx3-ubyte", "train-images.idx3-ubyte"}),
        pick({"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}), split);
  }
  return load_mnist(pick({"test-images-idx3-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-images.idx3-ubyte"}),
                    pick({"test-labels-idx1-ubyte", "t10k-labels-idx1-ubyte",
                          "t10k-labels.idx1-ubyte"}),
                    split);
}

void write_idx_images(const std::string& path,
                      const std::vector<uint8_t>& pixels, int64_t count) {
  if (pixels.size() != size_t(count) * kDigitSide * kDigitSide) {
    throw InputError("pixel buffer does not hold " + std::to_string(count) +
                     " 28x28 images");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  put_be32(out, 0x00000803);
  put_be32(out, uint32_t(count));
  put_be32(out, kDigitSide);
  put_be32(out, kDigitSide);
  out.write(reinterpret_cast<const char*>(pixels.data()),
            std::streamsize(pixels.size()));
}

void write_idx_labels(const std::string& path,
                      const std::vector<uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  put_be32(out, 0x00000801);
  put_be32(out, uint32_t(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            std::streamsize(labels.size()));
}

void GeneratorConfig::validate() const {
  if (p_single < 0 || p_single > 1) {
    throw ConfigError("p_single must lie in [0,1]");
  }
  if (max_shift < 0) throw ConfigError("max_shift must be >= 0");
  if (canvas < kDigitSide + 2 * max_shift) {
    throw ConfigError("canvas " + std::to_string(canvas) +
                      " cannot hold a 28px digit shifted by " +
                      std::to_string(max_shift));
  }
}

template <typename T>
Tensor<T> overlay(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("overlay shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    out.data()[i] = std::max(a.data()[i], b.data()[i]);
  }
  return out;
}

namespace {

// Draw order per sample is fixed: the single/overlap coin, then every digit
// index (resampling only the second index on class collision), then each
// digit's (dy, dx). Changing it would silently re-key every seeded stream.
Tensor<float> place_digit(const GeneratorConfig& cfg, int64_t idx,
                          const MnistDataset& src, Rng& rng) {
  int span = 2 * cfg.max_shift + 1;
  int dy = int(rng.uniform_int(span)) - cfg.max_shift;
  int dx = int(rng.uniform_int(span)) - cfg.max_shift;
  int base = (cfg.canvas - int(kDigitSide)) / 2;
  Tensor<float> canvas =
      Tensor<float>::zeros({int64_t(cfg.canvas), int64_t(cfg.canvas)});
  const uint8_t* px = src.pixels.data() + idx * kDigitSide * kDigitSide;
  for (int64_t r = 0; r < kDigitSide; ++r) {
    for (int64_t c = 0; c < kDigitSide; ++c) {
      canvas.data()[(r + base + dy) * cfg.canvas + (c + base + dx)] =
          float(px[r * kDigitSide + c]) / 255.0f;
    }
  }
  return canvas;
}

}  // namespace

LabeledSample generate_sample(const GeneratorConfig& cfg, int64_t index,
                              const MnistDataset& source) {
  cfg.validate();
  if (source.count == 0) {
    throw InputError("sample generation needs a nonempty source dataset");
  }
  Rng rng(Rng::mix(cfg.seed, uint64_t(index)));
  LabeledSample out;
  if (rng.uniform() < cfg.p_single) {
    int64_t idx = rng.uniform_int(source.count);
    out.image = place_digit(cfg, idx, source, rng);
    out.labels = {source.label(idx)};
    return out;
  }
  int64_t a = rng.uniform_int(source.count);
  int64_t b = rng.uniform_int(source.count);
  while (source.label(b) == source.label(a)) {
    b = rng.uniform_int(source.count);
  }
  Tensor<float> first = place_digit(cfg, a, source, rng);
  Tensor<float> second = place_digit(cfg, b, source, rng);
  out.image = overlay(first, second);
  out.labels = {source.label(a), source.label(b)};
  std::sort(out.labels.begin(), out.labels.end());
  return out;
}

template <typename T>
Tensor<T> to_model_input(const LabeledSample& sample, int64_t channels) {
  int64_t hw = sample.image.dim(0);
  Tensor<T> out = Tensor<T>::zeros({channels, hw, hw});
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t i = 0; i < hw * hw; ++i) {
      out.data()[c * hw * hw + i] = T(sample.image.data()[i]);
    }
  }
  return out;
}

DatasetStatsReport dataset_stats(
    const std::function<LabeledSample(int64_t)>& sample_at, int64_t n,
    int canvas) {
  DatasetStatsReport rep;
  rep.n = n;
  for (int64_t i = 0; i < n; ++i) {
    LabeledSample s = sample_at(i);
    if (s.image.shape() != Shape{canvas, canvas}) ++rep.shape_violations;
    for (int64_t k = 0; k < s.image.numel(); ++k) {
      float v = s.image.data()[k];
      if (v < 0.0f || v > 1.0f) {
        ++rep.range_violations;
        break;
      }
    }
    if (s.labels.size() == 1) {
      ++rep.singles;
    } else if (s.labels.size() == 2) {
      ++rep.overlaps;
      if (s.labels[0] == s.labels[1]) ++rep.distinct_violations;
    } else {
      ++rep.distinct_violations;
    }
  }
  rep.single_fraction = n > 0 ? double(rep.singles) / double(n) : 0.0;
  return rep;
}

void write_sample_archive(const std::string& path, const GeneratorConfig& cfg,
                          int64_t count, const MnistDataset& source) {
  cfg.validate();
  nlohmann::ordered_json j;
  j["p_single"] = cfg.p_single;
  j["max_shift"] = cfg.max_shift;
  j["canvas"] = cfg.canvas;
  j["seed"] = cfg.seed;
  j["count"] = count;
  std::string header = j.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(kArchiveMagic, 8);
  uint32_t len = uint32_t(header.size());
  char lb[4] = {char(len), char(len >> 8), char(len >> 16), char(len >> 24)};
  out.write(lb, 4);
  out.write(header.data(), std::streamsize(header.size()));

  std::vector<uint8_t> rec(size_t(cfg.canvas) * cfg.canvas + 2);
  for (int64_t i = 0; i < count; ++i) {
    LabeledSample s = generate_sample(cfg, i, source);
    for (int64_t k = 0; k < s.image.numel(); ++k) {
      rec[size_t(k)] = uint8_t(std::lround(s.image.data()[k] * 255.0f));
    }
    uint16_t mask = 0;
    for (int lab : s.labels) mask |= uint16_t(1u << lab);
    rec[rec.size() - 2] = uint8_t(mask);
    rec[rec.size() - 1] = uint8_t(mask >> 8);
    out.write(reinterpret_cast<const char*>(rec.data()),
              std::streamsize(rec.size()));
  }
}

SampleArchive read_sample_archive(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) {
    throw FormatError(path + ": bad archive magic at offset 0");
  }
  uint32_t len = uint32_t(bytes[8]) | (uint32_t(bytes[9]) << 8) |
                 (uint32_t(bytes[10]) << 16) | (uint32_t(bytes[11]) << 24);
  if (12 + size_t(len) > bytes.size()) {
    throw FormatError(path + ": truncated header at offset 12 (need " +
                      std::to_string(len) + " bytes)");
  }
  SampleArchive ar;
  try {
    auto j = nlohmann::json::parse(bytes.begin() + 12,
                                   bytes.begin() + 12 + len);
    ar.cfg.p_single = j.at("p_single").get<double>();
    ar.cfg.max_shift = j.at("max_shift").get<int>();
    ar.cfg.canvas = j.at("canvas").get<int>();
    ar.cfg.seed = j.at("seed").get<uint64_t>();
    ar.count = j.at("count").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": archive header JSON: " + e.what());
  }
  size_t rec = size_t(ar.cfg.canvas) * ar.cfg.canvas + 2;
  size_t need = 12 + len + size_t(ar.count) * rec;
  if (bytes.size() != need) {
    throw FormatError(path + ": expected " + std::to_string(need) +
                      " bytes for " + std::to_string(ar.count) +
                      " samples, file has " + std::to_string(bytes.size()));
  }
  ar.images.reserve(size_t(ar.count) * (rec - 2));
  for (int64_t i = 0; i < ar.count; ++i) {
    size_t off = 12 + len + size_t(i) * rec;
    ar.images.insert(ar.images.end(), bytes.begin() + off,
                     bytes.begin() + off + (rec - 2));
    ar.masks.push_back(uint16_t(bytes[off + rec - 2]) |
                       uint16_t(uint16_t(bytes[off + rec - 1]) << 8));
  }
  return ar;
}

LabeledSample SampleArchive::sample(int64_t i) const {
  LabeledSample s;
  int64_t px = int64_t(cfg.canvas) * cfg.canvas;
  s.image = Tensor<float>::zeros({int64_t(cfg.canvas), int64_t(cfg.canvas)});
  for (int64_t k = 0; k < px; ++k) {
    s.image.data()[k] = float(images[size_t(i * px + k)]) / 255.0f;
  }
  for (int c = 0; c < 10; ++c) {
    if (masks[size_t(i)] & (1u << c)) s.labels.push_back(c);
  }
  return s;
}

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

void append_arc(Stroke& s, double cx, double cy, double rx, double ry,
                double a0_deg, double a1_deg) {
  double a0 = a0_deg * M_PI / 180.0, a1 = a1_deg * M_PI / 180.0;
  int n = std::max(12, int(std::ceil(std::abs(a1 - a0) * std::max(rx, ry) /
                                     0.12)));
  for (int i = 0; i <= n; ++i) {
    double a = a0 + (a1 - a0) * i / n;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
}

// Stroke skeletons in a 28x28 frame, x right, y down. Legibility is all
// that matters: each class must stay visually distinct under small jitter.
std::vector<Stroke> digit_strokes(int digit) {
  std::vector<Stroke> out;
  auto line = [&](std::initializer_list<Pt> pts) {
    out.emplace_back(pts);
  };
  switch (digit) {
    case 0: {
      Stroke s;
      append_arc(s, 14, 14, 5.6, 8.2, 0, 360);
      out.push_back(std::move(s));
      break;
    }
    case 1:
      line({{10.8, 8.2}, {14.3, 4.8}, {14.3, 23.2}});
      break;
    case 2: {
      Stroke s;
      append_arc(s, 13.8, 9.6, 5.2, 5.0, 185, 345);
      s.push_back({9.2, 22.8});
      s.push_back({19.8, 22.8});
      out.push_back(std::move(s));
      break;
    }
    case 3: {
      Stroke a;
      append_arc(a, 13.5, 9.3, 4.6, 4.4, 210, 440);
      out.push_back(std::move(a));
      Stroke b;
      append_arc(b, 13.3, 18.2, 5.1, 5.1, 280, 500);
      out.push_back(std::move(b));
      break;
    }
    case 4:
      line({{15.8, 4.6}, {7.6, 16.6}, {20.6, 16.6}});
      line({{16.6, 8.4}, {16.6, 23.4}});
      break;
    case 5: {
      Stroke s{{18.6, 5.0}, {9.8, 5.0}, {9.3, 12.2}};
      append_arc(s, 13.3, 17.0, 5.5, 5.6, 230, 500);
      out.push_back(std::move(s));
      break;
    }
    case 6: {
      Stroke s{{17.6, 4.6}, {13.6, 8.8}, {10.6, 14.0}, {9.4, 18.0}};
      append_arc(s, 13.6, 17.8, 4.9, 5.1, 180, 540);
      out.push_back(std::move(s));
      break;
    }
    case 7:
      line({{8.8, 5.4}, {19.8, 5.4}, {11.8, 23.2}});
      break;
    case 8: {
      Stroke a;
      append_arc(a, 14, 9.2, 4.3, 4.5, 0, 360);
      out.push_back(std::move(a));
      Stroke b;
      append_arc(b, 14, 18.4, 5.0, 4.9, 0, 360);
      out.push_back(std::move(b));
      break;
    }
    case 9: {
      Stroke a;
      append_arc(a, 14.2, 9.8, 4.9, 5.0, 0, 360);
      out.push_back(std::move(a));
      line({{19.1, 10.2}, {18.9, 15.8}, {16.3, 23.2}});
      break;
    }
    default:
      throw InputError("digit must lie in 0..9");
  }
  return out;
}

}  // namespace

std::vector<uint8_t> render_digit(int digit, Rng& rng) {
  auto strokes = digit_strokes(digit);

  // per-sample style: small affine jitter about the frame center, plus
  // brush thickness and ink amplitude
  double theta = rng.uniform(-0.12, 0.12);
  double sx = rng.uniform(0.9, 1.08);
  double sy = rng.uniform(0.9, 1.08);
  double shear = rng.uniform(-0.08, 0.08);
  double tx = rng.uniform(-1.2, 1.2);
  double ty = rng.uniform(-1.2, 1.2);
  double radius = rng.uniform(1.45, 1.95);
  double amp = rng.uniform(0.85, 1.0);

  double ct = std::cos(theta), st = std::sin(theta);
  auto warp = [&](Pt p) {
    double x = (p.x - 14.0) * sx + (p.y - 14.0) * shear;
    double y = (p.y - 14.0) * sy;
    return Pt{14.0 + ct * x - st * y + tx, 14.0 + st * x + ct * y + ty};
  };

  std::vector<double> canvas(kDigitSide * kDigitSide, 0.0);
  auto stamp = [&](double px, double py) {
    int x0 = std::max(0, int(std::floor(px - radius)));
    int x1 = std::min(int(kDigitSide) - 1, int(std::ceil(px + radius)));
    int y0 = std::max(0, int(std::floor(py - radius)));
    int y1 = std::min(int(kDigitSide) - 1, int(std::ceil(py + radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double d = std::hypot(x - px, y - py);
        if (d < radius) {
          canvas[size_t(y) * kDigitSide + x] +=
              0.55 * amp * (1.0 - d / radius);
        }
      }
    }
  };
  for (const auto& stroke : strokes) {
    for (size_t i = 0; i + 1 < stroke.size(); ++i) {
      Pt a = warp(stroke[i]), b = warp(stroke[i + 1]);
      double len = std::hypot(b.x - a.x, b.y - a.y);
      int steps = std::max(1, int(std::ceil(len / 0.15)));
      for (int s = 0; s <= steps; ++s) {
        double t = double(s) / steps;
        stamp(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
      }
    }
  }

  std::vector<uint8_t> bytes(kDigitSide * kDigitSide);
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = uint8_t(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));
  }
  return bytes;
}

MnistDataset synth_digit_corpus(int64_t n, uint64_t seed,
                                const std::string& split) {
  if (split != "train" && split != "test") {
    throw InputError("corpus split must be 'train' or 'test', got '" + split + "'");
  }
  if (n <= 0) throw InputError("corpus size must be positive");
  uint64_t stream = split == "train" ? 1 : 2;
  MnistDataset ds;
  ds.split = split;
  ds.count = n;
  ds.pixels.reserve(size_t(n) * kDigitSide * kDigitSide);
  ds.labels.reserve(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(Rng::mix(Rng::mix(seed, stream), uint64_t(i)));
    int digit = int(rng.uniform_int(10));
    auto bytes = render_digit(digit, rng);
    ds.pixels.insert(ds.pixels.end(), bytes.begin(), bytes.end());
    ds.labels.push_back(uint8_t(digit));
  }
  return ds;
}

void write_digit_corpus(const std::string& dir, int64_t n_train,
                        int64_t n_test, uint64_t seed) {
  std::filesystem::create_directories(dir);
  namespace fs = std::filesystem;
  auto train = synth_digit_corpus(n_train, seed, "train");
  write_idx_images((fs::path(dir) / "train-images-idx3-ubyte").string(),
                   train.pixels, n_train);
  write_idx_labels((fs::path(dir) / "train-labels-idx1-ubyte").string(),
                   train.labels);
  auto test = synth_digit_corpus(n_test, seed, "test");
  write_idx_images((fs::path(dir) / "test-images-idx3-ubyte").string(),
                   test.pixels, n_test);
  write_idx_labels((fs::path(dir) / "test-labels-idx1-ubyte").string(),
                   test.labels);
}

#define INSTANTIATE_DATA(T)                                     \
  template Tensor<T> MnistDataset::image<T>(int64_t) const;     \
  template Tensor<T> overlay<T>(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> to_model_input<T>(const LabeledSample&, int64_t);

INSTANTIATE_DATA(float)
INSTANTIATE_DATA(double)

#undef INSTANTIATE_DATA

}  // namespace capsnet
