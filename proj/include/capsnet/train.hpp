#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsnet/data.hpp"
#include "capsnet/model.hpp"

namespace capsnet {

// Step-decay schedule: the learning rate is base_lr divided by decay once
// per milestone already reached, so milestones (150, 250) with base 0.1
// give 0.1 on steps [0,150), 0.01 on [150,250), 0.001 from 250 on.
struct OptimizerConfig {
  double base_lr = 0.1;
  double decay = 10.0;
  std::vector<int64_t> milestones;
  double momentum = 0.0;  // heavy-ball coefficient; 0 disables the buffers

  // Milestones must be strictly increasing, positive, and below total_steps.
  void validate(int64_t total_steps) const;
};

double lr_at_step(const OptimizerConfig& opt, int64_t step);

struct MetricRecord {
  int64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double test_acc = 0;
  double wall_ms = 0;
};

// Append-only run log; serializes to CSV with a fixed header. Every column
// except wall_ms is deterministic for a fixed seed and config.
struct MetricLog {
  std::vector<MetricRecord> records;

  std::string to_csv() const;
  static MetricLog from_csv(const std::string& text);
};

inline constexpr const char* kMetricCsvHeader = "step,lr,train_loss,test_acc,wall_ms";

// Sample provider: index -> sample. n > 0 bounds the set (training visits it
// in reshuffled epochs); n <= 0 means an unbounded generator stream indexed
// by the running sample counter.
struct SampleSource {
  std::function<LabeledSample(int64_t)> at;
  int64_t n = 0;
};

SampleSource archive_source(const SampleArchive& archive);
SampleSource generator_source(const GeneratorConfig& cfg, const MnistDataset& digits,
                              int64_t n = 0);

struct TrainConfig {
  OptimizerConfig opt;
  int64_t batch_size = 16;
  int64_t total_steps = 0;
  int64_t eval_every = 0;    // extra evals every k steps; 0 = only first/last
  int64_t eval_samples = 0;  // cap per evaluation; 0 = the whole test set
  uint64_t seed = 0;         // sample-order seed
  bool verbose = false;      // echo each record to stdout

  void validate() const;
};

// Fraction of samples whose predicted label set equals the true set. For
// multiclass tasks the prediction is the argmax singleton, so this is plain
// accuracy; for multilabel it is the exact-match rate.
double exact_match_rate(const std::function<std::vector<int64_t>(const LabeledSample&)>& predict,
                        const SampleSource& data, int64_t limit = 0);

template <typename T>
double evaluate(const CapsNet<T>& net, const SampleSource& data, int64_t limit = 0);

// Plain SGD over shared-storage parameter handles: w -= lr/B * g, with the
// optional momentum buffer v = mu*v + g/B, w -= lr*v.
template <typename T>
struct Sgd {
  std::vector<NamedParam<T>> params;
  double momentum = 0.0;
  std::vector<std::vector<T>> velocity;

  explicit Sgd(std::vector<NamedParam<T>> parameters, double mu = 0.0);
  void zero_grad();
  void step(double lr, int64_t batch);
};

// Runs total_steps SGD steps, evaluating before the first update, every
// eval_every steps, and after the last update. A non-finite batch loss
// aborts with DivergenceError. Multiclass losses reject samples that do not
// carry exactly one label.
template <typename T>
MetricLog train_model(CapsNet<T>& net, const SampleSource& train, const SampleSource& test,
                      const TrainConfig& tc);

struct BenchRow {
  int iterations = 0;
  double ms_per_batch = 0;  // median over reps
  double peak_mb = 0;       // live-bytes high-water mark above the idle floor
};

// Times one forward batch of seeded noise for every iteration count 1..5.
std::vector<BenchRow> bench_sweep(const ModelConfig& base, int64_t batch, int reps,
                                  uint64_t seed);
std::string bench_csv(const std::vector<BenchRow>& rows);  // iters,ms_per_batch,peak_mb

}  // namespace capsnet
