#include "capsnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "capsnet/ops.hpp"

namespace capsnet {

void OptimizerConfig::validate(int64_t total_steps) const {
  if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
  if (!(decay > 1)) throw ConfigError("lr decay must exceed 1");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  for (size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] <= 0) throw ConfigError("milestones must be positive steps");
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw ConfigError("milestones must be strictly increasing");
    }
    if (total_steps > 0 && milestones[i] >= total_steps) {
      throw ConfigError("milestone " + std::to_string(milestones[i]) + " is not below total steps " +
                        std::to_string(total_steps));
    }
  }
}

double lr_at_step(const OptimizerConfig& opt, int64_t step) {
  int passed = 0;
  for (int64_t m : opt.milestones) {
    if (step >= m) ++passed;
  }
  return opt.base_lr / std::pow(opt.decay, passed);
}

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string MetricLog::to_csv() const {
  std::string out = std::string(kMetricCsvHeader) + "\n";
  for (const auto& r : records) {
    char wall[40];
    std::snprintf(wall, sizeof(wall), "%.3f", r.wall_ms);
    out += std::to_string(r.step) + "," + fmt_g(r.lr) + "," + fmt_g(r.train_loss) + "," +
           fmt_g(r.test_acc) + "," + wall + "\n";
  }
  return out;
}

MetricLog MetricLog::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricCsvHeader) {
    throw FormatError(std::string("metric CSV: expected header '") + kMetricCsvHeader + "'");
  }
  MetricLog log;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    std::vector<std::string> row;
    while (std::getline(cells, cell, ',')) row.push_back(cell);
    if (row.size() != 5) {
      throw FormatError("metric CSV: line " + std::to_string(lineno) + " has " +
                        std::to_string(row.size()) + " cells (expected 5)");
    }
    try {
      log.records.push_back({std::stoll(row[0]), std::stod(row[1]), std::stod(row[2]),
                             std::stod(row[3]), std::stod(row[4])});
    } catch (const std::exception&) {
      throw FormatError("metric CSV: line " + std::to_string(lineno) + " is not numeric");
    }
  }
  return log;
}

SampleSource archive_source(const SampleArchive& archive) {
  const SampleArchive* a = &archive;
  return {[a](int64_t i) { return a->sample(i); }, a->count};
}

SampleSource generator_source(const GeneratorConfig& cfg, const MnistDataset& digits, int64_t n) {
  const MnistDataset* src = &digits;
  return {[cfg, src](int64_t i) { return generate_sample(cfg, i, *src); }, n};
}

void TrainConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  if (total_steps <= 0) throw ConfigError("total steps must be positive");
  if (eval_every < 0) throw ConfigError("eval cadence must be non-negative");
  if (eval_samples < 0) throw ConfigError("eval sample cap must be non-negative");
  opt.validate(total_steps);
}

double exact_match_rate(const std::function<std::vector<int64_t>(const LabeledSample&)>& predict,
                        const SampleSource& data, int64_t limit) {
  if (!data.at || data.n <= 0) throw InputError("evaluation needs a bounded sample source");
  int64_t n = data.n;
  if (limit > 0 && limit < n) n = limit;
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    LabeledSample s = data.at(i);
    std::vector<int64_t> truth(s.labels.begin(), s.labels.end());
    if (predict(s) == truth) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

template <typename T>
double evaluate(const CapsNet<T>& net, const SampleSource& data, int64_t limit) {
  const CapsNet<T>* m = &net;
  return exact_match_rate(
      [m](const LabeledSample& s) {
        Tensor<T> x = to_model_input<T>(s, m->cfg.input_channels);
        return predict_label_set(m->inference(x), m->cfg.task());
      },
      data, limit);
}

template <typename T>
Sgd<T>::Sgd(std::vector<NamedParam<T>> parameters, double mu)
    : params(std::move(parameters)), momentum(mu) {
  if (momentum > 0) {
    velocity.reserve(params.size());
    for (auto& p : params) {
      velocity.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
    }
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
void Sgd<T>::step(double lr, int64_t batch) {
  const T scale = static_cast<T>(1.0 / static_cast<double>(batch));
  const T rate = static_cast<T>(lr);
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& t = params[k].tensor;
    const T* g = t.grad_or_null();
    if (!g) continue;
    T* w = t.data();
    int64_t n = t.numel();
    if (momentum > 0) {
      T mu = static_cast<T>(momentum);
      T* v = velocity[k].data();
      for (int64_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i] * scale;
        w[i] -= rate * v[i];
      }
    } else {
      for (int64_t i = 0; i < n; ++i) w[i] -= rate * scale * g[i];
    }
  }
}

namespace {

// Visit a bounded training set in per-epoch reshuffled order; an unbounded
// source is indexed by the running sample counter directly.
class SampleOrder {
 public:
  SampleOrder(int64_t n, uint64_t seed) : n_(n), seed_(seed) {}

  int64_t index_at(int64_t position) {
    if (n_ <= 0) return position;
    int64_t epoch = position / n_;
    if (epoch != epoch_ || perm_.empty()) reshuffle(epoch);
    return perm_[static_cast<size_t>(position % n_)];
  }

 private:
  void reshuffle(int64_t epoch) {
    perm_.resize(static_cast<size_t>(n_));
    std::iota(perm_.begin(), perm_.end(), int64_t{0});
    Rng rng(Rng::mix(seed_, static_cast<uint64_t>(epoch)));
    for (int64_t i = n_ - 1; i > 0; --i) {
      std::swap(perm_[static_cast<size_t>(i)], perm_[static_cast<size_t>(rng.uniform_int(i + 1))]);
    }
    epoch_ = epoch;
  }

  int64_t n_;
  uint64_t seed_;
  int64_t epoch_ = -1;
  std::vector<int64_t> perm_;
};

template <typename T>
double batch_pass(CapsNet<T>& net, const SampleSource& train, SampleOrder& order, int64_t step,
                  int64_t batch_size) {
  double loss_sum = 0;
  for (int64_t b = 0; b < batch_size; ++b) {
    LabeledSample s = train.at(order.index_at(step * batch_size + b));
    Tensor<T> x = to_model_input<T>(s, net.cfg.input_channels);
    Tape<T> tape;
    Tensor<T> logits = net.inference(x, &tape);
    Tensor<T> loss;
    if (net.cfg.loss == LossKind::multiclass_ce) {
      if (s.labels.size() != 1) {
        throw InputError("multiclass training requires exactly one label per sample, got " +
                         std::to_string(s.labels.size()));
      }
      loss = multiclass_ce(logits, s.labels[0], &tape);
    } else {
      Tensor<T> target = Tensor<T>::zeros({net.cfg.classes()});
      for (int lab : s.labels) target.data()[lab] = T(1);
      loss = binary_ce(logits, target, &tape);
    }
    tape.backward(loss);
    loss_sum += static_cast<double>(loss.item());
  }
  return loss_sum / static_cast<double>(batch_size);
}

}  // namespace

template <typename T>
MetricLog train_model(CapsNet<T>& net, const SampleSource& train, const SampleSource& test,
                      const TrainConfig& tc) {
  tc.validate();
  if (!train.at) throw InputError("training needs a sample source");

  Sgd<T> sgd(net.parameters(), tc.opt.momentum);
  SampleOrder order(train.n, tc.seed);
  MetricLog log;
  auto start = std::chrono::steady_clock::now();
  auto wall_ms = [&start] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
  };
  auto emit = [&](int64_t step, double lr, double train_loss) {
    double acc = test.at ? evaluate(net, test, tc.eval_samples) : 0.0;
    log.records.push_back({step, lr, train_loss, acc, wall_ms()});
    if (tc.verbose) {
      std::printf("step %6lld  lr %.4g  loss %.6f  acc %.4f\n", static_cast<long long>(step), lr,
                  train_loss, acc);
      std::fflush(stdout);
    }
  };

  double batch_loss = 0;
  for (int64_t step = 0; step < tc.total_steps; ++step) {
    double lr = lr_at_step(tc.opt, step);
    sgd.zero_grad();
    batch_loss = batch_pass(net, train, order, step, tc.batch_size);
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                            ": batch loss is not finite");
    }
    if (step == 0 || (tc.eval_every > 0 && step % tc.eval_every == 0)) {
      emit(step, lr, batch_loss);
    }
    sgd.step(lr, tc.batch_size);
  }
  emit(tc.total_steps, lr_at_step(tc.opt, tc.total_steps), batch_loss);
  return log;
}

std::vector<BenchRow> bench_sweep(const ModelConfig& base, int64_t batch, int reps,
                                  uint64_t seed) {
  if (batch <= 0 || reps <= 0) throw ConfigError("bench needs positive batch and reps");

  // Routing cost does not depend on pixel content, so seeded noise sized for
  // the config serves as the batch.
  std::vector<Tensor<float>> inputs;
  Rng rng(Rng::mix(seed, 0xb3));
  for (int64_t b = 0; b < batch; ++b) {
    auto x = Tensor<float>::zeros({base.input_channels, base.input_hw, base.input_hw});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(rng.uniform());
    inputs.push_back(x);
  }

  std::vector<BenchRow> rows;
  for (int t = 1; t <= 5; ++t) {
    ModelConfig cfg = base;
    cfg.iterations = t;
    auto net = CapsNet<float>::init(cfg, seed);
    net.inference(inputs[0]);  // warm caches before timing

    std::vector<double> ms(static_cast<size_t>(reps));
    memstats::reset_peak();
    int64_t floor_bytes = memstats::live_bytes();
    for (int rep = 0; rep < reps; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      for (auto& x : inputs) {
        auto logits = net.inference(x);
        (void)logits;
      }
      ms[static_cast<size_t>(rep)] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count();
    }
    std::sort(ms.begin(), ms.end());
    double peak_mb =
        static_cast<double>(memstats::peak_bytes() - floor_bytes) / (1024.0 * 1024.0);
    rows.push_back({t, ms[ms.size() / 2], peak_mb});
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string csv = "iters,ms_per_batch,peak_mb\n";
  for (const auto& r : rows) {
    char line[96];
    std::snprintf(line, sizeof(line), "%d,%.3f,%.3f\n", r.iterations, r.ms_per_batch, r.peak_mb);
    csv += line;
  }
  return csv;
}

#define INSTANTIATE_TRAIN(T)                                                          \
  template double evaluate<T>(const CapsNet<T>&, const SampleSource&, int64_t);      \
  template struct Sgd<T>;                                                             \
  template MetricLog train_model<T>(CapsNet<T>&, const SampleSource&,                 \
                                    const SampleSource&, const TrainConfig&);

INSTANTIATE_TRAIN(float)
INSTANTIATE_TRAIN(double)

}  // namespace capsnet
