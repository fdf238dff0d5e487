#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

#include "capsnet/checkpoint.hpp"
#include "capsnet/ops.hpp"
#include "capsnet/train.hpp"

using namespace capsnet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(bool(out));
}

const MnistDataset& small_corpus() {
  static MnistDataset ds = [] {
    auto dir = fresh_dir("capsnet_train_corpus");
    write_digit_corpus(dir.string(), 200, 80, 9);
    return load_mnist_dir(dir.string(), "train");
  }();
  return ds;
}

// Smallest config that still consumes the 36x36 generator canvas.
ModelConfig smoke_config() {
  return ModelConfig::from_json(R"({
    "preset": "desk",
    "backbone_channels": 16,
    "primary_types": 2,
    "conv_caps": [{"types": 4, "kernel": 3, "stride": 2}],
    "iterations": 1
  })");
}

}  // namespace

TEST_CASE("lr schedule: milestone decades") {
  OptimizerConfig opt;
  opt.base_lr = 0.1;
  opt.milestones = {150, 250};
  CHECK(lr_at_step(opt, 0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at_step(opt, 149) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at_step(opt, 150) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at_step(opt, 249) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at_step(opt, 250) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at_step(opt, 10000) == doctest::Approx(0.001).epsilon(1e-12));

  opt.validate(300);
  CHECK_THROWS_AS(opt.validate(250), ConfigError);  // milestone not below total
  opt.milestones = {250, 150};
  CHECK_THROWS_AS(opt.validate(300), ConfigError);  // not increasing
  opt.milestones = {150, 150};
  CHECK_THROWS_AS(opt.validate(300), ConfigError);  // not strictly increasing
  opt.milestones = {0};
  CHECK_THROWS_AS(opt.validate(300), ConfigError);  // not positive
}

TEST_CASE("sgd: hand-worked quadratic step") {
  // f(w) = w^2 at w=1: grad 2, lr 0.1 -> w = 1 - 0.1*2 = 0.8 exactly.
  Tensor<double> w = Tensor<double>::scalar(1.0, true);
  Sgd<double> sgd({{"w", w}}, 0.0);
  sgd.zero_grad();
  Tape<double> tape;
  auto loss = mul(w, w, &tape);
  tape.backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
  sgd.step(0.1, 1);
  CHECK(w.data()[0] == doctest::Approx(0.8).epsilon(1e-15));

  // Second step with momentum 0.9 from a fresh start:
  // v1 = 2, w = 0.8; v2 = 0.9*2 + 1.6 = 3.4, w = 0.8 - 0.34 = 0.46.
  Tensor<double> m = Tensor<double>::scalar(1.0, true);
  Sgd<double> msgd({{"m", m}}, 0.9);
  for (int s = 0; s < 2; ++s) {
    msgd.zero_grad();
    Tape<double> t2;
    auto l2 = mul(m, m, &t2);
    t2.backward(l2);
    msgd.step(0.1, 1);
  }
  CHECK(m.data()[0] == doctest::Approx(0.46).epsilon(1e-12));
}

TEST_CASE("sgd: gradients accumulate across a batch and scale by 1/B") {
  Tensor<double> w = Tensor<double>::scalar(1.0, true);
  Sgd<double> sgd({{"w", w}}, 0.0);
  sgd.zero_grad();
  for (int b = 0; b < 2; ++b) {
    Tape<double> tape;
    auto loss = mul(w, w, &tape);
    tape.backward(loss);
  }
  CHECK(w.grad()[0] == doctest::Approx(4.0).epsilon(1e-15));
  sgd.step(0.1, 2);  // w -= 0.1 * (4/2)
  CHECK(w.data()[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("metric log: csv round trip and malformed input") {
  MetricLog log;
  log.records.push_back({0, 0.1, 2.302585, 0.1, 12.5});
  log.records.push_back({50, 0.01, 0.5, 0.875, 8000.125});
  std::string csv = log.to_csv();
  CHECK(csv.rfind("step,lr,train_loss,test_acc,wall_ms\n", 0) == 0);

  MetricLog back = MetricLog::from_csv(csv);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].step == 0);
  CHECK(back.records[0].lr == 0.1);
  CHECK(back.records[0].train_loss == 2.302585);
  CHECK(back.records[1].test_acc == 0.875);
  CHECK(back.records[1].wall_ms == doctest::Approx(8000.125));

  CHECK_THROWS_AS(MetricLog::from_csv("nope\n1,2,3,4,5\n"), FormatError);
  CHECK_THROWS_AS(MetricLog::from_csv("step,lr,train_loss,test_acc,wall_ms\n1,2,3\n"), FormatError);
  CHECK_THROWS_AS(MetricLog::from_csv("step,lr,train_loss,test_acc,wall_ms\n1,2,x,4,5\n"),
                  FormatError);
}

TEST_CASE("exact match: set equality, not overlap") {
  std::vector<LabeledSample> fixed(3);
  fixed[0].labels = {3};
  fixed[1].labels = {3, 5};
  fixed[2].labels = {7};
  SampleSource src{[&fixed](int64_t i) { return fixed[static_cast<size_t>(i)]; }, 3};

  auto over_predict = [](const LabeledSample&) { return std::vector<int64_t>{3, 5}; };
  CHECK(exact_match_rate(over_predict, src) == doctest::Approx(1.0 / 3.0));

  auto echo = [&](const LabeledSample& s) {
    return std::vector<int64_t>(s.labels.begin(), s.labels.end());
  };
  CHECK(exact_match_rate(echo, src) == doctest::Approx(1.0));

  auto empty = [](const LabeledSample&) { return std::vector<int64_t>{}; };
  CHECK(exact_match_rate(empty, src) == doctest::Approx(0.0));
}

TEST_CASE("exact match: random 10-class guesser sits near 0.10") {
  GeneratorConfig gc;
  gc.p_single = 1.0;
  gc.seed = 11;
  SampleSource src = generator_source(gc, small_corpus(), 10000);
  auto rng = std::make_shared<Rng>(7);
  auto guess = [rng](const LabeledSample&) { return std::vector<int64_t>{rng->uniform_int(10)}; };
  double rate = exact_match_rate(guess, src);
  CHECK(rate > 0.08);
  CHECK(rate < 0.12);
}

TEST_CASE("training: loss decreases on a fixed single-digit set") {
  ModelConfig cfg = smoke_config();
  auto net = CapsNet<float>::init(cfg, 21);

  GeneratorConfig gc;
  gc.p_single = 1.0;
  gc.seed = 5;
  SampleSource train = generator_source(gc, small_corpus(), 512);
  GeneratorConfig gt = gc;
  gt.seed = 6;
  SampleSource test = generator_source(gt, small_corpus(), 64);

  TrainConfig tc;
  tc.opt.base_lr = 0.05;
  tc.batch_size = 8;
  tc.total_steps = 50;
  tc.eval_every = 25;
  tc.seed = 1;
  MetricLog log = train_model(net, train, test, tc);

  REQUIRE(log.records.size() >= 2);
  CHECK(log.records.front().step == 0);
  CHECK(log.records.back().step == 50);
  for (size_t i = 1; i < log.records.size(); ++i) {
    CHECK(log.records[i].step > log.records[i - 1].step);
    CHECK(log.records[i].wall_ms >= log.records[i - 1].wall_ms);
  }
  for (const auto& r : log.records) {
    CHECK(std::isfinite(r.train_loss));
    CHECK(r.lr == doctest::Approx(lr_at_step(tc.opt, r.step)).epsilon(1e-12));
  }
  CHECK(log.records.back().train_loss < log.records.front().train_loss);
}

TEST_CASE("training: deterministic for a fixed seed") {
  ModelConfig cfg = smoke_config();
  GeneratorConfig gc;
  gc.p_single = 1.0;
  gc.seed = 5;
  SampleSource train = generator_source(gc, small_corpus(), 64);

  TrainConfig tc;
  tc.opt.base_lr = 0.05;
  tc.batch_size = 4;
  tc.total_steps = 6;
  tc.eval_samples = 16;
  tc.seed = 3;

  auto run = [&] {
    auto net = CapsNet<float>::init(cfg, 21);
    return train_model(net, train, train, tc);
  };
  MetricLog a = run();
  MetricLog b = run();
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].train_loss == b.records[i].train_loss);
    CHECK(a.records[i].test_acc == b.records[i].test_acc);
  }
}

TEST_CASE("training: non-finite loss aborts with a divergence error") {
  ModelConfig cfg = smoke_config();
  auto net = CapsNet<float>::init(cfg, 21);
  for (auto& p : net.parameters()) {
    if (p.name == "classifier.w") p.tensor.data()[0] = std::nanf("");
  }
  GeneratorConfig gc;
  gc.p_single = 1.0;
  SampleSource train = generator_source(gc, small_corpus(), 16);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.total_steps = 2;
  CHECK_THROWS_AS(train_model(net, train, {}, tc), DivergenceError);
}

TEST_CASE("training: multiclass loss rejects two-label samples") {
  ModelConfig cfg = smoke_config();
  auto net = CapsNet<float>::init(cfg, 21);
  GeneratorConfig gc;
  gc.p_single = 0.0;  // every sample carries two digits
  gc.seed = 2;
  SampleSource train = generator_source(gc, small_corpus(), 16);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.total_steps = 1;
  CHECK_THROWS_AS(train_model(net, train, {}, tc), InputError);
}

TEST_CASE("checkpoint: save/load round trip is bit exact") {
  ModelConfig cfg = smoke_config();
  auto net = CapsNet<float>::init(cfg, 3);
  auto dir = fresh_dir("capsnet_ckpt");
  std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, net);

  auto back = load_checkpoint<float>(path);
  CHECK(back.cfg.to_json() == net.cfg.to_json());

  auto pa = net.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  int64_t scalars = 0;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    REQUIRE(pa[i].tensor.shape() == pb[i].tensor.shape());
    CHECK(std::memcmp(pa[i].tensor.data(), pb[i].tensor.data(),
                      sizeof(float) * pa[i].tensor.numel()) == 0);
    scalars += pa[i].tensor.numel();
  }
  CHECK(scalars == cfg.parameter_count());

  // Probe logits agree bitwise: same weights, same compiled path.
  GeneratorConfig gc;
  gc.p_single = 1.0;
  auto probe = to_model_input<float>(generate_sample(gc, 0, small_corpus()), cfg.input_channels);
  auto la = net.inference(probe);
  auto lb = back.inference(probe);
  CHECK(std::memcmp(la.data(), lb.data(), sizeof(float) * la.numel()) == 0);
}

TEST_CASE("checkpoint: corrupted and malformed files fail cleanly") {
  ModelConfig cfg = smoke_config();
  auto net = CapsNet<float>::init(cfg, 3);
  auto dir = fresh_dir("capsnet_ckpt_bad");
  std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, net);
  std::string good = slurp(path);

  std::string flipped = good;
  flipped[0] = 'X';
  spit(dir / "magic.ckpt", flipped);
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint<float>((dir / "magic.ckpt").string())),
                       doctest::Contains("bad magic"), FormatError);

  spit(dir / "trunc.ckpt", good.substr(0, good.size() - 5));
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint<float>((dir / "trunc.ckpt").string())),
                       doctest::Contains("truncated"), FormatError);

  spit(dir / "trail.ckpt", good + "zz");
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint<float>((dir / "trail.ckpt").string())),
                       doctest::Contains("trailing"), FormatError);

  CHECK_THROWS_AS(static_cast<void>(load_checkpoint<float>((dir / "absent.ckpt").string())),
                  InputError);

  // Hand-built container with one bogus record: the loader must name it.
  std::string json = cfg.to_json();
  std::string fake = "CAPSNET1";
  auto put_u32 = [&fake](uint32_t v) { fake.append(reinterpret_cast<const char*>(&v), 4); };
  auto put_u16 = [&fake](uint16_t v) { fake.append(reinterpret_cast<const char*>(&v), 2); };
  put_u32(static_cast<uint32_t>(json.size()));
  fake += json;
  put_u32(1);
  put_u16(4);
  fake += "nope";
  fake.push_back(0);  // rank 0 scalar
  float z = 0;
  fake.append(reinterpret_cast<const char*>(&z), 4);
  spit(dir / "unknown.ckpt", fake);
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint<float>((dir / "unknown.ckpt").string())),
                       doctest::Contains("unknown parameter 'nope'"), FormatError);

  // Valid container with zero records: every model parameter is missing.
  std::string empty = "CAPSNET1";
  auto put2_u32 = [&empty](uint32_t v) { empty.append(reinterpret_cast<const char*>(&v), 4); };
  put2_u32(static_cast<uint32_t>(json.size()));
  empty += json;
  put2_u32(0);
  spit(dir / "empty.ckpt", empty);
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint<float>((dir / "empty.ckpt").string())),
                       doctest::Contains("missing parameter"), FormatError);
}

TEST_CASE("checkpoint: resumed training continues bit-for-bit") {
  ModelConfig cfg = smoke_config();
  GeneratorConfig gc;
  gc.p_single = 1.0;
  gc.seed = 5;
  SampleSource train = generator_source(gc, small_corpus(), 32);

  TrainConfig tc;
  tc.opt.base_lr = 0.02;
  tc.batch_size = 4;
  tc.total_steps = 4;
  tc.seed = 9;

  auto net = CapsNet<float>::init(cfg, 21);
  train_model(net, train, {}, tc);
  auto dir = fresh_dir("capsnet_ckpt_resume");
  std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, net);
  auto resumed = load_checkpoint<float>(path);

  auto probe = to_model_input<float>(generate_sample(gc, 3, small_corpus()), cfg.input_channels);
  auto la = net.inference(probe);
  auto lb = resumed.inference(probe);
  CHECK(std::memcmp(la.data(), lb.data(), sizeof(float) * la.numel()) == 0);
}
