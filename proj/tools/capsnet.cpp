// Command-line surface: train, eval, gendata, synth, verify, bench.
// Exit codes: 0 success (verify: all checks pass); 1 failed check or
// diverged run; 2 usage or config error; 3 file-format or I/O error.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "capsnet/checkpoint.hpp"
#include "capsnet/data.hpp"
#include "capsnet/model.hpp"
#include "capsnet/train.hpp"
#include "capsnet/verify.hpp"

using namespace capsnet;
namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// Everything that determines a run. The resolved struct is echoed to
// <out>/config.json; feeding that file back via --config reproduces the
// run exactly (wall-clock column aside).
struct RunConfig {
  ModelConfig model = ModelConfig::preset_by_name("desk");
  GeneratorConfig generator;
  OptimizerConfig optimizer;
  int64_t batch_size = 16;
  int64_t total_steps = 500;
  int64_t eval_every = 0;  // 0: pick one epoch-equivalent at resolve time
  int64_t eval_samples = 0;
  std::string source_dir;    // IDX digit corpus; empty = rendered corpus
  int64_t synth_digits = 2000;
  int64_t train_samples = 10000;
  int64_t test_samples = 2000;
  uint64_t seed = 7;
};

njson run_config_to_json(const RunConfig& rc) {
  njson j;
  j["model"] = njson::parse(rc.model.to_json());
  j["generator"] = {{"p_single", rc.generator.p_single},
                    {"max_shift", rc.generator.max_shift},
                    {"canvas", rc.generator.canvas},
                    {"seed", rc.generator.seed}};
  j["optimizer"] = {{"base_lr", rc.optimizer.base_lr},
                    {"decay", rc.optimizer.decay},
                    {"milestones", rc.optimizer.milestones},
                    {"momentum", rc.optimizer.momentum}};
  j["train"] = {{"batch_size", rc.batch_size},
                {"total_steps", rc.total_steps},
                {"eval_every", rc.eval_every},
                {"eval_samples", rc.eval_samples}};
  j["data"] = {{"source_dir", rc.source_dir},
               {"synth_digits", rc.synth_digits},
               {"train_samples", rc.train_samples},
               {"test_samples", rc.test_samples}};
  j["seed"] = rc.seed;
  return j;
}

RunConfig run_config_from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  njson j;
  try {
    j = njson::parse(ss.str());
  } catch (const std::exception& e) {
    throw FormatError(std::string("config JSON: ") + e.what());
  }

  RunConfig rc;
  for (auto& [key, val] : j.items()) {
    if (key == "model") {
      rc.model = ModelConfig::from_json(val.dump());
    } else if (key == "generator") {
      for (auto& [k2, v2] : val.items()) {
        if (k2 == "p_single") rc.generator.p_single = v2.get<double>();
        else if (k2 == "max_shift") rc.generator.max_shift = v2.get<int>();
        else if (k2 == "canvas") rc.generator.canvas = v2.get<int>();
        else if (k2 == "seed") rc.generator.seed = v2.get<uint64_t>();
        else throw ConfigError("unknown config key: generator." + k2);
      }
    } else if (key == "optimizer") {
      for (auto& [k2, v2] : val.items()) {
        if (k2 == "base_lr") rc.optimizer.base_lr = v2.get<double>();
        else if (k2 == "decay") rc.optimizer.decay = v2.get<double>();
        else if (k2 == "milestones") rc.optimizer.milestones = v2.get<std::vector<int64_t>>();
        else if (k2 == "momentum") rc.optimizer.momentum = v2.get<double>();
        else throw ConfigError("unknown config key: optimizer." + k2);
      }
    } else if (key == "train") {
      for (auto& [k2, v2] : val.items()) {
        if (k2 == "batch_size") rc.batch_size = v2.get<int64_t>();
        else if (k2 == "total_steps") rc.total_steps = v2.get<int64_t>();
        else if (k2 == "eval_every") rc.eval_every = v2.get<int64_t>();
        else if (k2 == "eval_samples") rc.eval_samples = v2.get<int64_t>();
        else throw ConfigError("unknown config key: train." + k2);
      }
    } else if (key == "data") {
      for (auto& [k2, v2] : val.items()) {
        if (k2 == "source_dir") rc.source_dir = v2.get<std::string>();
        else if (k2 == "synth_digits") rc.synth_digits = v2.get<int64_t>();
        else if (k2 == "train_samples") rc.train_samples = v2.get<int64_t>();
        else if (k2 == "test_samples") rc.test_samples = v2.get<int64_t>();
        else throw ConfigError("unknown config key: data." + k2);
      }
    } else if (key == "seed") {
      rc.seed = j["seed"].get<uint64_t>();
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  return rc;
}

int64_t test_corpus_size(int64_t synth_digits) {
  return std::max<int64_t>(synth_digits / 5, 50);
}

// Digit sources shared by train/eval/gendata: either a user-supplied IDX
// directory or the built-in rendered corpus.
MnistDataset load_digits(const RunConfig& rc, const std::string& split) {
  if (!rc.source_dir.empty()) return load_mnist_dir(rc.source_dir, split);
  int64_t n = split == "train" ? rc.synth_digits : test_corpus_size(rc.synth_digits);
  return synth_digit_corpus(n, rc.seed, split);
}

// Held-out stream: test-split digits under an independent generator seed.
GeneratorConfig test_generator(const RunConfig& rc) {
  GeneratorConfig g = rc.generator;
  g.seed = Rng::mix(rc.generator.seed, 0x7357);
  return g;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw InputError("write failed: " + path.string());
}

// ---- train ----

int cmd_train(const RunConfig& rc, const std::string& out_dir) {
  rc.model.validate();
  rc.generator.validate();
  if (rc.train_samples <= 0 || rc.test_samples < 0) {
    throw ConfigError("train_samples must be positive and test_samples non-negative");
  }
  if (rc.model.loss == LossKind::multiclass_ce && rc.generator.p_single != 1.0) {
    throw ConfigError(
        "multiclass training needs single-digit samples; pass --task single-digit "
        "or --p-single 1 (current p_single = " +
        std::to_string(rc.generator.p_single) + ")");
  }

  TrainConfig tc;
  tc.opt = rc.optimizer;
  tc.batch_size = rc.batch_size;
  tc.total_steps = rc.total_steps;
  tc.eval_every = rc.eval_every;
  tc.eval_samples = rc.eval_samples;
  tc.seed = rc.seed;
  tc.verbose = true;
  if (tc.eval_every == 0) {
    // one evaluation per pass over the training set, at least every 200 steps
    tc.eval_every = std::max<int64_t>(1, std::min<int64_t>(rc.train_samples / rc.batch_size, 200));
  }
  tc.validate();

  fs::create_directories(out_dir);
  RunConfig resolved = rc;
  resolved.eval_every = tc.eval_every;
  write_text(fs::path(out_dir) / "config.json", run_config_to_json(resolved).dump(2) + "\n");

  MnistDataset train_digits = load_digits(rc, "train");
  MnistDataset test_digits = load_digits(rc, "test");
  SampleSource train = generator_source(rc.generator, train_digits, rc.train_samples);
  SampleSource test = generator_source(test_generator(rc), test_digits, rc.test_samples);

  auto net = CapsNet<float>::init(rc.model, rc.seed);
  std::printf("model %s: %lld parameters, %s poses, t=%d %s\n", rc.model.preset.c_str(),
              static_cast<long long>(rc.model.parameter_count()), to_string(rc.model.structure),
              rc.model.iterations, to_string(rc.model.mode));
  MetricLog log = train_model(net, train, test, tc);

  write_text(fs::path(out_dir) / "metrics.csv", log.to_csv());
  save_checkpoint((fs::path(out_dir) / "model.ckpt").string(), net);
  std::printf("final test exact-match: %.4f over %lld samples\n", log.records.back().test_acc,
              static_cast<long long>(rc.test_samples));
  return kExitOk;
}

// ---- eval ----

int cmd_eval(const RunConfig& rc, const std::string& ckpt, const std::string& split,
             bool derive_p_single) {
  auto net = load_checkpoint<float>(ckpt);
  MnistDataset digits = load_digits(rc, split);
  GeneratorConfig gc = split == "test" ? test_generator(rc) : rc.generator;
  if (derive_p_single) {
    // No explicit sample mix requested: match the checkpoint's task.
    gc.p_single = net.cfg.task() == TaskKind::multiclass ? 1.0 : 1.0 / 6.0;
  }
  SampleSource src = generator_source(gc, digits, rc.test_samples);
  double acc = evaluate(net, src);
  std::printf("%s exact-match over %lld samples: %.4f\n", to_string(net.cfg.task()),
              static_cast<long long>(rc.test_samples), acc);
  return kExitOk;
}

// ---- gendata ----

int cmd_gendata(const RunConfig& rc, const std::string& archive, int64_t n) {
  if (n <= 0) throw ConfigError("gendata needs --n > 0");
  rc.generator.validate();
  MnistDataset digits = load_digits(rc, "train");
  if (fs::path(archive).has_parent_path()) {
    fs::create_directories(fs::path(archive).parent_path());
  }
  write_sample_archive(archive, rc.generator, n, digits);

  SampleArchive back = read_sample_archive(archive);
  auto report = dataset_stats([&back](int64_t i) { return back.sample(i); }, n,
                              rc.generator.canvas);
  std::printf("wrote %s: %lld samples\n", archive.c_str(), static_cast<long long>(n));
  std::printf("  single fraction: %.4f (target %.4f +- 0.01)\n", report.single_fraction,
              1.0 / 6.0);
  std::printf("  distinct-class violations: %lld\n",
              static_cast<long long>(report.distinct_violations));
  std::printf("  shape/range violations: %lld\n",
              static_cast<long long>(report.shape_violations + report.range_violations));
  return report.conforming() ? kExitOk : kExitCheckFailed;
}

// ---- synth ----

int cmd_synth(const std::string& out_dir, int64_t n_train, int64_t n_test, uint64_t seed) {
  if (n_train <= 0 || n_test <= 0) throw ConfigError("synth needs positive --train and --test");
  write_digit_corpus(out_dir, n_train, n_test, seed);
  std::printf("wrote IDX corpus under %s: %lld train / %lld test digits\n", out_dir.c_str(),
              static_cast<long long>(n_train), static_cast<long long>(n_test));
  return kExitOk;
}

// ---- verify ----

int cmd_verify(const std::string& suite, int trials, int64_t n, uint64_t seed, bool fault) {
  std::vector<verify::CheckResult> rows;
  auto take = [&rows](std::vector<verify::CheckResult> part) {
    rows.insert(rows.end(), part.begin(), part.end());
  };

  if (suite == "all" || suite == "routing") take(verify::routing_oracle(trials, seed));
  if (suite == "all" || suite == "gradients") take(verify::gradient_checks(seed));
  if (suite == "all" || suite == "layernorm") take(verify::layernorm_stats(seed));
  if (suite == "all" || suite == "counting") take(verify::counting_laws());
  if (suite == "all" || suite == "structural") take(verify::structural_checks(seed));
  if (suite == "all" || suite == "dataset") take(verify::dataset_checks(seed, n));
  if (suite == "all" || suite == "faults") take(verify::fault_injection(seed));
  if (rows.empty()) {
    throw ConfigError("unknown suite '" + suite +
                      "' (routing, gradients, layernorm, counting, structural, dataset, faults, all)");
  }

  if (fault) {
    // Negative control: run the live row-sum invariant with the routing
    // softmax flipped to the child axis. This row is expected to FAIL.
    Rng rng(Rng::mix(seed, 0xfa));
    auto agree = Tensor<double>::zeros({2, 5, 3});
    for (int64_t i = 0; i < agree.numel(); ++i) agree.data()[i] = rng.normal();
    auto coeff = routing_coefficients(agree, RoutingFault::softmax_over_children);
    double dev = 0;
    for (int64_t g = 0; g < 2; ++g) {
      for (int64_t i = 0; i < 5; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 3; ++j) s += coeff.at({g, i, j});
        dev = std::max(dev, std::abs(s - 1.0));
      }
    }
    rows.push_back({"row-stochasticity under injected softmax-over-children fault", dev <= 1e-6,
                    dev, 1e-6});
  }

  int failed = 0;
  for (const auto& r : rows) {
    if (!r.pass) ++failed;
    std::printf("%-4s %-76s observed %-11.4g bound %.4g\n", r.pass ? "ok" : "FAIL",
                r.name.c_str(), r.observed, r.bound);
  }
  std::printf("%zu checks, %d failed\n", rows.size(), failed);
  return failed == 0 ? kExitOk : kExitCheckFailed;
}

// ---- bench ----

int cmd_bench(const std::string& preset, int64_t batch, int reps, uint64_t seed,
              const std::string& out_file) {
  ModelConfig base = ModelConfig::preset_by_name(preset);
  std::string csv = bench_csv(bench_sweep(base, batch, reps, seed));
  std::printf("%s", csv.c_str());
  if (!out_file.empty()) {
    if (fs::path(out_file).has_parent_path()) {
      fs::create_directories(fs::path(out_file).parent_path());
    }
    write_text(out_file, csv);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule-network engine with inverted dot-product attention routing"};
  app.require_subcommand(1);

  // Shared run-config flags; each subcommand applies the ones it declares.
  std::string config_path, out_dir, archive, ckpt, preset, task, pose, mode, source_dir, split =
      "test";
  std::string suite = "all", bench_out;
  int iters = 0, trials = 500, reps = 9;
  int64_t n = 0, steps = 0, batch = 0, eval_every = -1, eval_samples = -1;
  int64_t synth_digits = 0, train_samples = 0, test_samples = 0;
  int64_t n_train = 2000, n_test = 400;
  double lr = 0, momentum = -1, p_single = -1;
  std::vector<int64_t> milestones;
  uint64_t seed = 7;
  bool no_layernorm = false, fault = false;

  // Option handles so explicit flags — including explicit zeros — are
  // distinguishable from defaults; only passed flags override the file.
  struct Handles {
    CLI::Option *config = nullptr, *preset = nullptr, *task = nullptr, *pose = nullptr,
        *iters = nullptr, *mode = nullptr, *no_ln = nullptr, *seed = nullptr, *source = nullptr,
        *synth = nullptr, *p_single = nullptr, *steps = nullptr, *batch = nullptr, *lr = nullptr,
        *milestones = nullptr, *momentum = nullptr, *eval_every = nullptr, *eval_samples = nullptr,
        *train_s = nullptr, *test_s = nullptr;
  };

  auto add_run_flags = [&](CLI::App* c, bool training) {
    Handles h;
    h.config = c->add_option("--config", config_path,
                             "run-config JSON (flags override file values)");
    h.preset = c->add_option("--preset", preset, "model preset: " + [] {
      std::string s;
      for (const auto& p : ModelConfig::preset_names()) s += (s.empty() ? "" : ", ") + p;
      return s;
    }());
    h.task = c->add_option("--task", task,
                           "single-digit (multiclass) or diverse-multimnist (multilabel)");
    h.pose = c->add_option("--pose", pose, "pose structure: matrix or vector");
    h.iters = c->add_option("--iters", iters, "routing iterations (t >= 1)");
    h.mode = c->add_option("--mode", mode, "iteration schedule: concurrent or sequential");
    h.no_ln = c->add_flag("--no-layernorm", no_layernorm,
                          "ablation: skip routing pose normalization");
    h.seed = c->add_option("--seed", seed, "seed for init, sample order, and generation");
    h.source = c->add_option("--source-dir", source_dir,
                             "IDX digit corpus directory (default: rendered)");
    h.synth = c->add_option("--synth-digits", synth_digits,
                            "rendered source digits when no --source-dir");
    h.p_single = c->add_option("--p-single", p_single,
                               "generator probability of a single-digit sample");
    if (training) {
      h.steps = c->add_option("--steps", steps, "total optimizer steps");
      h.batch = c->add_option("--batch", batch, "batch size");
      h.lr = c->add_option("--lr", lr, "base learning rate");
      h.milestones = c->add_option("--milestones", milestones,
                                   "steps at which the LR divides by the decay");
      h.momentum = c->add_option("--momentum", momentum,
                                 "heavy-ball coefficient (0 = plain SGD)");
      h.eval_every = c->add_option("--eval-every", eval_every, "evaluation cadence in steps");
      h.eval_samples = c->add_option("--eval-samples", eval_samples,
                                     "test samples per evaluation (0 = all)");
      h.train_s = c->add_option("--train-samples", train_samples, "training set size");
      h.test_s = c->add_option("--test-samples", test_samples, "held-out set size");
    }
    return h;
  };
  auto given = [](CLI::Option* o) { return o != nullptr && o->count() > 0; };

  // Resolution order: defaults, then --config file, then explicit flags.
  auto resolve = [&](const Handles& h) {
    RunConfig rc;
    if (given(h.config)) rc = run_config_from_file(config_path);
    if (given(h.preset)) rc.model = ModelConfig::preset_by_name(preset);
    if (given(h.task)) {
      if (task == "single-digit" || task == "single") {
        rc.model.loss = LossKind::multiclass_ce;
        rc.generator.p_single = 1.0;
      } else if (task == "diverse-multimnist" || task == "diverse") {
        rc.model.loss = LossKind::binary_ce;
        rc.generator.p_single = 1.0 / 6.0;
      } else {
        throw ConfigError("unknown task '" + task + "'");
      }
    }
    if (given(h.pose)) rc.model.structure = pose_structure_from_string(pose);
    if (given(h.iters)) rc.model.iterations = iters;
    if (given(h.mode)) rc.model.mode = routing_mode_from_string(mode);
    if (given(h.no_ln)) rc.model.no_layernorm = true;
    if (given(h.seed)) {
      rc.seed = seed;
      rc.generator.seed = seed;
    }
    if (given(h.source)) rc.source_dir = source_dir;
    if (given(h.synth)) rc.synth_digits = synth_digits;
    if (given(h.p_single)) rc.generator.p_single = p_single;
    if (given(h.steps)) rc.total_steps = steps;
    if (given(h.batch)) rc.batch_size = batch;
    if (given(h.lr)) rc.optimizer.base_lr = lr;
    if (given(h.milestones)) rc.optimizer.milestones = milestones;
    if (given(h.momentum)) rc.optimizer.momentum = momentum;
    if (given(h.eval_every)) rc.eval_every = eval_every;
    if (given(h.eval_samples)) rc.eval_samples = eval_samples;
    if (given(h.train_s)) rc.train_samples = train_samples;
    if (given(h.test_s)) rc.test_samples = test_samples;
    return rc;
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and write run artifacts");
  Handles train_h = add_run_flags(train_cmd, true);
  train_cmd->add_option("--out", out_dir, "run directory (all artifacts land here)")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on generated samples");
  Handles eval_h = add_run_flags(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--n", n, "number of samples");
  eval_cmd->add_option("--split", split, "digit corpus split: train or test");

  auto* gen_cmd = app.add_subcommand("gendata", "write a cached-sample archive plus stats");
  Handles gen_h = add_run_flags(gen_cmd, false);
  gen_cmd->add_option("--archive", archive, "output archive path")->required();
  gen_cmd->add_option("--n", n, "number of samples");

  auto* synth_cmd = app.add_subcommand("synth", "write a rendered digit corpus in IDX format");
  synth_cmd->add_option("--out", out_dir, "corpus directory")->required();
  synth_cmd->add_option("--train", n_train, "training digits");
  synth_cmd->add_option("--test", n_test, "test digits");
  synth_cmd->add_option("--seed", seed, "render seed");

  auto* verify_cmd = app.add_subcommand("verify", "run the verification suites");
  verify_cmd->add_option("--suite", suite,
                         "routing, gradients, layernorm, counting, structural, dataset, faults, all");
  verify_cmd->add_option("--trials", trials, "routing-oracle instances");
  verify_cmd->add_option("--n", n, "dataset-suite sample count");
  verify_cmd->add_option("--seed", seed, "suite seed");
  verify_cmd->add_flag("--fault", fault,
                       "inject the softmax-over-children fault (the row must FAIL)");

  auto* bench_cmd = app.add_subcommand("bench", "inference cost sweep over t = 1..5");
  bench_cmd->add_option("--preset", preset, "model preset to measure");
  bench_cmd->add_option("--batch", batch, "images per timed batch");
  bench_cmd->add_option("--reps", reps, "timed repetitions (median reported)");
  bench_cmd->add_option("--seed", seed, "input generation seed");
  bench_cmd->add_option("--out", bench_out, "also write the CSV here");

  try {
    app.parse(argc, argv);
    if (train_cmd->parsed()) return cmd_train(resolve(train_h), out_dir);
    if (eval_cmd->parsed()) {
      RunConfig rc = resolve(eval_h);
      if (n > 0) rc.test_samples = n;
      if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
      bool derive_p = !given(eval_h.task) && !given(eval_h.p_single) && !given(eval_h.config);
      return cmd_eval(rc, ckpt, split, derive_p);
    }
    if (gen_cmd->parsed()) return cmd_gendata(resolve(gen_h), archive, n);
    if (synth_cmd->parsed()) return cmd_synth(out_dir, n_train, n_test, seed);
    if (verify_cmd->parsed()) {
      return cmd_verify(suite, trials, n > 0 ? n : 20000, seed, fault);
    }
    if (bench_cmd->parsed()) {
      return cmd_bench(preset.empty() ? "desk" : preset, batch > 0 ? batch : 16, reps, seed,
                       bench_out);
    }
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "run aborted: %s\n", e.what());
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
}
