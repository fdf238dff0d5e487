#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;  // stdout and stderr, interleaved
};

const std::string& bin() {
  static std::string path = [] {
    const char* p = std::getenv("CAPSNET_BIN");
    REQUIRE_MESSAGE(p != nullptr, "CAPSNET_BIN must point at the cli binary");
    return std::string(p);
  }();
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  fs::path log = fs::temp_directory_path() / ("capsnet_cli_" + std::to_string(++counter) + ".log");
  std::string cmd = "'" + bin() + "' " + args + " >'" + log.string() + "' 2>&1";
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  fs::remove(log);
  return r;
}

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Everything but the wall-clock column, which legitimately differs by run.
std::string drop_wall(const std::string& csv) {
  std::string out;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    auto pos = line.rfind(',');
    REQUIRE(pos != std::string::npos);
    out += line.substr(0, pos);
    out += '\n';
  }
  return out;
}

// Checkpoint bytes past the embedded config JSON: magic(8) + u32 length + JSON.
std::string param_bytes(const fs::path& ckpt) {
  std::string all = slurp(ckpt);
  REQUIRE(all.size() > 12);
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) {
    len |= static_cast<uint32_t>(static_cast<unsigned char>(all[8 + i])) << (8 * i);
  }
  REQUIRE(all.size() > 12 + len);
  return all.substr(12 + len);
}

double final_test_acc(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  std::istringstream row(last);
  std::string cell;
  for (int i = 0; i < 4; ++i) REQUIRE(std::getline(row, cell, ','));
  return std::stod(cell);
}

// Small-but-real run: desk model at one routing iteration over a reduced
// rendered corpus, sized so a full train invocation stays in the seconds.
std::string tiny_run_flags(uint64_t seed) {
  return "--task single-digit --iters 1 --steps 6 --batch 8 --synth-digits 200 "
         "--train-samples 64 --test-samples 32 --seed " +
         std::to_string(seed);
}

}  // namespace

TEST_CASE("usage and config errors exit 2 with a diagnostic") {
  auto dir = fresh_dir("capsnet_cli_usage");

  auto bad_iters = run_cli("train --iters 0 --out '" + (dir / "r").string() + "'");
  CHECK(bad_iters.exit_code == 2);
  CHECK(bad_iters.output.find("iterations") != std::string::npos);

  auto no_out = run_cli("train");
  CHECK(no_out.exit_code == 2);

  auto bad_n = run_cli("gendata --n 0 --archive '" + (dir / "a.bin").string() + "'");
  CHECK(bad_n.exit_code == 2);
  CHECK(bad_n.output.find("--n") != std::string::npos);

  auto bad_suite = run_cli("verify --suite nope");
  CHECK(bad_suite.exit_code == 2);
  CHECK(bad_suite.output.find("unknown suite") != std::string::npos);

  // Multiclass loss over a mixed sample stream is rejected up front.
  auto mixed = run_cli("train --task single-digit --p-single 0.5 --steps 1 --out '" +
                       (dir / "m").string() + "'");
  CHECK(mixed.exit_code == 2);
  CHECK(mixed.output.find("single-digit samples") != std::string::npos);
}

TEST_CASE("missing checkpoint exits 3") {
  auto r = run_cli("eval --checkpoint /nonexistent/model.ckpt");
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("error") != std::string::npos);
}

TEST_CASE("gendata writes a byte-identical archive per seed") {
  auto dir = fresh_dir("capsnet_cli_gendata");
  std::string common = "gendata --n 64 --synth-digits 150 --seed 21 --archive '";
  auto a = run_cli(common + (dir / "a.bin").string() + "'");
  auto b = run_cli(common + (dir / "b.bin").string() + "'");
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  CHECK(a.output.find("single fraction") != std::string::npos);
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
}

TEST_CASE("verify passes clean and fails under the injected fault") {
  auto clean = run_cli("verify --suite counting");
  CHECK(clean.exit_code == 0);
  CHECK(clean.output.find("0 failed") != std::string::npos);

  auto faulted = run_cli("verify --suite counting --fault --seed 5");
  CHECK(faulted.exit_code == 1);
  CHECK(faulted.output.find("FAIL") != std::string::npos);
  CHECK(faulted.output.find("injected softmax-over-children") != std::string::npos);
}

TEST_CASE("config echo reproduces the run minus wall time") {
  auto dir = fresh_dir("capsnet_cli_closure");
  auto a = run_cli("train " + tiny_run_flags(13) + " --out '" + (dir / "a").string() + "'");
  REQUIRE_MESSAGE(a.exit_code == 0, a.output);
  auto b = run_cli("train --config '" + (dir / "a" / "config.json").string() + "' --out '" +
                   (dir / "b").string() + "'");
  REQUIRE_MESSAGE(b.exit_code == 0, b.output);

  CHECK(drop_wall(slurp(dir / "a" / "metrics.csv")) ==
        drop_wall(slurp(dir / "b" / "metrics.csv")));
  CHECK(slurp(dir / "a" / "model.ckpt") == slurp(dir / "b" / "model.ckpt"));
}

TEST_CASE("one routing iteration: schedules produce identical runs") {
  auto dir = fresh_dir("capsnet_cli_modes");
  auto seq = run_cli("train " + tiny_run_flags(29) + " --mode sequential --out '" +
                     (dir / "seq").string() + "'");
  auto con = run_cli("train " + tiny_run_flags(29) + " --mode concurrent --out '" +
                     (dir / "con").string() + "'");
  REQUIRE_MESSAGE(seq.exit_code == 0, seq.output);
  REQUIRE_MESSAGE(con.exit_code == 0, con.output);

  CHECK(drop_wall(slurp(dir / "seq" / "metrics.csv")) ==
        drop_wall(slurp(dir / "con" / "metrics.csv")));
  // The embedded config differs by the mode string; the learned parameters
  // must not.
  CHECK(param_bytes(dir / "seq" / "model.ckpt") == param_bytes(dir / "con" / "model.ckpt"));
}

TEST_CASE("eval reproduces the final training evaluation") {
  auto dir = fresh_dir("capsnet_cli_eval");
  auto train = run_cli("train " + tiny_run_flags(13) + " --out '" + (dir / "run").string() + "'");
  REQUIRE_MESSAGE(train.exit_code == 0, train.output);
  double trained = final_test_acc(slurp(dir / "run" / "metrics.csv"));

  // The sample mix is derived from the checkpoint's task; corpus size and
  // seed must match the training invocation for the streams to coincide.
  auto eval = run_cli("eval --checkpoint '" + (dir / "run" / "model.ckpt").string() +
                      "' --n 32 --synth-digits 200 --seed 13");
  REQUIRE_MESSAGE(eval.exit_code == 0, eval.output);
  auto pos = eval.output.find("samples: ");
  REQUIRE(pos != std::string::npos);
  double evaluated = std::stod(eval.output.substr(pos + 9));
  CHECK(evaluated == doctest::Approx(trained).epsilon(1e-4));
}
