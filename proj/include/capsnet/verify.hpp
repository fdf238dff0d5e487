#pragma once

#include <string>
#include <vector>

#include "capsnet/routing.hpp"

namespace capsnet {
namespace verify {

// One checked property; `observed` must stay within `bound` to pass.
struct CheckResult {
  std::string name;
  bool pass = false;
  double observed = 0;
  double bound = 0;
};

// Independent scalar-loop reference for one routing step. Shares no code
// with the production kernels; naive loops and formulas only.
// children [G,Nc,din], parents [G,Np,dout], weights [Nc,Np,dout,din] for
// vector poses or [Nc,Np,r,r] for matrix poses; gain/bias empty = identity.
template <typename T>
std::vector<T> reference_routing_step(const std::vector<T>& children,
                                      const std::vector<T>& parents,
                                      const std::vector<T>& weights, int64_t G,
                                      int64_t Nc, int64_t Np, int64_t din,
                                      int64_t dout, PoseStructure structure,
                                      bool use_layer_norm,
                                      const std::vector<T>& gain,
                                      const std::vector<T>& bias, T eps);

// Central finite differences against tape gradients. `forward` rebuilds the
// graph from the leaves' current data on every call; it receives a tape on
// the analytic pass and nullptr on FD evaluations. Checks up to
// `samples_per_leaf` coordinates per leaf (<= 0 checks all of them).
template <typename T, typename F>
double fd_max_rel_err(F&& forward, std::vector<Tensor<T>> leaves,
                      int samples_per_leaf = 0, uint64_t seed = 0,
                      T h = T(1e-5)) {
  Tape<T> tape;
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  Tensor<T> loss = forward(&tape);
  tape.backward(loss);
  Rng rng(Rng::mix(seed, 0x5d));
  double worst = 0;
  for (auto& leaf : leaves) {
    std::vector<int64_t> coords;
    if (samples_per_leaf <= 0 || samples_per_leaf >= leaf.numel()) {
      for (int64_t i = 0; i < leaf.numel(); ++i) coords.push_back(i);
    } else {
      for (int s = 0; s < samples_per_leaf; ++s) {
        coords.push_back(rng.uniform_int(leaf.numel()));
      }
    }
    for (int64_t i : coords) {
      T analytic = leaf.grad()[i];
      T keep = leaf.data()[i];
      leaf.data()[i] = keep + h;
      T fp = forward(nullptr).item();
      leaf.data()[i] = keep - h;
      T fm = forward(nullptr).item();
      leaf.data()[i] = keep;
      double fd = (static_cast<double>(fp) - static_cast<double>(fm)) /
                  (2 * static_cast<double>(h));
      double rel = std::abs(static_cast<double>(analytic) - fd) /
                   (std::abs(static_cast<double>(analytic)) + std::abs(fd) +
                    1e-12);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Suite runners, shared by the verify command and the acceptance tests.
// Tolerances are pinned inside; results report observed vs bound.
std::vector<CheckResult> routing_oracle(int trials, uint64_t seed);
std::vector<CheckResult> gradient_checks(uint64_t seed);
std::vector<CheckResult> layernorm_stats(uint64_t seed);
std::vector<CheckResult> counting_laws();
std::vector<CheckResult> structural_checks(uint64_t seed);
std::vector<CheckResult> dataset_checks(uint64_t seed, int64_t n);
std::vector<CheckResult> fault_injection(uint64_t seed);

// Every suite above with default sizes; used by `verify` with no --suite.
std::vector<CheckResult> run_all(uint64_t seed);

}  // namespace verify
}  // namespace capsnet
