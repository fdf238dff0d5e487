#include "capsnet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "capsnet/data.hpp"
#include "capsnet/model.hpp"

namespace capsnet {
namespace verify {

template <typename T>
std::vector<T> reference_routing_step(const std::vector<T>& children,
                                      const std::vector<T>& parents,
                                      const std::vector<T>& weights, int64_t G,
                                      int64_t Nc, int64_t Np, int64_t din,
                                      int64_t dout, PoseStructure structure,
                                      bool use_layer_norm,
                                      const std::vector<T>& gain,
                                      const std::vector<T>& bias, T eps) {
  int64_t r = 0;
  if (structure == PoseStructure::matrix) {
    r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(din))));
  }
  std::vector<T> votes(static_cast<size_t>(G * Nc * Np * dout), T(0));
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t i = 0; i < Nc; ++i) {
      for (int64_t j = 0; j < Np; ++j) {
        const T* child = children.data() + (g * Nc + i) * din;
        T* v = votes.data() + ((g * Nc + i) * Np + j) * dout;
        if (structure == PoseStructure::matrix) {
          const T* w = weights.data() + (i * Np + j) * r * r;
          for (int64_t a = 0; a < r; ++a) {
            for (int64_t b = 0; b < r; ++b) {
              T acc = 0;
              for (int64_t c = 0; c < r; ++c) {
                acc += w[a * r + c] * child[c * r + b];
              }
              v[a * r + b] = acc;
            }
          }
        } else {
          const T* w = weights.data() + (i * Np + j) * dout * din;
          for (int64_t o = 0; o < dout; ++o) {
            T acc = 0;
            for (int64_t in = 0; in < din; ++in) {
              acc += w[o * din + in] * child[in];
            }
            v[o] = acc;
          }
        }
      }
    }
  }

  std::vector<T> agree(static_cast<size_t>(G * Nc * Np), T(0));
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t i = 0; i < Nc; ++i) {
      for (int64_t j = 0; j < Np; ++j) {
        T acc = 0;
        for (int64_t k = 0; k < dout; ++k) {
          acc += votes[static_cast<size_t>(((g * Nc + i) * Np + j) * dout + k)] *
                 parents[static_cast<size_t>((g * Np + j) * dout + k)];
        }
        agree[static_cast<size_t>((g * Nc + i) * Np + j)] = acc;
      }
    }
  }

  std::vector<T> coeff(static_cast<size_t>(G * Nc * Np), T(0));
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t i = 0; i < Nc; ++i) {
      const T* row = agree.data() + (g * Nc + i) * Np;
      T mx = row[0];
      for (int64_t j = 1; j < Np; ++j) mx = std::max(mx, row[j]);
      T z = 0;
      for (int64_t j = 0; j < Np; ++j) z += std::exp(row[j] - mx);
      for (int64_t j = 0; j < Np; ++j) {
        coeff[static_cast<size_t>((g * Nc + i) * Np + j)] =
            std::exp(row[j] - mx) / z;
      }
    }
  }

  std::vector<T> out(static_cast<size_t>(G * Np * dout), T(0));
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t j = 0; j < Np; ++j) {
      T* pose = out.data() + (g * Np + j) * dout;
      for (int64_t i = 0; i < Nc; ++i) {
        T rij = coeff[static_cast<size_t>((g * Nc + i) * Np + j)];
        for (int64_t k = 0; k < dout; ++k) {
          pose[k] +=
              rij * votes[static_cast<size_t>(((g * Nc + i) * Np + j) * dout + k)];
        }
      }
      if (use_layer_norm) {
        T mean = 0;
        for (int64_t k = 0; k < dout; ++k) mean += pose[k];
        mean /= T(dout);
        T var = 0;
        for (int64_t k = 0; k < dout; ++k) {
          var += (pose[k] - mean) * (pose[k] - mean);
        }
        var /= T(dout);
        T inv = T(1) / std::sqrt(var + eps);
        for (int64_t k = 0; k < dout; ++k) {
          T xh = (pose[k] - mean) * inv;
          pose[k] = (gain.empty() ? T(1) : gain[static_cast<size_t>(k)]) * xh +
                    (bias.empty() ? T(0) : bias[static_cast<size_t>(k)]);
        }
      }
    }
  }
  return out;
}

template std::vector<float> reference_routing_step(
    const std::vector<float>&, const std::vector<float>&,
    const std::vector<float>&, int64_t, int64_t, int64_t, int64_t, int64_t,
    PoseStructure, bool, const std::vector<float>&, const std::vector<float>&,
    float);
template std::vector<double> reference_routing_step(
    const std::vector<double>&, const std::vector<double>&,
    const std::vector<double>&, int64_t, int64_t, int64_t, int64_t, int64_t,
    PoseStructure, bool, const std::vector<double>&, const std::vector<double>&,
    double);

namespace {

std::vector<double> random_vec(int64_t n, Rng& rng, double scl = 1.0) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal() * scl;
  return v;
}

Tensor<double> as_tensor(Shape shape, const std::vector<double>& v) {
  return Tensor<double>(std::move(shape), v);
}

}  // namespace

std::vector<CheckResult> routing_oracle(int trials, uint64_t seed) {
  const double bound = 1e-9;
  const int64_t dims[] = {4, 9, 16};
  double worst = 0;
  Rng rng(Rng::mix(seed, 0x70));
  for (int t = 0; t < trials; ++t) {
    int64_t nc = 1 + rng.uniform_int(8);
    int64_t np = 1 + rng.uniform_int(8);
    int64_t d = dims[rng.uniform_int(3)];
    int64_t g = 1 + rng.uniform_int(3);
    PoseStructure st =
        t % 2 == 0 ? PoseStructure::vector : PoseStructure::matrix;
    int64_t r = static_cast<int64_t>(std::llround(std::sqrt(double(d))));
    int64_t wsz = st == PoseStructure::matrix ? nc * np * r * r : nc * np * d * d;

    auto children = random_vec(g * nc * d, rng);
    auto parents = random_vec(g * np * d, rng);
    auto weights = random_vec(wsz, rng);
    auto gain = random_vec(d, rng, 0.5);
    auto bias = random_vec(d, rng, 0.5);

    auto want = reference_routing_step(children, parents, weights, g, nc, np,
                                       d, d, st, true, gain, bias,
                                       kLayerNormEps);

    auto cs = PoseSet<double>::wrap(as_tensor({g, nc, d}, children), st);
    auto ps = PoseSet<double>::wrap(as_tensor({g, np, d}, parents), st);
    TransformWeights<double> tw{
        as_tensor(st == PoseStructure::matrix ? Shape{nc, np, r, r}
                                              : Shape{nc, np, d, d},
                  weights),
        st};
    RoutingKnobs<double> knobs;
    knobs.ln_gain = as_tensor({d}, gain);
    knobs.ln_bias = as_tensor({d}, bias);
    auto got = routing_step(cs, ps, tw, knobs);

    for (int64_t i = 0; i < got.poses.numel(); ++i) {
      worst = std::max(
          worst, std::abs(got.poses.data()[i] - want[static_cast<size_t>(i)]));
    }
  }
  return {{"routing step matches scalar reference (" +
               std::to_string(trials) + " instances, max abs dev)",
           worst <= bound, worst, bound}};
}

std::vector<CheckResult> gradient_checks(uint64_t seed) {
  const double bound = 1e-6;
  std::vector<CheckResult> out;
  Rng rng(Rng::mix(seed, 0x9d));
  auto rand_t = [&](Shape s) {
    auto t = Tensor<double>::zeros(s);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
    return t;
  };
  auto push = [&](const std::string& name, double err) {
    out.push_back({"gradient vs finite differences: " + name, err <= bound,
                   err, bound});
  };

  {
    auto a = rand_t({3, 4}), b = rand_t({4, 3});
    push("matmul", fd_max_rel_err<double>(
                       [&](Tape<double>* tp) {
                         auto y = matmul(a, b, tp);
                         return sum(mul(y, y, tp), tp);
                       },
                       {a, b}));
  }
  {
    auto x = rand_t({2, 6, 6}), k = rand_t({3, 2, 3, 3}), b = rand_t({3});
    push("conv2d", fd_max_rel_err<double>(
                       [&](Tape<double>* tp) {
                         auto y = conv2d(x, k, b, 2, 1, tp);
                         return sum(mul(y, y, tp), tp);
                       },
                       {x, k, b}));
  }
  {
    auto x = rand_t({4, 5}), w = rand_t({4, 5});
    push("softmax", fd_max_rel_err<double>(
                        [&](Tape<double>* tp) {
                          return sum(mul(softmax(x, 1, tp), w, tp), tp);
                        },
                        {x}));
  }
  {
    auto x = rand_t({3, 16}), g = rand_t({16}), b = rand_t({16}),
         w = rand_t({3, 16});
    push("layer_norm",
         fd_max_rel_err<double>(
             [&](Tape<double>* tp) {
               auto y = layer_norm(x, 1, kLayerNormEps, g, b, tp);
               return sum(mul(y, w, tp), tp);
             },
             {x, g, b}));
  }
  {
    auto l = rand_t({10});
    push("multiclass_ce",
         fd_max_rel_err<double>(
             [&](Tape<double>* tp) { return multiclass_ce(l, 3, tp); }, {l}));
  }
  {
    auto l = rand_t({6});
    auto y = Tensor<double>::from({6}, {1, 0, 1, 0, 0, 1});
    push("binary_ce",
         fd_max_rel_err<double>(
             [&](Tape<double>* tp) { return binary_ce(l, y, tp); }, {l}));
  }
  {
    // two stacked routing steps, both pose structures
    for (PoseStructure st : {PoseStructure::vector, PoseStructure::matrix}) {
      int64_t nc = 3, nm = 2, np = 2, d = 4;
      Rng wrng(Rng::mix(seed, st == PoseStructure::vector ? 1 : 2));
      auto w1 = TransformWeights<double>::init(nc, nm, d, d, st, wrng);
      auto w2 = TransformWeights<double>::init(nm, np, d, d, st, wrng);
      auto children = rand_t({1, nc, d});
      auto g1 = rand_t({d}), b1 = rand_t({d});
      auto g2 = rand_t({d}), b2 = rand_t({d});
      auto readout = rand_t({1, np, d});
      double err = fd_max_rel_err<double>(
          [&](Tape<double>* tp) {
            RoutingKnobs<double> k1{g1, b1, true, RoutingFault::none};
            RoutingKnobs<double> k2{g2, b2, true, RoutingFault::none};
            auto cs = PoseSet<double>::wrap(children, st);
            auto mid = routing_step(
                cs, PoseSet<double>::zeros(1, nm, d, st), w1, k1, tp);
            auto top = routing_step(
                mid, PoseSet<double>::zeros(1, np, d, st), w2, k2, tp);
            return sum(mul(top.poses, readout, tp), tp);
          },
          {children, w1.w, w2.w, g1, b1, g2, b2});
      push(std::string("stacked routing steps, ") + to_string(st) + " poses",
           err);
    }
  }
  {
    // End-to-end composition through the whole network; the looser bound is
    // for accumulated FD truncation across the deep graph.
    const double model_bound = 1e-4;
    auto cfg = ModelConfig::preset_by_name("tiny-fd");
    auto net = CapsNet<double>::init(cfg, seed ^ 0x77);
    auto x = Tensor<double>::zeros({cfg.input_channels, cfg.input_hw, cfg.input_hw});
    Rng xr(Rng::mix(seed, 0xe1));
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = xr.uniform();

    auto target = Tensor<double>::from({4}, {1, 0, 0, 1});
    std::vector<Tensor<double>> leaves{x};
    for (auto& p : net.parameters()) leaves.push_back(p.tensor);
    double err = fd_max_rel_err<double>(
        [&](Tape<double>* tp) {
          return binary_ce(net.inference(x, tp), target, tp);
        },
        leaves, 6, seed, 1e-4);
    out.push_back({"gradient vs finite differences: full model, multilabel loss",
                   err <= model_bound, err, model_bound});

    // The softmax loss is invariant to the shared classifier bias, so that
    // gradient is identically zero; the relative metric cannot grade a
    // one-ulp analytic residue against an exact-zero FD, so the bias leaf
    // is excluded here (the multilabel row above covers it).
    std::vector<Tensor<double>> no_bias{x};
    for (auto& p : net.parameters()) {
      if (p.name != "classifier.b") no_bias.push_back(p.tensor);
    }
    double err_mc = fd_max_rel_err<double>(
        [&](Tape<double>* tp) {
          return multiclass_ce(net.inference(x, tp), 1, tp);
        },
        no_bias, 6, seed, 1e-4);
    out.push_back({"gradient vs finite differences: full model, multiclass loss",
                   err_mc <= model_bound, err_mc, model_bound});
  }
  return out;
}

std::vector<CheckResult> layernorm_stats(uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x11));
  double worst_mean = 0, worst_var = 0;
  for (int t = 0; t < 50; ++t) {
    int64_t rows = 1 + rng.uniform_int(6);
    int64_t d = 2 + rng.uniform_int(63);
    auto x = Tensor<double>::zeros({rows, d});
    for (int64_t i = 0; i < x.numel(); ++i) {
      x.data()[i] = rng.normal() * rng.uniform(0.5, 3.0);
    }
    auto y = layer_norm(x, 1, kLayerNormEps, {}, {});
    for (int64_t rw = 0; rw < rows; ++rw) {
      double mean = 0, var = 0;
      for (int64_t k = 0; k < d; ++k) mean += y.at({rw, k});
      mean /= double(d);
      for (int64_t k = 0; k < d; ++k) {
        var += (y.at({rw, k}) - mean) * (y.at({rw, k}) - mean);
      }
      var /= double(d);
      worst_mean = std::max(worst_mean, std::abs(mean));
      worst_var = std::max(worst_var, std::abs(var - 1.0));
    }
  }
  // zero-variance slices must stay finite and collapse to the bias (0 here)
  auto flat = layer_norm(Tensor<double>::full({1, 8}, 3.25), 1,
                         kLayerNormEps, {}, {});
  double flat_dev = 0;
  for (int64_t i = 0; i < 8; ++i) {
    flat_dev = std::max(flat_dev, std::abs(flat.data()[i]));
  }
  return {
      {"layer_norm slice mean", worst_mean <= 1e-6, worst_mean, 1e-6},
      {"layer_norm slice variance vs 1", worst_var <= 1e-4, worst_var, 1e-4},
      {"layer_norm zero-variance slice collapses to bias", flat_dev <= 1e-6,
       flat_dev, 1e-6},
  };
}

std::vector<CheckResult> fault_injection(uint64_t seed) {
  // Negative control: normalizing over children must break the per-child
  // row sums; a healthy build keeps them at 1.
  Rng rng(Rng::mix(seed, 0x4f));
  int64_t g = 2, nc = 5, np = 3;
  auto agree = Tensor<double>::zeros({g, nc, np});
  for (int64_t i = 0; i < agree.numel(); ++i) agree.data()[i] = rng.normal();

  auto row_dev = [&](const Tensor<double>& coeff) {
    double worst = 0;
    for (int64_t gi = 0; gi < g; ++gi) {
      for (int64_t i = 0; i < nc; ++i) {
        double s = 0;
        for (int64_t j = 0; j < np; ++j) s += coeff.at({gi, i, j});
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    return worst;
  };

  double healthy = row_dev(routing_coefficients(agree));
  double faulted =
      row_dev(routing_coefficients(agree, RoutingFault::softmax_over_children));
  return {
      {"row-stochasticity holds without fault", healthy <= 1e-6, healthy, 1e-6},
      {"softmax-over-children fault breaks row sums (dev must exceed bound)",
       faulted > 1e-3, faulted, 1e-3},
  };
}

std::vector<CheckResult> counting_laws() {
  std::vector<CheckResult> out;
  auto exact = [&](const std::string& name, int64_t got, int64_t want) {
    double dev = std::abs(static_cast<double>(got - want));
    out.push_back({name + " (" + std::to_string(got) + " vs " +
                       std::to_string(want) + ")",
                   got == want, dev, 0});
  };

  // Hand-counted pair cases: one child, one parent.
  FCCapsuleSpec pv{1, 1, 2, PoseStructure::vector};
  exact("fc pair, vector d=2: d^2 transform scalars", pv.parameter_count(), 4);
  FCCapsuleSpec pm{1, 1, 4, PoseStructure::matrix};
  exact("fc pair, matrix d=4: d transform scalars", pm.parameter_count(), 4);

  // Hand-built ledgers for the two full-size presets.
  exact("wide-matrix model total",
        ModelConfig::preset_by_name("wide-matrix").parameter_count(),
        9983425);
  exact("wide-vector model total",
        ModelConfig::preset_by_name("wide-vector").parameter_count(),
        42497473);

  // The formula must equal the allocated scalars, counted tensor by tensor.
  for (const char* name : {"tiny-fd", "desk"}) {
    auto cfg = ModelConfig::preset_by_name(name);
    auto net = CapsNet<float>::init(cfg, 1);
    int64_t allocated = 0;
    for (auto& p : net.parameters()) allocated += p.tensor.numel();
    exact(std::string(name) + " formula vs allocated scalars",
          cfg.parameter_count(), allocated);
  }
  return out;
}

std::vector<CheckResult> structural_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  auto cfg = ModelConfig::preset_by_name("tiny-fd");
  Rng rng(Rng::mix(seed, 0x31));

  auto random_input = [&] {
    auto x = Tensor<float>::zeros({cfg.input_channels, cfg.input_hw, cfg.input_hw});
    for (int64_t i = 0; i < x.numel(); ++i) {
      x.data()[i] = static_cast<float>(rng.uniform());
    }
    return x;
  };

  {
    // One iteration leaves nothing to overlap, so the two schedules must
    // run the identical code path.
    auto c1 = cfg;
    c1.iterations = 1;
    c1.mode = RoutingMode::concurrent;
    auto c2 = c1;
    c2.mode = RoutingMode::sequential;
    auto x = random_input();
    auto la = CapsNet<float>::init(c1, seed).inference(x);
    auto lb = CapsNet<float>::init(c2, seed).inference(x);
    double dev = 0;
    for (int64_t i = 0; i < la.numel(); ++i) {
      dev = std::max(dev, std::abs(double(la.data()[i]) - double(lb.data()[i])));
    }
    bool bitwise = std::memcmp(la.data(), lb.data(),
                               sizeof(float) * la.numel()) == 0;
    out.push_back({"t=1: concurrent and sequential logits bitwise equal",
                   bitwise, dev, 0});
  }

  {
    // Concurrent iterations k >= 2 must read the previous iteration's
    // committed state, never a half-updated buffer.
    auto c4 = cfg;
    c4.iterations = 4;
    c4.mode = RoutingMode::concurrent;
    auto net = CapsNet<float>::init(c4, seed);
    InferenceTrace trace;
    net.inference(random_input(), nullptr, &trace);
    int64_t stale = 0, total = 0;
    for (const auto& rd : trace.reads) {
      if (rd.iteration < 2) continue;
      const auto& snap = trace.committed[static_cast<size_t>(rd.iteration - 1)];
      ++total;
      if (rd.children != snap[static_cast<size_t>(rd.layer)] ||
          rd.parents != snap[static_cast<size_t>(rd.layer + 1)]) {
        ++stale;
      }
    }
    out.push_back({"t=4 concurrent: all " + std::to_string(total) +
                       " layer reads come from the previous committed state",
                   total > 0 && stale == 0, static_cast<double>(stale), 0});
  }

  {
    // Zero-initialized parents give zero agreements, so the first sweep's
    // coefficients must be exactly uniform over parents.
    int64_t g = 2, nc = 6, np = 4, d = 9;
    auto children = Tensor<double>::zeros({g, nc, d});
    for (int64_t i = 0; i < children.numel(); ++i) children.data()[i] = rng.normal();
    Rng wrng(Rng::mix(seed, 0x32));
    auto w = TransformWeights<double>::init(nc, np, d, d, PoseStructure::matrix, wrng);
    RoutingKnobs<double> knobs;
    RoutingState<double> state;
    routing_step<double>(PoseSet<double>::wrap(children, PoseStructure::matrix),
                 PoseSet<double>::zeros(g, np, d, PoseStructure::matrix), w,
                 knobs, nullptr, &state);
    double dev = 0;
    for (int64_t i = 0; i < state.coefficients.numel(); ++i) {
      dev = std::max(dev, std::abs(state.coefficients.data()[i] - 1.0 / np));
    }
    out.push_back({"zero-init parents: first-sweep coefficients uniform 1/Np",
                   dev <= 1e-7, dev, 1e-7});
  }
  return out;
}

std::vector<CheckResult> dataset_checks(uint64_t seed, int64_t n) {
  // Self-contained digit source so the suite needs no files on disk.
  MnistDataset digits = synth_digit_corpus(200, seed, "train");

  GeneratorConfig gc;
  gc.seed = seed;
  auto report = dataset_stats(
      [&](int64_t i) { return generate_sample(gc, i, digits); }, n, gc.canvas);

  double frac_dev = std::abs(report.single_fraction - 1.0 / 6.0);
  std::vector<CheckResult> out{
      {"single-digit fraction within 0.01 of 1/6 over " + std::to_string(n) +
           " samples",
       frac_dev <= 0.01, frac_dev, 0.01},
      {"overlap samples never repeat a class",
       report.distinct_violations == 0,
       static_cast<double>(report.distinct_violations), 0},
      {"every sample is a 36x36 image with values in [0,1]",
       report.shape_violations + report.range_violations == 0,
       static_cast<double>(report.shape_violations + report.range_violations),
       0},
  };

  int64_t mismatches = 0;
  for (int64_t i = 0; i < std::min<int64_t>(n, 64); ++i) {
    auto a = generate_sample(gc, i, digits);
    auto b = generate_sample(gc, i, digits);
    if (a.labels != b.labels ||
        std::memcmp(a.image.data(), b.image.data(),
                    sizeof(float) * a.image.numel()) != 0) {
      ++mismatches;
    }
  }
  out.push_back({"regenerating a sample index is bitwise identical",
                 mismatches == 0, static_cast<double>(mismatches), 0});
  return out;
}

std::vector<CheckResult> run_all(uint64_t seed) {
  std::vector<CheckResult> all;
  auto take = [&all](std::vector<CheckResult> part) {
    all.insert(all.end(), part.begin(), part.end());
  };
  take(routing_oracle(100, seed));
  take(gradient_checks(seed));
  take(layernorm_stats(seed));
  take(counting_laws());
  take(structural_checks(seed));
  take(dataset_checks(seed, 20000));
  take(fault_injection(seed));
  return all;
}

}  // namespace verify
}  // namespace capsnet
