#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "capsnet/routing.hpp"
#include "capsnet/verify.hpp"

using namespace capsnet;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng) {
  auto t = Tensor<double>::zeros(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
  return t;
}

TransformWeights<double> identity_weights(int64_t nc, int64_t np, int64_t d,
                                          PoseStructure st) {
  if (st == PoseStructure::matrix) {
    int64_t r = pose_side(d);
    auto w = Tensor<double>::zeros({nc, np, r, r});
    for (int64_t i = 0; i < nc; ++i) {
      for (int64_t j = 0; j < np; ++j) {
        for (int64_t a = 0; a < r; ++a) w.data()[((i * np + j) * r + a) * r + a] = 1;
      }
    }
    return {w, st};
  }
  auto w = Tensor<double>::zeros({nc, np, d, d});
  for (int64_t i = 0; i < nc; ++i) {
    for (int64_t j = 0; j < np; ++j) {
      for (int64_t a = 0; a < d; ++a) w.data()[((i * np + j) * d + a) * d + a] = 1;
    }
  }
  return {w, st};
}

}  // namespace

TEST_CASE("pose sets: structure validation and matrix view") {
  CHECK_THROWS_AS(PoseSet<double>::zeros(1, 2, 5, PoseStructure::matrix),
                  ConfigError);
  auto ps = PoseSet<double>::zeros(1, 2, 9, PoseStructure::matrix);
  auto mv = ps.matrix_view();
  CHECK(mv.shape() == Shape{1, 2, 3, 3});
  mv.data()[0] = 4.0;  // same storage as the flat view
  CHECK(ps.poses.data()[0] == 4.0);
}

TEST_CASE("votes: identity transform copies poses") {
  Rng rng(2);
  for (PoseStructure st : {PoseStructure::vector, PoseStructure::matrix}) {
    auto children = PoseSet<double>::wrap(rand_tensor({2, 3, 4}, rng), st);
    auto w = identity_weights(3, 2, 4, st);
    auto v = compute_votes(children, w);
    CHECK(v.shape() == Shape{2, 3, 2, 4});
    for (int64_t g = 0; g < 2; ++g) {
      for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 2; ++j) {
          for (int64_t k = 0; k < 4; ++k) {
            CHECK(v.at({g, i, j, k}) == children.poses.at({g, i, k}));
          }
        }
      }
    }
  }
}

TEST_CASE("votes: permutation transform and vector arithmetic") {
  auto children = PoseSet<double>::wrap(
      Tensor<double>::from({1, 1, 2}, {1, 0}), PoseStructure::vector);
  TransformWeights<double> w{Tensor<double>::from({1, 1, 2, 2}, {0, 1, 1, 0}),
                             PoseStructure::vector};
  auto v = compute_votes(children, w);
  CHECK(v.at({0, 0, 0, 0}) == 0);
  CHECK(v.at({0, 0, 0, 1}) == 1);
}

TEST_CASE("votes: random instance matches direct loop arithmetic") {
  Rng rng(5);
  int64_t nc = 3, np = 2, d = 4;
  auto children = rand_tensor({1, nc, d}, rng);
  auto w = rand_tensor({nc, np, d, d}, rng);
  auto v = compute_votes(PoseSet<double>::wrap(children, PoseStructure::vector),
                         {w, PoseStructure::vector});
  for (int64_t i = 0; i < nc; ++i) {
    for (int64_t j = 0; j < np; ++j) {
      for (int64_t o = 0; o < d; ++o) {
        double acc = 0;
        for (int64_t in = 0; in < d; ++in) {
          acc += w.at({i, j, o, in}) * children.at({0, i, in});
        }
        CHECK(v.at({0, i, j, o}) == doctest::Approx(acc).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("votes: matrix structure rejects unequal pose dims") {
  Rng rng(1);
  CHECK_THROWS_AS(TransformWeights<double>::init(2, 2, 4, 9,
                                                 PoseStructure::matrix, rng),
                  ConfigError);
  // structure mismatch between children and weights
  auto children = PoseSet<double>::wrap(rand_tensor({1, 2, 4}, rng),
                                        PoseStructure::vector);
  auto w = TransformWeights<double>::init(2, 2, 4, 4, PoseStructure::matrix, rng);
  CHECK_THROWS_AS(compute_votes(children, w), ConfigError);
}

TEST_CASE("agreements: zero parents, self-agreement, loop oracle") {
  Rng rng(7);
  auto votes = rand_tensor({1, 3, 2, 4}, rng);
  auto zero = PoseSet<double>::zeros(1, 2, 4, PoseStructure::vector);
  auto a0 = compute_agreements(votes, zero);
  for (int64_t i = 0; i < a0.numel(); ++i) CHECK(a0.data()[i] == 0.0);

  // parents equal to one child's votes: agreement is the squared norm
  auto parents = Tensor<double>::zeros({1, 2, 4});
  for (int64_t j = 0; j < 2; ++j) {
    for (int64_t k = 0; k < 4; ++k) parents.data()[j * 4 + k] = votes.at({0, 1, j, k});
  }
  auto a = compute_agreements(
      votes, PoseSet<double>::wrap(parents, PoseStructure::vector));
  for (int64_t j = 0; j < 2; ++j) {
    double n2 = 0;
    for (int64_t k = 0; k < 4; ++k) n2 += votes.at({0, 1, j, k}) * votes.at({0, 1, j, k});
    CHECK(a.at({0, 1, j}) == doctest::Approx(n2).epsilon(1e-13));
  }

  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (int64_t k = 0; k < 4; ++k) acc += votes.at({0, i, j, k}) * parents.data()[j * 4 + k];
      CHECK(a.at({0, i, j}) == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("coefficients: uniform at zero, exact arithmetic, shift invariance") {
  auto r0 = routing_coefficients(Tensor<double>::zeros({1, 3, 2}));
  for (int64_t i = 0; i < r0.numel(); ++i) {
    CHECK(std::abs(r0.data()[i] - 0.5) <= 1e-7);
  }

  auto a = Tensor<double>::from({1, 1, 2}, {std::log(1.0), std::log(3.0)});
  auto r = routing_coefficients(a);
  CHECK(r.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(9);
  auto agree = rand_tensor({1, 4, 3}, rng);
  auto base = routing_coefficients(agree);
  double c = rng.uniform(-5, 5);
  auto shifted = agree.clone();
  for (int64_t j = 0; j < 3; ++j) shifted.data()[2 * 3 + j] += c;  // child row 2
  auto after = routing_coefficients(shifted);
  for (int64_t i = 0; i < base.numel(); ++i) {
    CHECK(after.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("coefficients: rows over parents are stochastic") {
  Rng rng(33);
  auto agree = rand_tensor({2, 5, 4}, rng);
  auto r = routing_coefficients(agree);
  for (int64_t g = 0; g < 2; ++g) {
    for (int64_t i = 0; i < 5; ++i) {
      double s = 0;
      for (int64_t j = 0; j < 4; ++j) {
        double rij = r.at({g, i, j});
        CHECK(rij > 0.0);
        CHECK(rij < 1.0);
        s += rij;
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("update_poses: single route equals layer-normed vote") {
  Rng rng(12);
  auto votes = rand_tensor({1, 1, 1, 4}, rng);
  auto coeff = Tensor<double>::full({1, 1, 1}, 1.0);
  RoutingKnobs<double> knobs;
  auto p = update_poses(coeff, votes, knobs, PoseStructure::vector);
  auto want = layer_norm(votes.reshape({1, 1, 4}), 2, kLayerNormEps,
                         Tensor<double>{}, Tensor<double>{});
  for (int64_t k = 0; k < 4; ++k) {
    CHECK(p.poses.at({0, 0, k}) == doctest::Approx(want.at({0, 0, k})).epsilon(1e-13));
  }
}

TEST_CASE("update_poses: zero-variance hand case collapses to zero") {
  // 2 children, 2 parents, d=2, identity transforms, unit basis poses,
  // parents at zero: each parent pre-norm pose is [0.5, 0.5].
  auto children = PoseSet<double>::wrap(
      Tensor<double>::from({1, 2, 2}, {1, 0, 0, 1}), PoseStructure::vector);
  auto w = identity_weights(2, 2, 2, PoseStructure::vector);
  auto zero = PoseSet<double>::zeros(1, 2, 2, PoseStructure::vector);
  RoutingState<double> state;
  RoutingKnobs<double> knobs;
  auto next = routing_step<double>(children, zero, w, knobs, nullptr, &state);

  auto pre = capsule_weighted_sum(state.coefficients, state.votes);
  for (int64_t j = 0; j < 2; ++j) {
    for (int64_t k = 0; k < 2; ++k) {
      CHECK(pre.at({0, j, k}) == doctest::Approx(0.5).epsilon(1e-12));
    }
  }
  for (int64_t i = 0; i < next.poses.numel(); ++i) {
    CHECK(std::abs(next.poses.data()[i]) <= 1e-6);
  }
}

TEST_CASE("update_poses without layer norm keeps the raw weighted sum") {
  Rng rng(21);
  auto votes = rand_tensor({1, 3, 2, 4}, rng);
  auto coeff = routing_coefficients(rand_tensor({1, 3, 2}, rng));
  RoutingKnobs<double> knobs;
  knobs.use_layer_norm = false;
  auto p = update_poses(coeff, votes, knobs, PoseStructure::vector);
  auto want = capsule_weighted_sum(coeff, votes);
  for (int64_t i = 0; i < want.numel(); ++i) {
    CHECK(p.poses.data()[i] == want.data()[i]);
  }
}

TEST_CASE("routing_step: zero parents give per-child uniform aggregation") {
  Rng rng(14);
  int64_t nc = 4, np = 3, d = 4;
  auto children = PoseSet<double>::wrap(rand_tensor({1, nc, d}, rng),
                                        PoseStructure::vector);
  auto w = TransformWeights<double>::init(nc, np, d, d, PoseStructure::vector, rng);
  RoutingKnobs<double> knobs;
  RoutingState<double> state;
  auto next = routing_step<double>(children, PoseSet<double>::zeros(1, np, d, PoseStructure::vector),
                           w, knobs, nullptr, &state);
  for (int64_t i = 0; i < state.coefficients.numel(); ++i) {
    CHECK(std::abs(state.coefficients.data()[i] - 1.0 / double(np)) <= 1e-7);
  }
  // aggregation = sum_i (1/np) v_ij, then LayerNorm
  auto votes = state.votes;
  for (int64_t j = 0; j < np; ++j) {
    std::vector<double> s(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < nc; ++i) {
      for (int64_t k = 0; k < d; ++k) s[static_cast<size_t>(k)] += votes.at({0, i, j, k}) / double(np);
    }
    double mean = 0, var = 0;
    for (double x : s) mean += x;
    mean /= double(d);
    for (double x : s) var += (x - mean) * (x - mean);
    var /= double(d);
    for (int64_t k = 0; k < d; ++k) {
      double want = (s[static_cast<size_t>(k)] - mean) / std::sqrt(var + kLayerNormEps);
      CHECK(next.poses.at({0, j, k}) == doctest::Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("routing_step: child permutation equivariance") {
  Rng rng(15);
  int64_t nc = 4, np = 3, d = 9;
  for (PoseStructure st : {PoseStructure::vector, PoseStructure::matrix}) {
    auto children = rand_tensor({1, nc, d}, rng);
    auto w = TransformWeights<double>::init(nc, np, d, d, st, rng);
    auto parents = PoseSet<double>::wrap(rand_tensor({1, np, d}, rng), st);
    RoutingKnobs<double> knobs;
    auto base = routing_step(PoseSet<double>::wrap(children, st), parents, w, knobs);

    std::vector<int64_t> perm{2, 0, 3, 1};
    auto children_p = Tensor<double>::zeros({1, nc, d});
    auto w_p = Tensor<double>::zeros(w.w.shape());
    int64_t wrow = w.w.numel() / nc;
    for (int64_t i = 0; i < nc; ++i) {
      int64_t src = perm[static_cast<size_t>(i)];
      std::copy(children.data() + src * d, children.data() + (src + 1) * d,
                children_p.data() + i * d);
      std::copy(w.w.data() + src * wrow, w.w.data() + (src + 1) * wrow,
                w_p.data() + i * wrow);
    }
    auto permuted = routing_step(PoseSet<double>::wrap(children_p, st), parents,
                                 {w_p, st}, knobs);
    for (int64_t i = 0; i < base.poses.numel(); ++i) {
      CHECK(std::abs(base.poses.data()[i] - permuted.poses.data()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("routing_step: parent permutation permutes outputs identically") {
  Rng rng(16);
  int64_t nc = 3, np = 4, d = 4;
  auto children = PoseSet<double>::wrap(rand_tensor({1, nc, d}, rng),
                                        PoseStructure::vector);
  auto w = TransformWeights<double>::init(nc, np, d, d, PoseStructure::vector, rng);
  auto parents = rand_tensor({1, np, d}, rng);
  RoutingKnobs<double> knobs;
  auto base = routing_step(children,
                           PoseSet<double>::wrap(parents, PoseStructure::vector),
                           w, knobs);

  std::vector<int64_t> perm{3, 1, 0, 2};
  auto parents_p = Tensor<double>::zeros({1, np, d});
  auto w_p = Tensor<double>::zeros(w.w.shape());
  for (int64_t j = 0; j < np; ++j) {
    int64_t src = perm[static_cast<size_t>(j)];
    std::copy(parents.data() + src * d, parents.data() + (src + 1) * d,
              parents_p.data() + j * d);
    for (int64_t i = 0; i < nc; ++i) {
      std::copy(w.w.data() + (i * np + src) * d * d,
                w.w.data() + (i * np + src + 1) * d * d,
                w_p.data() + (i * np + j) * d * d);
    }
  }
  auto permuted = routing_step(
      children, PoseSet<double>::wrap(parents_p, PoseStructure::vector),
      {w_p, PoseStructure::vector}, knobs);
  for (int64_t j = 0; j < np; ++j) {
    for (int64_t k = 0; k < d; ++k) {
      CHECK(std::abs(permuted.poses.at({0, j, k}) -
                     base.poses.at({0, perm[static_cast<size_t>(j)], k})) <= 1e-12);
    }
  }
}

TEST_CASE("routing_step: scalar-loop oracle over random instances") {
  auto results = verify::routing_oracle(120, 99);
  REQUIRE(results.size() == 1);
  INFO(results[0].name, " observed=", results[0].observed);
  CHECK(results[0].pass);
}

TEST_CASE("routing gradients: finite differences through stacked steps") {
  for (auto& r : verify::gradient_checks(7)) {
    INFO(r.name, " observed=", r.observed);
    CHECK(r.pass);
  }
}

TEST_CASE("fault injection breaks row-stochasticity") {
  for (auto& r : verify::fault_injection(3)) {
    INFO(r.name, " observed=", r.observed);
    CHECK(r.pass);
  }
}

TEST_CASE("transform weight counts follow the vector/matrix law") {
  Rng rng(8);
  auto wv = TransformWeights<double>::init(5, 7, 16, 16, PoseStructure::vector, rng);
  CHECK(wv.count() == 5 * 7 * 16 * 16);
  auto wm = TransformWeights<double>::init(5, 7, 16, 16, PoseStructure::matrix, rng);
  CHECK(wm.count() == 5 * 7 * 16);
}

TEST_CASE("dynamic routing baseline: squash behavior and identity case") {
  auto z = squash(Tensor<double>::zeros({1, 4}));
  for (int64_t i = 0; i < 4; ++i) CHECK(z.data()[i] == 0.0);

  Rng rng(25);
  auto s = rand_tensor({1, 4}, rng);
  double n2 = 0;
  for (int64_t i = 0; i < 4; ++i) n2 += s.data()[i] * s.data()[i];
  double want_scale = 100.0 / std::sqrt(n2);
  for (int64_t i = 0; i < 4; ++i) s.data()[i] *= want_scale;  // norm 100
  auto big = squash(s);
  double out_norm = 0;
  for (int64_t i = 0; i < 4; ++i) out_norm += big.data()[i] * big.data()[i];
  out_norm = std::sqrt(out_norm);
  CHECK(out_norm < 1.0);
  CHECK(out_norm >= 0.99);

  // one child, one parent, identity transform: parent = squash(pose)
  auto child = rand_tensor({1, 1, 4}, rng);
  auto w = identity_weights(1, 1, 4, PoseStructure::vector);
  auto res = dynamic_routing_step(
      PoseSet<double>::wrap(child, PoseStructure::vector),
      Tensor<double>::zeros({1, 1, 1}), w);
  auto want = squash(child);
  for (int64_t k = 0; k < 4; ++k) {
    CHECK(res.parents.poses.at({0, 0, k}) ==
          doctest::Approx(want.at({0, 0, k})).epsilon(1e-13));
  }
  // logits gain the agreement with the fresh parent
  double agree = 0;
  for (int64_t k = 0; k < 4; ++k) {
    agree += child.at({0, 0, k}) * want.at({0, 0, k});
  }
  CHECK(res.logits_next.item() == doctest::Approx(agree).epsilon(1e-12));

  Rng r2(26);
  auto wm = TransformWeights<double>::init(1, 1, 4, 4, PoseStructure::matrix, r2);
  CHECK_THROWS_AS(dynamic_routing_step(
                      PoseSet<double>::wrap(child, PoseStructure::matrix),
                      Tensor<double>::zeros({1, 1, 1}), wm),
                  ConfigError);
}
