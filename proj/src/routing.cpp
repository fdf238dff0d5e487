#include "capsnet/routing.hpp"

#include <cmath>
#include <string>

namespace capsnet {

int64_t pose_side(int64_t d) {
  auto r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(d))));
  if (r * r != d) {
    throw ConfigError("matrix poses need a square dimension, got " +
                      std::to_string(d));
  }
  return r;
}

template <typename T>
PoseSet<T> PoseSet<T>::zeros(int64_t windows, int64_t count, int64_t d,
                             PoseStructure structure) {
  if (structure == PoseStructure::matrix) pose_side(d);
  return PoseSet{Tensor<T>::zeros({windows, count, d}), structure};
}

template <typename T>
PoseSet<T> PoseSet<T>::wrap(Tensor<T> poses, PoseStructure structure) {
  if (poses.ndim() != 3) {
    throw ShapeError("PoseSet: " + shape_str(poses.shape()) +
                     " is not [windows, capsules, pose]");
  }
  if (structure == PoseStructure::matrix) pose_side(poses.dim(2));
  return PoseSet{std::move(poses), structure};
}

template <typename T>
Tensor<T> PoseSet<T>::matrix_view() const {
  int64_t r = pose_side(dim());
  return poses.reshape({windows(), count(), r, r});
}

template <typename T>
TransformWeights<T> TransformWeights<T>::init(int64_t child_types,
                                              int64_t parent_types,
                                              int64_t d_in, int64_t d_out,
                                              PoseStructure structure,
                                              Rng& rng) {
  Shape shape;
  int64_t fan_in;
  if (structure == PoseStructure::matrix) {
    if (d_in != d_out) {
      throw ConfigError("matrix-pose transforms need equal child/parent pose "
                        "dims, got " +
                        std::to_string(d_in) + " and " + std::to_string(d_out));
    }
    int64_t r = pose_side(d_in);
    shape = {child_types, parent_types, r, r};
    fan_in = r;  // each vote element sums r products
  } else {
    shape = {child_types, parent_types, d_out, d_in};
    fan_in = d_in;
  }
  Tensor<T> w = Tensor<T>::zeros(shape, true);
  T std = T(1) / std::sqrt(T(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) {
    w.data()[i] = static_cast<T>(rng.normal()) * std;
  }
  return TransformWeights{std::move(w), structure};
}

template <typename T>
Tensor<T> compute_votes(const PoseSet<T>& children,
                        const TransformWeights<T>& weights, Tape<T>* tape) {
  if (children.structure != weights.structure) {
    throw ConfigError("pose structure mismatch: children are " +
                      std::string(to_string(children.structure)) +
                      ", weights are " +
                      std::string(to_string(weights.structure)));
  }
  if (children.count() != weights.child_types() ||
      children.dim() != weights.d_in()) {
    throw ShapeError("compute_votes: children " +
                     shape_str(children.poses.shape()) + " vs weights " +
                     shape_str(weights.w.shape()));
  }
  return capsule_votes(children.poses, weights.w, weights.structure, tape);
}

template <typename T>
Tensor<T> compute_agreements(const Tensor<T>& votes,
                             const PoseSet<T>& parents_prev, Tape<T>* tape) {
  return capsule_agreements(votes, parents_prev.poses, tape);
}

template <typename T>
Tensor<T> routing_coefficients(const Tensor<T>& agreements, RoutingFault fault,
                               Tape<T>* tape) {
  // axis 2 is the parent axis of [G, Nc, Np]; the fault hook normalizes over
  // children instead, which destroys per-child row-stochasticity.
  int axis = fault == RoutingFault::softmax_over_children ? 1 : 2;
  return softmax(agreements, axis, tape);
}

template <typename T>
PoseSet<T> update_poses(const Tensor<T>& coefficients, const Tensor<T>& votes,
                        const RoutingKnobs<T>& knobs, PoseStructure structure,
                        Tape<T>* tape) {
  Tensor<T> summed = capsule_weighted_sum(coefficients, votes, tape);
  if (!knobs.use_layer_norm) return PoseSet<T>::wrap(summed, structure);
  Tensor<T> normed = layer_norm(summed, 2, T(kLayerNormEps), knobs.ln_gain,
                                knobs.ln_bias, tape);
  return PoseSet<T>::wrap(normed, structure);
}

template <typename T>
PoseSet<T> routing_step(const PoseSet<T>& children,
                        const PoseSet<T>& parents_prev,
                        const TransformWeights<T>& weights,
                        const RoutingKnobs<T>& knobs, Tape<T>* tape,
                        RoutingState<T>* state) {
  Tensor<T> votes = compute_votes(children, weights, tape);
  Tensor<T> agreements = compute_agreements(votes, parents_prev, tape);
  Tensor<T> coefficients = routing_coefficients(agreements, knobs.fault, tape);
  PoseSet<T> next = update_poses(coefficients, votes, knobs,
                                 parents_prev.structure, tape);
  if (state) {
    state->votes = votes;
    state->agreements = agreements;
    state->coefficients = coefficients;
  }
  return next;
}

template <typename T>
DynamicRoutingResult<T> dynamic_routing_step(const PoseSet<T>& children,
                                             const Tensor<T>& logits_prev,
                                             const TransformWeights<T>& weights,
                                             Tape<T>* tape) {
  if (children.structure != PoseStructure::vector ||
      weights.structure != PoseStructure::vector) {
    throw ConfigError("dynamic routing supports vector poses only");
  }
  Tensor<T> votes = compute_votes(children, weights, tape);
  Tensor<T> coeff = softmax(logits_prev, 2, tape);
  Tensor<T> summed = capsule_weighted_sum(coeff, votes, tape);
  Tensor<T> parents = squash(summed, tape);
  PoseSet<T> pose_set = PoseSet<T>::wrap(parents, PoseStructure::vector);
  Tensor<T> delta = compute_agreements(votes, pose_set, tape);
  Tensor<T> logits_next = add(logits_prev, delta, tape);
  return {std::move(pose_set), std::move(logits_next)};
}

#define INSTANTIATE_ROUTING(T)                                                \
  template struct PoseSet<T>;                                                 \
  template struct TransformWeights<T>;                                        \
  template Tensor<T> compute_votes(const PoseSet<T>&,                         \
                                   const TransformWeights<T>&, Tape<T>*);     \
  template Tensor<T> compute_agreements(const Tensor<T>&, const PoseSet<T>&,  \
                                        Tape<T>*);                            \
  template Tensor<T> routing_coefficients(const Tensor<T>&, RoutingFault,     \
                                          Tape<T>*);                          \
  template PoseSet<T> update_poses(const Tensor<T>&, const Tensor<T>&,        \
                                   const RoutingKnobs<T>&, PoseStructure,     \
                                   Tape<T>*);                                 \
  template PoseSet<T> routing_step(const PoseSet<T>&, const PoseSet<T>&,      \
                                   const TransformWeights<T>&,                \
                                   const RoutingKnobs<T>&, Tape<T>*,          \
                                   RoutingState<T>*);                         \
  template DynamicRoutingResult<T> dynamic_routing_step(                      \
      const PoseSet<T>&, const Tensor<T>&, const TransformWeights<T>&,        \
      Tape<T>*);

INSTANTIATE_ROUTING(float)
INSTANTIATE_ROUTING(double)

#undef INSTANTIATE_ROUTING

}  // namespace capsnet
