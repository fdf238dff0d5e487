#pragma once

#include "capsnet/ops.hpp"

namespace capsnet {

inline constexpr double kLayerNormEps = 1e-5;

// Side length r of a matrix pose with d = r*r elements.
int64_t pose_side(int64_t d);

// Poses of one capsule layer, or one batch of routing windows: [G, N, d].
// Fully-connected layers use G = 1. Matrix-structure poses store the r x r
// matrix row-major in the d slots; matrix_view() exposes it without copying.
template <typename T>
struct PoseSet {
  Tensor<T> poses;  // [G, N, d]
  PoseStructure structure = PoseStructure::vector;

  static PoseSet zeros(int64_t windows, int64_t count, int64_t d,
                       PoseStructure structure);
  static PoseSet wrap(Tensor<T> poses, PoseStructure structure);

  int64_t windows() const { return poses.dim(0); }
  int64_t count() const { return poses.dim(1); }
  int64_t dim() const { return poses.dim(2); }
  Tensor<T> matrix_view() const;  // [G, N, r, r], shares storage
};

// One learned transform per (child type, parent type) pair, shared across
// windows: [Nc, Np, d_out, d_in] for vector poses (d_out*d_in scalars per
// pair), [Nc, Np, r, r] for matrix poses (d scalars per pair).
template <typename T>
struct TransformWeights {
  Tensor<T> w;
  PoseStructure structure = PoseStructure::vector;

  static TransformWeights init(int64_t child_types, int64_t parent_types,
                               int64_t d_in, int64_t d_out,
                               PoseStructure structure, Rng& rng);

  int64_t child_types() const { return w.dim(0); }
  int64_t parent_types() const { return w.dim(1); }
  int64_t d_in() const {
    return structure == PoseStructure::matrix ? w.dim(2) * w.dim(3) : w.dim(3);
  }
  int64_t d_out() const {
    return structure == PoseStructure::matrix ? w.dim(2) * w.dim(3) : w.dim(2);
  }
  int64_t count() const { return w.numel(); }
};

// Intermediates of one routing step, exposed for inspection by tests and the
// verify suites. parents_prev is never written during a step.
template <typename T>
struct RoutingState {
  Tensor<T> votes;         // [G, Nc, Np, d]
  Tensor<T> agreements;    // [G, Nc, Np]
  Tensor<T> coefficients;  // [G, Nc, Np]; rows over Np sum to 1
};

// Per-layer configuration a step needs beyond the weights.
template <typename T>
struct RoutingKnobs {
  Tensor<T> ln_gain;  // [d_out] or undefined (= all ones)
  Tensor<T> ln_bias;  // [d_out] or undefined (= all zeros)
  bool use_layer_norm = true;        // ablation: skip pose normalization
  RoutingFault fault = RoutingFault::none;
};

// v_ij = W_ij * p_i for every window.
template <typename T>
Tensor<T> compute_votes(const PoseSet<T>& children,
                        const TransformWeights<T>& weights,
                        Tape<T>* tape = nullptr);

// a_ij = <p_j, v_ij> against the previous parent poses.
template <typename T>
Tensor<T> compute_agreements(const Tensor<T>& votes,
                             const PoseSet<T>& parents_prev,
                             Tape<T>* tape = nullptr);

// r_i: = softmax over the parent axis of the agreements — parents compete
// for each child. The fault hook flips the axis to children (negative
// control for the verify command).
template <typename T>
Tensor<T> routing_coefficients(const Tensor<T>& agreements,
                               RoutingFault fault = RoutingFault::none,
                               Tape<T>* tape = nullptr);

// p_j = LayerNorm(sum_i r_ij * v_ij), with per-coordinate gain/bias shared
// across the layer's capsules; normalization skipped under the ablation.
template <typename T>
PoseSet<T> update_poses(const Tensor<T>& coefficients, const Tensor<T>& votes,
                        const RoutingKnobs<T>& knobs, PoseStructure structure,
                        Tape<T>* tape = nullptr);

// One full routing step: votes, agreements, coefficients, pose update.
template <typename T>
PoseSet<T> routing_step(const PoseSet<T>& children,
                        const PoseSet<T>& parents_prev,
                        const TransformWeights<T>& weights,
                        const RoutingKnobs<T>& knobs, Tape<T>* tape = nullptr,
                        RoutingState<T>* state = nullptr);

// Dynamic-Routing baseline step (vector poses only): coefficients from
// accumulated logits, squash instead of LayerNorm, and a logit update from
// the agreement with the new parent poses.
template <typename T>
struct DynamicRoutingResult {
  PoseSet<T> parents;
  Tensor<T> logits_next;  // [G, Nc, Np]
};

template <typename T>
DynamicRoutingResult<T> dynamic_routing_step(const PoseSet<T>& children,
                                             const Tensor<T>& logits_prev,
                                             const TransformWeights<T>& weights,
                                             Tape<T>* tape = nullptr);

}  // namespace capsnet
