#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/routing.hpp"

namespace capsnet {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Per-forward switches shared by every capsule layer of a model.
struct LayerKnobs {
  bool use_layer_norm = true;
  RoutingFault fault = RoutingFault::none;
};

// Convolution + channel grouping + per-capsule LayerNorm on backbone
// features. Groups of d consecutive channels form one capsule type.
struct PrimaryCapsuleSpec {
  int64_t in_channels = 0;
  int64_t types = 0;
  int64_t d = 0;
  int kernel = 3;
  int stride = 2;
  int padding = 0;

  int64_t parameter_count() const;  // conv kernel + bias + LayerNorm affine
};

// Capsules routed within k x k windows; one transform per (kernel position,
// child type, parent type), shared across output locations.
struct ConvCapsuleSpec {
  int64_t child_types = 0;
  int64_t parent_types = 0;
  int64_t d = 0;
  int kernel = 3;
  int stride = 1;
  PoseStructure structure = PoseStructure::vector;

  int64_t parameter_count() const;
};

// Complete bipartite routing over flattened capsules.
struct FCCapsuleSpec {
  int64_t child_count = 0;
  int64_t parent_count = 0;
  int64_t d = 0;
  PoseStructure structure = PoseStructure::vector;

  int64_t parameter_count() const;
};

template <typename T>
struct PrimaryCapsuleLayer {
  PrimaryCapsuleSpec spec;
  Tensor<T> kernel;   // [types*d, in_channels, k, k]
  Tensor<T> bias;     // [types*d]
  Tensor<T> ln_gain;  // [d]
  Tensor<T> ln_bias;  // [d]

  static PrimaryCapsuleLayer init(const PrimaryCapsuleSpec& spec, Rng& rng);
  // feature [C,H,W] -> capsule grid [H',W',types,d]
  Tensor<T> forward(const Tensor<T>& feature, const LayerKnobs& knobs,
                    Tape<T>* tape = nullptr) const;
  std::pair<int64_t, int64_t> out_hw(int64_t h, int64_t w) const;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out);
};

template <typename T>
struct ConvCapsuleLayer {
  ConvCapsuleSpec spec;
  TransformWeights<T> weights;  // [k*k*child_types, parent_types, ...]
  Tensor<T> ln_gain;            // [d]
  Tensor<T> ln_bias;            // [d]

  static ConvCapsuleLayer init(const ConvCapsuleSpec& spec, Rng& rng);
  // children [H,W,Nc,d], parents_prev [H',W',Np,d] -> [H',W',Np,d]
  Tensor<T> forward(const Tensor<T>& children, const Tensor<T>& parents_prev,
                    const LayerKnobs& knobs, Tape<T>* tape = nullptr) const;
  std::pair<int64_t, int64_t> out_hw(int64_t h, int64_t w) const;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out);
};

template <typename T>
struct FCCapsuleLayer {
  FCCapsuleSpec spec;
  TransformWeights<T> weights;  // [child_count, parent_count, ...]
  Tensor<T> ln_gain;            // [d]
  Tensor<T> ln_bias;            // [d]

  static FCCapsuleLayer init(const FCCapsuleSpec& spec, Rng& rng);
  // children [Nc,d], parents_prev [Np,d] -> [Np,d]
  Tensor<T> forward(const Tensor<T>& children, const Tensor<T>& parents_prev,
                    const LayerKnobs& knobs, Tape<T>* tape = nullptr) const;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out);
};

}  // namespace capsnet
