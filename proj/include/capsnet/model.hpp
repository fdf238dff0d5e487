#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/layers.hpp"

namespace capsnet {

// One convolutional capsule stage between the primary grid and the
// fully-connected stack.
struct ConvCapsStage {
  int64_t types = 0;
  int kernel = 3;
  int stride = 1;
};

// Complete architecture + routing description. Everything needed to rebuild
// a model except the learned values; serialized into checkpoints.
struct ModelConfig {
  std::string preset;  // name this config was derived from, "" for custom

  int64_t input_channels = 3;
  int64_t input_hw = 36;

  // backbone: one conv + ReLU
  int64_t backbone_channels = 64;
  int backbone_kernel = 3;
  int backbone_stride = 2;
  int backbone_padding = 1;

  // primary capsules
  int64_t primary_types = 4;
  int primary_kernel = 3;
  int primary_stride = 2;
  int primary_padding = 0;

  int64_t pose_dim = 16;
  PoseStructure structure = PoseStructure::matrix;
  std::vector<ConvCapsStage> conv_caps;
  std::vector<int64_t> fc_caps;  // parent counts; the last entry is #classes

  int iterations = 3;  // t
  RoutingMode mode = RoutingMode::concurrent;
  bool no_layernorm = false;
  LossKind loss = LossKind::multiclass_ce;

  TaskKind task() const {
    return loss == LossKind::multiclass_ce ? TaskKind::multiclass
                                           : TaskKind::multilabel;
  }
  int64_t classes() const { return fc_caps.empty() ? 0 : fc_caps.back(); }

  // Chained grid sizes: backbone output, primary grid, then one entry per
  // conv stage. Throws ConfigError when any stage does not fit.
  std::vector<std::pair<int64_t, int64_t>> grid_chain() const;
  int64_t flattened_children() const;  // child count of the first FC stage

  void validate() const;
  int64_t parameter_count() const;  // every learnable scalar, by formula

  std::string to_json(int indent = 2) const;
  static ModelConfig from_json(const std::string& text);
  static ModelConfig preset_by_name(const std::string& name);
  static std::vector<std::string> preset_names();
};

// Buffer-hash instrumentation of one inference call: which pose buffers each
// routing step read, and the committed state of every buffer after each
// iteration (entry 0 = the zero-initialized state before iteration 1).
// Buffers are indexed 0 (primary grid) through #routing-layers.
struct InferenceTrace {
  struct Read {
    int iteration = 0;  // 1-based
    int layer = 0;      // routing layer index; reads buffers layer, layer+1
    uint64_t children = 0;
    uint64_t parents = 0;
  };
  std::vector<Read> reads;
  std::vector<std::vector<uint64_t>> committed;
};

template <typename T>
struct CapsNet {
  ModelConfig cfg;
  Tensor<T> bb_kernel;  // [backbone_channels, input_channels, k, k]
  Tensor<T> bb_bias;    // [backbone_channels]
  PrimaryCapsuleLayer<T> primary;
  std::vector<ConvCapsuleLayer<T>> conv_layers;
  std::vector<FCCapsuleLayer<T>> fc_layers;
  Tensor<T> cls_w;  // [pose_dim], shared across class capsules
  Tensor<T> cls_b;  // [1]

  static CapsNet init(const ModelConfig& cfg, uint64_t seed);

  // Class logits for one image [C,H,W]. Iteration 1 routes layer by layer;
  // iterations 2..t run all layers from the previous iteration's snapshot
  // (concurrent mode) or repeat the sweep (sequential mode).
  Tensor<T> inference(const Tensor<T>& image, Tape<T>* tape = nullptr,
                      InferenceTrace* trace = nullptr) const;

  std::vector<NamedParam<T>> parameters();
  int64_t parameter_count() const { return cfg.parameter_count(); }
};

// multiclass: argmax singleton; multilabel: every class whose sigmoid
// exceeds 1/2, i.e. whose logit is positive.
template <typename T>
std::vector<int64_t> predict_label_set(const Tensor<T>& logits, TaskKind task);

}  // namespace capsnet
