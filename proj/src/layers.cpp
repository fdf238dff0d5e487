#include "capsnet/layers.hpp"

#include <cmath>

namespace capsnet {
namespace {

template <typename T>
Tensor<T> conv_kernel_init(int64_t cout, int64_t cin, int kernel, T gain_sq,
                           Rng& rng) {
  Tensor<T> k = Tensor<T>::zeros({cout, cin, kernel, kernel}, true);
  T std = std::sqrt(gain_sq / T(cin * kernel * kernel));
  for (int64_t i = 0; i < k.numel(); ++i) {
    k.data()[i] = static_cast<T>(rng.normal()) * std;
  }
  return k;
}

// Uniform (-1/sqrt(fan_in), +1/sqrt(fan_in)) draws. Zero biases would make
// every zero-input window emit an exactly-constant pose, and LayerNorm of a
// constant slice has a ~1/sqrt(eps) Jacobian that destabilizes training.
template <typename T>
Tensor<T> conv_bias_init(int64_t cout, int64_t fan_in, Rng& rng) {
  Tensor<T> b = Tensor<T>::zeros({cout}, true);
  T bound = T(1) / std::sqrt(T(fan_in));
  for (int64_t i = 0; i < b.numel(); ++i) {
    b.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
  return b;
}

template <typename T>
void init_affine(int64_t d, Tensor<T>& gain, Tensor<T>& bias) {
  gain = Tensor<T>::full({d}, T(1), true);
  bias = Tensor<T>::zeros({d}, true);
}

}  // namespace

// Spec-level counts cover the transform scalars only; the LayerNorm affine
// pairs live on the layers and are counted where the tensors are owned.
int64_t PrimaryCapsuleSpec::parameter_count() const {
  return types * d * in_channels * kernel * kernel  // conv kernel
         + types * d;                               // conv bias
}

int64_t ConvCapsuleSpec::parameter_count() const {
  int64_t per_pair = structure == PoseStructure::matrix ? d : d * d;
  return kernel * kernel * child_types * parent_types * per_pair;
}

int64_t FCCapsuleSpec::parameter_count() const {
  int64_t per_pair = structure == PoseStructure::matrix ? d : d * d;
  return child_count * parent_count * per_pair;
}

template <typename T>
PrimaryCapsuleLayer<T> PrimaryCapsuleLayer<T>::init(
    const PrimaryCapsuleSpec& spec, Rng& rng) {
  PrimaryCapsuleLayer layer;
  layer.spec = spec;
  layer.kernel = conv_kernel_init<T>(spec.types * spec.d, spec.in_channels,
                                     spec.kernel, T(1), rng);
  layer.bias = conv_bias_init<T>(spec.types * spec.d,
                                 spec.in_channels * spec.kernel * spec.kernel, rng);
  init_affine(spec.d, layer.ln_gain, layer.ln_bias);
  return layer;
}

template <typename T>
std::pair<int64_t, int64_t> PrimaryCapsuleLayer<T>::out_hw(int64_t h,
                                                           int64_t w) const {
  return {(h + 2 * spec.padding - spec.kernel) / spec.stride + 1,
          (w + 2 * spec.padding - spec.kernel) / spec.stride + 1};
}

template <typename T>
Tensor<T> PrimaryCapsuleLayer<T>::forward(const Tensor<T>& feature,
                                          const LayerKnobs& knobs,
                                          Tape<T>* tape) const {
  if (feature.dim(0) != spec.in_channels) {
    throw ConfigError("primary capsules expect " +
                      std::to_string(spec.in_channels) + " channels, got " +
                      shape_str(feature.shape()));
  }
  // the no-LayerNorm ablation targets the routing pose update; the primary
  // construction always normalizes
  (void)knobs;
  Tensor<T> conv = conv2d(feature, kernel, bias, spec.stride, spec.padding, tape);
  Tensor<T> grid = chw_to_capsule_grid(conv, spec.types, spec.d, tape);
  return layer_norm(grid, 3, T(kLayerNormEps), ln_gain, ln_bias, tape);
}

template <typename T>
void PrimaryCapsuleLayer<T>::collect(const std::string& prefix,
                                     std::vector<NamedParam<T>>& out) {
  out.push_back({prefix + ".kernel", kernel});
  out.push_back({prefix + ".bias", bias});
  out.push_back({prefix + ".ln_gain", ln_gain});
  out.push_back({prefix + ".ln_bias", ln_bias});
}

template <typename T>
ConvCapsuleLayer<T> ConvCapsuleLayer<T>::init(const ConvCapsuleSpec& spec,
                                              Rng& rng) {
  ConvCapsuleLayer layer;
  layer.spec = spec;
  layer.weights = TransformWeights<T>::init(
      spec.kernel * spec.kernel * spec.child_types, spec.parent_types, spec.d,
      spec.d, spec.structure, rng);
  init_affine(spec.d, layer.ln_gain, layer.ln_bias);
  return layer;
}

template <typename T>
std::pair<int64_t, int64_t> ConvCapsuleLayer<T>::out_hw(int64_t h,
                                                        int64_t w) const {
  if (h < spec.kernel || w < spec.kernel) {
    throw ConfigError("conv capsules: " + std::to_string(spec.kernel) + "x" +
                      std::to_string(spec.kernel) + " window does not fit a " +
                      std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  return {(h - spec.kernel) / spec.stride + 1,
          (w - spec.kernel) / spec.stride + 1};
}

template <typename T>
Tensor<T> ConvCapsuleLayer<T>::forward(const Tensor<T>& children,
                                       const Tensor<T>& parents_prev,
                                       const LayerKnobs& knobs,
                                       Tape<T>* tape) const {
  auto [oh, ow] = out_hw(children.dim(0), children.dim(1));
  // each output location routes its k*k receptive field independently
  Tensor<T> windows = unfold_capsules(children, spec.kernel, spec.stride, tape);
  Tensor<T> parents = parents_prev.reshape({oh * ow, spec.parent_types, spec.d});
  RoutingKnobs<T> rk{ln_gain, ln_bias, knobs.use_layer_norm, knobs.fault};
  PoseSet<T> next = routing_step(PoseSet<T>::wrap(windows, spec.structure),
                                 PoseSet<T>::wrap(parents, spec.structure),
                                 weights, rk, tape);
  return next.poses.reshape({oh, ow, spec.parent_types, spec.d});
}

template <typename T>
void ConvCapsuleLayer<T>::collect(const std::string& prefix,
                                  std::vector<NamedParam<T>>& out) {
  out.push_back({prefix + ".weights", weights.w});
  out.push_back({prefix + ".ln_gain", ln_gain});
  out.push_back({prefix + ".ln_bias", ln_bias});
}

template <typename T>
FCCapsuleLayer<T> FCCapsuleLayer<T>::init(const FCCapsuleSpec& spec, Rng& rng) {
  FCCapsuleLayer layer;
  layer.spec = spec;
  layer.weights = TransformWeights<T>::init(spec.child_count, spec.parent_count,
                                            spec.d, spec.d, spec.structure, rng);
  init_affine(spec.d, layer.ln_gain, layer.ln_bias);
  return layer;
}

template <typename T>
Tensor<T> FCCapsuleLayer<T>::forward(const Tensor<T>& children,
                                     const Tensor<T>& parents_prev,
                                     const LayerKnobs& knobs,
                                     Tape<T>* tape) const {
  Tensor<T> c = children.reshape({1, spec.child_count, spec.d});
  Tensor<T> p = parents_prev.reshape({1, spec.parent_count, spec.d});
  RoutingKnobs<T> rk{ln_gain, ln_bias, knobs.use_layer_norm, knobs.fault};
  PoseSet<T> next = routing_step(PoseSet<T>::wrap(c, spec.structure),
                                 PoseSet<T>::wrap(p, spec.structure), weights,
                                 rk, tape);
  return next.poses.reshape({spec.parent_count, spec.d});
}

template <typename T>
void FCCapsuleLayer<T>::collect(const std::string& prefix,
                                std::vector<NamedParam<T>>& out) {
  out.push_back({prefix + ".weights", weights.w});
  out.push_back({prefix + ".ln_gain", ln_gain});
  out.push_back({prefix + ".ln_bias", ln_bias});
}

#define INSTANTIATE_LAYERS(T)            \
  template struct PrimaryCapsuleLayer<T>; \
  template struct ConvCapsuleLayer<T>;    \
  template struct FCCapsuleLayer<T>;

INSTANTIATE_LAYERS(float)
INSTANTIATE_LAYERS(double)

#undef INSTANTIATE_LAYERS

}  // namespace capsnet
