#include "capsnet/model.hpp"

#include <json.hpp>

#include <cmath>
#include <utility>

namespace capsnet {
namespace {

using njson = nlohmann::ordered_json;

std::pair<int64_t, int64_t> conv_out(int64_t h, int64_t w, int k, int s,
                                     int p, const std::string& what) {
  if (k < 1 || s < 1 || p < 0) {
    throw ConfigError(what + ": kernel/stride must be positive");
  }
  int64_t eh = h + 2 * p - k;
  int64_t ew = w + 2 * p - k;
  if (eh < 0 || ew < 0) {
    throw ConfigError(what + ": " + std::to_string(k) + "x" +
                      std::to_string(k) + " kernel does not fit a " +
                      std::to_string(h) + "x" + std::to_string(w) + " input");
  }
  return {eh / s + 1, ew / s + 1};
}

template <typename T>
Tensor<T> normal_init(Shape shape, T std, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
  for (int64_t i = 0; i < t.numel(); ++i) {
    t.data()[i] = static_cast<T>(rng.normal()) * std;
  }
  return t;
}

}  // namespace

std::vector<std::pair<int64_t, int64_t>> ModelConfig::grid_chain() const {
  std::vector<std::pair<int64_t, int64_t>> chain;
  chain.push_back(conv_out(input_hw, input_hw, backbone_kernel,
                           backbone_stride, backbone_padding, "backbone"));
  chain.push_back(conv_out(chain.back().first, chain.back().second,
                           primary_kernel, primary_stride, primary_padding,
                           "primary capsules"));
  for (size_t i = 0; i < conv_caps.size(); ++i) {
    chain.push_back(conv_out(chain.back().first, chain.back().second,
                             conv_caps[i].kernel, conv_caps[i].stride, 0,
                             "conv capsule stage " + std::to_string(i + 1)));
  }
  return chain;
}

int64_t ModelConfig::flattened_children() const {
  auto chain = grid_chain();
  int64_t types = conv_caps.empty() ? primary_types : conv_caps.back().types;
  return chain.back().first * chain.back().second * types;
}

void ModelConfig::validate() const {
  if (iterations < 1) throw ConfigError("routing iterations must be >= 1");
  if (input_channels < 1 || input_hw < 1) {
    throw ConfigError("input must have positive channels and size");
  }
  if (backbone_channels < 1) throw ConfigError("backbone needs channels");
  if (primary_types < 1 || pose_dim < 1) {
    throw ConfigError("primary capsules need positive types and pose_dim");
  }
  if (structure == PoseStructure::matrix) pose_side(pose_dim);  // throws
  if (fc_caps.empty()) throw ConfigError("at least one FC capsule stage (classes) is required");
  for (int64_t n : fc_caps) {
    if (n < 1) throw ConfigError("FC capsule counts must be positive");
  }
  for (const auto& s : conv_caps) {
    if (s.types < 1) throw ConfigError("conv capsule stages need positive types");
  }
  grid_chain();  // throws when any stage does not fit
}

int64_t ModelConfig::parameter_count() const {
  int64_t total = backbone_channels * input_channels * backbone_kernel *
                      backbone_kernel +
                  backbone_channels;
  PrimaryCapsuleSpec prim{backbone_channels, primary_types,     pose_dim,
                          primary_kernel,    primary_stride, primary_padding};
  total += prim.parameter_count() + 2 * pose_dim;
  int64_t child_types = primary_types;
  for (const auto& s : conv_caps) {
    ConvCapsuleSpec spec{child_types, s.types,  pose_dim,
                         s.kernel,    s.stride, structure};
    total += spec.parameter_count() + 2 * pose_dim;
    child_types = s.types;
  }
  int64_t children = flattened_children();
  for (int64_t n : fc_caps) {
    FCCapsuleSpec spec{children, n, pose_dim, structure};
    total += spec.parameter_count() + 2 * pose_dim;
    children = n;
  }
  return total + pose_dim + 1;  // shared classifier
}

std::string ModelConfig::to_json(int indent) const {
  njson j;
  j["preset"] = preset;
  j["input_channels"] = input_channels;
  j["input_hw"] = input_hw;
  j["backbone_channels"] = backbone_channels;
  j["backbone_kernel"] = backbone_kernel;
  j["backbone_stride"] = backbone_stride;
  j["backbone_padding"] = backbone_padding;
  j["primary_types"] = primary_types;
  j["primary_kernel"] = primary_kernel;
  j["primary_stride"] = primary_stride;
  j["primary_padding"] = primary_padding;
  j["pose_dim"] = pose_dim;
  j["structure"] = to_string(structure);
  njson stages = njson::array();
  for (const auto& s : conv_caps) {
    stages.push_back(njson{{"types", s.types},
                           {"kernel", s.kernel},
                           {"stride", s.stride}});
  }
  j["conv_caps"] = stages;
  j["fc_caps"] = fc_caps;
  j["iterations"] = iterations;
  j["mode"] = to_string(mode);
  j["no_layernorm"] = no_layernorm;
  j["loss"] = to_string(loss);
  return j.dump(indent);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  njson j;
  try {
    j = njson::parse(text);
  } catch (const njson::exception& e) {
    throw FormatError(std::string("config JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config JSON: expected an object");

  ModelConfig cfg;
  try {
    if (j.contains("preset") && !j["preset"].get<std::string>().empty()) {
      cfg = preset_by_name(j["preset"].get<std::string>());
    }
    for (const auto& [key, value] : j.items()) {
      if (key == "preset") {
        cfg.preset = value.get<std::string>();
      } else if (key == "input_channels") {
        cfg.input_channels = value.get<int64_t>();
      } else if (key == "input_hw") {
        cfg.input_hw = value.get<int64_t>();
      } else if (key == "backbone_channels") {
        cfg.backbone_channels = value.get<int64_t>();
      } else if (key == "backbone_kernel") {
        cfg.backbone_kernel = value.get<int>();
      } else if (key == "backbone_stride") {
        cfg.backbone_stride = value.get<int>();
      } else if (key == "backbone_padding") {
        cfg.backbone_padding = value.get<int>();
      } else if (key == "primary_types") {
        cfg.primary_types = value.get<int64_t>();
      } else if (key == "primary_kernel") {
        cfg.primary_kernel = value.get<int>();
      } else if (key == "primary_stride") {
        cfg.primary_stride = value.get<int>();
      } else if (key == "primary_padding") {
        cfg.primary_padding = value.get<int>();
      } else if (key == "pose_dim") {
        cfg.pose_dim = value.get<int64_t>();
      } else if (key == "structure") {
        cfg.structure = pose_structure_from_string(value.get<std::string>());
      } else if (key == "conv_caps") {
        cfg.conv_caps.clear();
        for (const auto& s : value) {
          ConvCapsStage stage;
          for (const auto& [k2, v2] : s.items()) {
            if (k2 == "types") stage.types = v2.get<int64_t>();
            else if (k2 == "kernel") stage.kernel = v2.get<int>();
            else if (k2 == "stride") stage.stride = v2.get<int>();
            else throw ConfigError("unknown conv_caps key: " + k2);
          }
          cfg.conv_caps.push_back(stage);
        }
      } else if (key == "fc_caps") {
        cfg.fc_caps = value.get<std::vector<int64_t>>();
      } else if (key == "iterations") {
        cfg.iterations = value.get<int>();
      } else if (key == "mode") {
        cfg.mode = routing_mode_from_string(value.get<std::string>());
      } else if (key == "no_layernorm") {
        cfg.no_layernorm = value.get<bool>();
      } else if (key == "loss") {
        cfg.loss = loss_kind_from_string(value.get<std::string>());
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    }
  } catch (const njson::exception& e) {
    throw FormatError(std::string("config JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::preset_by_name(const std::string& name) {
  ModelConfig cfg;
  cfg.preset = name;
  if (name == "wide-matrix" || name == "wide-vector") {
    cfg.input_channels = 3;
    cfg.input_hw = 36;
    cfg.backbone_channels = 1024;
    cfg.backbone_kernel = 3;
    cfg.backbone_stride = 2;
    cfg.backbone_padding = 1;
    cfg.primary_types = 16;
    cfg.primary_kernel = 3;
    cfg.primary_stride = 2;
    cfg.primary_padding = 0;
    cfg.pose_dim = 64;
    cfg.structure = name == "wide-matrix" ? PoseStructure::matrix
                                            : PoseStructure::vector;
    cfg.conv_caps = {{16, 3, 1}};
    cfg.fc_caps = {10};
    cfg.iterations = 3;
    cfg.loss = LossKind::binary_ce;
  } else if (name == "cifar") {
    cfg.input_channels = 3;
    cfg.input_hw = 32;
    cfg.backbone_channels = 256;
    cfg.backbone_kernel = 3;
    cfg.backbone_stride = 2;
    cfg.backbone_padding = 1;
    cfg.primary_types = 32;
    cfg.primary_kernel = 1;
    cfg.primary_stride = 1;
    cfg.primary_padding = 0;
    cfg.pose_dim = 16;
    cfg.structure = PoseStructure::matrix;
    cfg.conv_caps = {{32, 3, 2}, {32, 3, 1}};
    cfg.fc_caps = {10};
    cfg.iterations = 3;
    cfg.loss = LossKind::multiclass_ce;
  } else if (name == "desk") {
    cfg.input_channels = 3;
    cfg.input_hw = 36;
    cfg.backbone_channels = 64;
    cfg.backbone_kernel = 3;
    cfg.backbone_stride = 2;
    cfg.backbone_padding = 1;
    cfg.primary_types = 4;
    cfg.primary_kernel = 3;
    cfg.primary_stride = 2;
    cfg.primary_padding = 0;
    cfg.pose_dim = 16;
    cfg.structure = PoseStructure::matrix;
    cfg.conv_caps = {{8, 3, 2}};
    cfg.fc_caps = {10};
    cfg.iterations = 2;
    cfg.loss = LossKind::multiclass_ce;
  } else if (name == "tiny-fd") {
    cfg.input_channels = 3;
    cfg.input_hw = 8;
    cfg.backbone_channels = 6;
    cfg.backbone_kernel = 3;
    cfg.backbone_stride = 1;
    cfg.backbone_padding = 1;
    cfg.primary_types = 2;
    cfg.primary_kernel = 3;
    cfg.primary_stride = 2;
    cfg.primary_padding = 0;
    cfg.pose_dim = 4;
    cfg.structure = PoseStructure::matrix;
    cfg.conv_caps = {{2, 3, 1}};
    cfg.fc_caps = {4};
    cfg.iterations = 2;
    cfg.loss = LossKind::multiclass_ce;
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (available: " + names + ")");
  }
  cfg.validate();
  return cfg;
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"wide-matrix", "wide-vector", "cifar", "desk", "tiny-fd"};
}

template <typename T>
CapsNet<T> CapsNet<T>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  CapsNet<T> net;
  net.cfg = cfg;
  Rng rng(seed);

  // backbone conv feeds a ReLU: He-scaled draws
  T bb_std = std::sqrt(T(2) / T(cfg.input_channels * cfg.backbone_kernel *
                              cfg.backbone_kernel));
  net.bb_kernel = normal_init<T>({cfg.backbone_channels, cfg.input_channels,
                                  cfg.backbone_kernel, cfg.backbone_kernel},
                                 bb_std, rng);
  // Nonzero bias draws keep zero-background regions from producing
  // exactly-constant capsule poses, whose LayerNorm Jacobian is ~1/sqrt(eps).
  T bb_bound =
      T(1) / std::sqrt(T(cfg.input_channels * cfg.backbone_kernel * cfg.backbone_kernel));
  net.bb_bias = Tensor<T>::zeros({cfg.backbone_channels}, true);
  for (int64_t i = 0; i < net.bb_bias.numel(); ++i) {
    net.bb_bias.data()[i] = static_cast<T>(rng.uniform(-bb_bound, bb_bound));
  }

  PrimaryCapsuleSpec prim{cfg.backbone_channels, cfg.primary_types,
                          cfg.pose_dim,          cfg.primary_kernel,
                          cfg.primary_stride,    cfg.primary_padding};
  net.primary = PrimaryCapsuleLayer<T>::init(prim, rng);

  int64_t child_types = cfg.primary_types;
  for (const auto& s : cfg.conv_caps) {
    ConvCapsuleSpec spec{child_types, s.types,  cfg.pose_dim,
                         s.kernel,    s.stride, cfg.structure};
    net.conv_layers.push_back(ConvCapsuleLayer<T>::init(spec, rng));
    child_types = s.types;
  }
  int64_t children = cfg.flattened_children();
  for (int64_t n : cfg.fc_caps) {
    FCCapsuleSpec spec{children, n, cfg.pose_dim, cfg.structure};
    net.fc_layers.push_back(FCCapsuleLayer<T>::init(spec, rng));
    children = n;
  }

  net.cls_w = normal_init<T>({cfg.pose_dim},
                             T(1) / std::sqrt(T(cfg.pose_dim)), rng);
  net.cls_b = Tensor<T>::zeros({1}, true);
  return net;
}

template <typename T>
Tensor<T> CapsNet<T>::inference(const Tensor<T>& image, Tape<T>* tape,
                                InferenceTrace* trace) const {
  Shape want{cfg.input_channels, cfg.input_hw, cfg.input_hw};
  if (image.shape() != want) {
    throw ShapeError("inference input " + shape_str(image.shape()) + ", model expects " +
                     shape_str(want));
  }
  LayerKnobs knobs;
  knobs.use_layer_norm = !cfg.no_layernorm;

  Tensor<T> f = relu(conv2d(image, bb_kernel, bb_bias, cfg.backbone_stride,
                            cfg.backbone_padding, tape),
                     tape);

  // pose buffers: [0] = primary grid, then one per routing layer
  size_t n_conv = conv_layers.size();
  size_t n_route = n_conv + fc_layers.size();
  std::vector<Tensor<T>> bufs(n_route + 1);
  bufs[0] = primary.forward(f, knobs, tape);
  {
    int64_t h = bufs[0].dim(0), w = bufs[0].dim(1);
    for (size_t i = 0; i < n_conv; ++i) {
      std::tie(h, w) = conv_layers[i].out_hw(h, w);
      bufs[i + 1] = Tensor<T>::zeros({h, w, conv_layers[i].spec.parent_types,
                                      cfg.pose_dim});
    }
    for (size_t q = 0; q < fc_layers.size(); ++q) {
      bufs[n_conv + q + 1] =
          Tensor<T>::zeros({fc_layers[q].spec.parent_count, cfg.pose_dim});
    }
  }

  auto step = [&](size_t l, const Tensor<T>& kids, const Tensor<T>& prev) {
    if (l < n_conv) return conv_layers[l].forward(kids, prev, knobs, tape);
    size_t q = l - n_conv;
    Tensor<T> flat =
        q == 0 ? kids.reshape({fc_layers[0].spec.child_count, cfg.pose_dim})
               : kids;
    return fc_layers[q].forward(flat, prev, knobs, tape);
  };
  auto record_read = [&](int k, size_t l) {
    if (trace) {
      trace->reads.push_back({k, static_cast<int>(l), tensor_hash(bufs[l]),
                              tensor_hash(bufs[l + 1])});
    }
  };
  auto commit = [&]() {
    if (!trace) return;
    std::vector<uint64_t> hashes;
    hashes.reserve(bufs.size());
    for (const auto& b : bufs) hashes.push_back(tensor_hash(b));
    trace->committed.push_back(std::move(hashes));
  };
  commit();  // the zero-initialized state

  for (int k = 1; k <= cfg.iterations; ++k) {
    if (k == 1 || cfg.mode == RoutingMode::sequential) {
      // layer-by-layer sweep: each layer consumes the poses just written
      for (size_t l = 0; l < n_route; ++l) {
        record_read(k, l);
        bufs[l + 1] = step(l, bufs[l], bufs[l + 1]);
      }
    } else {
      // all layers read the previous iteration's snapshot, then commit
      std::vector<Tensor<T>> next = bufs;
      for (size_t l = 0; l < n_route; ++l) {
        record_read(k, l);
        next[l + 1] = step(l, bufs[l], bufs[l + 1]);
      }
      bufs = std::move(next);
    }
    commit();
  }

  return shared_linear(bufs.back(), cls_w, cls_b, tape);
}

template <typename T>
std::vector<NamedParam<T>> CapsNet<T>::parameters() {
  std::vector<NamedParam<T>> out;
  out.push_back({"backbone.kernel", bb_kernel});
  out.push_back({"backbone.bias", bb_bias});
  primary.collect("primary", out);
  for (size_t i = 0; i < conv_layers.size(); ++i) {
    conv_layers[i].collect("conv" + std::to_string(i + 1), out);
  }
  for (size_t q = 0; q < fc_layers.size(); ++q) {
    fc_layers[q].collect("fc" + std::to_string(q + 1), out);
  }
  out.push_back({"classifier.w", cls_w});
  out.push_back({"classifier.b", cls_b});
  return out;
}

template <typename T>
std::vector<int64_t> predict_label_set(const Tensor<T>& logits,
                                       TaskKind task) {
  std::vector<int64_t> out;
  if (task == TaskKind::multiclass) {
    int64_t best = 0;
    for (int64_t i = 1; i < logits.numel(); ++i) {
      if (logits.data()[i] > logits.data()[best]) best = i;
    }
    out.push_back(best);
    return out;
  }
  for (int64_t i = 0; i < logits.numel(); ++i) {
    if (logits.data()[i] > 0) out.push_back(i);  // sigmoid(l) > 1/2 <=> l > 0
  }
  return out;
}

#define INSTANTIATE_MODEL(T)                                              \
  template struct CapsNet<T>;                                             \
  template std::vector<int64_t> predict_label_set<T>(const Tensor<T>&, \
                                                     TaskKind);

INSTANTIATE_MODEL(float)
INSTANTIATE_MODEL(double)

#undef INSTANTIATE_MODEL

}  // namespace capsnet
