#include "capsnet/types.hpp"

namespace capsnet {

const char* to_string(PoseStructure s) {
  return s == PoseStructure::vector ? "vector" : "matrix";
}

const char* to_string(RoutingMode m) {
  return m == RoutingMode::concurrent ? "concurrent" : "sequential";
}

const char* to_string(LossKind k) {
  return k == LossKind::multiclass_ce ? "multiclass_ce" : "binary_ce";
}

const char* to_string(TaskKind k) {
  return k == TaskKind::multiclass ? "multiclass" : "multilabel";
}

PoseStructure pose_structure_from_string(const std::string& s) {
  if (s == "vector") return PoseStructure::vector;
  if (s == "matrix") return PoseStructure::matrix;
  throw ConfigError("unknown pose structure '" + s + "'");
}

RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "concurrent") return RoutingMode::concurrent;
  if (s == "sequential") return RoutingMode::sequential;
  throw ConfigError("unknown routing mode '" + s + "'");
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "multiclass_ce") return LossKind::multiclass_ce;
  if (s == "binary_ce") return LossKind::binary_ce;
  throw ConfigError("unknown loss '" + s + "'");
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "multiclass") return TaskKind::multiclass;
  if (s == "multilabel") return TaskKind::multilabel;
  throw ConfigError("unknown task '" + s + "'");
}

}  // namespace capsnet
