#pragma once

#include <stdexcept>
#include <string>

namespace capsnet {

// Pose layout of a capsule layer: a flat d-vector, or a sqrt(d) x sqrt(d)
// matrix stored row-major in the same d slots.
enum class PoseStructure { vector, matrix };

// How routing iterations 2..t are scheduled (iteration 1 is always a
// sequential sweep).
enum class RoutingMode { concurrent, sequential };

enum class LossKind { multiclass_ce, binary_ce };

enum class TaskKind { multiclass, multilabel };

// Fault hook for the verify command's negative control: normalizing the
// routing softmax over children instead of parents must break per-child
// row-stochasticity.
enum class RoutingFault { none, softmax_over_children };

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const char* to_string(PoseStructure s);
const char* to_string(RoutingMode m);
const char* to_string(LossKind k);
const char* to_string(TaskKind k);

PoseStructure pose_structure_from_string(const std::string& s);
RoutingMode routing_mode_from_string(const std::string& s);
LossKind loss_kind_from_string(const std::string& s);
TaskKind task_kind_from_string(const std::string& s);

}  // namespace capsnet
