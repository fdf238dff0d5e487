#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "capsnet/types.hpp"

namespace capsnet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Live-bytes accounting across all tensor storages, used by the bench
// command's peak-memory estimate.
namespace memstats {
int64_t live_bytes();
int64_t peak_bytes();
void reset_peak();
namespace detail {
void add(int64_t bytes);
void sub(int64_t bytes);
}  // namespace detail
}  // namespace memstats

template <typename T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first backward accumulation
  bool requires_grad = false;

  explicit Storage(std::vector<T> values, bool rg);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  // Allocates and zeroes the grad buffer if absent.
  void ensure_grad();
};

// Dense row-major tensor. The data is immutable for the duration of a
// recorded forward pass; only the grad slot accumulates. Reshaped views
// share both data and grad. Tensors may move between threads, but two
// threads must not run backward over the same record concurrently.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<T> values,
                     bool requires_grad = false);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t numel() const;

  T* data();
  const T* data() const;
  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool rg);

  // Grad access; ensure_grad() allocates on demand.
  T* grad();
  const T* grad_or_null() const;
  void ensure_grad();
  void zero_grad();
  Tensor grad_tensor() const;  // copy of grad (zeros if unallocated)

  T item() const;  // requires numel() == 1
  T at(const std::vector<int64_t>& index) const;

  Tensor reshape(Shape new_shape) const;  // shares storage
  Tensor clone() const;                   // deep copy of data only

  std::shared_ptr<Storage<T>> storage() const { return st_; }

 private:
  std::shared_ptr<Storage<T>> st_;
  Shape shape_;
};

// Record of one forward pass: ordered op entries, each holding the op's
// output storage and a rule accumulating input grads from the output grad.
// backward() zeroes all recorded outputs' grads, seeds d(loss)/d(loss) = 1,
// and replays rules in reverse execution order. Calling backward twice
// without zeroing leaf grads adds a second full set of contributions.
template <typename T>
class Tape {
 public:
  void record(std::shared_ptr<Storage<T>> output, std::function<void()> rule);
  void backward(const Tensor<T>& loss);
  void clear();
  size_t size() const { return nodes_.size(); }
  bool active() const { return true; }

 private:
  struct Node {
    std::shared_ptr<Storage<T>> output;
    std::function<void()> rule;
  };
  std::vector<Node> nodes_;
};

// Returns true when the op should record on the tape (tape present and some
// input carries grad).
template <typename T>
inline bool recording(Tape<T>* tape, bool any_input_grad) {
  return tape != nullptr && any_input_grad;
}

// Deterministic RNG. The engine is the standardized mt19937_64; the
// distributions are hand-rolled so that streams are identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }
  // Uniform integer in [0, n), n >= 1.
  int64_t uniform_int(int64_t n);
  // Uniform double in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller.
  double normal();

  // Stream splitting: a well-mixed seed for (seed, index) pairs, so sample
  // generation is a pure function of both.
  static uint64_t mix(uint64_t seed, uint64_t index);

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over a raw byte buffer; used for buffer instrumentation and
// determinism checks.
uint64_t fnv1a(const void* bytes, size_t len);

template <typename T>
uint64_t tensor_hash(const Tensor<T>& t) {
  return t.defined() ? fnv1a(t.data(), sizeof(T) * static_cast<size_t>(t.numel()))
                     : 0xcbf29ce484222325ULL;
}

}  // namespace capsnet
