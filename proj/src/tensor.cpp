#include "capsnet/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace capsnet {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace memstats {
namespace {
std::atomic<int64_t> g_live{0};
std::atomic<int64_t> g_peak{0};
}  // namespace

int64_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
int64_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_live.load(), std::memory_order_relaxed); }

namespace detail {
void add(int64_t bytes) {
  int64_t now = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  int64_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak &&
         !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}
void sub(int64_t bytes) { g_live.fetch_sub(bytes, std::memory_order_relaxed); }
}  // namespace detail
}  // namespace memstats

template <typename T>
Storage<T>::Storage(std::vector<T> values, bool rg)
    : data(std::move(values)), requires_grad(rg) {
  memstats::detail::add(static_cast<int64_t>(data.size() * sizeof(T)));
}

template <typename T>
Storage<T>::~Storage() {
  memstats::detail::sub(
      static_cast<int64_t>((data.size() + grad.size()) * sizeof(T)));
}

template <typename T>
void Storage<T>::ensure_grad() {
  if (grad.empty() && !data.empty()) {
    grad.assign(data.size(), T(0));
    memstats::detail::add(static_cast<int64_t>(grad.size() * sizeof(T)));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape_));
  }
  st_ = std::make_shared<Storage<T>>(std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::initializer_list<T> values,
                          bool requires_grad) {
  return Tensor(std::move(shape), std::vector<T>(values), requires_grad);
}

template <typename T>
int64_t Tensor<T>::numel() const {
  return st_ ? static_cast<int64_t>(st_->data.size()) : 0;
}

template <typename T>
T* Tensor<T>::data() {
  return st_->data.data();
}

template <typename T>
const T* Tensor<T>::data() const {
  return st_->data.data();
}

template <typename T>
void Tensor<T>::set_requires_grad(bool rg) {
  st_->requires_grad = rg;
}

template <typename T>
T* Tensor<T>::grad() {
  st_->ensure_grad();
  return st_->grad.data();
}

template <typename T>
const T* Tensor<T>::grad_or_null() const {
  return st_ && !st_->grad.empty() ? st_->grad.data() : nullptr;
}

template <typename T>
void Tensor<T>::ensure_grad() {
  st_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (st_ && !st_->grad.empty()) {
    std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!st_ || st_->grad.empty()) return Tensor<T>::zeros(shape_);
  return Tensor(shape_, st_->grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape_) +
                     " is not a scalar");
  }
  return st_->data[0];
}

template <typename T>
T Tensor<T>::at(const std::vector<int64_t>& index) const {
  int64_t flat = 0;
  for (size_t k = 0; k < shape_.size(); ++k) {
    flat = flat * shape_[k] + index[k];
  }
  return st_->data[static_cast<size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " to " +
                     shape_str(new_shape) + " changes element count");
  }
  Tensor out;
  out.st_ = st_;
  out.shape_ = std::move(new_shape);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape_, st_->data, st_->requires_grad);
}

template <typename T>
void Tape<T>::record(std::shared_ptr<Storage<T>> output,
                     std::function<void()> rule) {
  nodes_.push_back(Node{std::move(output), std::move(rule)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw InputError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  // Zero every recorded intermediate so prior passes cannot leak into this
  // one; leaves keep their accumulators.
  for (auto& node : nodes_) {
    if (!node.output->grad.empty()) {
      std::fill(node.output->grad.begin(), node.output->grad.end(), T(0));
    }
  }
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // no downstream contribution
    it->rule();
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
}

int64_t Rng::uniform_int(int64_t n) {
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

uint64_t Rng::mix(uint64_t seed, uint64_t index) {
  // splitmix64 finalizer over the pair
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t fnv1a(const void* bytes, size_t len) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template struct Storage<float>;
template struct Storage<double>;
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace capsnet
