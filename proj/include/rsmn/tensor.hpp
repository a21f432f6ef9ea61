#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rsmn/errors.hpp"

namespace rsmn {

using Shape = std::vector<int>;

// All numeric buffers share one fixed 64-byte alignment so vectorized code
// always takes the same path; otherwise repeated runs can differ at the ULP
// level depending on where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) {
    return true;
  }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major N-d array with an optional gradient buffer. A Tensor is a
// cheap handle: copies share storage. Data is immutable by convention once an
// op has produced it; grad buffers are the only thing backward mutates.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : s_(std::make_shared<Storage>()) {
    for (int d : shape)
      if (d <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data.assign(size_t(shape_numel(s_->shape)), fill);
  }

  Tensor(Shape shape, AlignedVec<T> data) : s_(std::make_shared<Storage>()) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  Tensor(Shape shape, std::initializer_list<T> data) : s_(std::make_shared<Storage>()) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data.assign(data.begin(), data.end());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }

  bool defined() const { return bool(s_); }
  const Shape& shape() const { return s_->shape; }
  int dim(int i) const { return s_->shape.at(size_t(i)); }
  int rank() const { return int(s_->shape.size()); }
  int64_t numel() const { return int64_t(s_->data.size()); }

  AlignedVec<T>& data() { return s_->data; }
  const AlignedVec<T>& data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool b) {
    s_->requires_grad = b;
    if (b && s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
  }
  AlignedVec<T>& grad() {
    if (!s_->requires_grad) throw StateError("tensor does not track gradients");
    return s_->grad;
  }
  const AlignedVec<T>& grad() const {
    if (!s_->requires_grad) throw StateError("tensor does not track gradients");
    return s_->grad;
  }
  void zero_grad() {
    if (s_->requires_grad) s_->grad.assign(s_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ArgumentError("item() on non-scalar tensor " + shape_str(shape()));
    return s_->data[0];
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  Tensor clone() const {
    Tensor out(shape());
    out.data() = data();
    return out;
  }

 private:
  struct Storage {
    Shape shape;
    AlignedVec<T> data;
    AlignedVec<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// Records executed ops in execution order; backward replays the records in
// reverse exactly once. One tape belongs to one logical execution context.
template <typename T>
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool b) { recording_ = b; }

  void record(std::function<void()> backward_fn) {
    records_.push_back(std::move(backward_fn));
  }

  size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // grad-tracked tensor reachable from the records.
  void backward(Tensor<T>& loss) {
    if (consumed_) throw StateError("backward called twice on the same tape");
    if (loss.numel() != 1)
      throw ArgumentError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (loss.requires_grad()) loss.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> records_;
  bool recording_ = true;
  bool consumed_ = false;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data())
    if (!std::isfinite(double(v)))
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

}  // namespace rsmn
