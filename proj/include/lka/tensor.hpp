// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors and the reverse-mode recording tape.
//
// A Tensor is a cheap handle onto shared storage (like a torch tensor), so
// copies alias. Use clone() for an independent value copy. Operations on
// tensors that require gradients record a backward closure on the calling
// thread's Tape; backward() replays the tape in reverse and clears it.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lka {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct GridError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct LengthError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct CompatibilityError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace detail {

// Leaves elements uninitialized on resize, so buffers that are about to be
// overwritten are not zero-filled first. Every block starts on a 64-byte
// boundary: vectorized kernels pick their peeling by address, and a fixed
// alignment keeps results independent of where the heap put the data.
template <class T>
struct UninitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

using Buffer = std::vector<double, detail::UninitAllocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient arrives
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) {}

  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data), requires_grad) {}

  Tensor(Shape shape, Buffer data, bool requires_grad = false) : impl_(std::make_shared<TensorImpl>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, value), requires_grad);
  }
  // Contents unspecified; for outputs that get fully overwritten.
  static Tensor uninitialized(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  bool defined() const { return !impl_->shape.empty(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> data() { return impl_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Allocates a zero-filled buffer on first use. Const because the buffer
  // belongs to the shared storage, not to this handle.
  std::span<double> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  // Independent copy of the values; never tracked.
  Tensor clone() const { return Tensor(shape(), impl_->data, false); }
  // Same values, fresh storage, tracking off.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(), [](double p, double q) {
    return std::memcmp(&p, &q, sizeof(double)) == 0;
  });
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  // One tape per thread; distinct models on distinct threads never share one.
  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  std::vector<BackwardFn> nodes_;
};

namespace detail {

inline bool any_tracked(std::initializer_list<const Tensor*> ts) {
  if (!grad_enabled()) return false;
  for (auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Records `fn(out_grad)` on the tape when `tracked`. `fn` receives the output
// gradient only if one reached the output during backward; the output's
// gradient is released once `fn` has consumed it.
template <class Fn>
void record(Tensor& out, bool tracked, Fn&& fn) {
  if (!tracked) return;
  out.set_requires_grad(true);
  std::weak_ptr<TensorImpl> weak = out.handle();
  Tape::current().record([weak, fn = std::forward<Fn>(fn)]() mutable {
    auto o = weak.lock();
    if (!o || o->grad.empty()) return;
    fn(std::span<const double>(o->grad));
    Buffer().swap(o->grad);  // consumed; frees the memory for the next node
  });
}

}  // namespace detail

// Reverse pass from a scalar loss. Clears the tape afterwards.
inline void backward(Tensor loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) {
    Tape::current().clear();
    return;
  }
  loss.grad_buffer()[0] += 1.0;
  Tape::current().run_backward();
}

}  // namespace lka
