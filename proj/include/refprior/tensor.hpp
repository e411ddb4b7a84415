#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "refprior/error.hpp"

namespace refprior {

class Rng;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

const char* to_string(Dtype dtype);

// Run-wide dtype used by factories when none is given. 32-bit for training,
// 64-bit for gradient checks.
Dtype default_dtype();
void set_default_dtype(Dtype dtype);

class DtypeGuard {
 public:
  explicit DtypeGuard(Dtype dtype) : previous_(default_dtype()) {
    set_default_dtype(dtype);
  }
  ~DtypeGuard() { set_default_dtype(previous_); }
  DtypeGuard(const DtypeGuard&) = delete;
  DtypeGuard& operator=(const DtypeGuard&) = delete;

 private:
  Dtype previous_;
};

// Vectorized kernels peel unaligned heads, so their summation order depends
// on where a buffer starts. Every numeric buffer starts on a 64-byte boundary
// to keep results a function of shapes and values alone.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Flat, typed value buffer.
class Storage {
 public:
  Storage() = default;
  Storage(Dtype dtype, std::size_t size);

  Dtype dtype() const {
    return std::holds_alternative<AlignedVector<float>>(data_) ? Dtype::f32
                                                             : Dtype::f64;
  }
  std::size_t size() const;

  template <class S>
  std::span<S> as() {
    return std::span<S>(std::get<AlignedVector<S>>(data_));
  }
  template <class S>
  std::span<const S> as() const {
    return std::span<const S>(std::get<AlignedVector<S>>(data_));
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  void fill(double v);
  bool operator==(const Storage& other) const { return data_ == other.data_; }

 private:
  std::variant<AlignedVector<float>, AlignedVector<double>> data_;
};

// Calls f(S{}) with S = float or double according to dtype.
template <class F>
decltype(auto) dispatch(Dtype dtype, F&& f) {
  if (dtype == Dtype::f32) return f(float{});
  return f(double{});
}

struct TensorImpl;

// A recorded operation: the inputs it read and how to push the output
// gradient back into them.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the output (with its gradient populated) and accumulates into
  // the gradients of `inputs`.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  Storage data;
  bool requires_grad = false;
  std::unique_ptr<Storage> grad;
  std::shared_ptr<Node> node;

  // Returns the gradient buffer, allocating zeros on first use.
  Storage& grad_buffer();
};

// Shared handle to a row-major N-d array with an optional gradient node.
// Copies alias the same buffer, as with framework tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, Dtype dtype = default_dtype());
  static Tensor full(const Shape& shape, double value,
                     Dtype dtype = default_dtype());
  static Tensor from(const Shape& shape, std::span<const double> values,
                     Dtype dtype = default_dtype());
  static Tensor from(const Shape& shape, std::initializer_list<double> values,
                     Dtype dtype = default_dtype());
  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                        Dtype dtype = default_dtype());
  static Tensor scalar(double value, Dtype dtype = default_dtype());

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return refprior::numel(impl_->shape); }
  Dtype dtype() const { return impl_->data.dtype(); }

  Storage& storage() { return impl_->data; }
  const Storage& storage() const { return impl_->data; }
  template <class S>
  std::span<S> data() {
    return impl_->data.as<S>();
  }
  template <class S>
  std::span<const S> data() const {
    return static_cast<const Storage&>(impl_->data).as<S>();
  }

  double at(std::size_t flat_index) const { return impl_->data.get(flat_index); }
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  // Accumulated gradient, or zeros when nothing reached this tensor.
  Tensor grad() const;
  bool has_grad() const { return impl_->grad != nullptr; }
  void zero_grad() { impl_->grad.reset(); }

  // Same values, no gradient history.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local switch that disables graph recording (inference, frozen
// networks, finite-difference probes).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. When recording is enabled and any input requires a
// gradient, the result carries a Node with `backward`.
Tensor make_result(const char* op, Shape shape, Dtype dtype,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward);

// Reverse-mode accumulation from a scalar loss into every reachable leaf that
// requires a gradient. Intermediate gradients are released afterwards.
void backward(const Tensor& loss);

// Gradients of `loss` with respect to `params` alone: their stored gradients
// are cleared before and after the pass, so repeated calls never accumulate.
// Parameters that the loss does not depend on get zeros.
std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> params);

}  // namespace refprior
