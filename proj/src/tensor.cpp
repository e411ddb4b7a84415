#include "refprior/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "refprior/rng.hpp"

namespace refprior {

namespace {

Dtype g_default_dtype = Dtype::f32;
thread_local bool t_grad_enabled = true;

}  // namespace

const char* to_string(Dtype dtype) {
  return dtype == Dtype::f32 ? "f32" : "f64";
}

Dtype default_dtype() { return g_default_dtype; }
void set_default_dtype(Dtype dtype) { g_default_dtype = dtype; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Storage::Storage(Dtype dtype, std::size_t size) {
  if (dtype == Dtype::f32)
    data_ = AlignedVector<float>(size, 0.0f);
  else
    data_ = AlignedVector<double>(size, 0.0);
}

std::size_t Storage::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Storage::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); },
                    data_);
}

void Storage::set(std::size_t i, double value) {
  std::visit(
      [i, value](auto& v) {
        using S = typename std::decay_t<decltype(v)>::value_type;
        v[i] = static_cast<S>(value);
      },
      data_);
}

void Storage::fill(double value) {
  std::visit(
      [value](auto& v) {
        using S = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<S>(value));
      },
      data_);
}

Storage& TensorImpl::grad_buffer() {
  if (!grad) grad = std::make_unique<Storage>(data.dtype(), data.size());
  return *grad;
}

namespace {

Tensor make_leaf(const Shape& shape, Dtype dtype) {
  for (auto d : shape)
    if (d < 0) fail(ErrorKind::Shape, "negative dimension in " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = Storage(dtype, static_cast<std::size_t>(numel(shape)));
  return Tensor(std::move(impl));
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, Dtype dtype) {
  return make_leaf(shape, dtype);
}

Tensor Tensor::full(const Shape& shape, double value, Dtype dtype) {
  Tensor t = make_leaf(shape, dtype);
  t.storage().fill(value);
  return t;
}

Tensor Tensor::from(const Shape& shape, std::span<const double> values,
                    Dtype dtype) {
  Tensor t = make_leaf(shape, dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    fail(ErrorKind::Shape, "Tensor::from: " + std::to_string(values.size()) +
                               " values for shape " + shape_str(shape));
  for (std::size_t i = 0; i < values.size(); ++i) t.storage().set(i, values[i]);
  return t;
}

Tensor Tensor::from(const Shape& shape, std::initializer_list<double> values,
                    Dtype dtype) {
  return from(shape, std::span<const double>(values.begin(), values.size()),
              dtype);
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng,
                       Dtype dtype) {
  Tensor t = make_leaf(shape, dtype);
  for (std::size_t i = 0; i < t.storage().size(); ++i)
    t.storage().set(i, rng.uniform(lo, hi));
  return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) {
  return full({}, value, dtype);
}

double Tensor::item() const {
  if (numel() != 1)
    fail(ErrorKind::Shape, "item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(storage().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (flag && impl_->node)
    fail(ErrorKind::Usage, "set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->grad ? *impl_->grad
                           : Storage(dtype(), impl_->data.size());
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, Dtype dtype,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data = Storage(dtype, static_cast<std::size_t>(numel(shape)));
  impl->shape = std::move(shape);
  const bool track =
      t_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.impl_ptr());
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail(ErrorKind::Shape, "backward() needs a scalar loss, got shape " +
                               (loss.defined() ? shape_str(loss.shape())
                                               : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  loss.impl()->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node || !impl->grad) continue;
    impl->node->backward(*impl);
    impl->grad.reset();
  }
}

std::vector<Tensor> gradients(const Tensor& loss,
                              std::span<const Tensor> params) {
  for (const auto& p : params) p.impl()->grad.reset();
  backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back(p.grad());
    p.impl()->grad.reset();
  }
  return out;
}

}  // namespace refprior
