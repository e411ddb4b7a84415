#include "refprior/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace refprior {

namespace {

template <class S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapR = Eigen::Map<MatR<S>>;
template <class S>
using CMapR = Eigen::Map<const MatR<S>>;

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    fail(ErrorKind::Shape, std::string(op) + ": dtype mismatch " +
                               to_string(a.dtype()) + " vs " +
                               to_string(b.dtype()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::Shape, std::string(op) + ": shape mismatch " +
                               shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
  require_same_dtype(op, a, b);
}

void require_rank(const char* op, const Tensor& t, std::size_t rank,
                  const char* what) {
  if (t.rank() != rank)
    fail(ErrorKind::Shape, std::string(op) + ": " + what + " must have rank " +
                               std::to_string(rank) + ", got " +
                               shape_str(t.shape()));
}

// Gradient span of an input when it participates in backward, else empty.
template <class S>
std::span<S> grad_if(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.impl()->grad_buffer().as<S>();
}

template <class S>
std::span<const S> out_grad(const TensorImpl& out) {
  return static_cast<const Storage&>(*out.grad).as<S>();
}

template <class S>
std::span<const S> out_data(const TensorImpl& out) {
  return out.data.as<S>();
}

// y = f(x); dy/dx = df(x, y).
template <class Fwd, class Bwd>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Bwd df) {
  Tensor out = make_result(op, x.shape(), x.dtype(), {x},
                           [x, df](const TensorImpl& o) {
                             dispatch(x.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gx = grad_if<S>(x);
                               auto xs = x.data<S>();
                               auto ys = out_data<S>(o);
                               auto gy = out_grad<S>(o);
                               for (std::size_t i = 0; i < gx.size(); ++i)
                                 gx[i] += gy[i] * static_cast<S>(df(
                                                      static_cast<double>(xs[i]),
                                                      static_cast<double>(ys[i])));
                             });
                           });
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = x.data<S>();
    auto ys = out.data<S>();
    for (std::size_t i = 0; i < xs.size(); ++i)
      ys[i] = static_cast<S>(fwd(static_cast<double>(xs[i])));
  });
  return out;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = make_result("add", a.shape(), a.dtype(), {a, b},
                           [a, b](const TensorImpl& o) {
                             dispatch(a.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gy = out_grad<S>(o);
                               for (const Tensor* t : {&a, &b}) {
                                 auto g = grad_if<S>(*t);
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += gy[i];
                               }
                             });
                           });
  dispatch(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto as = a.data<S>(), bs = b.data<S>();
    auto ys = out.data<S>();
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = make_result("sub", a.shape(), a.dtype(), {a, b},
                           [a, b](const TensorImpl& o) {
                             dispatch(a.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gy = out_grad<S>(o);
                               auto ga = grad_if<S>(a);
                               for (std::size_t i = 0; i < ga.size(); ++i)
                                 ga[i] += gy[i];
                               auto gb = grad_if<S>(b);
                               for (std::size_t i = 0; i < gb.size(); ++i)
                                 gb[i] -= gy[i];
                             });
                           });
  dispatch(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto as = a.data<S>(), bs = b.data<S>();
    auto ys = out.data<S>();
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] - bs[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = make_result("mul", a.shape(), a.dtype(), {a, b},
                           [a, b](const TensorImpl& o) {
                             dispatch(a.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gy = out_grad<S>(o);
                               auto as = a.data<S>(), bs = b.data<S>();
                               auto ga = grad_if<S>(a);
                               for (std::size_t i = 0; i < ga.size(); ++i)
                                 ga[i] += gy[i] * bs[i];
                               auto gb = grad_if<S>(b);
                               for (std::size_t i = 0; i < gb.size(); ++i)
                                 gb[i] += gy[i] * as[i];
                             });
                           });
  dispatch(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto as = a.data<S>(), bs = b.data<S>();
    auto ys = out.data<S>();
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      "add_scalar", x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(
      "mul_scalar", x, [c](double v) { return v * c; },
      [c](double, double) { return c; });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi))
    fail(ErrorKind::Domain, "clamp: lo must not exceed hi");
  return unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  Tensor out = make_result("sum", {}, x.dtype(), {x}, [x](const TensorImpl& o) {
    dispatch(x.dtype(), [&](auto tag) {
      using S = decltype(tag);
      const S gy = out_grad<S>(o)[0];
      for (auto& g : grad_if<S>(x)) g += gy;
    });
  });
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    double acc = 0.0;
    for (S v : x.data<S>()) acc += static_cast<double>(v);
    out.data<S>()[0] = static_cast<S>(acc);
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) fail(ErrorKind::Shape, "mean of an empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel())
    fail(ErrorKind::Shape, "reshape: cannot view " + shape_str(x.shape()) +
                               " as " + shape_str(shape));
  Tensor out = make_result("reshape", shape, x.dtype(), {x},
                           [x](const TensorImpl& o) {
                             dispatch(x.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gx = grad_if<S>(x);
                               auto gy = out_grad<S>(o);
                               for (std::size_t i = 0; i < gx.size(); ++i)
                                 gx[i] += gy[i];
                             });
                           });
  out.storage() = x.storage();
  return out;
}

namespace {

// For each flat output index of the permuted tensor, the flat input index.
std::vector<std::int64_t> permutation_map(const Shape& in_shape,
                                          const std::vector<int>& dims) {
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(dims.size());
  std::vector<std::int64_t> src_strides(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    out_shape[i] = in_shape[dims[i]];
    src_strides[i] = in_strides[dims[i]];
  }
  const std::int64_t n = numel(out_shape);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> index(dims.size(), 0);
  std::int64_t src = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    map[k] = src;
    for (int d = static_cast<int>(dims.size()) - 1; d >= 0; --d) {
      if (++index[d] < out_shape[d]) {
        src += src_strides[d];
        break;
      }
      src -= src_strides[d] * (out_shape[d] - 1);
      index[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  std::vector<int> sorted = dims;
  std::sort(sorted.begin(), sorted.end());
  bool valid = dims.size() == x.rank();
  for (std::size_t i = 0; valid && i < sorted.size(); ++i)
    valid = sorted[i] == static_cast<int>(i);
  if (!valid)
    fail(ErrorKind::Shape, "permute: invalid axis order for shape " +
                               shape_str(x.shape()));
  Shape out_shape(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) out_shape[i] = x.dim(dims[i]);
  auto map = std::make_shared<std::vector<std::int64_t>>(
      permutation_map(x.shape(), dims));
  Tensor out = make_result("permute", out_shape, x.dtype(), {x},
                           [x, map](const TensorImpl& o) {
                             dispatch(x.dtype(), [&](auto tag) {
                               using S = decltype(tag);
                               auto gx = grad_if<S>(x);
                               auto gy = out_grad<S>(o);
                               for (std::size_t k = 0; k < gy.size(); ++k)
                                 gx[(*map)[k]] += gy[k];
                             });
                           });
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = x.data<S>();
    auto ys = out.data<S>();
    for (std::size_t k = 0; k < ys.size(); ++k) ys[k] = xs[(*map)[k]];
  });
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) fail(ErrorKind::Shape, "concat of zero tensors");
  const Tensor& first = parts.front();
  if (axis < 0 || axis >= static_cast<int>(first.rank()))
    fail(ErrorKind::Shape, "concat: axis out of range for " +
                               shape_str(first.shape()));
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_dtype("concat", first, p);
    bool ok = p.rank() == first.rank();
    for (std::size_t d = 0; ok && d < p.rank(); ++d)
      ok = static_cast<int>(d) == axis || p.dim(d) == first.dim(d);
    if (!ok)
      fail(ErrorKind::Shape, "concat: incompatible shapes " +
                                 shape_str(first.shape()) + " and " +
                                 shape_str(p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
  const std::int64_t out_row = out_shape[axis] * inner;

  std::vector<Tensor> inputs(parts.begin(), parts.end());
  Tensor out = make_result(
      "concat", out_shape, first.dtype(), inputs,
      [inputs, axis, outer, inner, out_row](const TensorImpl& o) {
        dispatch(inputs.front().dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gy = out_grad<S>(o);
          std::int64_t offset = 0;
          for (const auto& p : inputs) {
            const std::int64_t row = p.dim(axis) * inner;
            auto gp = grad_if<S>(p);
            if (!gp.empty())
              for (std::int64_t r = 0; r < outer; ++r)
                for (std::int64_t i = 0; i < row; ++i)
                  gp[r * row + i] += gy[r * out_row + offset + i];
            offset += row;
          }
        });
      });
  dispatch(first.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto ys = out.data<S>();
    std::int64_t offset = 0;
    for (const auto& p : inputs) {
      const std::int64_t row = p.dim(axis) * inner;
      auto ps = p.data<S>();
      for (std::int64_t r = 0; r < outer; ++r)
        std::copy_n(ps.begin() + r * row, row,
                    ys.begin() + r * out_row + offset);
      offset += row;
    }
  });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3, "lhs");
  require_rank("bmm", b, 3, "rhs");
  require_same_dtype("bmm", a, b);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    fail(ErrorKind::Shape, "bmm: incompatible shapes " + shape_str(a.shape()) +
                               " and " + shape_str(b.shape()));
  const std::int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor out = make_result(
      "bmm", {B, M, N}, a.dtype(), {a, b},
      [a, b, B, M, K, N](const TensorImpl& o) {
        dispatch(a.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gy = out_grad<S>(o);
          auto ga = grad_if<S>(a);
          auto gb = grad_if<S>(b);
          auto as = a.data<S>(), bs = b.data<S>();
          for (std::int64_t i = 0; i < B; ++i) {
            CMapR<S> dC(gy.data() + i * M * N, M, N);
            if (!ga.empty())
              MapR<S>(ga.data() + i * M * K, M, K).noalias() +=
                  dC * CMapR<S>(bs.data() + i * K * N, K, N).transpose();
            if (!gb.empty())
              MapR<S>(gb.data() + i * K * N, K, N).noalias() +=
                  CMapR<S>(as.data() + i * M * K, M, K).transpose() * dC;
          }
        });
      });
  dispatch(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto as = a.data<S>(), bs = b.data<S>();
    auto ys = out.data<S>();
    for (std::int64_t i = 0; i < B; ++i)
      MapR<S>(ys.data() + i * M * N, M, N).noalias() =
          CMapR<S>(as.data() + i * M * K, M, K) *
          CMapR<S>(bs.data() + i * K * N, K, N);
  });
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) fail(ErrorKind::Shape, "softmax of a 0-d tensor");
  const std::int64_t width = x.shape().back();
  const std::int64_t rows = width == 0 ? 0 : x.numel() / width;
  Tensor out = make_result(
      "softmax", x.shape(), x.dtype(), {x}, [x, rows, width](const TensorImpl& o) {
        dispatch(x.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gx = grad_if<S>(x);
          auto gy = out_grad<S>(o);
          auto ys = out_data<S>(o);
          for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * width;
            double dot = 0.0;
            for (std::int64_t j = 0; j < width; ++j)
              dot += static_cast<double>(gy[base + j]) * ys[base + j];
            for (std::int64_t j = 0; j < width; ++j)
              gx[base + j] += static_cast<S>(ys[base + j] * (gy[base + j] - dot));
          }
        });
      });
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = x.data<S>();
    auto ys = out.data<S>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t base = r * width;
      const S peak = *std::max_element(xs.begin() + base, xs.begin() + base + width);
      double total = 0.0;
      for (std::int64_t j = 0; j < width; ++j) {
        const double e = std::exp(static_cast<double>(xs[base + j] - peak));
        ys[base + j] = static_cast<S>(e);
        total += e;
      }
      for (std::int64_t j = 0; j < width; ++j)
        ys[base + j] = static_cast<S>(ys[base + j] / total);
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", weight, 2, "weight");
  require_same_dtype("linear", x, weight);
  if (x.rank() == 0 || x.shape().back() != weight.dim(1))
    fail(ErrorKind::Shape, "linear: input " + shape_str(x.shape()) +
                               " does not match weight " +
                               shape_str(weight.shape()));
  const std::int64_t d_out = weight.dim(0), d_in = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out))
    fail(ErrorKind::Shape, "linear: bias " + shape_str(bias.shape()) +
                               " does not match weight " +
                               shape_str(weight.shape()));
  const std::int64_t rows = x.numel() / d_in;
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  Tensor out = make_result(
      "linear", out_shape, x.dtype(), inputs,
      [x, weight, bias, rows, d_in, d_out](const TensorImpl& o) {
        dispatch(x.dtype(), [&](auto tag) {
          using S = decltype(tag);
          CMapR<S> dY(out_grad<S>(o).data(), rows, d_out);
          if (auto gx = grad_if<S>(x); !gx.empty())
            MapR<S>(gx.data(), rows, d_in).noalias() +=
                dY * CMapR<S>(weight.data<S>().data(), d_out, d_in);
          if (auto gw = grad_if<S>(weight); !gw.empty())
            MapR<S>(gw.data(), d_out, d_in).noalias() +=
                dY.transpose() * CMapR<S>(x.data<S>().data(), rows, d_in);
          if (bias.defined())
            if (auto gb = grad_if<S>(bias); !gb.empty())
              Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb.data(), d_out) +=
                  dY.colwise().sum();
        });
      });
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    MapR<S> Y(out.data<S>().data(), rows, d_out);
    Y.noalias() = CMapR<S>(x.data<S>().data(), rows, d_in) *
                  CMapR<S>(weight.data<S>().data(), d_out, d_in).transpose();
    if (bias.defined())
      Y.rowwise() +=
          Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
              bias.data<S>().data(), d_out);
  });
  return out;
}

namespace {

struct ConvGeometry {
  std::int64_t channels, height, width;
  std::int64_t kh, kw;
  std::int64_t out_h, out_w;
  int stride, padding, dilation;

  std::int64_t col_rows() const { return channels * kh * kw; }
  std::int64_t col_cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride - padding + offset
// falls inside [0, width).
inline void valid_columns(const ConvGeometry& g, std::int64_t offset, std::int64_t& lo,
                          std::int64_t& hi) {
  const std::int64_t shift = offset - g.padding;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  hi = g.width - shift <= 0 ? 0 : (g.width - shift + g.stride - 1) / g.stride;
  hi = std::min(hi, g.out_w);
  lo = std::min(lo, hi);
}

template <class S>
void im2col(const S* image, const ConvGeometry& g, S* col) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        S* row = col + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        std::int64_t lo, hi;
        valid_columns(g, j * g.dilation, lo, hi);
        const std::int64_t shift = j * g.dilation - g.padding;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.stride - g.padding + i * g.dilation;
          S* dst = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill_n(dst, g.out_w, S(0));
            continue;
          }
          const S* src = image + (c * g.height + y) * g.width + shift;
          std::fill_n(dst, lo, S(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.out_w, S(0));
        }
      }
}

template <class S>
void col2im(const S* col, const ConvGeometry& g, S* image) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const S* row = col + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        std::int64_t lo, hi;
        valid_columns(g, j * g.dilation, lo, hi);
        const std::int64_t shift = j * g.dilation - g.padding;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.stride - g.padding + i * g.dilation;
          if (y < 0 || y >= g.height) continue;
          const S* src = row + oy * g.out_w;
          S* dst = image + (c * g.height + y) * g.width + shift;
          for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int dilation) {
  require_rank("conv2d", input, 4, "input");
  require_rank("conv2d", weight, 4, "weight");
  require_same_dtype("conv2d", input, weight);
  if (input.dim(1) != weight.dim(1))
    fail(ErrorKind::Shape, "conv2d: input " + shape_str(input.shape()) +
                               " has " + std::to_string(input.dim(1)) +
                               " channels but weight " +
                               shape_str(weight.shape()) + " expects " +
                               std::to_string(weight.dim(1)));
  if (stride < 1 || padding < 0 || dilation < 1)
    fail(ErrorKind::Domain, "conv2d: stride and dilation must be >= 1, padding >= 0");
  ConvGeometry g{};
  g.channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.padding = padding;
  g.dilation = dilation;
  const std::int64_t span_h = dilation * (g.kh - 1) + 1;
  const std::int64_t span_w = dilation * (g.kw - 1) + 1;
  if (g.height + 2 * padding < span_h || g.width + 2 * padding < span_w)
    fail(ErrorKind::Shape, "conv2d: kernel " + shape_str(weight.shape()) +
                               " larger than padded input " +
                               shape_str(input.shape()));
  g.out_h = (g.height + 2 * padding - span_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - span_w) / stride + 1;
  const std::int64_t batch = input.dim(0), c_out = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out))
    fail(ErrorKind::Shape, "conv2d: bias " + shape_str(bias.shape()) +
                               " does not match weight " +
                               shape_str(weight.shape()));

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  Tensor out = make_result(
      "conv2d", {batch, c_out, g.out_h, g.out_w}, input.dtype(), inputs,
      [input, weight, bias, g, batch, c_out](const TensorImpl& o) {
        dispatch(input.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gy = out_grad<S>(o);
          auto gx = grad_if<S>(input);
          auto gw = grad_if<S>(weight);
          std::span<S> gb;
          if (bias.defined()) gb = grad_if<S>(bias);
          const std::int64_t rows = g.col_rows(), cols = g.col_cols();
          const std::int64_t in_size = g.channels * g.height * g.width;
          CMapR<S> W(weight.data<S>().data(), c_out, rows);
          AlignedVector<S> col(static_cast<std::size_t>(rows * cols));
          for (std::int64_t n = 0; n < batch; ++n) {
            CMapR<S> dY(gy.data() + n * c_out * cols, c_out, cols);
            if (!gb.empty())
              Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(gb.data(), c_out) +=
                  dY.rowwise().sum();
            if (!gw.empty()) {
              im2col(input.data<S>().data() + n * in_size, g, col.data());
              MapR<S>(gw.data(), c_out, rows).noalias() +=
                  dY * CMapR<S>(col.data(), rows, cols).transpose();
            }
            if (!gx.empty()) {
              MapR<S>(col.data(), rows, cols).noalias() = W.transpose() * dY;
              col2im(col.data(), g, gx.data() + n * in_size);
            }
          }
        });
      });
  dispatch(input.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const std::int64_t rows = g.col_rows(), cols = g.col_cols();
    const std::int64_t in_size = g.channels * g.height * g.width;
    CMapR<S> W(weight.data<S>().data(), c_out, rows);
    AlignedVector<S> col(static_cast<std::size_t>(rows * cols));
    auto ys = out.data<S>();
    for (std::int64_t n = 0; n < batch; ++n) {
      im2col(input.data<S>().data() + n * in_size, g, col.data());
      MapR<S> Y(ys.data() + n * c_out * cols, c_out, cols);
      Y.noalias() = W * CMapR<S>(col.data(), rows, cols);
      if (bias.defined())
        Y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
            bias.data<S>().data(), c_out);
    }
  });
  return out;
}

Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  if (input.rank() < 2)
    fail(ErrorKind::Shape, "group_norm: input must be [N,C,...], got " +
                               shape_str(input.shape()));
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  if (groups < 1 || channels % groups != 0)
    fail(ErrorKind::Shape, "group_norm: " + std::to_string(channels) +
                               " channels not divisible into " +
                               std::to_string(groups) + " groups");
  if (!(eps > 0)) fail(ErrorKind::Domain, "group_norm: eps must be positive");
  for (const Tensor* t : {&gamma, &beta})
    if (t->rank() != 1 || t->dim(0) != channels)
      fail(ErrorKind::Shape, "group_norm: affine parameter " +
                                 shape_str(t->shape()) + " does not match " +
                                 std::to_string(channels) + " channels");
  require_same_dtype("group_norm", input, gamma);
  require_same_dtype("group_norm", input, beta);
  const std::int64_t spatial = input.numel() / (batch * channels);
  const std::int64_t per_group = channels / groups;
  const std::int64_t group_size = per_group * spatial;
  const std::int64_t stat_count = batch * groups;

  // Per (sample, group) mean and 1/sqrt(var + eps), shared with backward.
  auto mean_rstd = std::make_shared<std::vector<double>>(2 * stat_count);
  dispatch(input.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = input.data<S>();
    for (std::int64_t k = 0; k < stat_count; ++k) {
      const S* base = xs.data() + k * group_size;
      double m = 0.0;
      for (std::int64_t i = 0; i < group_size; ++i) m += base[i];
      m /= static_cast<double>(group_size);
      double v = 0.0;
      for (std::int64_t i = 0; i < group_size; ++i) {
        const double d = base[i] - m;
        v += d * d;
      }
      v /= static_cast<double>(group_size);
      (*mean_rstd)[2 * k] = m;
      (*mean_rstd)[2 * k + 1] = 1.0 / std::sqrt(v + eps);
    }
  });

  Tensor out = make_result(
      "group_norm", input.shape(), input.dtype(), {input, gamma, beta},
      [=](const TensorImpl& o) {
        dispatch(input.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gy = out_grad<S>(o);
          auto xs = input.data<S>();
          auto gs = gamma.data<S>();
          auto gx = grad_if<S>(input);
          auto ggamma = grad_if<S>(gamma);
          auto gbeta = grad_if<S>(beta);
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t gi = 0; gi < groups; ++gi) {
              const std::int64_t k = n * groups + gi;
              const double m = (*mean_rstd)[2 * k];
              const double rstd = (*mean_rstd)[2 * k + 1];
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::int64_t c = gi * per_group; c < (gi + 1) * per_group; ++c) {
                const std::int64_t base = (n * channels + c) * spatial;
                double sg = 0.0, sgx = 0.0;
                for (std::int64_t i = 0; i < spatial; ++i) {
                  const double xhat = (xs[base + i] - m) * rstd;
                  const double dy = gy[base + i];
                  sg += dy;
                  sgx += dy * xhat;
                }
                if (!ggamma.empty()) ggamma[c] += static_cast<S>(sgx);
                if (!gbeta.empty()) gbeta[c] += static_cast<S>(sg);
                sum_dxhat += sg * gs[c];
                sum_dxhat_xhat += sgx * gs[c];
              }
              if (gx.empty()) continue;
              const double inv = 1.0 / static_cast<double>(group_size);
              for (std::int64_t c = gi * per_group; c < (gi + 1) * per_group; ++c) {
                const std::int64_t base = (n * channels + c) * spatial;
                for (std::int64_t i = 0; i < spatial; ++i) {
                  const double xhat = (xs[base + i] - m) * rstd;
                  const double dxhat = gy[base + i] * static_cast<double>(gs[c]);
                  gx[base + i] += static_cast<S>(
                      rstd * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat));
                }
              }
            }
        });
      });
  dispatch(input.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = input.data<S>();
    auto ys = out.data<S>();
    auto gs = gamma.data<S>(), bs = beta.data<S>();
    for (std::int64_t n = 0; n < batch; ++n)
      for (std::int64_t c = 0; c < channels; ++c) {
        const std::int64_t k = n * groups + c / per_group;
        const double m = (*mean_rstd)[2 * k];
        const double rstd = (*mean_rstd)[2 * k + 1];
        const std::int64_t base = (n * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i)
          ys[base + i] = static_cast<S>((xs[base + i] - m) * rstd * gs[c] + bs[c]);
      }
  });
  return out;
}

Tensor nearest_upsample(const Tensor& input, std::int64_t out_h,
                        std::int64_t out_w) {
  require_rank("nearest_upsample", input, 4, "input");
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t h = input.dim(2), w = input.dim(3);
  if (h < 1 || w < 1 || out_h < h || out_w < w || out_h % h != 0 ||
      out_w % w != 0)
    fail(ErrorKind::Shape, "nearest_upsample: " + std::to_string(h) + "x" +
                               std::to_string(w) + " -> " +
                               std::to_string(out_h) + "x" +
                               std::to_string(out_w) +
                               " is not an integer replication factor");
  const std::int64_t fy = out_h / h, fx = out_w / w;
  const std::int64_t planes = batch * channels;
  Tensor out = make_result(
      "nearest_upsample", {batch, channels, out_h, out_w}, input.dtype(),
      {input}, [=](const TensorImpl& o) {
        dispatch(input.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gx = grad_if<S>(input);
          auto gy = out_grad<S>(o);
          for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t y = 0; y < out_h; ++y)
              for (std::int64_t x = 0; x < out_w; ++x)
                gx[(p * h + y / fy) * w + x / fx] +=
                    gy[(p * out_h + y) * out_w + x];
        });
      });
  dispatch(input.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = input.data<S>();
    auto ys = out.data<S>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < out_h; ++y)
        for (std::int64_t x = 0; x < out_w; ++x)
          ys[(p * out_h + y) * out_w + x] = xs[(p * h + y / fy) * w + x / fx];
  });
  return out;
}

Tensor spatial_mean(const Tensor& input) {
  require_rank("spatial_mean", input, 4, "input");
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t area = input.dim(2) * input.dim(3);
  if (area == 0) fail(ErrorKind::Shape, "spatial_mean over an empty plane");
  Tensor out = make_result(
      "spatial_mean", {input.dim(0), input.dim(1)}, input.dtype(), {input},
      [=](const TensorImpl& o) {
        dispatch(input.dtype(), [&](auto tag) {
          using S = decltype(tag);
          auto gx = grad_if<S>(input);
          auto gy = out_grad<S>(o);
          for (std::int64_t p = 0; p < planes; ++p) {
            const S share = gy[p] / static_cast<S>(area);
            for (std::int64_t i = 0; i < area; ++i) gx[p * area + i] += share;
          }
        });
      });
  dispatch(input.dtype(), [&](auto tag) {
    using S = decltype(tag);
    auto xs = input.data<S>();
    auto ys = out.data<S>();
    for (std::int64_t p = 0; p < planes; ++p) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < area; ++i) acc += xs[p * area + i];
      ys[p] = static_cast<S>(acc / static_cast<double>(area));
    }
  });
  return out;
}

Tensor self_attention(const Tensor& tokens, int heads,
                      const AttentionWeights& w) {
  require_rank("self_attention", tokens, 3, "tokens");
  const std::int64_t n = tokens.dim(0), len = tokens.dim(1), d = tokens.dim(2);
  if (heads < 1 || d % heads != 0)
    fail(ErrorKind::Shape, "self_attention: model width " + std::to_string(d) +
                               " not divisible by " + std::to_string(heads) +
                               " heads");
  const std::int64_t dh = d / heads;

  // [N,L,D] -> [N*H, L, dh]
  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {n, len, heads, dh}), {0, 2, 1, 3}),
                   {n * heads, len, dh});
  };
  Tensor q = split(linear(tokens, w.q_weight, w.q_bias));
  Tensor k = split(linear(tokens, w.k_weight, w.k_bias));
  Tensor v = split(linear(tokens, w.v_weight, w.v_bias));
  Tensor scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor context = bmm(softmax(scores), v);
  Tensor merged = reshape(
      permute(reshape(context, {n, heads, len, dh}), {0, 2, 1, 3}), {n, len, d});
  return add(tokens, linear(merged, w.out_weight, w.out_bias));
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  return mean(square(sub(prediction, target)));
}

Tensor l1_loss(const Tensor& prediction, const Tensor& target) {
  return mean(abs(sub(prediction, target)));
}

}  // namespace refprior
