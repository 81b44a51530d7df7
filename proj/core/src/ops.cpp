#include "detkit/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "detkit/errors.hpp"

namespace detkit::ops {

using detail::make_result;
using detail::Node;
using detail::notify_op;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(a.shape()));
  }
}

Tensor* grad_of(Node& n, size_t i) {
  auto& in = n.inputs[i];
  return in->requires_grad ? &in->grad_ref() : nullptr;
}

template <typename F, typename G>
Var unary(const Var& a, const char* kind, F forward, G derivative) {
  notify_op(kind, 0.0);
  Tensor out(a.shape());
  const auto& x = a.value();
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = forward(x[i]);
  return make_result(std::move(out), {a}, [derivative](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      const auto& x = n.inputs[0]->value;
      for (int64_t i = 0; i < x.numel(); ++i) (*g)[i] += n.grad[i] * derivative(x[i], n.value[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  notify_op("add", 0.0);
  Tensor out = a.value();
  out.add_(b.value());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (size_t i = 0; i < 2; ++i)
      if (Tensor* g = grad_of(n, i)) g->add_(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  notify_op("add", 0.0);
  Tensor out = a.value();
  out.add_(b.value(), -1.0);
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) g->add_(n.grad);
    if (Tensor* g = grad_of(n, 1)) g->add_(n.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  notify_op("mul", 0.0);
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (Tensor* g = grad_of(n, 0))
      for (int64_t i = 0; i < av.numel(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (Tensor* g = grad_of(n, 1))
      for (int64_t i = 0; i < av.numel(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  notify_op("mul", 0.0);
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& n) {
    if (Tensor* g = grad_of(n, 0)) g->add_(n.grad, s);
  });
}

Var add_scalar(const Var& a, double s) {
  notify_op("add", 0.0);
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  return make_result(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) g->add_(n.grad);
  });
}

Var add_rowwise(const Var& a, const Var& b) {
  require_rank(a, 2, "add_rowwise");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  if (b.numel() != cols) throw ShapeMismatch("add_rowwise: bias of " + shape_str(b.shape()));
  notify_op("add", 0.0);
  Tensor out = a.value();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[r * cols + c] += b.value()[c];
  return make_result(std::move(out), {a, b}, [rows, cols](Node& n) {
    if (Tensor* g = grad_of(n, 0)) g->add_(n.grad);
    if (Tensor* g = grad_of(n, 1))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) (*g)[c] += n.grad[r * cols + c];
  });
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var inverse_sigmoid(const Var& a, double eps) {
  return unary(
      a, "inverse_sigmoid",
      [eps](double x) {
        x = std::clamp(x, 0.0, 1.0);
        return std::log(std::max(x, eps) / std::max(1.0 - x, eps));
      },
      [eps](double x, double) {
        if (x <= eps || x >= 1.0 - eps) return 0.0;
        return 1.0 / x + 1.0 / (1.0 - x);
      });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  notify_op("matmul", static_cast<double>(m * k * n));
  Tensor out({m, n});
  MapMat(out.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, n);
  return make_result(std::move(out), {a, b}, [m, k, n](Node& node) {
    CMapMat dy(node.grad.data(), m, n);
    if (Tensor* g = grad_of(node, 0))
      MapMat(g->data(), m, k).noalias() += dy * CMapMat(node.inputs[1]->value.data(), k, n).transpose();
    if (Tensor* g = grad_of(node, 1))
      MapMat(g->data(), k, n).noalias() += CMapMat(node.inputs[0]->value.data(), m, k).transpose() * dy;
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int64_t rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeMismatch("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const bool has_bias = bias.numel() > 0;
  if (has_bias && bias.numel() != out_dim) throw ShapeMismatch("linear: bias " + shape_str(bias.shape()));
  notify_op("linear", static_cast<double>(rows * in * out_dim));
  Tensor out({rows, out_dim});
  MapMat y(out.data(), rows, out_dim);
  y.noalias() = CMapMat(x.value().data(), rows, in) * CMapMat(weight.value().data(), out_dim, in).transpose();
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), out_dim);
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [rows, in, out_dim, has_bias](Node& n) {
    CMapMat dy(n.grad.data(), rows, out_dim);
    if (Tensor* g = grad_of(n, 0))
      MapMat(g->data(), rows, in).noalias() += dy * CMapMat(n.inputs[1]->value.data(), out_dim, in);
    if (Tensor* g = grad_of(n, 1))
      MapMat(g->data(), out_dim, in).noalias() += dy.transpose() * CMapMat(n.inputs[0]->value.data(), rows, in);
    if (has_bias)
      if (Tensor* g = grad_of(n, 2))
        Eigen::Map<Eigen::RowVectorXd>(g->data(), out_dim) += dy.colwise().sum();
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const int64_t r = a.dim(0), c = a.dim(1);
  notify_op("reshape", 0.0);
  Tensor out({c, r});
  MapMat(out.data(), c, r) = CMapMat(a.value().data(), r, c).transpose();
  return make_result(std::move(out), {a}, [r, c](Node& n) {
    if (Tensor* g = grad_of(n, 0)) MapMat(g->data(), r, c) += CMapMat(n.grad.data(), c, r).transpose();
  });
}

Var reshape(const Var& a, Shape shape) {
  notify_op("reshape", 0.0);
  return make_result(a.value().reshaped(std::move(shape)), {a}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) g->add_(n.grad);
  });
}

Var slice_cols(const Var& a, int64_t start, int64_t len) {
  require_rank(a, 2, "slice_cols");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  if (start < 0 || len < 0 || start + len > cols) throw ShapeMismatch("slice_cols out of range");
  notify_op("reshape", 0.0);
  Tensor out({rows, len});
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data() + r * cols + start, len, out.data() + r * len);
  return make_result(std::move(out), {a}, [rows, cols, start, len](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < len; ++c) (*g)[r * cols + start + c] += n.grad[r * len + c];
  });
}

Var slice_rows(const Var& a, int64_t start, int64_t len) {
  require_rank(a, 2, "slice_rows");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  if (start < 0 || len < 0 || start + len > rows) throw ShapeMismatch("slice_rows out of range");
  notify_op("reshape", 0.0);
  Tensor out({len, cols});
  std::copy_n(a.value().data() + start * cols, len * cols, out.data());
  return make_result(std::move(out), {a}, [start, len, cols](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (int64_t i = 0; i < len * cols; ++i) (*g)[start * cols + i] += n.grad[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  const int64_t rows = parts[0].dim(0);
  std::vector<int64_t> offsets;
  int64_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw ShapeMismatch("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.dim(1);
  }
  notify_op("reshape", 0.0);
  Tensor out({rows, total});
  for (size_t i = 0; i < parts.size(); ++i) {
    const int64_t w = parts[i].dim(1);
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(parts[i].value().data() + r * w, w, out.data() + r * total + offsets[i]);
  }
  return make_result(std::move(out), parts, [rows, total, offsets](Node& n) {
    for (size_t i = 0; i < offsets.size(); ++i) {
      if (Tensor* g = grad_of(n, i)) {
        const int64_t w = n.inputs[i]->value.dim(1);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < w; ++c) (*g)[r * w + c] += n.grad[r * total + offsets[i] + c];
      }
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  const int64_t cols = parts[0].dim(1);
  std::vector<int64_t> offsets;
  int64_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) throw ShapeMismatch("concat_rows: column counts differ");
    offsets.push_back(total);
    total += p.dim(0);
  }
  notify_op("reshape", 0.0);
  Tensor out({total, cols});
  for (size_t i = 0; i < parts.size(); ++i)
    std::copy_n(parts[i].value().data(), parts[i].numel(), out.data() + offsets[i] * cols);
  return make_result(std::move(out), parts, [cols, offsets](Node& n) {
    for (size_t i = 0; i < offsets.size(); ++i)
      if (Tensor* g = grad_of(n, i))
        for (int64_t j = 0; j < g->numel(); ++j) (*g)[j] += n.grad[offsets[i] * cols + j];
  });
}

Var gather_rows(const Var& a, const std::vector<int64_t>& index) {
  require_rank(a, 2, "gather_rows");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  const auto count = static_cast<int64_t>(index.size());
  notify_op("reshape", 0.0);
  Tensor out({count, cols});
  for (int64_t i = 0; i < count; ++i) {
    if (index[i] < 0 || index[i] >= rows) throw ShapeMismatch("gather_rows index out of range");
    std::copy_n(a.value().data() + index[i] * cols, cols, out.data() + i * cols);
  }
  return make_result(std::move(out), {a}, [index, cols](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (size_t i = 0; i < index.size(); ++i)
        for (int64_t c = 0; c < cols; ++c)
          (*g)[index[i] * cols + c] += n.grad[static_cast<int64_t>(i) * cols + c];
  });
}

Var zero_rows(const Var& a, const std::vector<uint8_t>& mask) {
  require_rank(a, 2, "zero_rows");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  if (static_cast<int64_t>(mask.size()) != rows) throw ShapeMismatch("zero_rows mask length");
  notify_op("mul", 0.0);
  Tensor out = a.value();
  for (int64_t r = 0; r < rows; ++r)
    if (mask[r]) std::fill_n(out.data() + r * cols, cols, 0.0);
  return make_result(std::move(out), {a}, [mask, cols](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (size_t r = 0; r < mask.size(); ++r)
        if (!mask[r])
          for (int64_t c = 0; c < cols; ++c) (*g)[static_cast<int64_t>(r) * cols + c] += n.grad[r * cols + c];
  });
}

Var sum(const Var& a) {
  notify_op("reduce", 0.0);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (auto& v : g->values()) v += n.grad[0];
  });
}

Var mean(const Var& a) {
  const auto count = static_cast<double>(std::max<int64_t>(a.numel(), 1));
  return scale(sum(a), 1.0 / count);
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  notify_op("softmax", 0.0);
  Tensor out({rows, cols});
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.value().data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (int64_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = n.value.data() + r * cols;
        const double* dy = n.grad.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
        for (int64_t c = 0; c < cols; ++c) (*g)[r * cols + c] += y[c] * (dy[c] - dot);
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  if (gamma.numel() != cols || beta.numel() != cols) throw ShapeMismatch("layer_norm affine size");
  notify_op("norm", 0.0);
  Tensor out({rows, cols});
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * cols;
    double mu = 0.0;
    for (int64_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const auto& gam = n.inputs[1]->value;
                       Tensor* gx = grad_of(n, 0);
                       Tensor* gg = grad_of(n, 1);
                       Tensor* gb = grad_of(n, 2);
                       for (int64_t r = 0; r < rows; ++r) {
                         double sum_d = 0.0, sum_dh = 0.0;
                         for (int64_t c = 0; c < cols; ++c) {
                           const double dy = n.grad[r * cols + c];
                           const double h = xhat[r * cols + c];
                           if (gg) (*gg)[c] += dy * h;
                           if (gb) (*gb)[c] += dy;
                           const double dh = dy * gam[c];
                           sum_d += dh;
                           sum_dh += dh * h;
                         }
                         if (!gx) continue;
                         const double inv_n = 1.0 / static_cast<double>(cols);
                         for (int64_t c = 0; c < cols; ++c) {
                           const double dh = n.grad[r * cols + c] * gam[c];
                           (*gx)[r * cols + c] +=
                               inv_std[r] * (dh - inv_n * sum_d - xhat[r * cols + c] * inv_n * sum_dh);
                         }
                       }
                     });
}

namespace {

// cols[(c*k + ky)*k + kx][oy*ow + ox] = x[c][oy*s - p + ky][ox*s - p + kx]
void im2col(const double* x, int64_t channels, int64_t h, int64_t w, int k, int stride, int pad, int64_t oh,
            int64_t ow, double* cols) {
  for (int64_t c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(c * h + iy) * w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, int64_t channels, int64_t h, int64_t w, int k, int stride, int pad, int64_t oh,
            int64_t ow, double* x) {
  for (int64_t c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) x[(c * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t o = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != c || weight.dim(3) != k) {
    throw ShapeMismatch("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const int64_t oh = (h + 2 * padding - k) / stride + 1;
  const int64_t ow = (w + 2 * padding - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeMismatch("conv2d: input too small " + shape_str(x.shape()));
  const bool has_bias = bias.numel() > 0;
  const int64_t patch = c * k * k, pixels = oh * ow;
  notify_op("conv2d", static_cast<double>(o * patch * pixels));

  Tensor cols({patch, pixels});
  im2col(x.value().data(), c, h, w, k, stride, padding, oh, ow, cols.data());
  Tensor out({o, oh, ow});
  MapMat y(out.data(), o, pixels);
  y.noalias() = CMapMat(weight.value().data(), o, patch) * CMapMat(cols.data(), patch, pixels);
  if (has_bias) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), o);

  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      std::move(out), std::move(inputs),
      [=, cols = std::move(cols)](Node& n) {
        CMapMat dy(n.grad.data(), o, pixels);
        if (Tensor* g = grad_of(n, 1))
          MapMat(g->data(), o, patch).noalias() += dy * CMapMat(cols.data(), patch, pixels).transpose();
        if (has_bias)
          if (Tensor* g = grad_of(n, 2)) Eigen::Map<Eigen::VectorXd>(g->data(), o) += dy.rowwise().sum();
        if (Tensor* g = grad_of(n, 0)) {
          RowMat dcols = CMapMat(n.inputs[1]->value.data(), o, patch).transpose() * dy;
          col2im(dcols.data(), c, h, w, k, stride, padding, oh, ow, g->data());
        }
      });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
                 bool training, double momentum, double eps) {
  require_rank(x, 3, "batch_norm2d");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c) throw ShapeMismatch("batch_norm2d affine size");
  notify_op("norm", 0.0);
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* xr = x.value().data() + ch * hw;
    double mu, var;
    if (training) {
      mu = 0.0;
      for (int64_t i = 0; i < hw; ++i) mu += xr[i];
      mu /= static_cast<double>(hw);
      var = 0.0;
      for (int64_t i = 0; i < hw; ++i) var += (xr[i] - mu) * (xr[i] - mu);
      var /= static_cast<double>(hw);
      const double unbiased = hw > 1 ? var * static_cast<double>(hw) / static_cast<double>(hw - 1) : var;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = is;
    for (int64_t i = 0; i < hw; ++i) {
      const double h = (xr[i] - mu) * is;
      xhat[ch * hw + i] = h;
      out[ch * hw + i] = h * gamma.value()[ch] + beta.value()[ch];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [c, hw, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const auto& gam = n.inputs[1]->value;
                       Tensor* gx = grad_of(n, 0);
                       Tensor* gg = grad_of(n, 1);
                       Tensor* gb = grad_of(n, 2);
                       for (int64_t ch = 0; ch < c; ++ch) {
                         double sum_d = 0.0, sum_dh = 0.0;
                         for (int64_t i = 0; i < hw; ++i) {
                           const double dy = n.grad[ch * hw + i];
                           const double h = xhat[ch * hw + i];
                           if (gg) (*gg)[ch] += dy * h;
                           if (gb) (*gb)[ch] += dy;
                           sum_d += dy * gam[ch];
                           sum_dh += dy * gam[ch] * h;
                         }
                         if (!gx) continue;
                         const double inv_n = 1.0 / static_cast<double>(hw);
                         for (int64_t i = 0; i < hw; ++i) {
                           const double dh = n.grad[ch * hw + i] * gam[ch];
                           if (training) {
                             (*gx)[ch * hw + i] +=
                                 inv_std[ch] * (dh - inv_n * sum_d - xhat[ch * hw + i] * inv_n * sum_dh);
                           } else {
                             (*gx)[ch * hw + i] += inv_std[ch] * dh;
                           }
                         }
                       }
                     });
}

Var avg_pool2(const Var& x) {
  require_rank(x, 3, "avg_pool2");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeMismatch("avg_pool2: input too small " + shape_str(x.shape()));
  notify_op("pool", 0.0);
  Tensor out({c, oh, ow});
  const auto& xv = x.value();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) {
        const int64_t base = (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
      }
  return make_result(std::move(out), {x}, [c, h, w, oh, ow](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < oh; ++y)
          for (int64_t xx = 0; xx < ow; ++xx) {
            const double d = 0.25 * n.grad[(ch * oh + y) * ow + xx];
            const int64_t base = (ch * h + 2 * y) * w + 2 * xx;
            (*g)[base] += d;
            (*g)[base + 1] += d;
            (*g)[base + w] += d;
            (*g)[base + w + 1] += d;
          }
  });
}

Var chw_to_tokens(const Var& x) {
  require_rank(x, 3, "chw_to_tokens");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  return transpose(reshape(x, {c, hw}));
}

Var tokens_to_chw(const Var& tokens, int64_t height, int64_t width) {
  require_rank(tokens, 2, "tokens_to_chw");
  if (tokens.dim(0) != height * width) throw ShapeMismatch("tokens_to_chw: token count");
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, AttentionMasks masks) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const int64_t lq = q.dim(0), lk = k.dim(0);
  if (v.dim(0) != lk || q.dim(1) != k.dim(1) || heads <= 0 || q.dim(1) % heads || v.dim(1) % heads) {
    throw ShapeMismatch("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                        shape_str(v.shape()) + " heads " + std::to_string(heads));
  }
  if (masks.attn_mask && static_cast<int64_t>(masks.attn_mask->size()) != lq * lk)
    throw ShapeMismatch("attention: attn_mask size");
  if (masks.key_padding && static_cast<int64_t>(masks.key_padding->size()) != lk)
    throw ShapeMismatch("attention: key_padding size");
  const int64_t dq = q.dim(1) / heads, dv = v.dim(1) / heads;
  const int64_t qs = q.dim(1), vs = v.dim(1);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dq));
  notify_op("attention", static_cast<double>(heads * lq * lk * (dq + dv)));

  // blocked[i*lk + j]
  std::vector<uint8_t> blocked(static_cast<size_t>(lq * lk), 0);
  if (masks.attn_mask) blocked = *masks.attn_mask;
  if (masks.key_padding)
    for (int64_t i = 0; i < lq; ++i)
      for (int64_t j = 0; j < lk; ++j) blocked[i * lk + j] |= (*masks.key_padding)[j];

  Tensor probs({heads, lq, lk});
  Tensor out({lq, vs});
  for (int h = 0; h < heads; ++h) {
    StridedMap qh(q.value().data() + h * dq, lq, dq, Eigen::OuterStride<>(qs));
    StridedMap kh(k.value().data() + h * dq, lk, dq, Eigen::OuterStride<>(qs));
    StridedMap vh(v.value().data() + h * dv, lk, dv, Eigen::OuterStride<>(vs));
    MapMat p(probs.data() + h * lq * lk, lq, lk);
    p.noalias() = (qh * kh.transpose()) * sc;
    for (int64_t i = 0; i < lq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < lk; ++j)
        if (!blocked[i * lk + j]) mx = std::max(mx, p(i, j));
      if (!std::isfinite(mx)) {
        p.row(i).setZero();
        continue;
      }
      double z = 0.0;
      for (int64_t j = 0; j < lk; ++j) {
        const double e = blocked[i * lk + j] ? 0.0 : std::exp(p(i, j) - mx);
        p(i, j) = e;
        z += e;
      }
      p.row(i) /= z;
    }
    MutStridedMap(out.data() + h * dv, lq, dv, Eigen::OuterStride<>(vs)).noalias() = p * vh;
  }

  return make_result(
      std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node& n) {
        Tensor* gq = grad_of(n, 0);
        Tensor* gk = grad_of(n, 1);
        Tensor* gv = grad_of(n, 2);
        const auto& qv = n.inputs[0]->value;
        const auto& kv = n.inputs[1]->value;
        const auto& vv = n.inputs[2]->value;
        for (int h = 0; h < heads; ++h) {
          StridedMap dout(n.grad.data() + h * dv, lq, dv, Eigen::OuterStride<>(vs));
          CMapMat p(probs.data() + h * lq * lk, lq, lk);
          StridedMap vh(vv.data() + h * dv, lk, dv, Eigen::OuterStride<>(vs));
          if (gv) MutStridedMap(gv->data() + h * dv, lk, dv, Eigen::OuterStride<>(vs)).noalias() += p.transpose() * dout;
          if (!gq && !gk) continue;
          RowMat dp = dout * vh.transpose();
          RowMat ds(lq, lk);
          for (int64_t i = 0; i < lq; ++i) {
            const double dot = dp.row(i).dot(p.row(i));
            ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
          }
          ds *= sc;
          if (gq) {
            StridedMap kh(kv.data() + h * dq, lk, dq, Eigen::OuterStride<>(qs));
            MutStridedMap(gq->data() + h * dq, lq, dq, Eigen::OuterStride<>(qs)).noalias() += ds * kh;
          }
          if (gk) {
            StridedMap qh(qv.data() + h * dq, lq, dq, Eigen::OuterStride<>(qs));
            MutStridedMap(gk->data() + h * dq, lk, dq, Eigen::OuterStride<>(qs)).noalias() += ds.transpose() * qh;
          }
        }
      });
}

namespace {

// Visits the (up to) four in-bounds bilinear corners of one sample point.
template <typename F>
void visit_corners(const std::vector<LevelShape>& shapes, const std::vector<int64_t>& starts, int64_t lvl,
                   double lx, double ly, F&& fn) {
  const int64_t h = shapes[lvl].height, w = shapes[lvl].width;
  const double px = lx * static_cast<double>(w) - 0.5;
  const double py = ly * static_cast<double>(h) - 0.5;
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  const auto x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
  const double ax = px - fx0, ay = py - fy0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int64_t yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const double cw = (dy ? ay : 1.0 - ay) * (dx ? ax : 1.0 - ax);
      fn(starts[lvl] + yy * w + xx, cw, dx, dy, ax, ay);
    }
}

}  // namespace

Var deformable_sample(const Var& value, const std::vector<LevelShape>& shapes, const Var& locations,
                      const Var& weights, int heads, int points) {
  require_rank(value, 2, "deformable_sample");
  require_rank(locations, 2, "deformable_sample");
  require_rank(weights, 2, "deformable_sample");
  const auto levels = static_cast<int64_t>(shapes.size());
  const int64_t nq = locations.dim(0);
  std::vector<int64_t> starts;
  int64_t total = 0;
  for (const auto& s : shapes) {
    starts.push_back(total);
    total += s.height * s.width;
  }
  if (heads <= 0 || points <= 0 || value.dim(0) != total || value.dim(1) % heads ||
      locations.dim(1) != heads * levels * points * 2 || weights.dim(0) != nq ||
      weights.dim(1) != heads * levels * points) {
    throw ShapeMismatch("deformable_sample: value " + shape_str(value.shape()) + " locations " +
                        shape_str(locations.shape()) + " weights " + shape_str(weights.shape()));
  }
  const int64_t width = value.dim(1), dh = width / heads;
  notify_op("deformable_attention", static_cast<double>(nq * heads * levels * points * dh * 5));

  Tensor out({nq, width});
  const auto& val = value.value();
  const auto& loc = locations.value();
  const auto& wt = weights.value();

  for (int64_t q = 0; q < nq; ++q)
    for (int h = 0; h < heads; ++h)
      for (int64_t l = 0; l < levels; ++l)
        for (int p = 0; p < points; ++p) {
          const int64_t idx = (h * levels + l) * points + p;
          const double a = wt[q * heads * levels * points + idx];
          const double lx = loc[(q * heads * levels * points + idx) * 2];
          const double ly = loc[(q * heads * levels * points + idx) * 2 + 1];
          double* o = out.data() + q * width + h * dh;
          visit_corners(shapes, starts, l, lx, ly, [&](int64_t row, double cw, int, int, double, double) {
            const double* vr = val.data() + row * width + h * dh;
            const double f = a * cw;
            for (int64_t c = 0; c < dh; ++c) o[c] += f * vr[c];
          });
        }

  return make_result(
      std::move(out), {value, locations, weights},
      [=](Node& n) {
        Tensor* gval = grad_of(n, 0);
        Tensor* gloc = grad_of(n, 1);
        Tensor* gwt = grad_of(n, 2);
        const auto& val = n.inputs[0]->value;
        const auto& loc = n.inputs[1]->value;
        const auto& wt = n.inputs[2]->value;
        std::vector<double> sampled(static_cast<size_t>(dh));
        for (int64_t q = 0; q < nq; ++q)
          for (int h = 0; h < heads; ++h)
            for (int64_t l = 0; l < levels; ++l)
              for (int p = 0; p < points; ++p) {
                const int64_t idx = q * heads * levels * points + (h * levels + l) * points + p;
                const double a = wt[idx];
                const double lx = loc[idx * 2], ly = loc[idx * 2 + 1];
                const double* dout = n.grad.data() + q * width + h * dh;
                const double w_l = static_cast<double>(shapes[l].width);
                const double h_l = static_cast<double>(shapes[l].height);
                std::fill(sampled.begin(), sampled.end(), 0.0);
                double dpx = 0.0, dpy = 0.0;
                visit_corners(shapes, starts, l, lx, ly, [&](int64_t row, double cw, int dx, int dy, double ax, double ay) {
                  const double* vr = val.data() + row * width + h * dh;
                  // d(cw)/d(px) and d(cw)/d(py)
                  const double dcx = (dy ? ay : 1.0 - ay) * (dx ? 1.0 : -1.0);
                  const double dcy = (dy ? 1.0 : -1.0) * (dx ? ax : 1.0 - ax);
                  double g_dot_v = 0.0;
                  for (int64_t c = 0; c < dh; ++c) {
                    sampled[c] += cw * vr[c];
                    g_dot_v += dout[c] * vr[c];
                  }
                  dpx += a * dcx * g_dot_v;
                  dpy += a * dcy * g_dot_v;
                  if (gval) {
                    double* gr = gval->data() + row * width + h * dh;
                    for (int64_t c = 0; c < dh; ++c) gr[c] += a * cw * dout[c];
                  }
                });
                if (gwt) {
                  double s = 0.0;
                  for (int64_t c = 0; c < dh; ++c) s += dout[c] * sampled[c];
                  (*gwt)[idx] += s;
                }
                if (gloc) {
                  (*gloc)[idx * 2] += dpx * w_l;
                  (*gloc)[idx * 2 + 1] += dpy * h_l;
                }
              }
      });
}

Var sampling_locations(const Var& reference, const Var& offsets, const std::vector<LevelShape>& shapes, int heads,
                       int points, int ref_dim) {
  require_rank(reference, 2, "sampling_locations");
  require_rank(offsets, 2, "sampling_locations");
  const auto levels = static_cast<int64_t>(shapes.size());
  const int64_t nq = reference.dim(0);
  if ((ref_dim != 2 && ref_dim != 4) || reference.dim(1) != levels * ref_dim || offsets.dim(0) != nq ||
      offsets.dim(1) != heads * levels * points * 2) {
    throw ShapeMismatch("sampling_locations: reference " + shape_str(reference.shape()) + " offsets " +
                        shape_str(offsets.shape()));
  }
  notify_op("add", 0.0);
  const int64_t width = offsets.dim(1);
  Tensor out({nq, width});
  // Per (level, axis) scale applied to the offset, and which reference column
  // (if any) multiplies it.
  // Captures by value: the backward closure outlives this call.
  auto factor = [shapes, levels, ref_dim, points](const Tensor& ref, int64_t q, int64_t l, int axis) {
    if (ref_dim == 2) {
      const auto& s = shapes[static_cast<size_t>(l)];
      return 1.0 / static_cast<double>(axis == 0 ? s.width : s.height);
    }
    return ref[q * levels * 4 + l * 4 + 2 + axis] * 0.5 / static_cast<double>(points);
  };
  const auto& ref = reference.value();
  const auto& off = offsets.value();
  for (int64_t q = 0; q < nq; ++q)
    for (int h = 0; h < heads; ++h)
      for (int64_t l = 0; l < levels; ++l)
        for (int p = 0; p < points; ++p)
          for (int axis = 0; axis < 2; ++axis) {
            const int64_t idx = q * width + (((h * levels + l) * points + p) * 2 + axis);
            out[idx] = ref[q * levels * ref_dim + l * ref_dim + axis] + off[idx] * factor(ref, q, l, axis);
          }
  return make_result(std::move(out), {reference, offsets}, [=](Node& n) {
    Tensor* gref = grad_of(n, 0);
    Tensor* goff = grad_of(n, 1);
    const auto& ref = n.inputs[0]->value;
    const auto& off = n.inputs[1]->value;
    for (int64_t q = 0; q < nq; ++q)
      for (int h = 0; h < heads; ++h)
        for (int64_t l = 0; l < levels; ++l)
          for (int p = 0; p < points; ++p)
            for (int axis = 0; axis < 2; ++axis) {
              const int64_t idx = q * width + (((h * levels + l) * points + p) * 2 + axis);
              const double g = n.grad[idx];
              if (goff) (*goff)[idx] += g * factor(ref, q, l, axis);
              if (gref) {
                (*gref)[q * levels * ref_dim + l * ref_dim + axis] += g;
                if (ref_dim == 4)
                  (*gref)[q * levels * 4 + l * 4 + 2 + axis] += g * off[idx] * 0.5 / static_cast<double>(points);
              }
            }
  });
}

Var sine_embed(const Var& coords, int num_feats, double temperature, double scale_factor) {
  require_rank(coords, 2, "sine_embed");
  if (num_feats <= 0 || num_feats % 2) throw BadDim("sine_embed: num_feats must be positive and even");
  const int64_t rows = coords.dim(0), k = coords.dim(1);
  notify_op("sine_embed", 0.0);
  std::vector<double> freq(static_cast<size_t>(num_feats));
  for (int i = 0; i < num_feats; ++i)
    freq[i] = scale_factor / std::pow(temperature, 2.0 * static_cast<double>(i / 2) / num_feats);
  Tensor out({rows, k * num_feats});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < k; ++j) {
      const double x = coords.value()[r * k + j];
      for (int i = 0; i < num_feats; ++i) {
        const double arg = x * freq[i];
        out[r * k * num_feats + j * num_feats + i] = (i % 2 == 0) ? std::sin(arg) : std::cos(arg);
      }
    }
  return make_result(std::move(out), {coords}, [rows, k, num_feats, freq](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < k; ++j) {
          const double x = n.inputs[0]->value[r * k + j];
          double acc = 0.0;
          for (int i = 0; i < num_feats; ++i) {
            const double arg = x * freq[i];
            const double d = (i % 2 == 0) ? std::cos(arg) : -std::sin(arg);
            acc += n.grad[r * k * num_feats + j * num_feats + i] * d * freq[i];
          }
          (*g)[r * k + j] += acc;
        }
  });
}

Var sigmoid_focal_loss(const Var& logits, const Tensor& targets, std::optional<double> alpha, double gamma) {
  if (logits.numel() != targets.numel()) throw ShapeMismatch("focal loss: logits/targets size");
  notify_op("loss", 0.0);
  const auto& x = logits.value();
  double total = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double t = targets[i];
    const double p = stable_sigmoid(x[i]);
    const double ce = std::max(x[i], 0.0) - x[i] * t + std::log1p(std::exp(-std::abs(x[i])));
    const double pt = p * t + (1.0 - p) * (1.0 - t);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);
    const double at = alpha ? (*alpha * t + (1.0 - *alpha) * (1.0 - t)) : 1.0;
    total += at * ce * mod;
  }
  return make_result(Tensor::scalar(total), {logits}, [targets, alpha, gamma](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const auto& x = n.inputs[0]->value;
    const double up = n.grad[0];
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double t = targets[i];
      const double p = stable_sigmoid(x[i]);
      const double ce = std::max(x[i], 0.0) - x[i] * t + std::log1p(std::exp(-std::abs(x[i])));
      const double pt = p * t + (1.0 - p) * (1.0 - t);
      const double one_m = 1.0 - pt;
      const double mod = gamma == 0.0 ? 1.0 : std::pow(one_m, gamma);
      const double dpt = (2.0 * t - 1.0) * p * (1.0 - p);
      double dmod = 0.0;
      if (gamma != 0.0 && one_m > 0.0) dmod = -gamma * std::pow(one_m, gamma - 1.0) * dpt;
      const double at = alpha ? (*alpha * t + (1.0 - *alpha) * (1.0 - t)) : 1.0;
      (*g)[i] += up * at * ((p - t) * mod + ce * dmod);
    }
  });
}

Var l1_loss(const Var& pred, const Tensor& target) {
  if (pred.numel() != target.numel()) throw ShapeMismatch("l1 loss: pred/target size");
  notify_op("loss", 0.0);
  double total = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) total += std::abs(pred.value()[i] - target[i]);
  return make_result(Tensor::scalar(total), {pred}, [target](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) {
        const double d = n.inputs[0]->value[i] - target[i];
        (*g)[i] += n.grad[0] * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
      }
  });
}

namespace {

struct GiouTerms {
  double loss;
  double grad[4];  // d loss / d (x1, y1, x2, y2) of the prediction
};

GiouTerms giou_terms(const double* p, const double* t) {
  const double x1 = p[0], y1 = p[1], x2 = p[2], y2 = p[3];
  const double X1 = t[0], Y1 = t[1], X2 = t[2], Y2 = t[3];
  const double iw_raw = std::min(x2, X2) - std::max(x1, X1);
  const double ih_raw = std::min(y2, Y2) - std::max(y1, Y1);
  const double iw = std::max(iw_raw, 0.0), ih = std::max(ih_raw, 0.0);
  const double inter = iw * ih;
  const double area_p = (x2 - x1) * (y2 - y1);
  const double area_t = (X2 - X1) * (Y2 - Y1);
  const double uni = area_p + area_t - inter;
  const double cw = std::max(x2, X2) - std::min(x1, X1);
  const double ch = std::max(y2, Y2) - std::min(y1, Y1);
  const double encl = cw * ch;

  GiouTerms out{};
  if (uni <= 0.0 || encl <= 0.0) {
    out.loss = 1.0;
    return out;
  }
  const double iou = inter / uni;
  out.loss = 2.0 - iou - uni / encl;

  // Partial derivatives of the intermediate quantities.
  double d_iw[4] = {0, 0, 0, 0}, d_ih[4] = {0, 0, 0, 0};
  if (iw_raw > 0) {
    if (x1 >= X1) d_iw[0] = -1.0;
    if (x2 <= X2) d_iw[2] = 1.0;
  }
  if (ih_raw > 0) {
    if (y1 >= Y1) d_ih[1] = -1.0;
    if (y2 <= Y2) d_ih[3] = 1.0;
  }
  const double d_area[4] = {-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)};
  double d_cw[4] = {0, 0, 0, 0}, d_ch[4] = {0, 0, 0, 0};
  if (x1 <= X1) d_cw[0] = -1.0;
  if (x2 >= X2) d_cw[2] = 1.0;
  if (y1 <= Y1) d_ch[1] = -1.0;
  if (y2 >= Y2) d_ch[3] = 1.0;
  for (int i = 0; i < 4; ++i) {
    const double d_inter = d_iw[i] * ih + iw * d_ih[i];
    const double d_uni = d_area[i] - d_inter;
    const double d_encl = d_cw[i] * ch + cw * d_ch[i];
    const double d_iou = (d_inter * uni - inter * d_uni) / (uni * uni);
    const double d_ratio = (d_uni * encl - uni * d_encl) / (encl * encl);
    out.grad[i] = -d_iou - d_ratio;
  }
  return out;
}

void cxcywh_to_xyxy(const double* b, double* out) {
  out[0] = b[0] - 0.5 * b[2];
  out[1] = b[1] - 0.5 * b[3];
  out[2] = b[0] + 0.5 * b[2];
  out[3] = b[1] + 0.5 * b[3];
}

}  // namespace

Var giou_loss(const Var& pred_cxcywh, const Tensor& target_cxcywh) {
  if (pred_cxcywh.numel() != target_cxcywh.numel() || pred_cxcywh.numel() % 4) {
    throw ShapeMismatch("giou loss: pred/target size");
  }
  notify_op("loss", 0.0);
  const int64_t rows = pred_cxcywh.numel() / 4;
  double total = 0.0;
  std::vector<double> grads(static_cast<size_t>(rows * 4));
  for (int64_t r = 0; r < rows; ++r) {
    double p[4], t[4];
    cxcywh_to_xyxy(pred_cxcywh.value().data() + r * 4, p);
    cxcywh_to_xyxy(target_cxcywh.data() + r * 4, t);
    const auto terms = giou_terms(p, t);
    total += terms.loss;
    // chain rule through cxcywh -> xyxy
    const double* g = terms.grad;
    grads[r * 4 + 0] = g[0] + g[2];
    grads[r * 4 + 1] = g[1] + g[3];
    grads[r * 4 + 2] = 0.5 * (g[2] - g[0]);
    grads[r * 4 + 3] = 0.5 * (g[3] - g[1]);
  }
  return make_result(Tensor::scalar(total), {pred_cxcywh}, [grads = std::move(grads)](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (size_t i = 0; i < grads.size(); ++i) (*g)[static_cast<int64_t>(i)] += n.grad[0] * grads[i];
  });
}

}  // namespace detkit::ops
