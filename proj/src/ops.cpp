#include "dmr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>

namespace dmr {

namespace {

using detail::TensorImpl;

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

int norm_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw shape_error(std::string(op) + ": axis out of range for rank " + std::to_string(ndim));
  return axis;
}

// Splits a shape at `axis` into (outer, k, inner) extents for strided loops.
void axis_extents(const Shape& s, int axis, std::size_t& outer, std::size_t& k,
                  std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  k = static_cast<std::size_t>(s[axis]);
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    inner *= static_cast<std::size_t>(s[i]);
}

bool wants(TensorImpl& self, int i) { return self.parents[i].requires_grad(); }
const std::vector<double>& pdata(TensorImpl& self, int i) { return self.parents[i].data(); }
std::vector<double>& pgrad(TensorImpl& self, int i) { return self.parents[i].impl()->grad; }

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op,
                          double (*fwd)(double, double),
                          void (*bwd)(double g, double x, double y, double& dx, double& dy)) {
  check_same_shape(a, b, op);
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i], b.data()[i]);
  auto backward = [bwd](TensorImpl& self) {
    const std::size_t n2 = self.numel();
    const bool wa = wants(self, 0), wb = wants(self, 1);
    const auto& xa = pdata(self, 0);
    const auto& xb = pdata(self, 1);
    for (std::size_t i = 0; i < n2; ++i) {
      double dx = 0.0, dy = 0.0;
      bwd(self.grad[i], xa[i], xb[i], dx, dy);
      if (wa) pgrad(self, 0)[i] += dx;
      if (wb) pgrad(self, 1)[i] += dy;
    }
  };
  return make_op_node(a.shape(), std::move(out), {a, b}, backward);
}

Tensor elementwise_unary(const Tensor& a, double (*fwd)(double),
                         double (*dfdx)(double x, double y)) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i]);
  auto backward = [dfdx](TensorImpl& self) {
    if (!wants(self, 0)) return;
    const auto& x = pdata(self, 0);
    auto& dx = pgrad(self, 0);
    for (std::size_t i = 0; i < self.numel(); ++i)
      dx[i] += self.grad[i] * dfdx(x[i], self.data[i]);
  };
  return make_op_node(a.shape(), std::move(out), {a}, backward);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double x, double y, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      });
}

Tensor neg(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + s;
  auto backward = [](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += self.grad[i];
  };
  return make_op_node(a.shape(), std::move(out), {a}, backward);
}

Tensor mul_scalar(const Tensor& a, double s) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
  auto backward = [s](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += self.grad[i] * s;
  };
  return make_op_node(a.shape(), std::move(out), {a}, backward);
}

Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw shape_error("mul_scalar_t: scale must be a [1] tensor");
  const double sv = s.data()[0];
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * sv;
  auto backward = [](TensorImpl& self) {
    const auto& x = pdata(self, 0);
    const double sval = pdata(self, 1)[0];
    if (wants(self, 0)) {
      auto& dx = pgrad(self, 0);
      for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += self.grad[i] * sval;
    }
    if (wants(self, 1)) {
      double ds = 0.0;
      for (std::size_t i = 0; i < self.numel(); ++i) ds += self.grad[i] * x[i];
      pgrad(self, 1)[0] += ds;
    }
  };
  return make_op_node(a.shape(), std::move(out), {a, s}, backward);
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.ndim() != 1 || v.dim(0) != a.dim(-1)) {
    throw shape_error("add_rowvec: vector " + shape_str(v.shape()) +
                      " does not match last axis of " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t k = static_cast<std::size_t>(v.dim(0));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + v.data()[i % k];
  auto backward = [k](TensorImpl& self) {
    if (wants(self, 0)) {
      auto& dx = pgrad(self, 0);
      for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& dv = pgrad(self, 1);
      for (std::size_t i = 0; i < self.numel(); ++i) dv[i % k] += self.grad[i];
    }
  };
  return make_op_node(a.shape(), std::move(out), {a, v}, backward);
}

Tensor tanh_t(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp_t(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt_t(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor softplus_t(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor gelu(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto backward = [](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    const double g = self.grad[0];
    for (double& d : dx) d += g;
  };
  return make_op_node({1}, {s}, {a}, backward);
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  axis = norm_axis(axis, a.ndim(), "sum_axis");
  std::size_t outer, k, inner;
  axis_extents(a.shape(), axis, outer, k, inner);
  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += a.data()[(o * k + j) * inner + i];
  auto backward = [outer, k, inner](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          dx[(o * k + j) * inner + i] += self.grad[o * inner + i];
  };
  return make_op_node(std::move(out_shape), std::move(out), {a}, backward);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out = a.data();
  auto backward = [](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t i = 0; i < self.numel(); ++i) dx[i] += self.grad[i];
  };
  return make_op_node(std::move(shape), std::move(out), {a}, backward);
}

Tensor slice_axis(const Tensor& a, int axis, int start, int len) {
  axis = norm_axis(axis, a.ndim(), "slice_axis");
  const int extent = a.shape()[axis];
  if (start < 0 || len <= 0 || start + len > extent) {
    throw shape_error("slice_axis: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") invalid for extent " +
                      std::to_string(extent));
  }
  std::size_t outer, k, inner;
  axis_extents(a.shape(), axis, outer, k, inner);
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out(outer * static_cast<std::size_t>(len) * inner);
  const std::size_t ulen = static_cast<std::size_t>(len);
  const std::size_t ustart = static_cast<std::size_t>(start);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < ulen; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        out[(o * ulen + j) * inner + i] = a.data()[(o * k + ustart + j) * inner + i];
  auto backward = [outer, k, inner, ulen, ustart](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < ulen; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          dx[(o * k + ustart + j) * inner + i] += self.grad[(o * ulen + j) * inner + i];
  };
  return make_op_node(std::move(out_shape), std::move(out), {a}, backward);
}

Tensor concat_axis(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw shape_error("concat_axis: no inputs");
  axis = norm_axis(axis, parts[0].ndim(), "concat_axis");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != parts[0].ndim())
      throw shape_error("concat_axis: rank mismatch " + shape_str(p.shape()));
    for (int i = 0; i < p.ndim(); ++i) {
      if (i != axis && p.shape()[i] != out_shape[i])
        throw shape_error("concat_axis: shape mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(parts[0].shape()));
    }
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  std::size_t outer, k_out, inner;
  axis_extents(out_shape, axis, outer, k_out, inner);
  std::vector<double> out(outer * k_out * inner);
  std::vector<std::size_t> offsets;  // start of each part along the axis
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t kp = static_cast<std::size_t>(p.shape()[axis]);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < kp; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          out[(o * k_out + off + j) * inner + i] = p.data()[(o * kp + j) * inner + i];
    offsets.push_back(off);
    off += kp;
  }
  auto backward = [outer, k_out, inner, offsets](TensorImpl& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      if (!wants(self, static_cast<int>(pi))) continue;
      auto& dx = pgrad(self, static_cast<int>(pi));
      const std::size_t kp = dx.size() / (outer * inner);
      const std::size_t o0 = offsets[pi];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < kp; ++j)
          for (std::size_t i = 0; i < inner; ++i)
            dx[(o * kp + j) * inner + i] += self.grad[(o * k_out + o0 + j) * inner + i];
    }
  };
  return make_op_node(std::move(out_shape), std::move(out), parts, backward);
}

Tensor repeat_axis(const Tensor& a, int axis, int times) {
  axis = norm_axis(axis, a.ndim(), "repeat_axis");
  if (times <= 0) throw shape_error("repeat_axis: times must be positive");
  std::size_t outer, k, inner;
  axis_extents(a.shape(), axis, outer, k, inner);
  Shape out_shape = a.shape();
  out_shape[axis] *= times;
  const std::size_t t = static_cast<std::size_t>(times);
  std::vector<double> out(outer * k * t * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < inner; ++i)
          out[(o * (k * t) + r * k + j) * inner + i] = a.data()[(o * k + j) * inner + i];
  auto backward = [outer, k, inner, t](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t i = 0; i < inner; ++i)
            dx[(o * k + j) * inner + i] += self.grad[(o * (k * t) + r * k + j) * inner + i];
  };
  return make_op_node(std::move(out_shape), std::move(out), {a}, backward);
}

namespace {

std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int nd = a.ndim();
  if (static_cast<int>(perm.size()) != nd) throw shape_error("permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) {
    if (perm[i] < 0 || perm[i] >= nd || seen[perm[i]])
      throw shape_error("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = a.shape()[perm[i]];
  }
  const auto in_strides = row_strides(a.shape());
  const auto out_strides = row_strides(out_shape);
  const std::size_t n = a.numel();
  // map: flat out index -> flat in index
  std::vector<double> out(n);
  std::vector<std::size_t> mapping(n);
  for (std::size_t oi = 0; oi < n; ++oi) {
    std::size_t rem = oi, ii = 0;
    for (int d = 0; d < nd; ++d) {
      const std::size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      ii += idx * in_strides[perm[d]];
    }
    mapping[oi] = ii;
    out[oi] = a.data()[ii];
  }
  auto backward = [mapping](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t oi = 0; oi < self.numel(); ++oi) dx[mapping[oi]] += self.grad[oi];
  };
  return make_op_node(std::move(out_shape), std::move(out), {a}, backward);
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> perm(a.ndim());
  for (int i = 0; i < a.ndim(); ++i) perm[i] = i;
  if (a.ndim() < 2) throw shape_error("transpose_last2: rank must be >= 2");
  std::swap(perm[a.ndim() - 1], perm[a.ndim() - 2]);
  return permute(a, perm);
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  return linear(x, weight, Tensor());
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2 || x.ndim() < 1 || x.dim(-1) != weight.dim(0)) {
    throw shape_error("linear: inner extents mismatch, x " + shape_str(x.shape()) +
                      " vs weight " + shape_str(weight.shape()));
  }
  const std::size_t in = static_cast<std::size_t>(weight.dim(0));
  const std::size_t out_f = static_cast<std::size_t>(weight.dim(1));
  if (bias.defined() && (bias.ndim() != 1 || static_cast<std::size_t>(bias.dim(0)) != out_f)) {
    throw shape_error("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                      shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = static_cast<int>(out_f);
  std::vector<double> out(rows * out_f, 0.0);
  const auto& xd = x.data();
  const auto& wd = weight.data();
  for (std::size_t m = 0; m < rows; ++m) {
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = xd[m * in + k];
      if (xv == 0.0) continue;
      const double* wrow = wd.data() + k * out_f;
      double* orow = out.data() + m * out_f;
      for (std::size_t o = 0; o < out_f; ++o) orow[o] += xv * wrow[o];
    }
  }
  if (bias.defined()) {
    const auto& bd = bias.data();
    for (std::size_t m = 0; m < rows; ++m)
      for (std::size_t o = 0; o < out_f; ++o) out[m * out_f + o] += bd[o];
  }
  const bool has_bias = bias.defined();
  auto backward = [in, out_f, rows, has_bias](TensorImpl& self) {
    const auto& xd2 = pdata(self, 0);
    const auto& wd2 = pdata(self, 1);
    if (wants(self, 0)) {
      auto& dx = pgrad(self, 0);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t k = 0; k < in; ++k) {
          double acc = 0.0;
          const double* wrow = wd2.data() + k * out_f;
          const double* grow = self.grad.data() + m * out_f;
          for (std::size_t o = 0; o < out_f; ++o) acc += grow[o] * wrow[o];
          dx[m * in + k] += acc;
        }
    }
    if (wants(self, 1)) {
      auto& dw = pgrad(self, 1);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t k = 0; k < in; ++k) {
          const double xv = xd2[m * in + k];
          if (xv == 0.0) continue;
          double* dwrow = dw.data() + k * out_f;
          const double* grow = self.grad.data() + m * out_f;
          for (std::size_t o = 0; o < out_f; ++o) dwrow[o] += xv * grow[o];
        }
    }
    if (has_bias && wants(self, 2)) {
      auto& db = pgrad(self, 2);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t o = 0; o < out_f; ++o) db[o] += self.grad[m * out_f + o];
    }
  };
  std::vector<Tensor> parents = {x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op_node(std::move(out_shape), std::move(out), std::move(parents), backward);
}

namespace {

// shared batched matmul kernel: a [nb,m,k] * b [nb,k,n]
Tensor bmm_impl(const Tensor& a, const Tensor& b, std::size_t nb, std::size_t m, std::size_t k,
                std::size_t n, Shape out_shape) {
  std::vector<double> out(nb * m * n, 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t t = 0; t < nb; ++t) {
    const double* A = ad.data() + t * m * k;
    const double* B = bd.data() + t * k * n;
    double* C = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        if (av == 0.0) continue;
        const double* brow = B + kk * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  auto backward = [nb, m, k, n](TensorImpl& self) {
    const auto& ad2 = pdata(self, 0);
    const auto& bd2 = pdata(self, 1);
    for (std::size_t t = 0; t < nb; ++t) {
      const double* A = ad2.data() + t * m * k;
      const double* B = bd2.data() + t * k * n;
      const double* G = self.grad.data() + t * m * n;
      if (wants(self, 0)) {
        double* dA = pgrad(self, 0).data() + t * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* brow = B + kk * n;
            const double* grow = G + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            dA[i * k + kk] += acc;
          }
      }
      if (wants(self, 1)) {
        double* dB = pgrad(self, 1).data() + t * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = A[i * k + kk];
            if (av == 0.0) continue;
            double* dbrow = dB + kk * n;
            const double* grow = G + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
      }
    }
  };
  return make_op_node(std::move(out_shape), std::move(out), {a, b}, backward);
}

}  // namespace

Tensor matmul2d(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul2d: incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  return bmm_impl(a, b, 1, a.dim(0), a.dim(1), b.dim(1), {a.dim(0), b.dim(1)});
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw shape_error("bmm: incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  return bmm_impl(a, b, a.dim(0), a.dim(1), a.dim(2), b.dim(2),
                  {a.dim(0), a.dim(1), b.dim(2)});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  int axis) {
  if (eps <= 0.0) throw config_error("layer_norm: eps must be positive");
  axis = norm_axis(axis, x.ndim(), "layer_norm");
  const std::size_t c = static_cast<std::size_t>(x.shape()[axis]);
  if (gamma.ndim() != 1 || static_cast<std::size_t>(gamma.dim(0)) != c ||
      beta.ndim() != 1 || static_cast<std::size_t>(beta.dim(0)) != c) {
    throw shape_error("layer_norm: gamma/beta must be [" + std::to_string(c) + "], got " +
                      shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  std::size_t outer, k, inner;
  axis_extents(x.shape(), axis, outer, k, inner);
  const std::size_t npos = outer * inner;
  std::vector<double> out(x.numel());
  std::vector<double> mean(npos), inv_std(npos);
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t p = o * inner + i;
      double mu = 0.0;
      for (std::size_t j = 0; j < k; ++j) mu += xd[(o * k + j) * inner + i];
      mu /= static_cast<double>(k);
      double var = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double d = xd[(o * k + j) * inner + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(k);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean[p] = mu;
      inv_std[p] = inv;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t idx = (o * k + j) * inner + i;
        out[idx] = (xd[idx] - mu) * inv * gd[j] + bd[j];
      }
    }
  auto backward = [outer, k, inner, mean, inv_std](TensorImpl& self) {
    const auto& xd2 = pdata(self, 0);
    const auto& gd2 = pdata(self, 1);
    const bool wx = wants(self, 0), wg = wants(self, 1), wb = wants(self, 2);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t p = o * inner + i;
        const double mu = mean[p];
        const double inv = inv_std[p];
        // dL/dxhat_j = gamma_j * g_j; dx from the standard layernorm backward
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t idx = (o * k + j) * inner + i;
          const double xhat = (xd2[idx] - mu) * inv;
          const double gh = gd2[j] * self.grad[idx];
          sum_g += gh;
          sum_gx += gh * xhat;
        }
        const double invk = 1.0 / static_cast<double>(k);
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t idx = (o * k + j) * inner + i;
          const double xhat = (xd2[idx] - mu) * inv;
          if (wx) {
            const double gh = gd2[j] * self.grad[idx];
            pgrad(self, 0)[idx] += inv * (gh - invk * sum_g - xhat * invk * sum_gx);
          }
          if (wg) pgrad(self, 1)[j] += self.grad[idx] * xhat;
          if (wb) pgrad(self, 2)[j] += self.grad[idx];
        }
      }
  };
  return make_op_node(x.shape(), std::move(out), {x, gamma, beta}, backward);
}

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.ndim(), "softmax");
  std::size_t outer, k, inner;
  axis_extents(x.shape(), axis, outer, k, inner);
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, xd[(o * k + j) * inner + i]);
      double denom = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t idx = (o * k + j) * inner + i;
        out[idx] = std::exp(xd[idx] - mx);
        denom += out[idx];
      }
      for (std::size_t j = 0; j < k; ++j) out[(o * k + j) * inner + i] /= denom;
    }
  auto backward = [outer, k, inner](TensorImpl& self) {
    if (!wants(self, 0)) return;
    auto& dx = pgrad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t idx = (o * k + j) * inner + i;
          dot += self.data[idx] * self.grad[idx];
        }
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t idx = (o * k + j) * inner + i;
          dx[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
  };
  return make_op_node(x.shape(), std::move(out), {x}, backward);
}

Tensor grouped_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int groups,
                      int stride, int padding) {
  if (x.ndim() != 4 || weight.ndim() != 4) {
    throw shape_error("grouped_conv2d: x " + shape_str(x.shape()) + " and weight " +
                      shape_str(weight.shape()) + " must be rank 4");
  }
  if (groups <= 0 || stride <= 0 || padding < 0)
    throw config_error("grouped_conv2d: invalid groups/stride/padding");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (Cin % groups != 0 || Cout % groups != 0)
    throw config_error("grouped_conv2d: channels " + std::to_string(Cin) + "->" +
                       std::to_string(Cout) + " not divisible by groups " +
                       std::to_string(groups));
  const int cig = Cin / groups, cog = Cout / groups;
  if (wc != cig)
    throw shape_error("grouped_conv2d: weight expects " + std::to_string(wc) +
                      " input channels per group, got " + std::to_string(cig));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw shape_error("grouped_conv2d: bias must be [" + std::to_string(Cout) + "]");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw shape_error("grouped_conv2d: non-positive output extent");

  std::vector<double> out(static_cast<std::size_t>(B) * Cout * Ho * Wo, 0.0);
  const auto& xd = x.data();
  const auto& wd = weight.data();
  auto xi = [=](int b, int c, int y, int xx) {
    return ((static_cast<std::size_t>(b) * Cin + c) * H + y) * W + xx;
  };
  auto oi = [=](int b, int c, int y, int xx) {
    return ((static_cast<std::size_t>(b) * Cout + c) * Ho + y) * Wo + xx;
  };
  auto wi = [=](int co, int ci, int ky, int kx) {
    return ((static_cast<std::size_t>(co) * cig + ci) * kh + ky) * kw + kx;
  };
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g)
      for (int oc = 0; oc < cog; ++oc) {
        const int co = g * cog + oc;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double acc = bias.defined() ? bias.data()[co] : 0.0;
            for (int ic = 0; ic < cig; ++ic)
              for (int ky = 0; ky < kh; ++ky) {
                const int y = oy * stride - padding + ky;
                if (y < 0 || y >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int xx = ox * stride - padding + kx;
                  if (xx < 0 || xx >= W) continue;
                  acc += xd[xi(b, g * cig + ic, y, xx)] * wd[wi(co, ic, ky, kx)];
                }
              }
            out[oi(b, co, oy, ox)] = acc;
          }
      }

  const bool has_bias = bias.defined();
  auto backward = [=](TensorImpl& self) {
    const auto& xd2 = pdata(self, 0);
    const auto& wd2 = pdata(self, 1);
    const bool wxg = wants(self, 0), wwg = wants(self, 1);
    const bool wbg = has_bias && wants(self, 2);
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g)
        for (int oc = 0; oc < cog; ++oc) {
          const int co = g * cog + oc;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const double go = self.grad[oi(b, co, oy, ox)];
              if (go == 0.0) continue;
              if (wbg) pgrad(self, 2)[co] += go;
              for (int ic = 0; ic < cig; ++ic)
                for (int ky = 0; ky < kh; ++ky) {
                  const int y = oy * stride - padding + ky;
                  if (y < 0 || y >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int xx = ox * stride - padding + kx;
                    if (xx < 0 || xx >= W) continue;
                    if (wxg)
                      pgrad(self, 0)[xi(b, g * cig + ic, y, xx)] += go * wd2[wi(co, ic, ky, kx)];
                    if (wwg)
                      pgrad(self, 1)[wi(co, ic, ky, kx)] += go * xd2[xi(b, g * cig + ic, y, xx)];
                  }
                }
            }
        }
  };
  std::vector<Tensor> parents = {x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op_node({B, Cout, Ho, Wo}, std::move(out), std::move(parents), backward);
}

Tensor bilinear_sample(const Tensor& x, const Tensor& pos) {
  if (x.ndim() != 4) throw shape_error("bilinear_sample: x must be [B,C,H,W]");
  if (pos.ndim() != 4 || pos.dim(1) != 2) {
    throw shape_error("bilinear_sample: pos must be [B,2,Hs,Ws], got " + shape_str(pos.shape()));
  }
  if (pos.dim(0) != x.dim(0))
    throw shape_error("bilinear_sample: batch mismatch " + shape_str(x.shape()) + " vs " +
                      shape_str(pos.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Hs = pos.dim(2), Ws = pos.dim(3);
  const std::size_t ns = static_cast<std::size_t>(Hs) * Ws;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(B) * C * ns);
  const auto& xd = x.data();
  const auto& pd = pos.data();

  // continuous index for normalized coordinate p: (p+1) * extent/2, clamped
  auto to_index = [](double p, int extent) {
    double t = (p + 1.0) * (0.5 * static_cast<double>(extent));
    const double hi = static_cast<double>(extent - 1);
    if (t < 0.0) t = 0.0;
    if (t > hi) t = hi;
    return t;
  };

  for (int b = 0; b < B; ++b)
    for (std::size_t s = 0; s < ns; ++s) {
      const double py = pd[(static_cast<std::size_t>(b) * 2 + 0) * ns + s];
      const double px = pd[(static_cast<std::size_t>(b) * 2 + 1) * ns + s];
      const double fy = to_index(py, H);
      const double fx = to_index(px, W);
      const int y0 = static_cast<int>(fy);
      const int x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, H - 1);
      const int x1 = std::min(x0 + 1, W - 1);
      const double wy = fy - y0;
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        const double* img = xd.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        const double v00 = img[y0 * W + x0];
        const double v01 = img[y0 * W + x1];
        const double v10 = img[y1 * W + x0];
        const double v11 = img[y1 * W + x1];
        out[(static_cast<std::size_t>(b) * C + c) * ns + s] =
            (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
      }
    }

  auto backward = [=](TensorImpl& self) {
    const auto& xd2 = pdata(self, 0);
    const auto& pd2 = pdata(self, 1);
    const bool wxg = wants(self, 0), wpg = wants(self, 1);
    for (int b = 0; b < B; ++b)
      for (std::size_t s = 0; s < ns; ++s) {
        const double py = pd2[(static_cast<std::size_t>(b) * 2 + 0) * ns + s];
        const double px = pd2[(static_cast<std::size_t>(b) * 2 + 1) * ns + s];
        double ty = (py + 1.0) * (0.5 * H);
        double tx = (px + 1.0) * (0.5 * W);
        const bool clamp_y = ty <= 0.0 || ty >= static_cast<double>(H - 1);
        const bool clamp_x = tx <= 0.0 || tx >= static_cast<double>(W - 1);
        ty = std::clamp(ty, 0.0, static_cast<double>(H - 1));
        tx = std::clamp(tx, 0.0, static_cast<double>(W - 1));
        const int y0 = static_cast<int>(ty);
        const int x0 = static_cast<int>(tx);
        const int y1 = std::min(y0 + 1, H - 1);
        const int x1 = std::min(x0 + 1, W - 1);
        const double wy = ty - y0;
        const double wx = tx - x0;
        double dfy = 0.0, dfx = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(b) * C + c);
          const double go = self.grad[base * ns + s];
          if (go == 0.0) continue;
          const double* img = xd2.data() + base * plane;
          const double v00 = img[y0 * W + x0];
          const double v01 = img[y0 * W + x1];
          const double v10 = img[y1 * W + x0];
          const double v11 = img[y1 * W + x1];
          if (wxg) {
            double* dimg = pgrad(self, 0).data() + base * plane;
            dimg[y0 * W + x0] += go * (1.0 - wy) * (1.0 - wx);
            dimg[y0 * W + x1] += go * (1.0 - wy) * wx;
            dimg[y1 * W + x0] += go * wy * (1.0 - wx);
            dimg[y1 * W + x1] += go * wy * wx;
          }
          if (wpg) {
            dfy += go * ((v10 - v00) * (1.0 - wx) + (v11 - v01) * wx);
            dfx += go * ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy);
          }
        }
        if (wpg) {
          auto& dp = pgrad(self, 1);
          if (!clamp_y) dp[(static_cast<std::size_t>(b) * 2 + 0) * ns + s] += dfy * (0.5 * H);
          if (!clamp_x) dp[(static_cast<std::size_t>(b) * 2 + 1) * ns + s] += dfx * (0.5 * W);
        }
      }
  };
  return make_op_node({B, C, Hs, Ws}, std::move(out), {x, pos}, backward);
}

Tensor cross3(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "cross3");
  if (a.dim(-1) != 3) throw shape_error("cross3: last axis must be 3");
  const int last = a.ndim() - 1;
  Tensor a0 = slice_axis(a, last, 0, 1), a1 = slice_axis(a, last, 1, 1),
         a2 = slice_axis(a, last, 2, 1);
  Tensor b0 = slice_axis(b, last, 0, 1), b1 = slice_axis(b, last, 1, 1),
         b2 = slice_axis(b, last, 2, 1);
  Tensor c0 = sub(mul(a1, b2), mul(a2, b1));
  Tensor c1 = sub(mul(a2, b0), mul(a0, b2));
  Tensor c2 = sub(mul(a0, b1), mul(a1, b0));
  return concat_axis({c0, c1, c2}, last);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

bool all_finite(const Tensor& a) {
  for (double v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace dmr
