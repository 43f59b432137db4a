#pragma once

// Differentiable kernels over Tensor. Every op defines its own backward;
// all of them are covered by finite-difference checks in the test suite.

#include <vector>

#include "dmr/tensor.hpp"

namespace dmr {

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor mul_scalar_t(const Tensor& a, const Tensor& s);  // s is a [1] tensor
Tensor add_rowvec(const Tensor& a, const Tensor& v);    // v matches the last axis
Tensor tanh_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor softplus_t(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// reductions
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim);

// shape
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_axis(const Tensor& a, int axis, int start, int len);
Tensor concat_axis(const std::vector<Tensor>& parts, int axis);
Tensor repeat_axis(const Tensor& a, int axis, int times);  // tiles the whole axis block
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor transpose_last2(const Tensor& a);

// linear algebra
Tensor linear(const Tensor& x, const Tensor& weight);  // x[..,in] @ W[in,out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor matmul2d(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);  // [b,m,k] @ [b,k,n]

// structured kernels
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  int axis = -1);
Tensor softmax(const Tensor& x, int axis);

// Cross-correlation with zero padding; weight is [Cout, Cin/groups, kh, kw].
Tensor grouped_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int groups,
                      int stride, int padding);

// x is [B,C,H,W]; pos is [B,2,Hs,Ws] with channel 0 the row coordinate and
// channel 1 the column coordinate, both normalized so that value p maps to
// continuous index (p+1) * extent/2, clamped to [0, extent-1] (border
// replication outside the grid).
Tensor bilinear_sample(const Tensor& x, const Tensor& pos);

// composites
Tensor cross3(const Tensor& a, const Tensor& b);  // last axis extent 3
Tensor mse(const Tensor& a, const Tensor& b);

bool all_finite(const Tensor& a);

}  // namespace dmr
