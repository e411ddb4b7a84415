#pragma once

#include <span>
#include <vector>

#include "refprior/tensor.hpp"

// Differentiable primitives. Every function records a backward node when
// gradient recording is on and an input requires a gradient. Shape contract
// violations throw Error(ErrorKind::Shape) naming the offending shapes.
namespace refprior {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, double lo, double hi);

// Full reductions to a 0-d tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor concat(std::span<const Tensor> parts, int axis);

// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);
// Over the last axis.
Tensor softmax(const Tensor& x);

// Affine map over the last axis: x[..., D_in] -> [..., D_out]. `bias` may be
// undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// 2-D cross-correlation (no kernel flip), zero padding.
// input [N,C_in,H,W], weight [C_out,C_in,kH,kW], bias [C_out] or undefined.
// H' = floor((H + 2*padding - dilation*(kH-1) - 1) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1);

// input [N,C,...]; statistics per (sample, group of C/groups channels).
Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

// Integer-factor nearest-neighbour replication of [N,C,h,w].
Tensor nearest_upsample(const Tensor& input, std::int64_t out_h,
                        std::int64_t out_w);

// [N,C,H,W] -> [N,C], mean over the spatial axes.
Tensor spatial_mean(const Tensor& input);

struct AttentionWeights {
  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor out_weight, out_bias;
};

// Multi-head scaled dot-product self-attention with a residual connection:
// tokens + out_proj(softmax(Q K^T / sqrt(d_head)) V). tokens is [N,L,D].
Tensor self_attention(const Tensor& tokens, int heads,
                      const AttentionWeights& weights);

Tensor mse_loss(const Tensor& prediction, const Tensor& target);
Tensor l1_loss(const Tensor& prediction, const Tensor& target);

}  // namespace refprior
