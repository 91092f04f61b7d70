// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "dmtl/autograd.hpp"

namespace dmtl::ag {

// Elementwise. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// s * a + shift, with scalar constants.
Var affine(const Var& a, double s, double shift);
/// x + bias, bias of shape [C] broadcast over the last dimension of x.
Var add_bias(const Var& x, const Var& bias);
Var relu(const Var& x);
Var gelu(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Softmax over the last dimension.
Var softmax_last(const Var& x);

/// x[..., Cin] times w[Cin, Cout] plus optional bias[Cout].
Var linear(const Var& x, const Var& w, const Var& bias = Var());

/// NHWC convolution. w is [kh, kw, Cin, Cout]; bias may be undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);

/// Per-channel normalization over N*H*W. In training mode the running
/// statistics are updated in place with the given momentum.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum, double eps);

/// Normalization over the last dimension.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Scaled dot-product attention. q is [N, Lq, C], k and v are [N, Lk, C];
/// C is split evenly into `heads` heads.
Var attention(const Var& q, const Var& k, const Var& v, int heads);

/// Concatenation along the last dimension.
Var concat_channels(const std::vector<Var>& parts);

/// Rows of the leading (batch) dimension, in the given order.
Var select_batch(const Var& x, const std::vector<int>& indices);

/// Bilinear resize of an NHWC map (half-pixel centers, edge clamped).
Var upsample_bilinear(const Var& x, int out_h, int out_w);

Var max_pool2d(const Var& x, int kernel, int stride, int pad);

/// Mean pixel cross-entropy of NHWK logits against NHW labels; pixels whose
/// label equals ignore_index are excluded. Throws when no pixel is valid.
Var cross_entropy(const Var& logits, const LabelMap& labels, int ignore_index);

/// Mean absolute error over valid pixels and all channels. mask has one
/// entry per pixel (N*H*W). Throws when the mask is empty.
Var masked_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_squares(const Var& x);
/// Sum of scalars.
Var add_n(const std::vector<Var>& terms);

}  // namespace dmtl::ag
