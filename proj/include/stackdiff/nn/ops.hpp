#pragma once

#include <span>
#include <vector>

#include "stackdiff/nn/autograd.hpp"

namespace stackdiff::nn {

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var silu(const Var& x);

// x: [B, ..., C], per_sample: [B, C]; adds per_sample[b] at every position of sample b.
Var add_per_sample(const Var& x, const Var& per_sample);

// x: [..., in], w: [in, out], b: [out] (may be empty Var).
Var linear(const Var& x, const Var& w, const Var& b);

// x: [B, H, W, Cin], w: [k*k*Cin, Cout] with rows ordered (ky, kx, cin), b: [Cout].
// Output side is (H + 2*pad - k) / stride + 1.
Var conv2d(const Var& x, const Var& w, const Var& b, int kernel, int stride, int pad);

// x: [B, ..., C]; statistics per (sample, channel group) over all positions.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

// Normalizes over the last dimension.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Scaled dot-product attention with `heads` heads splitting the last dimension.
// q: [B, S, D], k/v: [B, L, D]. Keys at index >= key_lengths[b] are masked.
Var attention(const Var& q, const Var& k, const Var& v, const std::vector<int>& key_lengths, int heads);

// Nearest 2x upsampling of [B, H, W, C] cropped to [B, out_h, out_w, C].
Var upsample2x(const Var& x, int out_h, int out_w);

// Concatenates along the last dimension; leading dimensions must agree.
Var concat_last(const Var& a, const Var& b);

Var reshape(const Var& x, Shape shape);

// Mean of squared differences against a constant target.
Var mse(const Var& pred, std::span<const double> target);

}  // namespace stackdiff::nn
