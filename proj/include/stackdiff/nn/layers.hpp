#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stackdiff/nn/ops.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::nn {

// Ordered, named collection of trainable tensors.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  // Truncated normal (cut at two standard deviations) with the given std.
  Var normal(const std::string& name, Shape shape, double stddev);
  Var filled(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  Var add(const std::string& name, Shape shape, Buffer values);
  std::vector<std::pair<std::string, Var>> entries_;
  Rng rng_;
};

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, int in, int out, double gain = 1.0);
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct Conv2d {
  Var w, b;
  int kernel = 3, stride = 1, pad = 1;
  Conv2d() = default;
  Conv2d(ParameterStore& ps, const std::string& name, int in, int out, int kernel, int stride, int pad, double gain = 1.0);
  Var operator()(const Var& x) const { return conv2d(x, w, b, kernel, stride, pad); }
};

struct GroupNorm {
  Var gamma, beta;
  int groups = 1;
  GroupNorm() = default;
  GroupNorm(ParameterStore& ps, const std::string& name, int channels, int groups);
  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
  Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, int channels);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

// Pre-norm residual block; the timestep embedding enters as a per-channel shift.
struct ResBlock {
  GroupNorm norm1, norm2;
  Conv2d conv1, conv2;
  Linear time_proj;
  Linear skip;  // only when in != out
  bool has_skip = false;
  ResBlock() = default;
  ResBlock(ParameterStore& ps, const std::string& name, int in, int out, int time_dim, int groups);
  Var operator()(const Var& x, const Var& temb) const;
};

// Multi-head attention with separate query and key/value sources.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, int dim, int context_dim, int heads);
  Var operator()(const Var& x, const Var& context, const std::vector<int>& context_lengths) const;
};

// Self-attention over spatial positions followed by cross-attention from every
// position to every conditioning token. Operates on [B, H, W, C].
struct SpatialTransformer {
  LayerNorm norm_self, norm_cross;
  MultiHeadAttention self_attn, cross_attn;
  SpatialTransformer() = default;
  SpatialTransformer(ParameterStore& ps, const std::string& name, int channels, int context_dim, int heads);
  Var operator()(const Var& x, const Var& context, const std::vector<int>& context_lengths) const;
};

}  // namespace stackdiff::nn
