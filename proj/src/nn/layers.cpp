#include "stackdiff/nn/layers.hpp"

#include <cmath>
#include <random>

#include "stackdiff/error.hpp"

namespace stackdiff::nn {

Var ParameterStore::add(const std::string& name, Shape shape, Buffer values) {
  for (const auto& [n, _] : entries_)
    if (n == name) throw ConfigError("duplicate parameter name " + name);
  Var v = Var::parameter(std::move(shape), std::move(values));
  entries_.emplace_back(name, v);
  return v;
}

Var ParameterStore::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Buffer values(numel(shape));
  for (auto& x : values) {
    double z;
    do z = dist(rng_);
    while (std::abs(z) > 2.0);
    x = z * stddev;
  }
  return add(name, std::move(shape), std::move(values));
}

Var ParameterStore::filled(const std::string& name, Shape shape, double value) {
  Buffer values(numel(shape), value);
  return add(name, std::move(shape), std::move(values));
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, v] : entries_) v.zero_grad();
}

Linear::Linear(ParameterStore& ps, const std::string& name, int in, int out, double gain)
    : w(ps.normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)))),
      b(ps.filled(name + ".b", {out}, 0.0)) {}

Conv2d::Conv2d(ParameterStore& ps, const std::string& name, int in, int out, int kernel_, int stride_, int pad_, double gain)
    : w(ps.normal(name + ".w", {kernel_ * kernel_ * in, out}, gain / std::sqrt(static_cast<double>(kernel_ * kernel_ * in)))),
      b(ps.filled(name + ".b", {out}, 0.0)),
      kernel(kernel_),
      stride(stride_),
      pad(pad_) {}

GroupNorm::GroupNorm(ParameterStore& ps, const std::string& name, int channels, int groups_)
    : gamma(ps.filled(name + ".gamma", {channels}, 1.0)), beta(ps.filled(name + ".beta", {channels}, 0.0)), groups(groups_) {
  if (channels % groups_ != 0) throw ConfigError(name + ": channels not divisible by group count");
}

LayerNorm::LayerNorm(ParameterStore& ps, const std::string& name, int channels)
    : gamma(ps.filled(name + ".gamma", {channels}, 1.0)), beta(ps.filled(name + ".beta", {channels}, 0.0)) {}

ResBlock::ResBlock(ParameterStore& ps, const std::string& name, int in, int out, int time_dim, int groups)
    : norm1(ps, name + ".norm1", in, groups),
      norm2(ps, name + ".norm2", out, groups),
      conv1(ps, name + ".conv1", in, out, 3, 1, 1),
      conv2(ps, name + ".conv2", out, out, 3, 1, 1, 0.5),
      time_proj(ps, name + ".time", time_dim, out),
      has_skip(in != out) {
  if (has_skip) skip = Linear(ps, name + ".skip", in, out);
}

Var ResBlock::operator()(const Var& x, const Var& temb) const {
  Var h = conv1(silu(norm1(x)));
  h = add_per_sample(h, time_proj(silu(temb)));
  h = conv2(silu(norm2(h)));
  return add(has_skip ? skip(x) : x, h);
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& ps, const std::string& name, int dim, int context_dim, int heads_)
    : q(ps, name + ".q", dim, dim),
      k(ps, name + ".k", context_dim, dim),
      v(ps, name + ".v", context_dim, dim),
      o(ps, name + ".o", dim, dim, 0.5),
      heads(heads_) {
  if (dim % heads_ != 0) throw ConfigError(name + ": width not divisible by head count");
}

Var MultiHeadAttention::operator()(const Var& x, const Var& context, const std::vector<int>& lengths) const {
  return o(attention(q(x), k(context), v(context), lengths, heads));
}

SpatialTransformer::SpatialTransformer(ParameterStore& ps, const std::string& name, int channels, int context_dim, int heads)
    : norm_self(ps, name + ".norm_self", channels),
      norm_cross(ps, name + ".norm_cross", channels),
      self_attn(ps, name + ".self", channels, channels, heads),
      cross_attn(ps, name + ".cross", channels, context_dim, heads) {}

Var SpatialTransformer::operator()(const Var& x, const Var& context, const std::vector<int>& lengths) const {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Var seq = reshape(x, {B, H * W, C});
  Var n = norm_self(seq);
  seq = add(seq, self_attn(n, n, std::vector<int>(static_cast<std::size_t>(B), H * W)));
  seq = add(seq, cross_attn(norm_cross(seq), context, lengths));
  return reshape(seq, {B, H, W, C});
}

}  // namespace stackdiff::nn
