#include "stackdiff/nn/ops.hpp"

#include <cmath>
#include <memory>

#include <Eigen/Core>

#include "stackdiff/error.hpp"

namespace stackdiff::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using CVec = Eigen::Map<const Eigen::VectorXd>;
using MVec = Eigen::Map<Eigen::VectorXd>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& in = parent(self, p);
      if (!in.requires_grad) continue;
      double* g = in.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.value()[i];
  return make_result(x.shape(), std::move(out), {x}, [s](Node& self) {
    double* g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var silu(const Var& x) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v / (1.0 + std::exp(-v));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& in = parent(self, 0);
    double* g = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = in.value[i];
      const double sig = 1.0 / (1.0 + std::exp(-v));
      g[i] += self.grad[i] * sig * (1.0 + v * (1.0 - sig));
    }
  });
}

Var add_per_sample(const Var& x, const Var& e) {
  if (x.shape().size() < 2 || e.shape().size() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(-1))
    throw ShapeError("add_per_sample: incompatible shapes " + shape_string(x.shape()) + " and " + shape_string(e.shape()));
  const int B = x.dim(0), C = x.dim(-1);
  const std::size_t P = x.size() / static_cast<std::size_t>(B * C);
  Buffer out(x.value());
  for (int b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p)
      for (int c = 0; c < C; ++c) out[(b * P + p) * C + c] += e.value()[static_cast<std::size_t>(b * C + c)];
  return make_result(x.shape(), std::move(out), {x, e}, [B, C, P](Node& self) {
    Node& xin = parent(self, 0);
    Node& ein = parent(self, 1);
    if (xin.requires_grad) {
      double* g = xin.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (ein.requires_grad) {
      double* g = ein.grad_buffer();
      for (int b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p)
          for (int c = 0; c < C; ++c) g[b * C + c] += self.grad[(b * P + p) * C + c];
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const int in = w.dim(0), out_dim = w.dim(1);
  if (x.dim(-1) != in)
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not match weight " + shape_string(w.shape()));
  const auto M = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(in));
  Shape shape = x.shape();
  shape.back() = out_dim;
  Buffer out(static_cast<std::size_t>(M) * out_dim);
  MapR Y(out.data(), M, out_dim);
  Y.noalias() = CMapR(x.value().data(), M, in) * CMapR(w.value().data(), in, out_dim);
  if (b) Y.rowwise() += CVec(b.value().data(), out_dim).transpose();
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_result(std::move(shape), std::move(out), std::move(inputs), [M, in, out_dim](Node& self) {
    CMapR dY(self.grad.data(), M, out_dim);
    Node& xn = parent(self, 0);
    Node& wn = parent(self, 1);
    if (xn.requires_grad) MapR(xn.grad_buffer(), M, in).noalias() += dY * CMapR(wn.value.data(), in, out_dim).transpose();
    if (wn.requires_grad) MapR(wn.grad_buffer(), in, out_dim).noalias() += CMapR(xn.value.data(), M, in).transpose() * dY;
    if (self.parents.size() > 2 && parent(self, 2).requires_grad)
      MVec(parent(self, 2).grad_buffer(), out_dim) += dY.colwise().sum().transpose();
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int k, int stride, int pad) {
  if (x.shape().size() != 4) throw ShapeError("conv2d expects NHWC input, got " + shape_string(x.shape()));
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int Cout = w.dim(1);
  if (w.dim(0) != k * k * Cin)
    throw ShapeError("conv2d: weight " + shape_string(w.shape()) + " does not match input channels " + std::to_string(Cin));
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: input too small");
  const Eigen::Index rows = static_cast<Eigen::Index>(B) * Ho * Wo;
  const Eigen::Index K = static_cast<Eigen::Index>(k) * k * Cin;

  auto cols = std::make_shared<Buffer>(static_cast<std::size_t>(rows * K), 0.0);
  const double* xv = x.value().data();
  for (int bi = 0; bi < B; ++bi)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double* row = cols->data() + ((static_cast<std::size_t>(bi) * Ho + oy) * Wo + ox) * K;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const double* src = xv + ((static_cast<std::size_t>(bi) * H + iy) * W + ix) * Cin;
            std::copy(src, src + Cin, row + (ky * k + kx) * Cin);
          }
        }
      }

  Buffer out(static_cast<std::size_t>(rows) * Cout);
  MapR Y(out.data(), rows, Cout);
  Y.noalias() = CMapR(cols->data(), rows, K) * CMapR(w.value().data(), K, Cout);
  if (b) Y.rowwise() += CVec(b.value().data(), Cout).transpose();

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_result({B, Ho, Wo, Cout}, std::move(out), std::move(inputs),
                     [cols, B, H, W, Cin, Cout, Ho, Wo, k, stride, pad, rows, K](Node& self) {
                       CMapR dY(self.grad.data(), rows, Cout);
                       Node& xn = parent(self, 0);
                       Node& wn = parent(self, 1);
                       if (wn.requires_grad)
                         MapR(wn.grad_buffer(), K, Cout).noalias() += CMapR(cols->data(), rows, K).transpose() * dY;
                       if (self.parents.size() > 2 && parent(self, 2).requires_grad)
                         MVec(parent(self, 2).grad_buffer(), Cout) += dY.colwise().sum().transpose();
                       if (!xn.requires_grad) return;
                       MatR dcols = dY * CMapR(wn.value.data(), K, Cout).transpose();
                       double* gx = xn.grad_buffer();
                       for (int bi = 0; bi < B; ++bi)
                         for (int oy = 0; oy < Ho; ++oy)
                           for (int ox = 0; ox < Wo; ++ox) {
                             const double* row = dcols.data() + ((static_cast<std::size_t>(bi) * Ho + oy) * Wo + ox) * K;
                             for (int ky = 0; ky < k; ++ky) {
                               const int iy = oy * stride - pad + ky;
                               if (iy < 0 || iy >= H) continue;
                               for (int kx = 0; kx < k; ++kx) {
                                 const int ix = ox * stride - pad + kx;
                                 if (ix < 0 || ix >= W) continue;
                                 double* dst = gx + ((static_cast<std::size_t>(bi) * H + iy) * W + ix) * Cin;
                                 const double* src = row + (ky * k + kx) * Cin;
                                 for (int c = 0; c < Cin; ++c) dst[c] += src[c];
                               }
                             }
                           }
                     });
}

namespace {

// Shared normalization kernel: `x` viewed as [B, P, C], statistics per
// (b, channel group) over P positions and the group's channels.
Var normalize(const Var& x, const Var& gamma, const Var& beta, int B, std::size_t P, int C, int groups, double eps) {
  if (C % groups != 0) throw ShapeError("normalization: channels not divisible by group count");
  if (static_cast<int>(gamma.size()) != C || static_cast<int>(beta.size()) != C)
    throw ShapeError("normalization: affine parameters do not match channel count");
  const int Cg = C / groups;
  const double n = static_cast<double>(P * static_cast<std::size_t>(Cg));
  auto xhat = std::make_shared<Buffer>(x.size());
  auto rstd = std::make_shared<Buffer>(static_cast<std::size_t>(B * groups));
  Buffer out(x.size());
  const double* xv = x.value().data();
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      double mean = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (int c = g * Cg; c < (g + 1) * Cg; ++c) mean += xv[(b * P + p) * C + c];
      mean /= n;
      double var = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (int c = g * Cg; c < (g + 1) * Cg; ++c) {
          const double d = xv[(b * P + p) * C + c] - mean;
          var += d * d;
        }
      var /= n;
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[static_cast<std::size_t>(b * groups + g)] = r;
      for (std::size_t p = 0; p < P; ++p)
        for (int c = g * Cg; c < (g + 1) * Cg; ++c) {
          const std::size_t i = (b * P + p) * C + c;
          (*xhat)[i] = (xv[i] - mean) * r;
          out[i] = (*xhat)[i] * gamma.value()[static_cast<std::size_t>(c)] + beta.value()[static_cast<std::size_t>(c)];
        }
    }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [xhat, rstd, B, P, C, groups, Cg, n](Node& self) {
    Node& xn = parent(self, 0);
    Node& gn = parent(self, 1);
    Node& bn = parent(self, 2);
    const double* dy = self.grad.data();
    if (gn.requires_grad || bn.requires_grad) {
      double* dg = gn.grad_buffer();
      double* db = bn.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const std::size_t c = i % static_cast<std::size_t>(C);
        dg[c] += dy[i] * (*xhat)[i];
        db[c] += dy[i];
      }
    }
    if (!xn.requires_grad) return;
    double* dx = xn.grad_buffer();
    const double* gamma = gn.value.data();
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g) {
        double sum = 0.0, sum_xhat = 0.0;
        for (std::size_t p = 0; p < P; ++p)
          for (int c = g * Cg; c < (g + 1) * Cg; ++c) {
            const std::size_t i = (b * P + p) * C + c;
            const double dxh = dy[i] * gamma[c];
            sum += dxh;
            sum_xhat += dxh * (*xhat)[i];
          }
        const double r = (*rstd)[static_cast<std::size_t>(b * groups + g)];
        for (std::size_t p = 0; p < P; ++p)
          for (int c = g * Cg; c < (g + 1) * Cg; ++c) {
            const std::size_t i = (b * P + p) * C + c;
            const double dxh = dy[i] * gamma[c];
            dx[i] += r / n * (n * dxh - sum - (*xhat)[i] * sum_xhat);
          }
      }
  });
}

}  // namespace

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  if (x.shape().size() < 2) throw ShapeError("group_norm expects a batched tensor");
  const int B = x.dim(0), C = x.dim(-1);
  return normalize(x, gamma, beta, B, x.size() / static_cast<std::size_t>(B * C), C, groups, eps);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int C = x.dim(-1);
  const int rows = static_cast<int>(x.size() / static_cast<std::size_t>(C));
  return normalize(x, gamma, beta, rows, 1, C, 1, eps);
}

Var attention(const Var& q, const Var& k, const Var& v, const std::vector<int>& key_lengths, int heads) {
  if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape() != k.shape())
    throw ShapeError("attention expects q [B,S,D] and k, v [B,L,D]");
  const int B = q.dim(0), S = q.dim(1), D = q.dim(2), L = k.dim(1);
  if (k.dim(0) != B || k.dim(2) != D) throw ShapeError("attention: key shape does not match queries");
  if (static_cast<int>(key_lengths.size()) != B) throw ShapeError("attention: one key length per sample required");
  if (D % heads != 0) throw ShapeError("attention: width not divisible by head count");
  const int dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<MatR>>(static_cast<std::size_t>(B * heads));
  Buffer out(q.size(), 0.0);
  for (int b = 0; b < B; ++b) {
    const int Lb = key_lengths[static_cast<std::size_t>(b)];
    if (Lb < 1 || Lb > L) throw ShapeError("attention: key length out of range");
    CMapR Q(q.value().data() + static_cast<std::size_t>(b) * S * D, S, D);
    CMapR K(k.value().data() + static_cast<std::size_t>(b) * L * D, L, D);
    CMapR V(v.value().data() + static_cast<std::size_t>(b) * L * D, L, D);
    MapR O(out.data() + static_cast<std::size_t>(b) * S * D, S, D);
    for (int h = 0; h < heads; ++h) {
      MatR s = (Q.middleCols(h * dh, dh) * K.topRows(Lb).middleCols(h * dh, dh).transpose()) * sc;
      for (int i = 0; i < S; ++i) {
        const double m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
      }
      O.middleCols(h * dh, dh).noalias() = s * V.topRows(Lb).middleCols(h * dh, dh);
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  return make_result(q.shape(), std::move(out), {q, k, v}, [probs, key_lengths, B, S, D, L, heads, dh, sc](Node& self) {
    Node& qn = parent(self, 0);
    Node& kn = parent(self, 1);
    Node& vn = parent(self, 2);
    for (int b = 0; b < B; ++b) {
      const int Lb = key_lengths[static_cast<std::size_t>(b)];
      CMapR Q(qn.value.data() + static_cast<std::size_t>(b) * S * D, S, D);
      CMapR K(kn.value.data() + static_cast<std::size_t>(b) * L * D, L, D);
      CMapR V(vn.value.data() + static_cast<std::size_t>(b) * L * D, L, D);
      CMapR dO(self.grad.data() + static_cast<std::size_t>(b) * S * D, S, D);
      for (int h = 0; h < heads; ++h) {
        const MatR& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
        const auto dOh = dO.middleCols(h * dh, dh);
        if (vn.requires_grad) {
          MapR dV(vn.grad_buffer() + static_cast<std::size_t>(b) * L * D, L, D);
          dV.topRows(Lb).middleCols(h * dh, dh).noalias() += P.transpose() * dOh;
        }
        if (!qn.requires_grad && !kn.requires_grad) continue;
        MatR dP = dOh * V.topRows(Lb).middleCols(h * dh, dh).transpose();
        const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
        MatR dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * sc;
        if (qn.requires_grad) {
          MapR dQ(qn.grad_buffer() + static_cast<std::size_t>(b) * S * D, S, D);
          dQ.middleCols(h * dh, dh).noalias() += dS * K.topRows(Lb).middleCols(h * dh, dh);
        }
        if (kn.requires_grad) {
          MapR dK(kn.grad_buffer() + static_cast<std::size_t>(b) * L * D, L, D);
          dK.topRows(Lb).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
        }
      }
    }
  });
}

Var upsample2x(const Var& x, int out_h, int out_w) {
  if (x.shape().size() != 4) throw ShapeError("upsample2x expects NHWC input");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (out_h > 2 * H || out_w > 2 * W || out_h < 1 || out_w < 1) throw ShapeError("upsample2x: target size out of range");
  Buffer out(static_cast<std::size_t>(B) * out_h * out_w * C);
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) {
        const double* src = x.value().data() + ((static_cast<std::size_t>(b) * H + y / 2) * W + xx / 2) * C;
        std::copy(src, src + C, out.data() + ((static_cast<std::size_t>(b) * out_h + y) * out_w + xx) * C);
      }
  return make_result({B, out_h, out_w, C}, std::move(out), {x}, [B, H, W, C, out_h, out_w](Node& self) {
    double* g = parent(self, 0).grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx) {
          const double* src = self.grad.data() + ((static_cast<std::size_t>(b) * out_h + y) * out_w + xx) * C;
          double* dst = g + ((static_cast<std::size_t>(b) * H + y / 2) * W + xx / 2) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
  });
}

Var concat_last(const Var& a, const Var& b) {
  Shape sa = a.shape(), sb = b.shape();
  const int ca = sa.back(), cb = sb.back();
  sa.pop_back();
  sb.pop_back();
  if (sa != sb) throw ShapeError("concat_last: leading dimensions differ");
  const std::size_t rows = numel(sa);
  Buffer out(rows * static_cast<std::size_t>(ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.value().data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  Shape shape = sa;
  shape.push_back(ca + cb);
  return make_result(std::move(shape), std::move(out), {a, b}, [rows, ca, cb](Node& self) {
    Node& an = parent(self, 0);
    Node& bn = parent(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = self.grad.data() + r * (ca + cb);
      if (an.requires_grad) {
        double* d = an.grad_buffer() + r * ca;
        for (int c = 0; c < ca; ++c) d[c] += src[c];
      }
      if (bn.requires_grad) {
        double* d = bn.grad_buffer() + r * cb;
        for (int c = 0; c < cb; ++c) d[c] += src[ca + c];
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.size()) throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  return make_result(std::move(shape), x.value(), {x}, [](Node& self) {
    double* g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var mse(const Var& pred, std::span<const double> target) {
  if (target.size() != pred.size()) throw ShapeError("mse: target size does not match prediction");
  double sum = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = pred.value()[i] - target[i];
    sum += d * d;
  }
  const double n = static_cast<double>(target.size());
  auto tgt = std::make_shared<Buffer>(target.begin(), target.end());
  return make_result({}, {sum / n}, {pred}, [tgt, n](Node& self) {
    Node& p = parent(self, 0);
    double* g = p.grad_buffer();
    const double s = self.grad[0] * 2.0 / n;
    for (std::size_t i = 0; i < tgt->size(); ++i) g[i] += s * (p.value[i] - (*tgt)[i]);
  });
}

}  // namespace stackdiff::nn
