// SPDX-License-Identifier: Apache-2.0
#include "dmtl/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace dmtl::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
  }
}

bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

Tensor& input_grad(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }

const Tensor& input_value(const Node& self, std::size_t i) { return self.inputs[i]->value; }

int last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (wants_grad(self, i)) input_grad(self, i) += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) {
      Tensor& g = input_grad(self, 1);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (wants_grad(self, 0)) {
      Tensor& g = input_grad(self, 0);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      Tensor& g = input_grad(self, 1);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

Var affine(const Var& a, double s, double shift) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = s * v + shift;
  return make_result(std::move(out), {a}, [s](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const int c = last_dim(x.value());
  if (bias.value().numel() != static_cast<std::size_t>(c)) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last dim of " + to_string(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.numel() / static_cast<std::size_t>(c);
  MatMap(out.data(), static_cast<Eigen::Index>(rows), c).rowwise() +=
      ConstVecMap(bias.value().data(), c).transpose();
  return make_result(std::move(out), {x, bias}, [c, rows](Node& self) {
    if (wants_grad(self, 0)) input_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) {
      VecMap(input_grad(self, 1).data(), c) +=
          ConstMatMap(self.grad.data(), static_cast<Eigen::Index>(rows), c).colwise().sum().transpose();
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (self.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return make_result(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = input_value(self, 0);
    Tensor& g = input_grad(self, 0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Var softmax_last(const Var& x) {
  const int c = last_dim(x.value());
  Tensor out = x.value();
  const std::size_t rows = out.numel() / static_cast<std::size_t>(c);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (int j = 0; j < c; ++j) row[j] /= z;
  }
  return make_result(std::move(out), {x}, [c, rows](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.value.data() + r * c;
      const double* gy = self.grad.data() + r * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += p[j] * gy[j];
      for (int j = 0; j < c; ++j) g[r * c + j] += p[j] * (gy[j] - dot);
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require_rank(w, 2, "linear");
  const int cin = w.dim(0);
  const int cout = w.dim(1);
  if (last_dim(x.value()) != cin) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(x.value().numel() / static_cast<std::size_t>(cin));
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out(out_shape);
  MatMap y(out.data(), rows, cout);
  y.noalias() = ConstMatMap(x.value().data(), rows, cin) * ConstMatMap(w.value().data(), cin, cout);
  const bool has_bias = bias.defined();
  if (has_bias) y.rowwise() += ConstVecMap(bias.value().data(), cout).transpose();
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [rows, cin, cout, has_bias](Node& self) {
    ConstMatMap dy(self.grad.data(), rows, cout);
    if (wants_grad(self, 0)) {
      MatMap(input_grad(self, 0).data(), rows, cin).noalias() +=
          dy * ConstMatMap(input_value(self, 1).data(), cin, cout).transpose();
    }
    if (wants_grad(self, 1)) {
      MatMap(input_grad(self, 1).data(), cin, cout).noalias() +=
          ConstMatMap(input_value(self, 0).data(), rows, cin).transpose() * dy;
    }
    if (has_bias && wants_grad(self, 2)) {
      VecMap(input_grad(self, 2).data(), cout) += dy.colwise().sum().transpose();
    }
  });
}

namespace {

struct ConvGeometry {
  int n, h, w, cin, kh, kw, cout, stride, pad, oh, ow;
  Eigen::Index rows() const { return static_cast<Eigen::Index>(n) * oh * ow; }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(kh) * kw * cin; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t cols = static_cast<std::size_t>(g.cols());
  std::size_t r = 0;
  for (int b = 0; b < g.n; ++b) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox, ++r) {
        double* dst = col + r * cols;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            double* d = dst + (static_cast<std::size_t>(ky) * g.kw + kx) * g.cin;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill(d, d + g.cin, 0.0);
            } else {
              const double* s = x + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.cin;
              std::copy(s, s + g.cin, d);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const std::size_t cols = static_cast<std::size_t>(g.cols());
  std::size_t r = 0;
  for (int b = 0; b < g.n; ++b) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox, ++r) {
        const double* src = col + r * cols;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const double* s = src + (static_cast<std::size_t>(ky) * g.kw + kx) * g.cin;
            double* d = dx + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.cin;
            for (int c = 0; c < g.cin; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cin = x.dim(3);
  g.kh = w.dim(0);
  g.kw = w.dim(1);
  g.cout = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(2) != g.cin) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " has " + std::to_string(g.cin) +
                     " channels, weight expects " + std::to_string(w.dim(2)));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: input " + to_string(x.shape()) + " too small for kernel");

  auto col = std::make_shared<Storage>();
  const double* col_ptr = x.value().data();
  if (!g.pointwise()) {
    col->resize(static_cast<std::size_t>(g.rows() * g.cols()));
    im2col(x.value().data(), g, col->data());
    col_ptr = col->data();
  }

  Tensor out(Shape{g.n, g.oh, g.ow, g.cout});
  MatMap y(out.data(), g.rows(), g.cout);
  y.noalias() = ConstMatMap(col_ptr, g.rows(), g.cols()) * ConstMatMap(w.value().data(), g.cols(), g.cout);
  const bool has_bias = bias.defined();
  if (has_bias) y.rowwise() += ConstVecMap(bias.value().data(), g.cout).transpose();

  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [g, col, has_bias](Node& self) {
    ConstMatMap dy(self.grad.data(), g.rows(), g.cout);
    const double* cols = g.pointwise() ? input_value(self, 0).data() : col->data();
    if (wants_grad(self, 1)) {
      MatMap(input_grad(self, 1).data(), g.cols(), g.cout).noalias() +=
          ConstMatMap(cols, g.rows(), g.cols()).transpose() * dy;
    }
    if (has_bias && wants_grad(self, 2)) {
      VecMap(input_grad(self, 2).data(), g.cout) += dy.colwise().sum().transpose();
    }
    if (wants_grad(self, 0)) {
      ConstMatMap wm(input_value(self, 1).data(), g.cols(), g.cout);
      if (g.pointwise()) {
        MatMap(input_grad(self, 0).data(), g.rows(), g.cols()).noalias() += dy * wm.transpose();
      } else {
        RowMat dcol = dy * wm.transpose();
        col2im_add(dcol.data(), g, input_grad(self, 0).data());
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum, double eps) {
  const int c = last_dim(x.value());
  const auto rows = static_cast<Eigen::Index>(x.value().numel() / static_cast<std::size_t>(c));
  if (gamma.value().numel() != static_cast<std::size_t>(c) || beta.value().numel() != static_cast<std::size_t>(c) ||
      running_mean.numel() != static_cast<std::size_t>(c) || running_var.numel() != static_cast<std::size_t>(c)) {
    throw ShapeError("batch_norm: parameter size does not match channels of " + to_string(x.shape()));
  }
  ConstMatMap xm(x.value().data(), rows, c);
  Eigen::VectorXd mu(c);
  Eigen::VectorXd var(c);
  if (training) {
    mu = xm.colwise().mean().transpose();
    var = (xm.rowwise() - mu.transpose()).array().square().colwise().mean().transpose();
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    VecMap rm(running_mean.data(), c);
    VecMap rv(running_var.data(), c);
    rm = (1.0 - momentum) * rm + momentum * mu;
    rv = (1.0 - momentum) * rv + momentum * unbias * var;
  } else {
    mu = ConstVecMap(running_mean.data(), c);
    var = ConstVecMap(running_var.data(), c);
  }
  Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();

  auto xhat = std::make_shared<Tensor>(x.shape());
  MatMap xh(xhat->data(), rows, c);
  xh = (xm.rowwise() - mu.transpose()).array().rowwise() * inv_std.transpose().array();
  Tensor out(x.shape());
  MatMap y(out.data(), rows, c);
  y = (xh.array().rowwise() * ConstVecMap(gamma.value().data(), c).transpose().array()).rowwise() +
      ConstVecMap(beta.value().data(), c).transpose().array();

  return make_result(std::move(out), {x, gamma, beta}, [rows, c, xhat, inv_std, training](Node& self) {
    ConstMatMap dy(self.grad.data(), rows, c);
    ConstMatMap xh(xhat->data(), rows, c);
    if (wants_grad(self, 1)) {
      VecMap(input_grad(self, 1).data(), c) += (dy.array() * xh.array()).colwise().sum().transpose().matrix();
    }
    if (wants_grad(self, 2)) VecMap(input_grad(self, 2).data(), c) += dy.colwise().sum().transpose();
    if (wants_grad(self, 0)) {
      ConstVecMap gam(input_value(self, 1).data(), c);
      MatMap dx(input_grad(self, 0).data(), rows, c);
      const Eigen::RowVectorXd scale_row = (gam.array() * inv_std.array()).matrix().transpose();
      if (training) {
        const double m = static_cast<double>(rows);
        const Eigen::RowVectorXd sum_dy = dy.colwise().sum();
        const Eigen::RowVectorXd sum_dy_xh = (dy.array() * xh.array()).colwise().sum().matrix();
        for (Eigen::Index r = 0; r < rows; ++r) {
          dx.row(r).array() += scale_row.array() / m *
                               (m * dy.row(r).array() - sum_dy.array() - xh.row(r).array() * sum_dy_xh.array());
        }
      } else {
        dx +=(dy.array().rowwise() * scale_row.array()).matrix();
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int c = last_dim(x.value());
  const auto rows = static_cast<Eigen::Index>(x.value().numel() / static_cast<std::size_t>(c));
  if (gamma.value().numel() != static_cast<std::size_t>(c) || beta.value().numel() != static_cast<std::size_t>(c)) {
    throw ShapeError("layer_norm: parameter size does not match last dim of " + to_string(x.shape()));
  }
  ConstMatMap xm(x.value().data(), rows, c);
  Eigen::VectorXd mu = xm.rowwise().mean();
  Eigen::VectorXd inv_std =
      ((xm.colwise() - mu).array().square().rowwise().mean() + eps).rsqrt().matrix();
  auto xhat = std::make_shared<Tensor>(x.shape());
  MatMap xh(xhat->data(), rows, c);
  xh = ((xm.colwise() - mu).array().colwise() * inv_std.array()).matrix();
  Tensor out(x.shape());
  MatMap y(out.data(), rows, c);
  y = (xh.array().rowwise() * ConstVecMap(gamma.value().data(), c).transpose().array()).rowwise() +
      ConstVecMap(beta.value().data(), c).transpose().array();

  return make_result(std::move(out), {x, gamma, beta}, [rows, c, xhat, inv_std](Node& self) {
    ConstMatMap dy(self.grad.data(), rows, c);
    ConstMatMap xh(xhat->data(), rows, c);
    if (wants_grad(self, 1)) {
      VecMap(input_grad(self, 1).data(), c) += (dy.array() * xh.array()).colwise().sum().transpose().matrix();
    }
    if (wants_grad(self, 2)) VecMap(input_grad(self, 2).data(), c) += dy.colwise().sum().transpose();
    if (wants_grad(self, 0)) {
      ConstVecMap gam(input_value(self, 1).data(), c);
      MatMap dx(input_grad(self, 0).data(), rows, c);
      const double m = static_cast<double>(c);
      RowMat dxh = (dy.array().rowwise() * gam.transpose().array()).matrix();
      const Eigen::VectorXd sum_dxh = dxh.rowwise().sum();
      const Eigen::VectorXd sum_dxh_xh = (dxh.array() * xh.array()).rowwise().sum().matrix();
      for (Eigen::Index r = 0; r < rows; ++r) {
        dx.row(r).array() += inv_std[r] / m *
                             (m * dxh.row(r).array() - sum_dxh[r] - xh.row(r).array() * sum_dxh_xh[r]);
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  require_rank(q, 3, "attention q");
  require_rank(k, 3, "attention k");
  require_same_shape(k, v, "attention k/v");
  const int n = q.dim(0);
  const int lq = q.dim(1);
  const int c = q.dim(2);
  const int lk = k.dim(1);
  if (k.dim(0) != n || k.dim(2) != c) {
    throw ShapeError("attention: q " + to_string(q.shape()) + " incompatible with k " + to_string(k.shape()));
  }
  if (heads < 1 || c % heads != 0) {
    throw ShapeError("attention: " + std::to_string(c) + " channels not divisible into " + std::to_string(heads) +
                     " heads");
  }
  const int d = c / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  // Softmax probabilities, one Lq x Lk block per (batch, head).
  auto probs = std::make_shared<Storage>(static_cast<std::size_t>(n) * heads * lq * lk);
  Tensor out(Shape{n, lq, c});
  const Eigen::OuterStride<> stride(c);
  for (int b = 0; b < n; ++b) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t qoff = static_cast<std::size_t>(b) * lq * c + static_cast<std::size_t>(h) * d;
      const std::size_t koff = static_cast<std::size_t>(b) * lk * c + static_cast<std::size_t>(h) * d;
      ConstStridedMap qh(q.value().data() + qoff, lq, d, stride);
      ConstStridedMap kh(k.value().data() + koff, lk, d, stride);
      ConstStridedMap vh(v.value().data() + koff, lk, d, stride);
      MatMap p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk);
      p.noalias() = sc * (qh * kh.transpose());
      for (Eigen::Index r = 0; r < lq; ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      StridedMap oh(out.data() + qoff, lq, d, stride);
      oh.noalias() = p * vh;
    }
  }
  return make_result(std::move(out), {q, k, v}, [n, lq, lk, c, d, heads, sc, probs](Node& self) {
    const Eigen::OuterStride<> stride(c);
    const double* qv = input_value(self, 0).data();
    const double* kv = input_value(self, 1).data();
    const double* vv = input_value(self, 2).data();
    double* dq = wants_grad(self, 0) ? input_grad(self, 0).data() : nullptr;
    double* dk = wants_grad(self, 1) ? input_grad(self, 1).data() : nullptr;
    double* dv = wants_grad(self, 2) ? input_grad(self, 2).data() : nullptr;
    RowMat dp(lq, lk);
    for (int b = 0; b < n; ++b) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t qoff = static_cast<std::size_t>(b) * lq * c + static_cast<std::size_t>(h) * d;
        const std::size_t koff = static_cast<std::size_t>(b) * lk * c + static_cast<std::size_t>(h) * d;
        ConstMatMap p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk);
        ConstStridedMap dout(self.grad.data() + qoff, lq, d, stride);
        if (dv) StridedMap(dv + koff, lk, d, stride).noalias() += p.transpose() * dout;
        if (!dq && !dk) continue;
        dp.noalias() = dout * ConstStridedMap(vv + koff, lk, d, stride).transpose();
        // Softmax Jacobian: dS = P * (dP - rowsum(dP * P)).
        const Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum().matrix();
        dp = (p.array() * (dp.colwise() - rs).array()).matrix() * sc;
        if (dq) StridedMap(dq + qoff, lq, d, stride).noalias() += dp * ConstStridedMap(kv + koff, lk, d, stride);
        if (dk) {
          StridedMap(dk + koff, lk, d, stride).noalias() += dp.transpose() * ConstStridedMap(qv + qoff, lq, d, stride);
        }
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape lead = parts.front().shape();
  lead.pop_back();
  std::vector<int> widths;
  int total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    widths.push_back(s.back());
    s.pop_back();
    if (s != lead) throw ShapeError("concat_channels: leading dims differ for " + to_string(p.shape()));
    total += widths.back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  int off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double* src = parts[i].value().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(src + r * widths[i], src + (r + 1) * widths[i], out.data() + r * total + off);
    }
    off += widths[i];
  }
  return make_result(std::move(out), parts, [rows, widths, total](Node& self) {
    int off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants_grad(self, i)) {
        double* g = input_grad(self, i).data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* s = self.grad.data() + r * total + off;
          double* d = g + r * widths[i];
          for (int j = 0; j < widths[i]; ++j) d[j] += s[j];
        }
      }
      off += widths[i];
    }
  });
}

Var select_batch(const Var& x, const std::vector<int>& indices) {
  if (x.value().rank() < 1) throw ShapeError("select_batch on a scalar");
  const int n = x.dim(0);
  const std::size_t row = x.value().numel() / static_cast<std::size_t>(std::max(n, 1));
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(indices.size());
  Tensor out(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n) throw ShapeError("select_batch: index out of range");
    const double* s = x.value().data() + static_cast<std::size_t>(indices[i]) * row;
    std::copy(s, s + row, out.data() + i * row);
  }
  return make_result(std::move(out), {x}, [indices, row](Node& self) {
    double* g = input_grad(self, 0).data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const double* s = self.grad.data() + i * row;
      double* d = g + static_cast<std::size_t>(indices[i]) * row;
      for (std::size_t j = 0; j < row; ++j) d[j] += s[j];
    }
  });
}

namespace {

struct Lerp {
  int i0, i1;
  double w1;
};

std::vector<Lerp> lerp_table(int in, int out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return t;
}

}  // namespace

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
  require_rank(x, 4, "upsample_bilinear");
  const int n = x.dim(0);
  const int h = x.dim(1);
  const int w = x.dim(2);
  const int c = x.dim(3);
  if (out_h == h && out_w == w) return x;
  const auto ty = lerp_table(h, out_h);
  const auto tx = lerp_table(w, out_w);
  Tensor out(Shape{n, out_h, out_w, c});
  const double* in = x.value().data();
  auto pix = [&](int b, int y, int xx) { return in + ((static_cast<std::size_t>(b) * h + y) * w + xx) * c; };
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < out_h; ++oy) {
      const Lerp& ly = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
        double* d = out.data() + ((static_cast<std::size_t>(b) * out_h + oy) * out_w + ox) * c;
        const double* p00 = pix(b, ly.i0, lx.i0);
        const double* p01 = pix(b, ly.i0, lx.i1);
        const double* p10 = pix(b, ly.i1, lx.i0);
        const double* p11 = pix(b, ly.i1, lx.i1);
        const double a = (1 - ly.w1) * (1 - lx.w1), bb = (1 - ly.w1) * lx.w1, cc = ly.w1 * (1 - lx.w1),
                     dd = ly.w1 * lx.w1;
        for (int ch = 0; ch < c; ++ch) d[ch] = a * p00[ch] + bb * p01[ch] + cc * p10[ch] + dd * p11[ch];
      }
    }
  }
  return make_result(std::move(out), {x}, [n, h, w, c, out_h, out_w, ty, tx](Node& self) {
    double* g = input_grad(self, 0).data();
    auto pix = [&](int b, int y, int xx) { return g + ((static_cast<std::size_t>(b) * h + y) * w + xx) * c; };
    for (int b = 0; b < n; ++b) {
      for (int oy = 0; oy < out_h; ++oy) {
        const Lerp& ly = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const Lerp& lx = tx[static_cast<std::size_t>(ox)];
          const double* s = self.grad.data() + ((static_cast<std::size_t>(b) * out_h + oy) * out_w + ox) * c;
          double* p00 = pix(b, ly.i0, lx.i0);
          double* p01 = pix(b, ly.i0, lx.i1);
          double* p10 = pix(b, ly.i1, lx.i0);
          double* p11 = pix(b, ly.i1, lx.i1);
          const double a = (1 - ly.w1) * (1 - lx.w1), bb = (1 - ly.w1) * lx.w1, cc = ly.w1 * (1 - lx.w1),
                       dd = ly.w1 * lx.w1;
          for (int ch = 0; ch < c; ++ch) {
            p00[ch] += a * s[ch];
            p01[ch] += bb * s[ch];
            p10[ch] += cc * s[ch];
            p11[ch] += dd * s[ch];
          }
        }
      }
    }
  });
}

Var max_pool2d(const Var& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "max_pool2d");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("max_pool2d: input too small " + to_string(x.shape()));
  Tensor out(Shape{n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const double* in = x.value().data();
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ch = 0; ch < c; ++ch, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t where = 0;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              const std::size_t idx = ((static_cast<std::size_t>(b) * h + iy) * w + ix) * c + ch;
              if (in[idx] > best) {
                best = in[idx];
                where = idx;
              }
            }
          }
          out[o] = best;
          (*argmax)[o] = where;
        }
  return make_result(std::move(out), {x}, [argmax](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

Var cross_entropy(const Var& logits, const LabelMap& labels, int ignore_index) {
  require_rank(logits, 4, "cross_entropy");
  const int k = logits.dim(3);
  const std::size_t pixels = logits.value().numel() / static_cast<std::size_t>(k);
  Shape lead = logits.shape();
  lead.pop_back();
  if (labels.shape != lead) {
    throw ShapeError("cross_entropy: labels " + to_string(labels.shape) + " do not match logits " +
                     to_string(logits.shape()));
  }
  auto probs = std::make_shared<Storage>(logits.value().numel());
  double total = 0.0;
  std::size_t valid = 0;
  const double* z = logits.value().data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const int y = labels.data[p];
    if (y == ignore_index) continue;
    if (y < 0 || y >= k) throw Error("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const double* zp = z + p * k;
    double* pp = probs->data() + p * k;
    const double mx = *std::max_element(zp, zp + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += (pp[j] = std::exp(zp[j] - mx));
    for (int j = 0; j < k; ++j) pp[j] /= s;
    total += -(zp[y] - mx - std::log(s));
    ++valid;
  }
  if (valid == 0) throw Error("cross_entropy: all pixels ignored");
  const double inv = 1.0 / static_cast<double>(valid);
  return make_result(Tensor::scalar(total * inv), {logits},
                     [probs, labels, ignore_index, k, pixels, inv](Node& self) {
                       const double g0 = self.grad[0] * inv;
                       double* g = input_grad(self, 0).data();
                       for (std::size_t p = 0; p < pixels; ++p) {
                         const int y = labels.data[p];
                         if (y == ignore_index) continue;
                         const double* pp = probs->data() + p * k;
                         double* gp = g + p * k;
                         for (int j = 0; j < k; ++j) gp[j] += g0 * (pp[j] - (j == y ? 1.0 : 0.0));
                       }
                     });
}

Var masked_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("masked_l1: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  }
  const int c = last_dim(pred.value());
  const std::size_t pixels = pred.value().numel() / static_cast<std::size_t>(c);
  if (mask.size() != pixels) throw ShapeError("masked_l1: mask size does not match pixel count");
  std::size_t valid = 0;
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    if (!mask[p]) continue;
    ++valid;
    for (int j = 0; j < c; ++j) total += std::abs(pred.value()[p * c + j] - target[p * c + j]);
  }
  if (valid == 0) throw Error("masked_l1: empty validity mask");
  const double inv = 1.0 / (static_cast<double>(valid) * c);
  return make_result(Tensor::scalar(total * inv), {pred}, [target, mask, c, pixels, inv](Node& self) {
    const double g0 = self.grad[0] * inv;
    const Tensor& pv = input_value(self, 0);
    Tensor& g = input_grad(self, 0);
    for (std::size_t p = 0; p < pixels; ++p) {
      if (!mask[p]) continue;
      for (int j = 0; j < c; ++j) {
        const std::size_t i = p * c + j;
        const double diff = pv[i] - target[i];
        if (diff > 0) g[i] += g0;
        else if (diff < 0) g[i] -= g0;
      }
    }
  });
}

Var sum(const Var& x) {
  return make_result(Tensor::scalar(dmtl::sum(x.value())), {x}, [](Node& self) {
    Tensor& g = input_grad(self, 0);
    for (double& v : g.storage()) v += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  return scale(sum(x), inv);
}

Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  return make_result(Tensor::scalar(s), {x}, [](Node& self) {
    const Tensor& xv = input_value(self, 0);
    Tensor& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * xv[i] * self.grad[0];
  });
}

Var add_n(const std::vector<Var>& terms) {
  if (terms.empty()) return constant(Tensor::scalar(0.0));
  double s = 0.0;
  for (const Var& t : terms) s += t.value().item();
  return make_result(Tensor::scalar(s), terms, [](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i)
      if (wants_grad(self, i)) input_grad(self, i)[0] += self.grad[0];
  });
}

}  // namespace dmtl::ag
