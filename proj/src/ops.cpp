#include "mtnas/ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

namespace mtnas::ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

std::vector<int> strides_of(const Shape& s) {
  std::vector<int> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// (outer, n, inner) factorization around `axis`.
void axis_split(const Shape& s, int axis, int& outer, int& n, int& inner) {
  require(axis >= 0 && axis < static_cast<int>(s.size()),
          "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
}

void accum_grad(const Tensor& t, const Array& g) {
  if (t.requires_grad()) t.node()->grad_ref() += g;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    Array out = a.value() + b.value();
    return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
      accum_grad(a, n.grad);
      accum_grad(b, n.grad);
    }, "add");
  }
  // Broadcast rank-1 b over the last axis of a.
  require(b.rank() == 1 && a.shape().back() == b.shape()[0],
          "add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int k = b.shape()[0];
  int rows = a.size() / k;
  Array out = a.value();
  MapRM(out.data(), rows, k).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), k);
  return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b, rows, k](Node& n) {
    accum_grad(a, n.grad);
    if (b.requires_grad()) {
      Array gb = CMapRM(n.grad.data(), rows, k).colwise().sum().transpose().array();
      b.node()->grad_ref() += gb;
    }
  }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Array out = a.value() - b.value();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
    accum_grad(a, n.grad);
    if (b.requires_grad()) b.node()->grad_ref() -= n.grad;
  }, "sub");
}

Tensor scale(const Tensor& a, double s) {
  Array out = a.value() * s;
  return Tensor::make(a.shape(), std::move(out), {a}, [a, s](Node& n) {
    if (a.requires_grad()) a.node()->grad_ref() += s * n.grad;
  }, "scale");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Array out = a.value() * b.value();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [a, b](Node& n) {
    if (a.requires_grad()) a.node()->grad_ref() += n.grad * b.value();
    if (b.requires_grad()) b.node()->grad_ref() += n.grad * a.value();
  }, "mul");
}

Tensor gelu(const Tensor& a) {
  auto normal_cdf = [](const Array& x) {
    return Array(x.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); }));
  };
  const Array& x = a.value();
  Array out = x * normal_cdf(x);
  return Tensor::make(a.shape(), std::move(out), {a}, [a, normal_cdf](Node& n) {
    if (!a.requires_grad()) return;
    const Array& x = a.value();
    Array cdf = normal_cdf(x);
    Array pdf = (-0.5 * x.square()).exp() / std::sqrt(2.0 * M_PI);
    a.node()->grad_ref() += n.grad * (cdf + x * pdf);
  }, "gelu");
}

Tensor exp(const Tensor& a) {
  Array out = a.value().exp();
  return Tensor::make(a.shape(), std::move(out), {a}, [a](Node& n) {
    if (a.requires_grad()) a.node()->grad_ref() += n.grad * n.value;
  }, "exp");
}

Tensor log(const Tensor& a) {
  Array out = a.value().log();
  return Tensor::make(a.shape(), std::move(out), {a}, [a](Node& n) {
    if (a.requires_grad()) a.node()->grad_ref() += n.grad / a.value();
  }, "log");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
          "matmul: expected matching 2D or 3D operands, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  int batches = 1, m, k, n;
  if (a.rank() == 3) {
    require(a.shape()[0] == b.shape()[0], "matmul: batch mismatch");
    batches = a.shape()[0];
    m = a.shape()[1];
    k = a.shape()[2];
    require(b.shape()[1] == k, "matmul: inner dimension mismatch");
    n = b.shape()[2];
  } else {
    m = a.shape()[0];
    k = a.shape()[1];
    require(b.shape()[0] == k, "matmul: inner dimension mismatch");
    n = b.shape()[1];
  }
  Array out(batches * m * n);
  for (int t = 0; t < batches; ++t) {
    CMapRM A(a.value().data() + t * m * k, m, k);
    CMapRM B(b.value().data() + t * k * n, k, n);
    MapRM(out.data() + t * m * n, m, n).noalias() = A * B;
  }
  Shape os = a.rank() == 3 ? Shape{batches, m, n} : Shape{m, n};
  return Tensor::make(std::move(os), std::move(out), {a, b},
                      [a, b, batches, m, k, n](Node& nd) {
    for (int t = 0; t < batches; ++t) {
      CMapRM G(nd.grad.data() + t * m * n, m, n);
      if (a.requires_grad()) {
        CMapRM B(b.value().data() + t * k * n, k, n);
        MapRM(a.node()->grad_ref().data() + t * m * k, m, k).noalias() += G * B.transpose();
      }
      if (b.requires_grad()) {
        CMapRM A(a.value().data() + t * m * k, m, k);
        MapRM(b.node()->grad_ref().data() + t * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  }, "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad operand ranks");
  int rows = x.shape()[0], k = x.shape()[1], o = w.shape()[0];
  require(w.shape()[1] == k, "linear: weight columns " + std::to_string(w.shape()[1]) +
                                 " vs input features " + std::to_string(k));
  require(b.shape()[0] == o, "linear: bias length mismatch");
  Array out(rows * o);
  CMapRM X(x.value().data(), rows, k);
  CMapRM W(w.value().data(), o, k);
  MapRM Y(out.data(), rows, o);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), o);
  return Tensor::make({rows, o}, std::move(out), {x, w, b},
                      [x, w, b, rows, k, o](Node& n) {
    CMapRM G(n.grad.data(), rows, o);
    if (x.requires_grad()) {
      CMapRM W(w.value().data(), o, k);
      MapRM(x.node()->grad_ref().data(), rows, k).noalias() += G * W;
    }
    if (w.requires_grad()) {
      CMapRM X(x.value().data(), rows, k);
      MapRM(w.node()->grad_ref().data(), o, k).noalias() += G.transpose() * X;
    }
    if (b.requires_grad()) {
      b.node()->grad_ref() += G.colwise().sum().transpose().array();
    }
  }, "linear");
}

Tensor softmax(const Tensor& a, int axis) {
  int outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Array out(a.size());
  const double* src = a.value().data();
  double* dst = out.data();
  for (int o = 0; o < outer; ++o) {
    for (int i = 0; i < inner; ++i) {
      const double* s = src + o * n * inner + i;
      double* d = dst + o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) mx = std::max(mx, s[j * inner]);
      double z = 0;
      for (int j = 0; j < n; ++j) z += std::exp(s[j * inner] - mx);
      for (int j = 0; j < n; ++j) d[j * inner] = std::exp(s[j * inner] - mx) / z;
    }
  }
  return Tensor::make(a.shape(), std::move(out), {a}, [a, outer, n, inner](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* y = nd.value.data();
    const double* g = nd.grad.data();
    for (int o = 0; o < outer; ++o) {
      for (int i = 0; i < inner; ++i) {
        int base = o * n * inner + i;
        double dot = 0;
        for (int j = 0; j < n; ++j) dot += y[base + j * inner] * g[base + j * inner];
        for (int j = 0; j < n; ++j) {
          ga[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
        }
      }
    }
  }, "softmax");
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  int e = a.shape().back();
  require(gain.rank() == 1 && gain.shape()[0] == e, "layer_norm: gain length mismatch");
  require(bias.rank() == 1 && bias.shape()[0] == e, "layer_norm: bias length mismatch");
  int lanes = a.size() / e;
  Array out(a.size());
  Array xhat(a.size());
  Array inv_std(lanes);
  const double* x = a.value().data();
  for (int l = 0; l < lanes; ++l) {
    Eigen::Map<const Array> xl(x + l * e, e);
    double mu = xl.mean();
    double var = (xl - mu).square().mean();
    double is = 1.0 / std::sqrt(var + kEps);
    inv_std[l] = is;
    Eigen::Map<Array> xh(xhat.data() + l * e, e);
    xh = (xl - mu) * is;
    Eigen::Map<Array>(out.data() + l * e, e) = xh * gain.value() + bias.value();
  }
  return Tensor::make(a.shape(), std::move(out), {a, gain, bias},
                      [a, gain, bias, lanes, e, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Node& nd) {
    const double* g = nd.grad.data();
    for (int l = 0; l < lanes; ++l) {
      Eigen::Map<const Array> gl(g + l * e, e);
      Eigen::Map<const Array> xh(xhat.data() + l * e, e);
      if (gain.requires_grad()) gain.node()->grad_ref() += gl * xh;
      if (bias.requires_grad()) bias.node()->grad_ref() += gl;
      if (a.requires_grad()) {
        Array dxhat = gl * gain.value();
        double m1 = dxhat.mean();
        double m2 = (dxhat * xh).mean();
        Eigen::Map<Array>(a.node()->grad_ref().data() + l * e, e) +=
            inv_std[l] * (dxhat - m1 - xh * m2);
      }
    }
  }, "layer_norm");
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_size(shape) == a.size(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return Tensor::make(std::move(shape), a.value(), {a}, [a](Node& n) {
    accum_grad(a, n.grad);
  }, "reshape");
}

Tensor transpose(const Tensor& a, const std::vector<int>& perm) {
  int r = a.rank();
  require(static_cast<int>(perm.size()) == r, "transpose: permutation rank mismatch");
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = a.shape()[perm[i]];
  auto in_st = strides_of(a.shape());
  auto out_st = strides_of(os);
  Array out(a.size());
  const double* src = a.value().data();
  // dst index decomposed in output coordinates; source offset via permuted strides.
  std::vector<int> src_stride(r);
  for (int i = 0; i < r; ++i) src_stride[i] = in_st[perm[i]];
  int total = a.size();
  std::vector<int> idx(r, 0);
  int src_off = 0;
  for (int d = 0; d < total; ++d) {
    out[d] = src[src_off];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < os[i]) {
        src_off += src_stride[i];
        break;
      }
      src_off -= src_stride[i] * (os[i] - 1);
      idx[i] = 0;
    }
  }
  return Tensor::make(os, std::move(out), {a},
                      [a, os, src_stride, r](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    std::vector<int> idx(r, 0);
    int src_off = 0;
    int total = static_cast<int>(nd.value.size());
    for (int d = 0; d < total; ++d) {
      ga[src_off] += g[d];
      for (int i = r - 1; i >= 0; --i) {
        if (++idx[i] < os[i]) {
          src_off += src_stride[i];
          break;
        }
        src_off -= src_stride[i] * (os[i] - 1);
        idx[i] = 0;
      }
    }
  }, "transpose");
}

Tensor slice(const Tensor& a, const std::vector<int>& starts,
             const std::vector<int>& extents) {
  int r = a.rank();
  require(static_cast<int>(starts.size()) == r && static_cast<int>(extents.size()) == r,
          "slice: starts/extents rank mismatch");
  for (int i = 0; i < r; ++i) {
    require(starts[i] >= 0 && extents[i] >= 1 && starts[i] + extents[i] <= a.shape()[i],
            "slice: range out of bounds on axis " + std::to_string(i));
  }
  auto in_st = strides_of(a.shape());
  Shape os(extents.begin(), extents.end());
  int total = shape_size(os);
  Array out(total);
  const double* src = a.value().data();
  std::vector<int> idx(r, 0);
  for (int d = 0; d < total; ++d) {
    int off = 0;
    for (int i = 0; i < r; ++i) off += (starts[i] + idx[i]) * in_st[i];
    out[d] = src[off];
    for (int i = r - 1; i >= 0 && ++idx[i] == os[i]; --i) idx[i] = 0;
  }
  return Tensor::make(os, std::move(out), {a},
                      [a, starts, os, in_st, r](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    std::vector<int> idx(r, 0);
    int total = static_cast<int>(nd.value.size());
    for (int d = 0; d < total; ++d) {
      int off = 0;
      for (int i = 0; i < r; ++i) off += (starts[i] + idx[i]) * in_st[i];
      ga[off] += g[d];
      for (int i = r - 1; i >= 0 && ++idx[i] == os[i]; --i) idx[i] = 0;
    }
  }, "slice");
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
  require(!ts.empty(), "concat: no inputs");
  Shape base = ts[0].shape();
  int r = static_cast<int>(base.size());
  require(axis >= 0 && axis < r, "concat: axis out of range");
  int axis_total = 0;
  for (const auto& t : ts) {
    require(t.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      require(i == axis || t.shape()[i] == base[i], "concat: shape mismatch off-axis");
    }
    axis_total += t.shape()[axis];
  }
  Shape os = base;
  os[axis] = axis_total;
  int outer, n_unused, inner;
  axis_split(os, axis, outer, n_unused, inner);
  Array out(shape_size(os));
  int off = 0;
  for (const auto& t : ts) {
    int n_t = t.shape()[axis];
    for (int o = 0; o < outer; ++o) {
      std::copy_n(t.value().data() + o * n_t * inner, n_t * inner,
                  out.data() + (o * axis_total + off) * inner);
    }
    off += n_t;
  }
  std::vector<Tensor> parents = ts;
  return Tensor::make(os, std::move(out), parents,
                      [ts, outer, inner, axis_total, axis](Node& nd) {
    const double* g = nd.grad.data();
    int off = 0;
    for (const auto& t : ts) {
      int n_t = t.shape()[axis];
      if (t.requires_grad()) {
        Array& ga = t.node()->grad_ref();
        for (int o = 0; o < outer; ++o) {
          Eigen::Map<Array>(ga.data() + o * n_t * inner, n_t * inner) +=
              Eigen::Map<const Array>(g + (o * axis_total + off) * inner, n_t * inner);
        }
      }
      off += n_t;
    }
  }, "concat");
}

Tensor sum(const Tensor& a, int axis) {
  int outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Shape os;
  for (int i = 0; i < a.rank(); ++i) {
    if (i != axis) os.push_back(a.shape()[i]);
  }
  if (os.empty()) os = {1};
  Array out = Array::Zero(outer * inner);
  const double* src = a.value().data();
  for (int o = 0; o < outer; ++o) {
    for (int j = 0; j < n; ++j) {
      Eigen::Map<Array>(out.data() + o * inner, inner) +=
          Eigen::Map<const Array>(src + (o * n + j) * inner, inner);
    }
  }
  return Tensor::make(os, std::move(out), {a}, [a, outer, n, inner](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    for (int o = 0; o < outer; ++o) {
      for (int j = 0; j < n; ++j) {
        Eigen::Map<Array>(ga.data() + (o * n + j) * inner, inner) +=
            Eigen::Map<const Array>(g + o * inner, inner);
      }
    }
  }, "sum");
}

Tensor sum_all(const Tensor& a) {
  Array out = Array::Constant(1, a.value().sum());
  return Tensor::make({1}, std::move(out), {a}, [a](Node& nd) {
    if (a.requires_grad()) a.node()->grad_ref() += nd.grad[0];
  }, "sum_all");
}

Tensor mean(const Tensor& a, int axis) {
  return scale(sum(a, axis), 1.0 / a.shape()[axis]);
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / a.size()); }

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require(logits.rank() == 2, "cross_entropy: logits must be (N, C)");
  int n = logits.shape()[0], c = logits.shape()[1];
  require(static_cast<int>(targets.size()) == n, "cross_entropy: target count mismatch");
  const double* x = logits.value().data();
  Array probs(n * c);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    int t = targets[i];
    require(t >= 0 && t < c, "cross_entropy: target class out of range");
    Eigen::Map<const Array> row(x + i * c, c);
    double mx = row.maxCoeff();
    Array ex = (row - mx).exp();
    double z = ex.sum();
    Eigen::Map<Array>(probs.data() + i * c, c) = ex / z;
    loss += std::log(z) + mx - row[t];
  }
  Array out = Array::Constant(1, loss / n);
  return Tensor::make({1}, std::move(out), {logits},
                      [logits, targets, n, c, probs = std::move(probs)](Node& nd) {
    if (!logits.requires_grad()) return;
    Array& g = logits.node()->grad_ref();
    double s = nd.grad[0] / n;
    for (int i = 0; i < n; ++i) {
      Eigen::Map<Array>(g.data() + i * c, c) +=
          s * Eigen::Map<const Array>(probs.data() + i * c, c);
      g[i * c + targets[i]] -= s;
    }
  }, "cross_entropy");
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require(pred.shape() == target.shape(), "l1_loss: shape mismatch " +
          shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  Array diff = pred.value() - target.value();
  Array out = Array::Constant(1, diff.abs().mean());
  return Tensor::make({1}, std::move(out), {pred, target},
                      [pred, target, diff = std::move(diff)](Node& nd) {
    double s = nd.grad[0] / diff.size();
    Array sgn = diff.sign();
    if (pred.requires_grad()) pred.node()->grad_ref() += s * sgn;
    if (target.requires_grad()) target.node()->grad_ref() -= s * sgn;
  }, "l1_loss");
}

namespace {
int pad_up(int x, int m) { return (x + m - 1) / m * m; }
}  // namespace

Tensor window_partition(const Tensor& a, int win) {
  require(a.rank() == 3, "window_partition: expected (H, W, C)");
  require(win >= 1, "window_partition: window must be positive");
  int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
  int hp = pad_up(h, win), wp = pad_up(w, win);
  int nh = hp / win, nw = wp / win;
  int t = win * win;
  Array out = Array::Zero(nh * nw * t * c);
  const double* src = a.value().data();
  for (int bi = 0; bi < nh; ++bi) {
    for (int bj = 0; bj < nw; ++bj) {
      int b = bi * nw + bj;
      for (int pi = 0; pi < win; ++pi) {
        int y = bi * win + pi;
        if (y >= h) continue;
        for (int pj = 0; pj < win; ++pj) {
          int x = bj * win + pj;
          if (x >= w) continue;
          std::copy_n(src + (y * w + x) * c, c,
                      out.data() + (b * t + pi * win + pj) * c);
        }
      }
    }
  }
  return Tensor::make({nh * nw, t, c}, std::move(out), {a},
                      [a, h, w, c, win, nw](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    int t = win * win;
    for (int y = 0; y < h; ++y) {
      int bi = y / win, pi = y % win;
      for (int x = 0; x < w; ++x) {
        int b = bi * nw + x / win;
        int p = pi * win + x % win;
        Eigen::Map<Array>(ga.data() + (y * w + x) * c, c) +=
            Eigen::Map<const Array>(g + (b * t + p) * c, c);
      }
    }
  }, "window_partition");
}

Tensor window_reverse(const Tensor& a, int height, int width, int win) {
  require(a.rank() == 3, "window_reverse: expected (n_windows, win*win, C)");
  int hp = pad_up(height, win), wp = pad_up(width, win);
  int nh = hp / win, nw = wp / win;
  int t = win * win;
  require(a.shape()[0] == nh * nw && a.shape()[1] == t,
          "window_reverse: window layout mismatch for " + shape_str(a.shape()));
  int c = a.shape()[2];
  Array out(height * width * c);
  const double* src = a.value().data();
  for (int y = 0; y < height; ++y) {
    int bi = y / win, pi = y % win;
    for (int x = 0; x < width; ++x) {
      int b = bi * nw + x / win;
      int p = pi * win + x % win;
      std::copy_n(src + (b * t + p) * c, c, out.data() + (y * width + x) * c);
    }
  }
  return Tensor::make({height, width, c}, std::move(out), {a},
                      [a, height, width, c, win, nw](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    int t = win * win;
    for (int y = 0; y < height; ++y) {
      int bi = y / win, pi = y % win;
      for (int x = 0; x < width; ++x) {
        int b = bi * nw + x / win;
        int p = pi * win + x % win;
        Eigen::Map<Array>(ga.data() + (b * t + p) * c, c) +=
            Eigen::Map<const Array>(g + (y * width + x) * c, c);
      }
    }
  }, "window_reverse");
}

Tensor window_pad_mask(int height, int width, int win) {
  if (height % win == 0 && width % win == 0) return Tensor();
  int hp = pad_up(height, win), wp = pad_up(width, win);
  int nh = hp / win, nw = wp / win;
  int t = win * win;
  Array mask = Array::Zero(nh * nw * t * t);
  for (int b = 0; b < nh * nw; ++b) {
    int bi = b / nw, bj = b % nw;
    for (int key = 0; key < t; ++key) {
      int y = bi * win + key / win;
      int x = bj * win + key % win;
      if (y < height && x < width) continue;
      for (int q = 0; q < t; ++q) mask[(b * t + q) * t + key] = -1e9;
    }
  }
  return Tensor::from({nh * nw, t, t}, std::move(mask));
}

Tensor nearest_upsample_2x(const Tensor& a) {
  require(a.rank() == 3, "nearest_upsample_2x: expected (H, W, C)");
  int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
  Array out(4 * h * w * c);
  const double* src = a.value().data();
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < 2 * w; ++x) {
      std::copy_n(src + ((y / 2) * w + x / 2) * c, c,
                  out.data() + (y * 2 * w + x) * c);
    }
  }
  return Tensor::make({2 * h, 2 * w, c}, std::move(out), {a}, [a, h, w, c](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < 2 * w; ++x) {
        Eigen::Map<Array>(ga.data() + ((y / 2) * w + x / 2) * c, c) +=
            Eigen::Map<const Array>(g + (y * 2 * w + x) * c, c);
      }
    }
  }, "nearest_upsample_2x");
}

Tensor avgpool_2x(const Tensor& a) {
  require(a.rank() == 3, "avgpool_2x: expected (H, W, C)");
  int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
  require(h % 2 == 0 && w % 2 == 0, "avgpool_2x: odd spatial side " + shape_str(a.shape()));
  int oh = h / 2, ow = w / 2;
  Array out = Array::Zero(oh * ow * c);
  const double* src = a.value().data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Eigen::Map<Array>(out.data() + ((y / 2) * ow + x / 2) * c, c) +=
          0.25 * Eigen::Map<const Array>(src + (y * w + x) * c, c);
    }
  }
  return Tensor::make({oh, ow, c}, std::move(out), {a}, [a, h, w, c, ow](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    const double* g = nd.grad.data();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        Eigen::Map<Array>(ga.data() + (y * w + x) * c, c) +=
            0.25 * Eigen::Map<const Array>(g + ((y / 2) * ow + x / 2) * c, c);
      }
    }
  }, "avgpool_2x");
}

Tensor global_avg_pool(const Tensor& a) {
  require(a.rank() == 3, "global_avg_pool: expected (H, W, C)");
  int hw = a.shape()[0] * a.shape()[1], c = a.shape()[2];
  Array out = Array::Zero(c);
  const double* src = a.value().data();
  for (int i = 0; i < hw; ++i) {
    out += Eigen::Map<const Array>(src + i * c, c);
  }
  out /= hw;
  return Tensor::make({c}, std::move(out), {a}, [a, hw, c](Node& nd) {
    if (!a.requires_grad()) return;
    Array& ga = a.node()->grad_ref();
    for (int i = 0; i < hw; ++i) {
      Eigen::Map<Array>(ga.data() + i * c, c) += nd.grad / hw;
    }
  }, "global_avg_pool");
}

}  // namespace mtnas::ops
