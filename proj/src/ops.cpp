#include "xkt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "xkt/errors.hpp"
#include "xkt/parallel.hpp"

namespace xkt {

using detail::make_result;
using detail::Node;

namespace {

std::string shapes_message(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) +
         " are incompatible";
}

void require_defined(const Tensor& x, const char* op) {
  if (!x.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

real* grad_ptr(Node& n) { return n.requires_grad ? n.ensure_grad().data() : nullptr; }

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size()) throw DimensionError(shapes_message(op, a, b));
  auto sa = row_major_strides(a);
  auto sb = row_major_strides(b);
  p.out.resize(a.size());
  p.sa.resize(a.size());
  p.sb.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      p.out[i] = a[i];
      p.sa[i] = sa[i];
      p.sb[i] = sb[i];
    } else if (a[i] == 1) {
      p.out[i] = b[i];
      p.sa[i] = 0;
      p.sb[i] = sb[i];
    } else if (b[i] == 1) {
      p.out[i] = a[i];
      p.sa[i] = sa[i];
      p.sb[i] = 0;
    } else {
      throw DimensionError(shapes_message(op, a, b));
    }
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  std::size_t n = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += p.sa[ax];
      ib += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.sa[ax] * p.out[ax];
      ib -= p.sb[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

// fwd(x, y) -> out; da/db(x, y, out) -> partial derivative.
template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  require_defined(a, op);
  require_defined(b, op);
  auto plan = plan_broadcast(op, a.shape(), b.shape());
  std::vector<real> out(shape_numel(plan.out));
  auto av = a.data();
  auto bv = b.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(av[ia], bv[ib]);
  });
  Shape shape = plan.out;
  return make_result(op, std::move(shape), std::move(out), {a, b},
                     [plan = std::move(plan), da, db](Node& self) {
                       Node& A = *self.inputs[0];
                       Node& B = *self.inputs[1];
                       real* ga = grad_ptr(A);
                       real* gb = grad_ptr(B);
                       const auto& g = self.grad;
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         if (ga) ga[ia] += g[o] * da(A.value[ia], B.value[ib], self.value[o]);
                         if (gb) gb[ib] += g[o] * db(A.value[ia], B.value[ib], self.value[o]);
                       });
                     });
}

// fwd(x) -> y; d(x, y) -> dy/dx.
template <class Fwd, class D>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, D d) {
  require_defined(x, op);
  auto xv = x.data();
  std::vector<real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [d](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      gx[i] += self.grad[i] * d(X.value[i], self.value[i]);
    }
  });
}

real stable_sigmoid(real x) {
  if (x >= 0) return real(1) / (real(1) + std::exp(-x));
  real e = std::exp(x);
  return e / (real(1) + e);
}

real stable_log_sigmoid(real x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// C[m x p] += A[m x k] . B[k x p]
void gemm_nn(const real* A, const real* B, real* C, std::size_t m, std::size_t k, std::size_t p) {
  parallel_for(m, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      real* c = C + i * p;
      const real* a = A + i * k;
      for (std::size_t l = 0; l < k; ++l) {
        real s = a[l];
        if (s == real(0)) continue;
        const real* b = B + l * p;
        for (std::size_t j = 0; j < p; ++j) c[j] += s * b[j];
      }
    }
  });
}

// C[m x k] += G[m x p] . B[k x p]^T
void gemm_nt(const real* G, const real* B, real* C, std::size_t m, std::size_t p, std::size_t k) {
  parallel_for(m, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const real* g = G + i * p;
      real* c = C + i * k;
      for (std::size_t l = 0; l < k; ++l) {
        const real* b = B + l * p;
        real s = 0;
        for (std::size_t j = 0; j < p; ++j) s += g[j] * b[j];
        c[l] += s;
      }
    }
  });
}

// C[k x p] += A[m x k]^T . G[m x p]
void gemm_tn(const real* A, const real* G, real* C, std::size_t m, std::size_t k, std::size_t p) {
  parallel_for(k, 16, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t i = 0; i < m; ++i) {
      const real* a = A + i * k;
      const real* g = G + i * p;
      for (std::size_t l = c0; l < c1; ++l) {
        real s = a[l];
        if (s == real(0)) continue;
        real* c = C + l * p;
        for (std::size_t j = 0; j < p; ++j) c[j] += s * g[j];
      }
    }
  });
}

// Splits a shape around `axis` into (outer, len, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](real x, real y) { return x + y; },
      [](real, real, real) { return real(1); }, [](real, real, real) { return real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](real x, real y) { return x - y; },
      [](real, real, real) { return real(1); }, [](real, real, real) { return real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](real x, real y) { return x * y; }, [](real, real y, real) { return y; },
      [](real x, real, real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_defined(b, "div");
  for (real v : b.data()) {
    if (v == real(0)) throw NumericError("div: division by exact zero");
  }
  return binary(
      "div", a, b, [](real x, real y) { return x / y; },
      [](real, real y, real) { return real(1) / y; },
      [](real, real y, real out) { return -out / y; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      "maximum", a, b, [](real x, real y) { return x >= y ? x : y; },
      [](real x, real y, real) { return x >= y ? real(1) : real(0); },
      [](real x, real y, real) { return x >= y ? real(0) : real(1); });
}

Tensor scale(const Tensor& x, real factor) {
  return unary(
      "scale", x, [factor](real v) { return v * factor; }, [factor](real, real) { return factor; });
}

Tensor add_scalar(const Tensor& x, real value) {
  return unary(
      "add_scalar", x, [value](real v) { return v + value; }, [](real, real) { return real(1); });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](real, real y) { return y * (real(1) - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](real v) { return std::tanh(v); },
      [](real, real y) { return real(1) - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](real v) { return v > 0 ? v : real(0); },
      [](real v, real) { return v > 0 ? real(1) : real(0); });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](real v) { return std::log(v); }, [](real v, real) { return real(1) / v; });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary("log_sigmoid", x, stable_log_sigmoid,
               [](real v, real) { return stable_sigmoid(-v); });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](real v) { return std::fabs(v); },
      [](real v, real) { return v >= 0 ? real(1) : real(-1); });
}

Tensor neg(const Tensor& x) {
  return unary(
      "neg", x, [](real v) { return -v; }, [](real, real) { return real(-1); });
}

Tensor apply(const Tensor& x, Activation f) {
  switch (f) {
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kExp: return exp(x);
    case Activation::kRelu: return relu(x);
    case Activation::kLog: return log(x);
    case Activation::kLogSigmoid: return log_sigmoid(x);
    case Activation::kAbs: return abs(x);
    case Activation::kNeg: return neg(x);
  }
  throw ContractError("apply: unknown activation");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) ||
            (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
  if (!ok) throw DimensionError(shapes_message("matmul", sa, sb));
  std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  std::size_t m = sa[sa.size() - 2], k = sa.back(), p = sb.back();
  std::vector<real> out(batch * m * p, real(0));
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * p, out.data() + t * m * p, m, k,
            p);
  }
  Shape shape = sa.size() == 3 ? Shape{batch, m, p} : Shape{m, p};
  return make_result("matmul", std::move(shape), std::move(out), {a, b},
                     [batch, m, k, p](Node& self) {
                       Node& A = *self.inputs[0];
                       Node& B = *self.inputs[1];
                       real* ga = grad_ptr(A);
                       real* gb = grad_ptr(B);
                       for (std::size_t t = 0; t < batch; ++t) {
                         const real* g = self.grad.data() + t * m * p;
                         if (ga) gemm_nt(g, B.value.data() + t * k * p, ga + t * m * k, m, p, k);
                         if (gb) gemm_tn(A.value.data() + t * m * k, g, gb + t * k * p, m, k, p);
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_string(x.shape()));
  Shape s = x.shape();
  std::size_t r = s[s.size() - 2], c = s.back();
  std::size_t batch = x.numel() / (r * c);
  std::swap(s[s.size() - 2], s.back());
  auto xv = x.data();
  std::vector<real> out(xv.size());
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = xv[t * r * c + i * c + j];
    }
  }
  return make_result("transpose", std::move(s), std::move(out), {x}, [batch, r, c](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t t = 0; t < batch; ++t) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  auto v = x.to_vector();
  return make_result("reshape", std::move(shape), std::move(v), {x}, [](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  real s = 0;
  for (real v : x.data()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t i = 0; i < X.value.size(); ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), real(1) / static_cast<real>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  require_defined(x, "sum_last");
  if (x.rank() == 0) throw DimensionError("sum_last on rank-0 tensor");
  std::size_t n = x.shape().back();
  std::size_t rows = n ? x.numel() / n : 0;
  Shape s = x.shape();
  s.back() = 1;
  auto xv = x.data();
  std::vector<real> out(rows, real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    real acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += xv[r * n + j];
    out[r] = acc;
  }
  return make_result("sum_last", std::move(s), std::move(out), {x}, [rows, n](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += self.grad[r];
    }
  });
}

Tensor max_last(const Tensor& x) {
  require_defined(x, "max_last");
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("max_last needs a non-empty last axis, got " + shape_string(x.shape()));
  }
  std::size_t n = x.shape().back();
  std::size_t rows = x.numel() / n;
  Shape s = x.shape();
  s.back() = 1;
  auto xv = x.data();
  std::vector<real> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (xv[r * n + j] > xv[r * n + best]) best = j;
    }
    arg[r] = best;
    out[r] = xv[r * n + best];
  }
  return make_result("max_last", std::move(s), std::move(out), {x},
                     [arg = std::move(arg), n](Node& self) {
                       Node& X = *self.inputs[0];
                       real* gx = grad_ptr(X);
                       if (!gx) return;
                       for (std::size_t r = 0; r < arg.size(); ++r) gx[r * n + arg[r]] += self.grad[r];
                     });
}

Tensor cumsum(const Tensor& x, std::size_t axis) {
  require_defined(x, "cumsum");
  if (axis >= x.rank()) throw DimensionError("cumsum: axis out of range for " + shape_string(x.shape()));
  auto sp = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<real> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      real acc = 0;
      for (std::size_t t = 0; t < sp.len; ++t) {
        std::size_t idx = (o * sp.len + t) * sp.inner + i;
        acc += xv[idx];
        out[idx] = acc;
      }
    }
  }
  return make_result("cumsum", x.shape(), std::move(out), {x}, [sp](Node& self) {
    Node& X = *self.inputs[0];
    real* gx = grad_ptr(X);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        real acc = 0;
        for (std::size_t t = sp.len; t-- > 0;) {
          std::size_t idx = (o * sp.len + t) * sp.inner + i;
          acc += self.grad[idx];
          gx[idx] += acc;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  require_defined(x, "layer_norm");
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("layer_norm: last dimension is empty in " + shape_string(x.shape()));
  }
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries, got " +
                         shape_string(gain.shape()) + " and " + shape_string(bias.shape()));
  }
  std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<real> out(xv.size()), xhat(xv.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xv.data() + r * d;
    real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<real>(d);
    real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<real>(d);
    rstd[r] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Node& self) {
        Node& X = *self.inputs[0];
        Node& G = *self.inputs[1];
        Node& B = *self.inputs[2];
        real* gx = grad_ptr(X);
        real* gg = grad_ptr(G);
        real* gb = grad_ptr(B);
        std::vector<real> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const real* g = self.grad.data() + r * d;
          const real* xh = xhat.data() + r * d;
          real mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += g[j] * xh[j];
            if (gb) gb[j] += g[j];
            dxhat[j] = g[j] * G.value[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
          }
          if (!gx) continue;
          mean_d /= static_cast<real>(d);
          mean_dx /= static_cast<real>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw DimensionError("concat_last: rank-0 input");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_last");
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw DimensionError(shapes_message("concat_last", first, s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  std::size_t rows = first.back() ? parts[0].numel() / first.back() : 0;
  if (first.back() == 0) {
    rows = 1;
    for (std::size_t i = 0; i + 1 < first.size(); ++i) rows *= first[i];
  }
  Shape s = first;
  s.back() = total;
  std::vector<real> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return make_result("concat_last", std::move(s), std::move(out), parts,
                     [widths, rows, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         real* g = grad_ptr(*self.inputs[k]);
                         if (g) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < widths[k]; ++j) {
                               g[r * widths[k] + j] += self.grad[r * total + off + j];
                             }
                           }
                         }
                         off += widths[k];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t length) {
  require_defined(x, "slice");
  if (axis >= x.rank() || begin + length > x.shape()[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + length) + ") on axis " + std::to_string(axis) +
                         " out of bounds for " + shape_string(x.shape()));
  }
  auto sp = split_axis(x.shape(), axis);
  Shape s = x.shape();
  s[axis] = length;
  auto xv = x.data();
  std::vector<real> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + (o * sp.len + begin) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  }
  return make_result("slice", std::move(s), std::move(out), {x}, [sp, begin, length](Node& self) {
    real* gx = grad_ptr(*self.inputs[0]);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const real* g = self.grad.data() + o * length * sp.inner;
      real* dst = gx + (o * sp.len + begin) * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += g[i];
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  const Shape& first = parts[0].shape();
  if (axis > first.size()) throw DimensionError("stack: axis out of range");
  for (const auto& p : parts) {
    require_defined(p, "stack");
    if (p.shape() != first) throw DimensionError(shapes_message("stack", first, p.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis; i < first.size(); ++i) inner *= first[i];
  std::size_t count = parts.size();
  Shape s = first;
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), count);
  std::vector<real> out(outer * count * inner);
  for (std::size_t k = 0; k < count; ++k) {
    auto v = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * inner, inner, out.data() + (o * count + k) * inner);
    }
  }
  return make_result("stack", std::move(s), std::move(out), parts,
                     [outer, inner, count](Node& self) {
                       for (std::size_t k = 0; k < count; ++k) {
                         real* g = grad_ptr(*self.inputs[k]);
                         if (!g) continue;
                         for (std::size_t o = 0; o < outer; ++o) {
                           const real* src = self.grad.data() + (o * count + k) * inner;
                           for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += src[i];
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_string(table.shape()));
  std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<real> out(rows.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab) {
      throw VocabularyError("embedding: id " + std::to_string(rows[i]) +
                            " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(rows[i]) * d, d, out.data() + i * d);
  }
  Shape shape{rows.size(), d};
  return make_result("embedding", std::move(shape), std::move(out), {table},
                     [rows = std::move(rows), d](Node& self) {
                       real* g = grad_ptr(*self.inputs[0]);
                       if (!g) return;
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         real* dst = g + static_cast<std::size_t>(rows[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
                       }
                     });
}

Tensor gather_last(const Tensor& x, std::span<const int> index) {
  require_defined(x, "gather_last");
  if (x.rank() == 0) throw DimensionError("gather_last on rank-0 tensor");
  std::size_t n = x.shape().back();
  std::size_t rows = n ? x.numel() / n : 0;
  if (index.size() != rows) {
    throw DimensionError("gather_last: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(rows) + " rows of " + shape_string(x.shape()));
  }
  std::vector<int> idx(index.begin(), index.end());
  std::vector<real> out(rows);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
      throw VocabularyError("gather_last: index " + std::to_string(idx[r]) + " outside width " +
                            std::to_string(n));
    }
    out[r] = xv[r * n + static_cast<std::size_t>(idx[r])];
  }
  Shape s = x.shape();
  s.back() = 1;
  return make_result("gather_last", std::move(s), std::move(out), {x},
                     [idx = std::move(idx), n](Node& self) {
                       real* g = grad_ptr(*self.inputs[0]);
                       if (!g) return;
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         g[r * n + static_cast<std::size_t>(idx[r])] += self.grad[r];
                       }
                     });
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, real value) {
  require_defined(x, "masked_fill");
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask has " + std::to_string(mask.size()) +
                         " entries for " + shape_string(x.shape()));
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  auto out = x.to_vector();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (m[i]) out[i] = value;
  }
  return make_result("masked_fill", x.shape(), std::move(out), {x}, [m = std::move(m)](Node& self) {
    real* g = grad_ptr(*self.inputs[0]);
    if (!g) return;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) g[i] += self.grad[i];
    }
  });
}

Tensor dropout(const Tensor& x, real rate, bool training, std::mt19937_64* rng) {
  if (!training || rate <= 0) return x;
  if (rate >= 1) throw ContractError("dropout: rate must be below 1");
  if (!rng) throw ContractError("dropout: training mode needs a random generator");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  std::vector<real> m(x.numel());
  real scale_up = real(1) / (real(1) - rate);
  for (auto& v : m) v = keep(*rng) ? scale_up : real(0);
  return mul(x, Tensor::constant(x.shape(), std::move(m)));
}

Tensor binary_cross_entropy_sum(const Tensor& probs, std::span<const real> targets,
                                std::span<const real> weights, real clamp) {
  require_defined(probs, "binary_cross_entropy");
  std::size_t n = probs.numel();
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(n) + " predictions, " +
                         std::to_string(targets.size()) + " targets, " +
                         std::to_string(weights.size()) + " weights");
  }
  auto pv = probs.data();
  std::vector<real> t(targets.begin(), targets.end());
  std::vector<real> w(weights.begin(), weights.end());
  real loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == real(0)) continue;
    real p = std::clamp(pv[i], clamp, real(1) - clamp);
    loss -= w[i] * (t[i] * std::log(p) + (real(1) - t[i]) * std::log(real(1) - p));
  }
  return make_result("binary_cross_entropy", {1}, {loss}, {probs},
                     [t = std::move(t), w = std::move(w), clamp](Node& self) {
                       Node& P = *self.inputs[0];
                       real* g = grad_ptr(P);
                       if (!g) return;
                       for (std::size_t i = 0; i < t.size(); ++i) {
                         real p = P.value[i];
                         if (w[i] == real(0) || p < clamp || p > real(1) - clamp) continue;
                         g[i] += self.grad[0] * w[i] * (-(t[i] / p) + (real(1) - t[i]) / (real(1) - p));
                       }
                     });
}

}  // namespace xkt
