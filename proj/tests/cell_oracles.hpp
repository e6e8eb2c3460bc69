#pragma once

// Unstabilized scalar-loop recurrences used as test oracles. They read the
// parameter tensors directly and share no code with the graph implementation.

#include <cmath>
#include <vector>

#include "xkt/cells.hpp"

namespace oracle {

template <class T>
using Matrix = std::vector<std::vector<T>>;

template <class T>
T sigm(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// y[j] = sum_i x[i] * W[i][j] + b[j], W row-major [in x out]
template <class T>
std::vector<T> affine(const std::vector<T>& x, const xkt::Tensor& w, const xkt::Tensor& b) {
  std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<T> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    T acc = static_cast<T>(b.data()[j]);
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * static_cast<T>(w.data()[i * out + j]);
    y[j] = acc;
  }
  return y;
}

template <class T>
std::vector<T> recur(const std::vector<T>& h, const xkt::Tensor& r) {
  std::size_t d = r.dim(0);
  std::vector<T> y(d, T(0));
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < d; ++i) y[j] += h[i] * static_cast<T>(r.data()[i * d + j]);
  }
  return y;
}

/// Naive sLSTM over a sequence for one batch row. Returns h_t per step.
template <class T>
Matrix<T> slstm(const xkt::cells::LstmParams& p, const Matrix<T>& xs, bool exp_forget) {
  std::size_t d = p.hidden_size();
  std::vector<T> c(d, 0), n(d, 0), h(d, 0);
  Matrix<T> out;
  for (const auto& x : xs) {
    std::array<std::vector<T>, 4> pre;
    for (std::size_t g = 0; g < 4; ++g) {
      pre[g] = affine(x, p.w[g], p.b[g]);
      auto rh = recur(h, p.r[g]);
      for (std::size_t j = 0; j < d; ++j) pre[g][j] += rh[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      T f = exp_forget ? std::exp(pre[0][j]) : sigm(pre[0][j]);
      T i = std::exp(pre[1][j]);
      T z = std::tanh(pre[2][j]);
      T o = sigm(pre[3][j]);
      c[j] = f * c[j] + i * z;
      n[j] = f * n[j] + i;
      h[j] = o * (c[j] / n[j]);
    }
    out.push_back(h);
  }
  return out;
}

/// Naive mLSTM over a sequence for one batch row.
template <class T>
Matrix<T> mlstm(const xkt::cells::MLstmParams& p, const Matrix<T>& xs, bool exp_forget) {
  std::size_t d = p.hidden_size();
  Matrix<T> C(d, std::vector<T>(d, 0));
  std::vector<T> n(d, 0);
  Matrix<T> out;
  T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (const auto& x : xs) {
    T fp = affine(x, p.w_f, p.b_f)[0];
    T ip = affine(x, p.w_i, p.b_i)[0];
    T f = exp_forget ? std::exp(fp) : sigm(fp);
    T i = std::exp(ip);
    auto zero = xkt::Tensor::zeros({1, d});
    auto k = affine(x, p.w_k, zero);
    for (std::size_t j = 0; j < d; ++j) k[j] = scale * k[j] + static_cast<T>(p.b_k.data()[j]);
    auto v = affine(x, p.w_v, p.b_v);
    auto q = affine(x, p.w_q, p.b_q);
    auto o = affine(x, p.w_o, p.b_o);
    T nq = 0;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) C[a][b] = f * C[a][b] + i * v[a] * k[b];
      n[a] = f * n[a] + i * k[a];
      nq += n[a] * q[a];
    }
    T den = std::max(std::fabs(nq), T(1));
    std::vector<T> h(d);
    for (std::size_t a = 0; a < d; ++a) {
      T acc = 0;
      for (std::size_t b = 0; b < d; ++b) acc += C[a][b] * q[b];
      h[a] = sigm(o[a]) * acc / den;
    }
    out.push_back(h);
  }
  return out;
}

}  // namespace oracle
