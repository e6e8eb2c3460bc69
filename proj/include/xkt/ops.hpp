#pragma once

// Differentiable tensor operations.
//
// Binary elementwise ops broadcast only across singleton dimensions of
// equal-rank operands; there is no implicit rank promotion.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "xkt/tensor.hpp"

namespace xkt {

enum class Activation { kSigmoid, kTanh, kExp, kRelu, kLog, kLogSigmoid, kAbs, kNeg };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericError when any divisor entry is exactly zero.
Tensor div(const Tensor& a, const Tensor& b);
/// Elementwise max; the gradient flows to `a` on ties.
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, real factor);
Tensor add_scalar(const Tensor& x, real value);

Tensor apply(const Tensor& x, Activation f);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
/// log(sigmoid(x)) evaluated without forming sigmoid(x).
Tensor log_sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(real s, const Tensor& x) { return scale(x, s); }

/// [m x k] . [k x p], or batched [b x m x k] . [b x k x p].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Sum of all entries, shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reductions over the last axis, keeping it as size 1.
Tensor sum_last(const Tensor& x);
Tensor max_last(const Tensor& x);
/// Inclusive prefix sum along `axis`.
Tensor cumsum(const Tensor& x, std::size_t axis);

/// Per-row normalization over the last axis; gain and bias hold d entries.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps);

Tensor concat_last(const std::vector<Tensor>& parts);
/// Contiguous range [begin, begin+length) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t length);
/// Stacks equal-shaped tensors along a new axis inserted at `axis`.
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);

/// Row lookup: table [V x d], ids -> [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// x [..., n]; picks one entry per row: result [..., 1].
Tensor gather_last(const Tensor& x, std::span<const int> index);
/// Replaces entries where mask != 0 by `value`; those entries get no gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, real value);

/// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, real rate, bool training, std::mt19937_64* rng);

/// Summed binary cross-entropy over entries with weight != 0. Probabilities
/// are clamped to [clamp, 1 - clamp]; clamped entries pass no gradient.
Tensor binary_cross_entropy_sum(const Tensor& probs, std::span<const real> targets,
                                std::span<const real> weights, real clamp);

}  // namespace xkt
