#pragma once

// LSTM, sLSTM and mLSTM recurrences on batched inputs.
//
// Step functions take x as [batch x d_in]. Sequence functions take
// [batch x T x d_in] and return hidden states [batch x T x d]. All states
// start from zero, including the log-domain stabilizer m.

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "xkt/tensor.hpp"

namespace xkt::cells {

enum class Gate : std::size_t { kForget = 0, kInput = 1, kCell = 2, kOutput = 3 };
inline constexpr std::array<const char*, 4> kGateNames{"f", "i", "z", "o"};

enum class ForgetActivation { kSigmoid, kExp };

/// Gate weights shared by LSTM and sLSTM: input weights [d_in x d],
/// recurrent weights [d x d], biases [1 x d], one of each per gate.
struct LstmParams {
  std::array<Tensor, 4> w;
  std::array<Tensor, 4> r;
  std::array<Tensor, 4> b;

  std::size_t input_size() const { return w[0].dim(0); }
  std::size_t hidden_size() const { return w[0].dim(1); }

  Tensor& w_of(Gate g) { return w[static_cast<std::size_t>(g)]; }
  Tensor& r_of(Gate g) { return r[static_cast<std::size_t>(g)]; }
  Tensor& b_of(Gate g) { return b[static_cast<std::size_t>(g)]; }

  static LstmParams zeros(std::size_t d_in, std::size_t d);
  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases included.
  static LstmParams uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng);
  /// Uniform in [-bound, bound] for every entry.
  static LstmParams uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng, double bound);

  /// Trainable tensors (those that require a gradient) and their names.
  std::vector<Tensor> tensors() const;
  std::vector<std::string> names(const std::string& prefix) const;

  /// Replaces b_i by a constant zero. With zero initial c and n, an
  /// exponential input gate's bias scales c and n alike and cancels in c/n,
  /// so for sLSTM it carries no information and has a zero gradient.
  void freeze_input_bias();
};

struct LstmState {
  Tensor c, h;
  static LstmState zeros(std::size_t batch, std::size_t d);
};

struct SLstmState {
  Tensor c, n, m, h;
  static SLstmState zeros(std::size_t batch, std::size_t d);
};

/// mLSTM parameters. Gate weights produce one scalar pre-activation per step.
struct MLstmParams {
  Tensor w_f, w_i;  // [d_in x 1]
  Tensor b_f, b_i;  // [1 x 1]
  Tensor w_k, w_v, w_q, w_o;  // [d_in x d]
  Tensor b_k, b_v, b_q, b_o;  // [1 x d]

  std::size_t input_size() const { return w_k.dim(0); }
  std::size_t hidden_size() const { return w_k.dim(1); }

  static MLstmParams zeros(std::size_t d_in, std::size_t d);
  static MLstmParams uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng);
  static MLstmParams uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng, double bound);

  std::vector<Tensor> tensors() const;
  std::vector<std::string> names(const std::string& prefix) const;
};

struct MLstmState {
  Tensor C;  // [batch x d x d], rows indexed by value, columns by key
  Tensor n;  // [batch x d]
  Tensor m;  // [batch x 1]
  Tensor h;  // [batch x d]
  static MLstmState zeros(std::size_t batch, std::size_t d);
};

/// Pre-activations x.W + b for each gate, [batch x d] each.
using GateInputs = std::array<Tensor, 4>;

GateInputs project_gates(const LstmParams& p, const Tensor& x);

LstmState lstm_step(const LstmParams& p, const Tensor& x, const LstmState& prev);
LstmState lstm_step_projected(const LstmParams& p, const GateInputs& pre, const LstmState& prev);

SLstmState slstm_step(const LstmParams& p, const Tensor& x, const SLstmState& prev,
                      ForgetActivation forget = ForgetActivation::kExp);
SLstmState slstm_step_projected(const LstmParams& p, const GateInputs& pre,
                                const SLstmState& prev, ForgetActivation forget);

MLstmState mlstm_step(const MLstmParams& p, const Tensor& x, const MLstmState& prev,
                      ForgetActivation forget = ForgetActivation::kSigmoid);

Tensor lstm_sequence(const LstmParams& p, const Tensor& xs);
Tensor slstm_sequence(const LstmParams& p, const Tensor& xs,
                      ForgetActivation forget = ForgetActivation::kExp);
/// mLSTM by T applications of mlstm_step.
Tensor mlstm_recurrent(const MLstmParams& p, const Tensor& xs,
                       ForgetActivation forget = ForgetActivation::kSigmoid);
/// Closed form over the whole sequence: a causal, decay-weighted attention
/// with the same stabilizer as the step form. Matches mlstm_recurrent.
Tensor mlstm_parallel(const MLstmParams& p, const Tensor& xs,
                      ForgetActivation forget = ForgetActivation::kSigmoid);

}  // namespace xkt::cells
