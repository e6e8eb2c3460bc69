#include "xkt/cells.hpp"

#include <cmath>
#include <limits>

#include "xkt/errors.hpp"
#include "xkt/ops.hpp"

namespace xkt::cells {

namespace {

Tensor uniform_tensor(Shape shape, std::mt19937_64& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(dist(rng));
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor zero_param(Shape shape) {
  return Tensor::parameter(shape, std::vector<real>(shape_numel(shape), real(0)));
}

void check_input(const Tensor& x, std::size_t d_in, const char* who) {
  if (x.rank() != 2 || x.dim(1) != d_in) {
    throw DimensionError(std::string(who) + ": expected input [batch x " + std::to_string(d_in) +
                         "], got " + shape_string(x.shape()));
  }
}

void check_sequence(const Tensor& xs, std::size_t d_in, const char* who) {
  if (xs.rank() != 3 || xs.dim(2) != d_in || xs.dim(1) == 0) {
    throw DimensionError(std::string(who) + ": expected sequence [batch x T x " +
                         std::to_string(d_in) + "] with T >= 1, got " + shape_string(xs.shape()));
  }
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return matmul(x, w) + b; }

Tensor log_forget(const Tensor& pre, ForgetActivation forget) {
  return forget == ForgetActivation::kExp ? pre : log_sigmoid(pre);
}

// [B*T x k] -> [B x T x k]
Tensor unflatten(const Tensor& x, std::size_t batch, std::size_t steps) {
  return reshape(x, {batch, steps, x.dim(1)});
}

Tensor step_of(const Tensor& seq, std::size_t t) {
  auto b = seq.dim(0), w = seq.dim(2);
  return reshape(slice(seq, 1, t, 1), {b, w});
}

std::array<Tensor, 4> project_sequence(const LstmParams& p, const Tensor& xs) {
  std::size_t batch = xs.dim(0), steps = xs.dim(1);
  Tensor flat = reshape(xs, {batch * steps, xs.dim(2)});
  std::array<Tensor, 4> out;
  for (std::size_t g = 0; g < 4; ++g) out[g] = unflatten(affine(flat, p.w[g], p.b[g]), batch, steps);
  return out;
}

}  // namespace

LstmParams LstmParams::zeros(std::size_t d_in, std::size_t d) {
  LstmParams p;
  for (std::size_t g = 0; g < 4; ++g) {
    p.w[g] = zero_param({d_in, d});
    p.r[g] = zero_param({d, d});
    p.b[g] = zero_param({1, d});
  }
  return p;
}

LstmParams LstmParams::uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng) {
  LstmParams p;
  double bw = 1.0 / std::sqrt(static_cast<double>(d_in));
  double br = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t g = 0; g < 4; ++g) {
    p.w[g] = uniform_tensor({d_in, d}, rng, bw);
    p.r[g] = uniform_tensor({d, d}, rng, br);
    p.b[g] = uniform_tensor({1, d}, rng, bw);
  }
  return p;
}

LstmParams LstmParams::uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng,
                               double bound) {
  LstmParams p;
  for (std::size_t g = 0; g < 4; ++g) {
    p.w[g] = uniform_tensor({d_in, d}, rng, bound);
    p.r[g] = uniform_tensor({d, d}, rng, bound);
    p.b[g] = uniform_tensor({1, d}, rng, bound);
  }
  return p;
}

std::vector<Tensor> LstmParams::tensors() const {
  std::vector<Tensor> out;
  for (std::size_t g = 0; g < 4; ++g) {
    for (const Tensor* t : {&w[g], &r[g], &b[g]}) {
      if (t->requires_grad()) out.push_back(*t);
    }
  }
  return out;
}

std::vector<std::string> LstmParams::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (std::size_t g = 0; g < 4; ++g) {
    std::string s = kGateNames[g];
    if (w[g].requires_grad()) out.push_back(prefix + ".w_" + s);
    if (r[g].requires_grad()) out.push_back(prefix + ".r_" + s);
    if (b[g].requires_grad()) out.push_back(prefix + ".b_" + s);
  }
  return out;
}

void LstmParams::freeze_input_bias() {
  b[static_cast<std::size_t>(Gate::kInput)] = Tensor::zeros({1, hidden_size()});
}

LstmState LstmState::zeros(std::size_t batch, std::size_t d) {
  return {Tensor::zeros({batch, d}), Tensor::zeros({batch, d})};
}

SLstmState SLstmState::zeros(std::size_t batch, std::size_t d) {
  return {Tensor::zeros({batch, d}), Tensor::zeros({batch, d}), Tensor::zeros({batch, d}),
          Tensor::zeros({batch, d})};
}

MLstmParams MLstmParams::zeros(std::size_t d_in, std::size_t d) {
  MLstmParams p;
  p.w_f = zero_param({d_in, 1});
  p.w_i = zero_param({d_in, 1});
  p.b_f = zero_param({1, 1});
  p.b_i = zero_param({1, 1});
  p.w_k = zero_param({d_in, d});
  p.w_v = zero_param({d_in, d});
  p.w_q = zero_param({d_in, d});
  p.w_o = zero_param({d_in, d});
  p.b_k = zero_param({1, d});
  p.b_v = zero_param({1, d});
  p.b_q = zero_param({1, d});
  p.b_o = zero_param({1, d});
  return p;
}

MLstmParams MLstmParams::uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng) {
  return uniform(d_in, d, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
}

MLstmParams MLstmParams::uniform(std::size_t d_in, std::size_t d, std::mt19937_64& rng,
                                 double bound) {
  MLstmParams p;
  p.w_f = uniform_tensor({d_in, 1}, rng, bound);
  p.w_i = uniform_tensor({d_in, 1}, rng, bound);
  p.b_f = uniform_tensor({1, 1}, rng, bound);
  p.b_i = uniform_tensor({1, 1}, rng, bound);
  p.w_k = uniform_tensor({d_in, d}, rng, bound);
  p.w_v = uniform_tensor({d_in, d}, rng, bound);
  p.w_q = uniform_tensor({d_in, d}, rng, bound);
  p.w_o = uniform_tensor({d_in, d}, rng, bound);
  p.b_k = uniform_tensor({1, d}, rng, bound);
  p.b_v = uniform_tensor({1, d}, rng, bound);
  p.b_q = uniform_tensor({1, d}, rng, bound);
  p.b_o = uniform_tensor({1, d}, rng, bound);
  return p;
}

std::vector<Tensor> MLstmParams::tensors() const {
  return {w_f, w_i, b_f, b_i, w_k, w_v, w_q, w_o, b_k, b_v, b_q, b_o};
}

std::vector<std::string> MLstmParams::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const char* n : {"w_f", "w_i", "b_f", "b_i", "w_k", "w_v", "w_q", "w_o", "b_k", "b_v",
                        "b_q", "b_o"}) {
    out.push_back(prefix + "." + n);
  }
  return out;
}

MLstmState MLstmState::zeros(std::size_t batch, std::size_t d) {
  return {Tensor::zeros({batch, d, d}), Tensor::zeros({batch, d}), Tensor::zeros({batch, 1}),
          Tensor::zeros({batch, d})};
}

GateInputs project_gates(const LstmParams& p, const Tensor& x) {
  GateInputs pre;
  for (std::size_t g = 0; g < 4; ++g) pre[g] = affine(x, p.w[g], p.b[g]);
  return pre;
}

LstmState lstm_step_projected(const LstmParams& p, const GateInputs& pre, const LstmState& prev) {
  auto gate = [&](Gate g) {
    auto k = static_cast<std::size_t>(g);
    return pre[k] + matmul(prev.h, p.r[k]);
  };
  Tensor f = sigmoid(gate(Gate::kForget));
  Tensor i = sigmoid(gate(Gate::kInput));
  Tensor z = tanh(gate(Gate::kCell));
  Tensor o = sigmoid(gate(Gate::kOutput));
  Tensor c = f * prev.c + i * z;
  return {c, o * tanh(c)};
}

LstmState lstm_step(const LstmParams& p, const Tensor& x, const LstmState& prev) {
  check_input(x, p.input_size(), "lstm_step");
  return lstm_step_projected(p, project_gates(p, x), prev);
}

SLstmState slstm_step_projected(const LstmParams& p, const GateInputs& pre,
                                const SLstmState& prev, ForgetActivation forget) {
  auto gate = [&](Gate g) {
    auto k = static_cast<std::size_t>(g);
    return pre[k] + matmul(prev.h, p.r[k]);
  };
  Tensor log_f = log_forget(gate(Gate::kForget), forget);
  Tensor i_pre = gate(Gate::kInput);
  Tensor z = tanh(gate(Gate::kCell));
  Tensor o = sigmoid(gate(Gate::kOutput));

  Tensor decayed = log_f + prev.m;
  Tensor m = maximum(decayed, i_pre);
  Tensor i = exp(i_pre - m);
  Tensor f = exp(decayed - m);
  Tensor c = f * prev.c + i * z;
  Tensor n = f * prev.n + i;
  return {c, n, m, o * (c / n)};
}

SLstmState slstm_step(const LstmParams& p, const Tensor& x, const SLstmState& prev,
                      ForgetActivation forget) {
  check_input(x, p.input_size(), "slstm_step");
  return slstm_step_projected(p, project_gates(p, x), prev, forget);
}

MLstmState mlstm_step(const MLstmParams& p, const Tensor& x, const MLstmState& prev,
                      ForgetActivation forget) {
  check_input(x, p.input_size(), "mlstm_step");
  const std::size_t batch = x.dim(0), d = p.hidden_size();
  Tensor log_f = log_forget(affine(x, p.w_f, p.b_f), forget);
  Tensor i_pre = affine(x, p.w_i, p.b_i);
  Tensor decayed = log_f + prev.m;
  Tensor m = maximum(decayed, i_pre);
  Tensor i = exp(i_pre - m);
  Tensor f = exp(decayed - m);

  Tensor k = scale(matmul(x, p.w_k), real(1) / std::sqrt(static_cast<real>(d))) + p.b_k;
  Tensor v = affine(x, p.w_v, p.b_v);
  Tensor q = affine(x, p.w_q, p.b_q);

  Tensor outer = reshape(v, {batch, d, 1}) * reshape(k, {batch, 1, d});
  Tensor C = reshape(f, {batch, 1, 1}) * prev.C + reshape(i, {batch, 1, 1}) * outer;
  Tensor n = f * prev.n + i * k;

  Tensor numerator = reshape(sum_last(C * reshape(q, {batch, 1, d})), {batch, d});
  Tensor denominator = maximum(abs(sum_last(n * q)), exp(neg(m)));
  Tensor o = sigmoid(affine(x, p.w_o, p.b_o));
  return {C, n, m, o * (numerator / denominator)};
}

Tensor lstm_sequence(const LstmParams& p, const Tensor& xs) {
  check_sequence(xs, p.input_size(), "lstm_sequence");
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  auto pre = project_sequence(p, xs);
  LstmState state = LstmState::zeros(batch, p.hidden_size());
  std::vector<Tensor> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    GateInputs g{step_of(pre[0], t), step_of(pre[1], t), step_of(pre[2], t), step_of(pre[3], t)};
    state = lstm_step_projected(p, g, state);
    hs.push_back(state.h);
  }
  return stack(hs, 1);
}

Tensor slstm_sequence(const LstmParams& p, const Tensor& xs, ForgetActivation forget) {
  check_sequence(xs, p.input_size(), "slstm_sequence");
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  auto pre = project_sequence(p, xs);
  SLstmState state = SLstmState::zeros(batch, p.hidden_size());
  std::vector<Tensor> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    GateInputs g{step_of(pre[0], t), step_of(pre[1], t), step_of(pre[2], t), step_of(pre[3], t)};
    state = slstm_step_projected(p, g, state, forget);
    hs.push_back(state.h);
  }
  return stack(hs, 1);
}

Tensor mlstm_recurrent(const MLstmParams& p, const Tensor& xs, ForgetActivation forget) {
  check_sequence(xs, p.input_size(), "mlstm_recurrent");
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  MLstmState state = MLstmState::zeros(batch, p.hidden_size());
  std::vector<Tensor> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    state = mlstm_step(p, step_of(xs, t), state, forget);
    hs.push_back(state.h);
  }
  return stack(hs, 1);
}

Tensor mlstm_parallel(const MLstmParams& p, const Tensor& xs, ForgetActivation forget) {
  check_sequence(xs, p.input_size(), "mlstm_parallel");
  const std::size_t batch = xs.dim(0), steps = xs.dim(1), d = p.hidden_size();
  Tensor flat = reshape(xs, {batch * steps, xs.dim(2)});

  Tensor log_f = reshape(log_forget(affine(flat, p.w_f, p.b_f), forget), {batch, steps, 1});
  Tensor i_pre = reshape(affine(flat, p.w_i, p.b_i), {batch, 1, steps});
  Tensor k = unflatten(
      scale(matmul(flat, p.w_k), real(1) / std::sqrt(static_cast<real>(d))) + p.b_k, batch, steps);
  Tensor v = unflatten(affine(flat, p.w_v, p.b_v), batch, steps);
  Tensor q = unflatten(affine(flat, p.w_q, p.b_q), batch, steps);

  // log weight of source step s in target step t: F_t - F_s + i_s, s <= t.
  Tensor F = cumsum(log_f, 1);
  Tensor log_w = (F - reshape(F, {batch, 1, steps})) + i_pre;
  std::vector<std::uint8_t> future(batch * steps * steps, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t s = t + 1; s < steps; ++s) future[(b * steps + t) * steps + s] = 1;
    }
  }
  log_w = masked_fill(log_w, future, -std::numeric_limits<real>::max() / 4);
  // F_t itself is the decayed zero initial stabilizer.
  Tensor m = maximum(max_last(log_w), F);
  Tensor weights = exp(log_w - m);
  Tensor scores = weights * matmul(q, transpose(k));
  Tensor numerator = matmul(scores, v);
  Tensor denominator = maximum(abs(sum_last(scores)), exp(neg(m)));
  Tensor o = sigmoid(unflatten(affine(flat, p.w_o, p.b_o), batch, steps));
  return o * (numerator / denominator);
}

}  // namespace xkt::cells
