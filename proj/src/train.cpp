#include "xkt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "xkt/errors.hpp"
#include "xkt/ops.hpp"

namespace xkt::train {

Loss bce_loss(const Tensor& probs, std::span<const real> labels, std::span<const real> mask) {
  std::size_t count = 0;
  for (real w : mask) count += w != 0;
  if (count == 0) throw ContractError("bce_loss: mask selects no steps");
  Tensor s = binary_cross_entropy_sum(probs, labels, mask, kProbabilityClamp);
  return {s, scale(s, real(1) / static_cast<real>(count)), count};
}

Adam::Adam(std::vector<Tensor> params, std::vector<std::string> names, double lr_, double beta1, double beta2,
           double eps)
    : lr(lr_), params_(std::move(params)), names_(std::move(names)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (names_.size() != params_.size()) throw ContractError("adam: one name per parameter required");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (real g : params_[i].grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam: non-finite gradient for " + names_[i]);
    }
  }
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      double gk = static_cast<double>(g[k]);
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      theta[k] = static_cast<real>(static_cast<double>(theta[k]) - update);
    }
  }
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    double factor = max_norm / norm;
    for (auto p : params) {
      for (auto& g : p.mutable_grad()) g = static_cast<real>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ContractError("kfold_split: need at least 2 folds");
  if (n < k) {
    throw ContractError("kfold_split: " + std::to_string(n) + " students cannot fill " + std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                    order.begin() + static_cast<std::ptrdiff_t>(at + size));
    std::sort(folds[f].begin(), folds[f].end());
    at += size;
  }
  return folds;
}

Split fold_split(std::size_t n, std::size_t k, std::size_t fold, double val_fraction, std::uint64_t seed) {
  if (fold >= k) throw ContractError("fold index " + std::to_string(fold) + " out of range for " + std::to_string(k) + " folds");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ContractError("validation fraction must lie in (0, 1)");
  auto folds = kfold_split(n, k, seed);
  Split s;
  s.test = folds[fold];
  std::vector<std::size_t> rest;
  for (std::size_t f = 0; f < k; ++f) {
    if (f != fold) rest.insert(rest.end(), folds[f].begin(), folds[f].end());
  }
  std::mt19937_64 rng(seed + 1);
  std::shuffle(rest.begin(), rest.end(), rng);
  auto n_valid = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rest.size())));
  n_valid = std::clamp<std::size_t>(n_valid, 1, rest.size() - 1);
  s.valid.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_valid));
  s.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_valid), rest.end());
  std::sort(s.valid.begin(), s.valid.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

bool EarlyStopping::update(std::optional<double> score) {
  ++epoch_;
  if (score && (!best_ || *score > *best_)) {
    best_ = score;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

nlohmann::json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_auc", e.valid.auc_defined ? nlohmann::json(e.valid.auc) : nlohmann::json(nullptr)},
          {"val_acc", e.valid.acc},
          {"val_rmse", e.valid.rmse},
          {"val_n", e.valid.n},
          {"improved", e.improved}};
}

TrainResult train(model::KtModel& m, const data::Dataset& ds, const Split& split, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (split.train.empty() || split.valid.empty()) throw ContractError("train: empty training or validation split");
  if (cfg.max_epochs == 0 || cfg.patience == 0 || cfg.batch_size == 0 || !(cfg.lr > 0)) {
    throw ContractError("train: epochs, patience, batch size and learning rate must be positive");
  }
  auto& params = m.parameters();
  Adam opt(params.tensors(), params.names(), cfg.lr);
  EarlyStopping stopper(cfg.patience);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;
  auto best = params.snapshot();
  eval::EvalOptions eval_opt{cfg.history, cfg.batch_size};

  try {
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      auto batches = data::window_pad_batch(ds, split.train, cfg.history, cfg.batch_size, cfg.seed + epoch, true);
      double loss_sum = 0.0;
      std::size_t loss_count = 0;
      for (const auto& batch : batches) {
        auto fwd = m.forward(batch, {true, &dropout_rng});
        std::size_t valid = 0;
        for (real w : fwd.weights) valid += w != 0;
        if (valid == 0) continue;
        auto loss = bce_loss(fwd.predictions, fwd.labels, fwd.weights);
        params.zero_grad();
        backward(loss.mean);
        clip_grad_norm(params.tensors(), cfg.clip_norm);
        opt.step();
        loss_sum += static_cast<double>(loss.sum.item());
        loss_count += loss.count;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
      rec.valid = eval::eval_one_step(m, ds, split.valid, eval_opt).metrics;
      rec.improved = stopper.update(rec.valid.auc_defined ? std::optional<double>(rec.valid.auc) : std::nullopt);
      if (rec.improved) best = params.snapshot();
      result.epochs.push_back(rec);
      if (on_epoch) on_epoch(rec);
      if (stopper.should_stop()) {
        result.stopped_early = epoch < cfg.max_epochs;
        break;
      }
    }
  } catch (const NumericError&) {
    params.restore(best);
    throw;
  }
  params.restore(best);
  result.best_epoch = stopper.best_epoch();
  result.best_valid_auc = stopper.best_score();
  return result;
}

}  // namespace xkt::train
