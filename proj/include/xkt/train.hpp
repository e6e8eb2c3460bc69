#pragma once

// Loss, optimizer, student-level cross-validation splits and the training
// loop with early stopping on validation AUC.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xkt/data.hpp"
#include "xkt/eval.hpp"
#include "xkt/model.hpp"

namespace xkt::train {

inline constexpr real kProbabilityClamp = real(1e-7);

struct Loss {
  Tensor sum;   // summed over valid steps
  Tensor mean;  // sum / count
  std::size_t count = 0;
};

/// Binary cross-entropy over entries with mask != 0, probabilities clamped
/// to [1e-7, 1 - 1e-7]. Throws ContractError when the mask is empty.
Loss bce_loss(const Tensor& probs, std::span<const real> labels, std::span<const real> mask);

class Adam {
 public:
  Adam(std::vector<Tensor> params, std::vector<std::string> names, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the parameters' accumulated gradients. Throws
  /// NumericError naming the parameter when a gradient is not finite.
  void step();
  std::size_t steps() const { return t_; }
  double lr;

 private:
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

/// k disjoint folds over student indices 0..n-1; sizes differ by at most one.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train, valid, test;
};

/// Fold `fold` is the test set; `val_fraction` of the rest (rounded, at
/// least one student) is held out for validation.
Split fold_split(std::size_t n, std::size_t k, std::size_t fold, double val_fraction, std::uint64_t seed);

/// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records one epoch's score (nullopt counts as no improvement) and
  /// returns whether it is the new best.
  bool update(std::optional<double> score);
  bool should_stop() const { return since_best_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::optional<double> best_score() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  std::optional<double> best_;
};

struct TrainConfig {
  std::size_t batch_size = 512;
  double lr = 0.001;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t history = 100;
  std::uint64_t seed = 12405;
  double clip_norm = 10.0;  // <= 0 disables clipping
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  eval::Metrics valid;
  bool improved = false;
};

nlohmann::json to_json(const EpochRecord& e);

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::optional<double> best_valid_auc;
  bool stopped_early = false;
};

/// Trains on split.train and selects by AUC on split.valid. The model ends
/// with the best epoch's parameters, also when a NumericError aborts the
/// run (the error is rethrown).
TrainResult train(model::KtModel& m, const data::Dataset& ds, const Split& split, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace xkt::train
