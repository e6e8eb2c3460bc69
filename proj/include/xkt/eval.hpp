#pragma once

// Metrics and evaluation protocols. Every protocol pools predictions across
// students before computing metrics.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xkt/data.hpp"
#include "xkt/model.hpp"

namespace xkt::eval {

struct Metrics {
  double auc = 0.0;
  bool auc_defined = false;  // false when every label is identical (or n == 0)
  double acc = 0.0;
  double rmse = 0.0;
  std::size_t n = 0;
};

/// AUC from the Mann-Whitney rank sum (ties credited 0.5); ACC predicts 1
/// iff score >= 0.5. Throws ContractError on empty or mismatched input.
Metrics compute_metrics(std::span<const double> scores, std::span<const int> labels);

struct Prediction {
  std::string student;
  std::size_t step = 0;  // 1-based position in the student's full sequence
  int concept_id = 0;
  double score = 0.0;
  int label = 0;
};

Metrics metrics_of(std::span<const Prediction> predictions);

struct Report {
  std::string protocol;
  nlohmann::json params = nlohmann::json::object();
  Metrics metrics;
  std::size_t skipped = 0;  // students too short for the protocol
  std::vector<Prediction> predictions;
};

nlohmann::json to_json(const Metrics& m);
/// Predictions are not included.
nlohmann::json to_json(const Report& r);

void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions);
std::vector<Prediction> read_predictions_csv(std::istream& in);

struct EvalOptions {
  std::size_t history = 100;
  std::size_t batch_size = 512;
};

/// Predicts every step after the first from the true history.
Report eval_one_step(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                     const EvalOptions& opt);

/// Knowledge frozen after step t-N; the N remaining steps are scored with
/// their true questions and no responses. Students with t < N+1 are skipped.
Report eval_multi_step(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                       std::size_t horizon, const EvalOptions& opt);

enum class MaskSetting { kAllMasked, kResponsesMasked, kUnmasked };
std::string setting_name(MaskSetting s);
MaskSetting setting_from(const std::string& s);

/// Scores only the last N steps. Unmasked: one-step. Responses masked:
/// identical to eval_multi_step(N). All masked: knowledge frozen at t-N and
/// the next question replaced by the zero embedding.
Report eval_masked(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                   MaskSetting setting, std::size_t horizon, const EvalOptions& opt);

/// One-step evaluation with the window length set to each value of
/// `lengths`. `model_for` returns the model to use at a given length.
std::vector<Report> eval_varying_history(const std::function<model::KtModel&(std::size_t)>& model_for,
                                         const data::Dataset& ds, const std::vector<std::size_t>& students,
                                         const std::vector<std::size_t>& lengths, const EvalOptions& opt);

/// Knowledge state at m = floor(t/2), fused with question m+1, scores every
/// later step at its concept. Students with t < 4 are skipped.
Report eval_multi_concept(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                          const EvalOptions& opt);

}  // namespace xkt::eval
