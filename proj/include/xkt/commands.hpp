#pragma once

// The operations behind each `xkt` subcommand. Each writes its artifacts
// under cfg.out and returns a JSON summary.

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "xkt/config.hpp"
#include "xkt/eval.hpp"
#include "xkt/gradcheck.hpp"
#include "xkt/model.hpp"
#include "xkt/train.hpp"

namespace xkt {

/// Preprocessed dataset from cfg.dataset, else by ingesting cfg.data.
data::Dataset load_run_dataset(const RunConfig& cfg);
train::Split run_split(const RunConfig& cfg, const data::Dataset& ds);

nlohmann::json command_prep(const RunConfig& cfg);
nlohmann::json command_synth(const RunConfig& cfg);

struct TrainedModel {
  std::unique_ptr<model::KtModel> model;
  train::TrainResult result;
};

/// Trains a fresh model from cfg on split.train (selection on split.valid).
TrainedModel train_model(const RunConfig& cfg, const data::Dataset& ds, const train::Split& split,
                         const std::function<void(const train::EpochRecord&)>& on_epoch = {});

nlohmann::json command_train(const RunConfig& cfg);

/// Runs cfg.protocol on split.test.
std::vector<eval::Report> run_protocols(model::KtModel& m, const data::Dataset& ds, const train::Split& split,
                                        const RunConfig& cfg);
/// Writes metrics.json (and predictions_<label>.csv files when `dump`).
nlohmann::json command_eval(const RunConfig& cfg, bool dump);

/// Knowledge states for the histories in a CSV with the ingest header.
nlohmann::json command_predict(const RunConfig& cfg, const std::string& input_csv);

struct GradcheckReport {
  GradCheckResult result;
  std::string worst_parameter;
  std::size_t tensors = 0;
};

/// Finite-difference check of the configured model on a synthetic
/// micro-batch (cfg.gradcheck sizes), dropout off, mean BCE loss.
GradcheckReport model_gradcheck(const RunConfig& cfg);

/// Parses argv (without the program name), runs the subcommand and returns
/// the exit code: 0 success, 1 contract error, 2 numeric error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xkt
