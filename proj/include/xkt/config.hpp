#pragma once

// Run configuration: a JSON object validated against the defaults. Unknown
// keys and type mismatches are rejected with the offending key path.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xkt/data.hpp"
#include "xkt/errors.hpp"
#include "xkt/model.hpp"
#include "xkt/train.hpp"

namespace xkt {

class ConfigError : public ContractError {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : ContractError("config key '" + key + "': " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ProtocolConfig {
  /// one_step, multi_step, varying_history, masked, multi_concept or all
  std::string name = "one_step";
  std::vector<std::size_t> steps{5, 10, 15, 20};
  std::string setting = "all_masked";
  std::size_t horizon = 5;
  std::vector<std::size_t> history_grid{25, 50, 75, 100};
  bool retrain = false;  // varying_history: train one model per length
};

struct GradcheckConfig {
  std::size_t students = 2;
  std::size_t steps = 8;
  std::size_t dim = 8;
  std::size_t concepts = 4;
  std::size_t questions = 6;
  double eps = 1e-5;
  double threshold = 1e-4;
};

struct RunConfig {
  std::string model = "dkt2";
  std::string data;        // raw CSV
  std::string dataset;     // preprocessed JSON
  std::string out = "xkt_out";
  std::string checkpoint;  // defaults to <out>/checkpoint.json
  std::size_t batch_size = 512;
  double lr = 0.001;
  double dropout = 0.05;
  std::size_t dim = 64;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t history = 100;
  std::uint64_t seed = 12405;
  std::size_t folds = 5;
  std::size_t fold = 0;
  double val_fraction = 0.1;
  double clip_norm = 10.0;
  std::string slstm_forget = "exp";
  std::string mlstm_forget = "sigmoid";
  std::string mlstm_form = "parallel";
  ProtocolConfig protocol;
  model::Ablation ablation;
  data::SynthConfig synth;
  GradcheckConfig gradcheck;

  nlohmann::json to_json() const;
  /// FNV-1a over the canonical JSON, output locations (out, checkpoint)
  /// excluded. 16 hex digits.
  std::string hash() const;
  train::TrainConfig train_config() const;
  /// Model shape for a dataset with the given vocabulary sizes.
  model::ModelConfig model_config(std::size_t questions, std::size_t concepts) const;
  std::filesystem::path checkpoint_path() const;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace xkt
