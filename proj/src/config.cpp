#include "xkt/config.hpp"

#include <cstdio>
#include <fstream>

namespace xkt {

namespace {

using nlohmann::json;

const char* type_label(const json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_number_unsigned()) return "a non-negative integer";
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_array()) return "an array";
  if (v.is_object()) return "an object";
  return "null";
}

bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

bool same_kind(const json& expected, const json& got) {
  if (expected.is_boolean()) return got.is_boolean();
  if (expected.is_number_unsigned()) return non_negative_integer(got);
  if (expected.is_number()) return got.is_number();
  if (expected.is_string()) return got.is_string();
  if (expected.is_object()) return got.is_object();
  if (expected.is_array()) {
    if (!got.is_array()) return false;
    for (const auto& e : got) {
      if (!non_negative_integer(e)) return false;
    }
    return true;
  }
  return false;
}

// Overlays `given` on `defaults`, rejecting keys the defaults do not have.
void merge(json& defaults, const json& given, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected a JSON object");
  for (const auto& [key, value] : given.items()) {
    std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError(path, "unknown key");
    json& slot = defaults[key];
    if (!same_kind(slot, value)) {
      throw ConfigError(path, std::string("expected ") + type_label(slot) + ", got " + type_label(value));
    }
    if (slot.is_object()) {
      merge(slot, value, path);
    } else {
      slot = value;
    }
  }
}

template <class T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

void require_one_of(const std::string& value, std::initializer_list<const char*> allowed, const std::string& key) {
  std::string list;
  for (const char* a : allowed) {
    if (value == a) return;
    list += list.empty() ? a : std::string(", ") + a;
  }
  throw ConfigError(key, "'" + value + "' is not one of " + list);
}

}  // namespace

json RunConfig::to_json() const {
  const auto& s = synth;
  const auto& g = gradcheck;
  return {{"model", model},
          {"data", data},
          {"dataset", dataset},
          {"out", out},
          {"checkpoint", checkpoint},
          {"batch_size", batch_size},
          {"lr", lr},
          {"dropout", dropout},
          {"dim", dim},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"history", history},
          {"seed", seed},
          {"folds", folds},
          {"fold", fold},
          {"val_fraction", val_fraction},
          {"clip_norm", clip_norm},
          {"slstm_forget", slstm_forget},
          {"mlstm_forget", mlstm_forget},
          {"mlstm_form", mlstm_form},
          {"protocol",
           {{"name", protocol.name},
            {"steps", protocol.steps},
            {"setting", protocol.setting},
            {"horizon", protocol.horizon},
            {"history_grid", protocol.history_grid},
            {"retrain", protocol.retrain}}},
          {"ablation",
           {{"no_rasch", ablation.no_rasch},
            {"no_irt", ablation.no_irt},
            {"no_ikf", ablation.no_ikf},
            {"no_slstm", ablation.no_slstm},
            {"no_mlstm", ablation.no_mlstm}}},
          {"synth",
           {{"students", s.students},
            {"concepts", s.concepts},
            {"questions", s.questions},
            {"min_length", s.min_length},
            {"max_length", s.max_length},
            {"ability_mean", s.ability_mean},
            {"ability_sd", s.ability_sd},
            {"concept_ability_sd", s.concept_ability_sd},
            {"difficulty_mean", s.difficulty_mean},
            {"concept_difficulty_sd", s.concept_difficulty_sd},
            {"question_difficulty_sd", s.question_difficulty_sd},
            {"learning_gain", s.learning_gain},
            {"stay_probability", s.stay_probability},
            {"static_ability", s.static_ability}}},
          {"gradcheck",
           {{"students", g.students},
            {"steps", g.steps},
            {"dim", g.dim},
            {"concepts", g.concepts},
            {"questions", g.questions},
            {"eps", g.eps},
            {"threshold", g.threshold}}}};
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("out");
  j.erase("checkpoint");
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig t;
  t.batch_size = batch_size;
  t.lr = lr;
  t.max_epochs = max_epochs;
  t.patience = patience;
  t.history = history;
  t.seed = seed;
  t.clip_norm = clip_norm;
  return t;
}

model::ModelConfig RunConfig::model_config(std::size_t questions, std::size_t concepts) const {
  model::ModelConfig m;
  m.kind = model == "dkt" ? model::Kind::kDkt : model::Kind::kDkt2;
  m.questions = questions;
  m.concepts = concepts;
  m.dim = dim;
  m.dropout = dropout;
  m.slstm_forget = slstm_forget == "exp" ? cells::ForgetActivation::kExp : cells::ForgetActivation::kSigmoid;
  m.mlstm_forget = mlstm_forget == "exp" ? cells::ForgetActivation::kExp : cells::ForgetActivation::kSigmoid;
  m.mlstm_parallel = mlstm_form == "parallel";
  m.ablation = ablation;
  return m;
}

std::filesystem::path RunConfig::checkpoint_path() const {
  if (!checkpoint.empty()) return checkpoint;
  return std::filesystem::path(out) / "checkpoint.json";
}

RunConfig parse_config(const json& given) {
  json j = RunConfig{}.to_json();
  merge(j, given, "");

  RunConfig c;
  c.model = get<std::string>(j, "model");
  c.data = get<std::string>(j, "data");
  c.dataset = get<std::string>(j, "dataset");
  c.out = get<std::string>(j, "out");
  c.checkpoint = get<std::string>(j, "checkpoint");
  c.batch_size = get<std::size_t>(j, "batch_size");
  c.lr = get<double>(j, "lr");
  c.dropout = get<double>(j, "dropout");
  c.dim = get<std::size_t>(j, "dim");
  c.max_epochs = get<std::size_t>(j, "max_epochs");
  c.patience = get<std::size_t>(j, "patience");
  c.history = get<std::size_t>(j, "history");
  c.seed = get<std::uint64_t>(j, "seed");
  c.folds = get<std::size_t>(j, "folds");
  c.fold = get<std::size_t>(j, "fold");
  c.val_fraction = get<double>(j, "val_fraction");
  c.clip_norm = get<double>(j, "clip_norm");
  c.slstm_forget = get<std::string>(j, "slstm_forget");
  c.mlstm_forget = get<std::string>(j, "mlstm_forget");
  c.mlstm_form = get<std::string>(j, "mlstm_form");

  const auto& p = j.at("protocol");
  c.protocol.name = get<std::string>(p, "name");
  c.protocol.steps = get<std::vector<std::size_t>>(p, "steps");
  c.protocol.setting = get<std::string>(p, "setting");
  c.protocol.horizon = get<std::size_t>(p, "horizon");
  c.protocol.history_grid = get<std::vector<std::size_t>>(p, "history_grid");
  c.protocol.retrain = get<bool>(p, "retrain");

  const auto& a = j.at("ablation");
  c.ablation = {get<bool>(a, "no_rasch"), get<bool>(a, "no_irt"), get<bool>(a, "no_ikf"), get<bool>(a, "no_slstm"),
                get<bool>(a, "no_mlstm")};

  const auto& s = j.at("synth");
  c.synth.students = get<std::size_t>(s, "students");
  c.synth.concepts = get<std::size_t>(s, "concepts");
  c.synth.questions = get<std::size_t>(s, "questions");
  c.synth.min_length = get<std::size_t>(s, "min_length");
  c.synth.max_length = get<std::size_t>(s, "max_length");
  c.synth.ability_mean = get<double>(s, "ability_mean");
  c.synth.ability_sd = get<double>(s, "ability_sd");
  c.synth.concept_ability_sd = get<double>(s, "concept_ability_sd");
  c.synth.difficulty_mean = get<double>(s, "difficulty_mean");
  c.synth.concept_difficulty_sd = get<double>(s, "concept_difficulty_sd");
  c.synth.question_difficulty_sd = get<double>(s, "question_difficulty_sd");
  c.synth.learning_gain = get<double>(s, "learning_gain");
  c.synth.stay_probability = get<double>(s, "stay_probability");
  c.synth.static_ability = get<bool>(s, "static_ability");

  const auto& g = j.at("gradcheck");
  c.gradcheck = {get<std::size_t>(g, "students"), get<std::size_t>(g, "steps"),    get<std::size_t>(g, "dim"),
                 get<std::size_t>(g, "concepts"), get<std::size_t>(g, "questions"), get<double>(g, "eps"),
                 get<double>(g, "threshold")};

  require_one_of(c.model, {"dkt2", "dkt"}, "model");
  require_one_of(c.slstm_forget, {"exp", "sigmoid"}, "slstm_forget");
  require_one_of(c.mlstm_forget, {"exp", "sigmoid"}, "mlstm_forget");
  require_one_of(c.mlstm_form, {"parallel", "recurrent"}, "mlstm_form");
  require_one_of(c.protocol.name, {"one_step", "multi_step", "varying_history", "masked", "multi_concept", "all"},
                 "protocol.name");
  require_one_of(c.protocol.setting, {"all_masked", "responses_masked", "unmasked"}, "protocol.setting");
  require(c.batch_size > 0, "batch_size", "must be positive");
  require(c.lr > 0, "lr", "must be positive");
  require(c.dropout >= 0 && c.dropout < 1, "dropout", "must lie in [0, 1)");
  require(c.dim > 0, "dim", "must be positive");
  require(c.max_epochs > 0, "max_epochs", "must be positive");
  require(c.patience > 0, "patience", "must be positive");
  require(c.patience <= c.max_epochs, "patience", "must not exceed max_epochs");
  require(c.history >= 2, "history", "must be at least 2");
  require(c.folds >= 2, "folds", "must be at least 2");
  require(c.fold < c.folds, "fold", "must be below folds");
  require(c.val_fraction > 0 && c.val_fraction < 1, "val_fraction", "must lie in (0, 1)");
  require(!c.protocol.steps.empty(), "protocol.steps", "must not be empty");
  for (auto n : c.protocol.steps) require(n >= 1, "protocol.steps", "entries must be at least 1");
  require(c.protocol.horizon >= 1, "protocol.horizon", "must be at least 1");
  require(!c.protocol.history_grid.empty(), "protocol.history_grid", "must not be empty");
  for (auto n : c.protocol.history_grid) require(n >= 2, "protocol.history_grid", "entries must be at least 2");
  require(c.gradcheck.eps > 0, "gradcheck.eps", "must be positive");
  require(c.gradcheck.steps >= data::kMinInteractions, "gradcheck.steps",
          "must be at least " + std::to_string(data::kMinInteractions));
  require(c.gradcheck.students >= 1 && c.gradcheck.dim >= 1 && c.gradcheck.concepts >= 1 &&
              c.gradcheck.questions >= c.gradcheck.concepts,
          "gradcheck", "sizes must be positive with questions >= concepts");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

}  // namespace xkt
