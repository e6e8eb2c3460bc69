#include "xkt/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "CLI11.hpp"
#include "xkt/errors.hpp"
#include "xkt/ops.hpp"

namespace xkt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path out_dir(const RunConfig& cfg) {
  fs::path dir = cfg.out;
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw ContractError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

json stamp(const RunConfig& cfg) { return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}}; }

model::Vocab vocab_of(const data::Dataset& ds) { return {ds.questions, ds.concepts}; }

std::string report_label(const eval::Report& r) {
  std::string label = r.protocol;
  if (r.protocol == "multi_step") label += "_N" + std::to_string(r.params.at("horizon").get<std::size_t>());
  if (r.protocol == "varying_history") label += "_L" + std::to_string(r.params.at("history").get<std::size_t>());
  if (r.protocol == "masked") {
    label += "_" + r.params.at("setting").get<std::string>() + "_N" +
             std::to_string(r.params.at("horizon").get<std::size_t>());
  }
  return label;
}

}  // namespace

data::Dataset load_run_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) return data::load_dataset(cfg.dataset);
  if (!cfg.data.empty()) return data::preprocess(data::ingest_csv(cfg.data));
  throw ConfigError("dataset", "set 'dataset' (preprocessed JSON) or 'data' (raw CSV)");
}

train::Split run_split(const RunConfig& cfg, const data::Dataset& ds) {
  return train::fold_split(ds.students.size(), cfg.folds, cfg.fold, cfg.val_fraction, cfg.seed);
}

json command_prep(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("data", "prep needs the raw CSV path in 'data'");
  auto ds = data::preprocess(data::ingest_csv(cfg.data));
  auto dir = out_dir(cfg);
  data::save_dataset(ds, dir / "dataset.json");
  json stats = stamp(cfg);
  stats["stats"] = data::stats_json(ds.stats);
  write_json(dir / "stats.json", stats);
  return stats;
}

json command_synth(const RunConfig& cfg) {
  auto result = data::synth_generate(cfg.synth, cfg.seed);
  auto dir = out_dir(cfg);
  {
    std::ofstream csv(dir / "interactions.csv");
    if (!csv) throw ContractError("cannot write " + (dir / "interactions.csv").string());
    data::write_csv(csv, result.raw);
  }
  json truth = stamp(cfg);
  truth["truth"] = result.truth;
  write_json(dir / "ground_truth.json", truth);
  json summary = stamp(cfg);
  summary["interactions"] = result.raw.rows.size();
  summary["students"] = cfg.synth.students;
  return summary;
}

TrainedModel train_model(const RunConfig& cfg, const data::Dataset& ds, const train::Split& split,
                         const std::function<void(const train::EpochRecord&)>& on_epoch) {
  TrainedModel t;
  t.model = model::make_model(cfg.model_config(ds.questions.size(), ds.concepts.size()), cfg.seed);
  t.result = train::train(*t.model, ds, split, cfg.train_config(), on_epoch);
  return t;
}

json command_train(const RunConfig& cfg) {
  auto ds = load_run_dataset(cfg);
  auto split = run_split(cfg, ds);
  auto dir = out_dir(cfg);
  std::ofstream log(dir / "epochs.jsonl");
  if (!log) throw ContractError("cannot write " + (dir / "epochs.jsonl").string());
  auto m = model::make_model(cfg.model_config(ds.questions.size(), ds.concepts.size()), cfg.seed);
  auto extra = stamp(cfg);
  auto on_epoch = [&](const train::EpochRecord& e) {
    json line = train::to_json(e);
    line["config_hash"] = cfg.hash();
    line["seed"] = cfg.seed;
    log << line.dump() << '\n' << std::flush;
  };
  train::TrainResult result;
  try {
    result = train::train(*m, ds, split, cfg.train_config(), on_epoch);
  } catch (const NumericError&) {
    extra["aborted"] = "numeric error";
    model::save_checkpoint(cfg.checkpoint_path(), *m, vocab_of(ds), cfg.hash(), extra);
    throw;
  }
  extra["best_epoch"] = result.best_epoch;
  extra["best_val_auc"] = result.best_valid_auc ? json(*result.best_valid_auc) : json(nullptr);
  extra["epochs_run"] = result.epochs.size();
  extra["stopped_early"] = result.stopped_early;
  extra["split"] = {{"train", split.train.size()}, {"valid", split.valid.size()}, {"test", split.test.size()}};
  fs::create_directories(cfg.checkpoint_path().parent_path().empty() ? fs::path(".")
                                                                      : cfg.checkpoint_path().parent_path());
  model::save_checkpoint(cfg.checkpoint_path(), *m, vocab_of(ds), cfg.hash(), extra);
  return extra;
}

std::vector<eval::Report> run_protocols(model::KtModel& m, const data::Dataset& ds, const train::Split& split,
                                        const RunConfig& cfg) {
  const auto& p = cfg.protocol;
  eval::EvalOptions opt{cfg.history, cfg.batch_size};
  const auto& students = split.test;
  std::vector<eval::Report> out;
  bool all = p.name == "all";
  if (all || p.name == "one_step") out.push_back(eval::eval_one_step(m, ds, students, opt));
  if (all || p.name == "multi_step") {
    for (auto n : p.steps) out.push_back(eval::eval_multi_step(m, ds, students, n, opt));
  }
  if (all || p.name == "varying_history") {
    std::vector<std::unique_ptr<model::KtModel>> retrained;
    auto model_for = [&](std::size_t length) -> model::KtModel& {
      if (!p.retrain) return m;
      RunConfig c = cfg;
      c.history = length;
      retrained.push_back(train_model(c, ds, split).model);
      return *retrained.back();
    };
    auto reports = eval::eval_varying_history(model_for, ds, students, p.history_grid, opt);
    for (auto& r : reports) {
      r.params["retrain"] = p.retrain;
      out.push_back(std::move(r));
    }
  }
  if (all) {
    for (auto s : {eval::MaskSetting::kAllMasked, eval::MaskSetting::kResponsesMasked, eval::MaskSetting::kUnmasked}) {
      out.push_back(eval::eval_masked(m, ds, students, s, p.horizon, opt));
    }
  } else if (p.name == "masked") {
    out.push_back(eval::eval_masked(m, ds, students, eval::setting_from(p.setting), p.horizon, opt));
  }
  if (all || p.name == "multi_concept") out.push_back(eval::eval_multi_concept(m, ds, students, opt));
  return out;
}

json command_eval(const RunConfig& cfg, bool dump) {
  auto ck = model::load_checkpoint(cfg.checkpoint_path());
  auto ds = load_run_dataset(cfg);
  if (ck.vocab.questions != ds.questions || ck.vocab.concepts != ds.concepts) {
    throw ContractError("checkpoint vocabulary does not match the dataset");
  }
  auto split = run_split(cfg, ds);
  auto reports = run_protocols(*ck.model, ds, split, cfg);
  auto dir = out_dir(cfg);
  json result = stamp(cfg);
  result["model"] = model::kind_name(ck.model->config().kind);
  result["checkpoint_config_hash"] = ck.config_hash;
  result["test_students"] = split.test.size();
  result["reports"] = json::array();
  for (const auto& r : reports) {
    json rj = eval::to_json(r);
    if (dump) {
      std::string name = "predictions_" + report_label(r) + ".csv";
      std::ofstream csv(dir / name);
      if (!csv) throw ContractError("cannot write " + (dir / name).string());
      eval::write_predictions_csv(csv, r.predictions);
      rj["dump"] = name;
    }
    result["reports"].push_back(rj);
  }
  write_json(dir / "metrics.json", result);
  return result;
}

json command_predict(const RunConfig& cfg, const std::string& input_csv) {
  std::string path = input_csv.empty() ? cfg.data : input_csv;
  if (path.empty()) throw ConfigError("data", "predict needs histories via --input or 'data'");
  auto ck = model::load_checkpoint(cfg.checkpoint_path());
  auto raw = data::ingest_csv(path);

  std::unordered_map<std::string, int> qid, cid;
  for (std::size_t i = 0; i < ck.vocab.questions.size(); ++i) qid[ck.vocab.questions[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < ck.vocab.concepts.size(); ++i) cid[ck.vocab.concepts[i]] = static_cast<int>(i);
  data::Dataset ds;
  ds.questions = ck.vocab.questions;
  ds.concepts = ck.vocab.concepts;
  for (const auto& r : raw.rows) {
    if (r.concepts.empty()) continue;
    auto q = qid.find(r.question);
    if (q == qid.end()) throw VocabularyError("unknown question id " + r.question);
    auto key = data::concept_key(r.concepts);
    auto c = cid.find(key);
    if (c == cid.end()) throw VocabularyError("unknown concept set " + key);
    if (ds.students.empty() || ds.students.back().student != r.student) ds.students.push_back({r.student, {}});
    ds.students.back().steps.push_back({q->second, c->second, r.response, r.timestamp});
  }

  NoGradGuard no_grad;
  auto& m = *ck.model;
  json students = json::array();
  for (std::size_t s = 0; s < ds.students.size(); ++s) {
    auto w = data::suffix_window(ds, s, cfg.history);
    auto batch = data::make_batch(ds, {w}, cfg.history);
    auto fwd = m.forward(batch, {});
    const auto& seq = ds.students[s];
    json steps = json::array();
    for (std::size_t pos = 1; pos < w.end - w.begin; ++pos) {
      const auto& st = seq.steps[w.begin + pos];
      steps.push_back({{"step", w.begin + pos + 1},
                       {"question", ds.questions[st.question]},
                       {"concept", ds.concepts[st.concept_id]},
                       {"predicted", fwd.predictions.data()[pos - 1]},
                       {"response", st.response}});
    }
    Tensor know = m.knowledge(batch, {});
    Tensor flat = reshape(know, {cfg.history, know.dim(2)});
    std::vector<int> last{static_cast<int>(w.end - w.begin - 1)}, hidden{-1};
    Tensor ks = m.readout(embedding(flat, last), hidden, hidden, {});
    students.push_back({{"student", seq.student},
                        {"interactions", seq.steps.size()},
                        {"one_step", steps},
                        {"knowledge_state", ks.to_vector()}});
  }
  json result = stamp(cfg);
  result["concepts"] = ds.concepts;
  result["students"] = students;
  write_json(out_dir(cfg) / "predictions.json", result);
  return result;
}

GradcheckReport model_gradcheck(const RunConfig& cfg) {
  const auto& g = cfg.gradcheck;
  data::SynthConfig sc = cfg.synth;
  sc.students = g.students;
  sc.concepts = g.concepts;
  sc.questions = g.questions;
  sc.min_length = sc.max_length = g.steps;
  auto ds = data::preprocess(data::synth_generate(sc, cfg.seed).raw);
  RunConfig c = cfg;
  c.dim = g.dim;
  c.dropout = 0.0;
  auto m = model::make_model(c.model_config(ds.questions.size(), ds.concepts.size()), cfg.seed);
  std::vector<std::size_t> all(ds.students.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto batch = data::window_pad_batch(ds, all, g.steps, all.size(), cfg.seed, false).at(0);
  auto loss = [&] {
    auto fwd = m->forward(batch, {});
    return train::bce_loss(fwd.predictions, fwd.labels, fwd.weights).mean;
  };
  GradcheckReport r;
  r.result = finite_diff_check(loss, m->parameters().tensors(), g.eps);
  r.tensors = m->parameters().size();
  r.worst_parameter = m->parameters().names().at(r.result.worst_tensor);
  return r;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"xkt: knowledge tracing with DKT2 and DKT"};
  app.require_subcommand(1);
  std::string config_path, out_override, input, command;
  std::uint64_t seed = 0;
  bool dump = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_override, "override the output directory");
    sub->callback([&command, sub] { command = sub->get_name(); });
    return sub;
  };
  add_common(app.add_subcommand("prep", "preprocess a raw interaction CSV"));
  add_common(app.add_subcommand("synth", "generate a synthetic interaction CSV"));
  add_common(app.add_subcommand("train", "train a model with early stopping"));
  add_common(app.add_subcommand("eval", "run evaluation protocols on the test fold"))
      ->add_flag("--dump", dump, "write per-prediction CSV files");
  add_common(app.add_subcommand("predict", "knowledge states for student histories"))
      ->add_option("--input", input, "CSV with the ingest header");
  add_common(app.add_subcommand("gradcheck", "finite-difference gradient check on a micro-batch"));

  std::vector<std::string> argv_store{"xkt"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    RunConfig cfg = load_config(config_path);
    if (app.get_subcommand(command)->count("--seed")) cfg.seed = seed;
    if (!out_override.empty()) cfg.out = out_override;
    if (command == "prep") {
      out << command_prep(cfg).dump(2) << '\n';
    } else if (command == "synth") {
      out << command_synth(cfg).dump(2) << '\n';
    } else if (command == "train") {
      out << command_train(cfg).dump(2) << '\n';
    } else if (command == "eval") {
      out << command_eval(cfg, dump).dump(2) << '\n';
    } else if (command == "predict") {
      command_predict(cfg, input);
      out << "wrote " << (fs::path(cfg.out) / "predictions.json").string() << '\n';
    } else if (command == "gradcheck") {
      auto r = model_gradcheck(cfg);
      out << "max_rel_error " << r.result.max_rel_error << " at " << r.worst_parameter << "[" << r.result.worst_entry
          << "] (analytic " << r.result.worst_analytic << ", numeric " << r.result.worst_numeric << ") over "
          << r.result.checked << " entries in " << r.tensors << " tensors\n";
      if (!(r.result.max_rel_error < cfg.gradcheck.threshold)) {
        err << "gradient check failed: threshold " << cfg.gradcheck.threshold << '\n';
        return 2;
      }
    }
    return 0;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace xkt
