#include "xkt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>

#include "xkt/errors.hpp"
#include "xkt/ops.hpp"

namespace xkt::eval {

namespace {

using data::Window;

// A student whose knowledge is frozen after `observed`. Each readout fuses
// the frozen row with one next question (negative = hidden); each target is
// scored from one readout at its own concept.
struct FrozenQuery {
  Window observed;
  std::vector<std::pair<int, int>> readouts;  // (question, concept)
  struct Target {
    std::size_t readout;
    std::size_t step;  // 0-based index into the student's steps
  };
  std::vector<Target> targets;
};

std::vector<Prediction> run_frozen(model::KtModel& m, const data::Dataset& ds, const std::vector<FrozenQuery>& queries,
                                   const EvalOptions& opt) {
  NoGradGuard no_grad;
  std::vector<Prediction> out;
  const std::size_t L = opt.history;
  for (std::size_t first = 0; first < queries.size(); first += opt.batch_size) {
    std::size_t last = std::min(queries.size(), first + opt.batch_size);
    std::vector<Window> windows;
    for (std::size_t i = first; i < last; ++i) windows.push_back(queries[i].observed);
    auto batch = data::make_batch(ds, windows, L);
    Tensor know = m.knowledge(batch, {});
    Tensor flat = reshape(know, {batch.batch * L, know.dim(2)});

    std::vector<int> row_index, next_q, next_c;
    std::vector<std::size_t> readout_base;
    for (std::size_t i = first; i < last; ++i) {
      const auto& q = queries[i];
      readout_base.push_back(next_q.size());
      int row = static_cast<int>((i - first) * L + (q.observed.end - q.observed.begin - 1));
      for (auto [question, concept_id] : q.readouts) {
        row_index.push_back(row);
        next_q.push_back(question);
        next_c.push_back(concept_id);
      }
    }
    if (row_index.empty()) continue;
    Tensor ks = m.readout(embedding(flat, row_index), next_q, next_c, {});
    const std::size_t n = ks.dim(1);
    auto values = ks.data();
    for (std::size_t i = first; i < last; ++i) {
      const auto& q = queries[i];
      const auto& student = ds.students[q.observed.student];
      for (const auto& t : q.targets) {
        const auto& step = student.steps[t.step];
        std::size_t r = readout_base[i - first] + t.readout;
        out.push_back({student.student, t.step + 1, step.concept_id,
                       static_cast<double>(values[r * n + static_cast<std::size_t>(step.concept_id)]), step.response});
      }
    }
  }
  return out;
}

// One-step predictions over suffix windows, keeping targets at window
// positions >= keep_from(window length).
template <class KeepFrom>
std::vector<Prediction> run_one_step(model::KtModel& m, const data::Dataset& ds,
                                     const std::vector<std::size_t>& students, const EvalOptions& opt,
                                     KeepFrom keep_from) {
  NoGradGuard no_grad;
  std::vector<Prediction> out;
  const std::size_t L = opt.history;
  for (std::size_t first = 0; first < students.size(); first += opt.batch_size) {
    std::size_t last = std::min(students.size(), first + opt.batch_size);
    std::vector<Window> windows;
    for (std::size_t i = first; i < last; ++i) windows.push_back(data::suffix_window(ds, students[i], L));
    auto batch = data::make_batch(ds, windows, L);
    auto res = m.forward(batch, {});
    auto scores = res.predictions.data();
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const auto& w = windows[b];
      const auto& student = ds.students[w.student];
      std::size_t len = w.end - w.begin;
      for (std::size_t pos = std::max<std::size_t>(1, keep_from(len)); pos < len; ++pos) {
        std::size_t row = b * (L - 1) + pos - 1;
        const auto& step = student.steps[w.begin + pos];
        out.push_back({student.student, w.begin + pos + 1, step.concept_id, static_cast<double>(scores[row]),
                       step.response});
      }
    }
  }
  return out;
}

Report finish(std::string protocol, nlohmann::json params, std::vector<Prediction> preds, std::size_t skipped) {
  Report r;
  r.protocol = std::move(protocol);
  r.params = std::move(params);
  r.metrics = metrics_of(preds);
  r.predictions = std::move(preds);
  r.skipped = skipped;
  return r;
}

void check_options(const EvalOptions& opt) {
  if (opt.history < 2) throw ContractError("evaluation history length must be at least 2");
  if (opt.batch_size == 0) throw ContractError("evaluation batch size must be positive");
}

void check_horizon(std::size_t horizon) {
  if (horizon == 0) throw ContractError("horizon N must be at least 1");
}

}  // namespace

Metrics compute_metrics(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("compute_metrics: " + std::to_string(scores.size()) + " scores but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw ContractError("compute_metrics: no predictions");
  const std::size_t n = scores.size();
  Metrics m;
  m.n = n;
  std::size_t correct = 0;
  double sq = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValueError("compute_metrics: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw NumericError("compute_metrics: non-finite score at " + std::to_string(i));
    int predicted = scores[i] >= 0.5 ? 1 : 0;
    correct += predicted == labels[i];
    sq += (scores[i] - labels[i]) * (scores[i] - labels[i]);
    positives += labels[i];
  }
  m.acc = static_cast<double>(correct) / static_cast<double>(n);
  m.rmse = std::sqrt(sq / static_cast<double>(n));

  std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return m;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum of the positives; tied runs share (first + last) ranks.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_run = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) pos_in_run += labels[order[j++]];
    twice_rank_sum += pos_in_run * ((i + 1) + j);
    i = j;
  }
  std::uint64_t twice_u = twice_rank_sum - static_cast<std::uint64_t>(positives) * (positives + 1);
  m.auc = static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
  m.auc_defined = true;
  return m;
}

Metrics metrics_of(std::span<const Prediction> predictions) {
  if (predictions.empty()) return {};
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : predictions) {
    scores.push_back(p.score);
    labels.push_back(p.label);
  }
  return compute_metrics(scores, labels);
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j;
  j["auc"] = m.auc_defined ? nlohmann::json(m.auc) : nlohmann::json("undefined");
  j["auc_defined"] = m.auc_defined;
  j["acc"] = m.n ? nlohmann::json(m.acc) : nlohmann::json(nullptr);
  j["rmse"] = m.n ? nlohmann::json(m.rmse) : nlohmann::json(nullptr);
  j["n_predictions"] = m.n;
  return j;
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json j = to_json(r.metrics);
  j["protocol"] = r.protocol;
  j["params"] = r.params;
  j["skipped_students"] = r.skipped;
  return j;
}

void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions) {
  out << "student,step,concept,score,label\n";
  auto old = out.precision(17);
  for (const auto& p : predictions) {
    out << p.student << ',' << p.step << ',' << p.concept_id << ',' << p.score << ',' << p.label << '\n';
  }
  out.precision(old);
}

std::vector<Prediction> read_predictions_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "student,step,concept,score,label") {
    throw ParseError("predictions csv: missing header");
  }
  std::vector<Prediction> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    Prediction p;
    std::string step, concept_id, score, label;
    if (!std::getline(ss, p.student, ',') || !std::getline(ss, step, ',') || !std::getline(ss, concept_id, ',') ||
        !std::getline(ss, score, ',') || !std::getline(ss, label)) {
      throw ParseError("predictions csv: line " + std::to_string(line_no) + " has too few fields");
    }
    try {
      p.step = std::stoul(step);
      p.concept_id = std::stoi(concept_id);
      p.score = std::stod(score);
      p.label = std::stoi(label);
    } catch (const std::exception&) {
      throw ParseError("predictions csv: line " + std::to_string(line_no) + " is malformed");
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::string setting_name(MaskSetting s) {
  switch (s) {
    case MaskSetting::kAllMasked: return "all_masked";
    case MaskSetting::kResponsesMasked: return "responses_masked";
    case MaskSetting::kUnmasked: return "unmasked";
  }
  return "";
}

MaskSetting setting_from(const std::string& s) {
  if (s == "all_masked") return MaskSetting::kAllMasked;
  if (s == "responses_masked") return MaskSetting::kResponsesMasked;
  if (s == "unmasked") return MaskSetting::kUnmasked;
  throw ValueError("mask setting must be all_masked, responses_masked or unmasked, got '" + s + "'");
}

Report eval_one_step(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                     const EvalOptions& opt) {
  check_options(opt);
  auto preds = run_one_step(m, ds, students, opt, [](std::size_t) { return std::size_t{1}; });
  return finish("one_step", {{"history", opt.history}}, std::move(preds), 0);
}

Report eval_multi_step(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                       std::size_t horizon, const EvalOptions& opt) {
  check_options(opt);
  check_horizon(horizon);
  std::vector<FrozenQuery> queries;
  std::size_t skipped = 0;
  for (auto s : students) {
    auto w = data::suffix_window(ds, s, opt.history);
    if (w.end - w.begin < horizon + 1) {
      ++skipped;
      continue;
    }
    FrozenQuery q;
    q.observed = {s, w.begin, w.end - horizon};
    const auto& steps = ds.students[s].steps;
    for (std::size_t j = w.end - horizon; j < w.end; ++j) {
      q.targets.push_back({q.readouts.size(), j});
      q.readouts.emplace_back(steps[j].question, steps[j].concept_id);
    }
    queries.push_back(std::move(q));
  }
  return finish("multi_step", {{"history", opt.history}, {"horizon", horizon}}, run_frozen(m, ds, queries, opt),
                skipped);
}

Report eval_masked(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                   MaskSetting setting, std::size_t horizon, const EvalOptions& opt) {
  check_options(opt);
  check_horizon(horizon);
  nlohmann::json params = {{"history", opt.history}, {"horizon", horizon}, {"setting", setting_name(setting)}};
  if (setting == MaskSetting::kResponsesMasked) {
    auto r = eval_multi_step(m, ds, students, horizon, opt);
    r.protocol = "masked";
    r.params = params;
    return r;
  }
  std::vector<std::size_t> eligible;
  std::size_t skipped = 0;
  for (auto s : students) {
    auto w = data::suffix_window(ds, s, opt.history);
    if (w.end - w.begin < horizon + 1) {
      ++skipped;
    } else {
      eligible.push_back(s);
    }
  }
  if (setting == MaskSetting::kUnmasked) {
    auto preds = run_one_step(m, ds, eligible, opt, [horizon](std::size_t len) { return len - horizon; });
    return finish("masked", params, std::move(preds), skipped);
  }
  std::vector<FrozenQuery> queries;
  for (auto s : eligible) {
    auto w = data::suffix_window(ds, s, opt.history);
    FrozenQuery q;
    q.observed = {s, w.begin, w.end - horizon};
    q.readouts.emplace_back(-1, -1);
    for (std::size_t j = w.end - horizon; j < w.end; ++j) q.targets.push_back({0, j});
    queries.push_back(std::move(q));
  }
  return finish("masked", params, run_frozen(m, ds, queries, opt), skipped);
}

std::vector<Report> eval_varying_history(const std::function<model::KtModel&(std::size_t)>& model_for,
                                         const data::Dataset& ds, const std::vector<std::size_t>& students,
                                         const std::vector<std::size_t>& lengths, const EvalOptions& opt) {
  std::vector<Report> out;
  for (auto length : lengths) {
    EvalOptions o = opt;
    o.history = length;
    auto r = eval_one_step(model_for(length), ds, students, o);
    r.protocol = "varying_history";
    out.push_back(std::move(r));
  }
  return out;
}

Report eval_multi_concept(model::KtModel& m, const data::Dataset& ds, const std::vector<std::size_t>& students,
                          const EvalOptions& opt) {
  check_options(opt);
  std::vector<FrozenQuery> queries;
  std::size_t skipped = 0;
  for (auto s : students) {
    auto w = data::suffix_window(ds, s, opt.history);
    std::size_t t = w.end - w.begin;
    if (t < 4) {
      ++skipped;
      continue;
    }
    std::size_t mid = w.begin + t / 2;
    const auto& steps = ds.students[s].steps;
    FrozenQuery q;
    q.observed = {s, w.begin, mid};
    q.readouts.emplace_back(steps[mid].question, steps[mid].concept_id);
    for (std::size_t j = mid; j < w.end; ++j) q.targets.push_back({0, j});
    queries.push_back(std::move(q));
  }
  return finish("multi_concept", {{"history", opt.history}}, run_frozen(m, ds, queries, opt), skipped);
}

}  // namespace xkt::eval
