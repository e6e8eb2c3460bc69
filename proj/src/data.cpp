#include "xkt/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "xkt/errors.hpp"

namespace xkt::data {

namespace {

constexpr const char* kHeader = "user_id,question_id,concept_ids,response,timestamp";

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::string unquote(std::string s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    if (ch == sep && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_int(const std::string& s, std::int64_t& value) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool is_missing(const std::string& token) { return token.empty() || token == "NA" || token == "na"; }

void sort_rows(std::vector<Interaction>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const Interaction& a, const Interaction& b) {
    if (a.student != b.student) return id_less(a.student, b.student);
    return a.timestamp < b.timestamp;
  });
}

}  // namespace

bool id_less(const std::string& a, const std::string& b) {
  std::int64_t x = 0, y = 0;
  bool ia = parse_int(a, x), ib = parse_int(b, y);
  if (ia && ib) return x != y ? x < y : a < b;
  if (ia != ib) return ia;
  return a < b;
}

std::string concept_key(std::vector<std::string> concepts) {
  std::sort(concepts.begin(), concepts.end(), id_less);
  concepts.erase(std::unique(concepts.begin(), concepts.end()), concepts.end());
  std::string key;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (i) key += '|';
    key += concepts[i];
  }
  return key;
}

RawData parse_csv(std::istream& in, const std::string& source) {
  RawData raw;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!have_header) {
      if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
      if (trim(line) != kHeader) {
        throw ParseError(source + ":" + std::to_string(line_no) + ": expected header '" + kHeader + "'");
      }
      have_header = true;
      continue;
    }
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    auto where = source + ":" + std::to_string(line_no);
    if (fields.size() != 5) {
      throw ParseError(where + ": expected 5 fields, got " + std::to_string(fields.size()));
    }
    for (auto& f : fields) f = unquote(trim(f));
    Interaction row;
    row.student = fields[0];
    row.question = fields[1];
    if (row.student.empty() || row.question.empty()) throw ParseError(where + ": empty user_id or question_id");
    for (auto& c : split(fields[2], '|')) {
      auto token = trim(c);
      if (!is_missing(token)) row.concepts.push_back(token);
    }
    if (fields[3] == "0" || fields[3] == "1") {
      row.response = fields[3][0] - '0';
    } else {
      throw ValueError(where + ": response must be 0 or 1, got '" + fields[3] + "'");
    }
    if (!parse_int(fields[4], row.timestamp)) {
      throw ParseError(where + ": timestamp '" + fields[4] + "' is not an integer");
    }
    raw.rows.push_back(std::move(row));
  }
  if (!have_header) throw ParseError(source + ": missing header");
  sort_rows(raw.rows);
  return raw;
}

RawData ingest_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  return parse_csv(in, path.string());
}

void write_csv(std::ostream& out, const RawData& raw) {
  out << kHeader << '\n';
  for (const auto& r : raw.rows) {
    out << r.student << ',' << r.question << ',';
    for (std::size_t i = 0; i < r.concepts.size(); ++i) out << (i ? "|" : "") << r.concepts[i];
    out << ',' << r.response << ',' << r.timestamp << '\n';
  }
}

Dataset preprocess(const RawData& raw) {
  Dataset ds;
  std::vector<const Interaction*> kept;
  for (const auto& r : raw.rows) {
    if (r.concepts.empty()) {
      ++ds.stats.dropped_interactions;
    } else {
      kept.push_back(&r);
    }
  }
  std::vector<const Interaction*> rows = kept;
  std::stable_sort(rows.begin(), rows.end(), [](const Interaction* a, const Interaction* b) {
    if (a->student != b->student) return id_less(a->student, b->student);
    return a->timestamp < b->timestamp;
  });

  std::vector<std::pair<std::size_t, std::size_t>> groups;  // [begin, end) into rows
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    while (j < rows.size() && rows[j]->student == rows[i]->student) ++j;
    if (j - i >= kMinInteractions) {
      groups.emplace_back(i, j);
    } else {
      ++ds.stats.dropped_students;
      ds.stats.dropped_interactions += j - i;
    }
    i = j;
  }
  if (groups.empty()) {
    throw ContractError("zero students survive preprocessing (each needs at least " +
                        std::to_string(kMinInteractions) + " interactions with named concepts)");
  }

  std::map<std::string, int, decltype(&id_less)> questions(&id_less), concepts(&id_less);
  for (auto [b, e] : groups) {
    for (std::size_t i = b; i < e; ++i) {
      questions.emplace(rows[i]->question, 0);
      concepts.emplace(concept_key(rows[i]->concepts), 0);
    }
  }
  for (auto& [id, index] : questions) {
    index = static_cast<int>(ds.questions.size());
    ds.questions.push_back(id);
  }
  for (auto& [key, index] : concepts) {
    index = static_cast<int>(ds.concepts.size());
    ds.concepts.push_back(key);
  }
  for (auto [b, e] : groups) {
    StudentSequence seq;
    seq.student = rows[b]->student;
    for (std::size_t i = b; i < e; ++i) {
      const auto& r = *rows[i];
      seq.steps.push_back({questions.at(r.question), concepts.at(concept_key(r.concepts)), r.response,
                           r.timestamp});
    }
    ds.stats.interactions += seq.steps.size();
    ds.students.push_back(std::move(seq));
  }
  ds.stats.students = ds.students.size();
  ds.stats.questions = ds.questions.size();
  ds.stats.concepts = ds.concepts.size();
  return ds;
}

RawData to_raw(const Dataset& ds) {
  RawData raw;
  for (const auto& s : ds.students) {
    for (const auto& st : s.steps) {
      Interaction r;
      r.student = s.student;
      r.question = ds.questions.at(st.question);
      std::stringstream ss(ds.concepts.at(st.concept_id));
      for (std::string c; std::getline(ss, c, '|');) r.concepts.push_back(c);
      r.response = st.response;
      r.timestamp = st.timestamp;
      raw.rows.push_back(std::move(r));
    }
  }
  return raw;
}

nlohmann::json stats_json(const Stats& s) {
  return {{"students", s.students},
          {"questions", s.questions},
          {"concepts", s.concepts},
          {"interactions", s.interactions},
          {"dropped_students", s.dropped_students},
          {"dropped_interactions", s.dropped_interactions}};
}

nlohmann::json to_json(const Dataset& ds) {
  nlohmann::json students = nlohmann::json::array();
  for (const auto& s : ds.students) {
    std::vector<int> q, c, r;
    std::vector<std::int64_t> t;
    for (const auto& st : s.steps) {
      q.push_back(st.question);
      c.push_back(st.concept_id);
      r.push_back(st.response);
      t.push_back(st.timestamp);
    }
    students.push_back({{"id", s.student}, {"question", q}, {"concept", c}, {"response", r}, {"timestamp", t}});
  }
  return {{"format", "xkt-dataset"},
          {"version", 1},
          {"questions", ds.questions},
          {"concepts", ds.concepts},
          {"stats", stats_json(ds.stats)},
          {"students", students}};
}

Dataset dataset_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "xkt-dataset" || j.at("version") != 1) {
      throw ParseError("not an xkt-dataset version 1 file");
    }
    Dataset ds;
    ds.questions = j.at("questions").get<std::vector<std::string>>();
    ds.concepts = j.at("concepts").get<std::vector<std::string>>();
    const auto& st = j.at("stats");
    ds.stats = {st.at("students"), st.at("questions"), st.at("concepts"), st.at("interactions"),
                st.at("dropped_students"), st.at("dropped_interactions")};
    for (const auto& s : j.at("students")) {
      StudentSequence seq;
      seq.student = s.at("id");
      auto q = s.at("question").get<std::vector<int>>();
      auto c = s.at("concept").get<std::vector<int>>();
      auto r = s.at("response").get<std::vector<int>>();
      auto t = s.at("timestamp").get<std::vector<std::int64_t>>();
      if (c.size() != q.size() || r.size() != q.size() || t.size() != q.size()) {
        throw ParseError("student " + seq.student + ": field lengths differ");
      }
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < 0 || static_cast<std::size_t>(q[i]) >= ds.questions.size() || c[i] < 0 ||
            static_cast<std::size_t>(c[i]) >= ds.concepts.size()) {
          throw VocabularyError("student " + seq.student + ": id out of vocabulary at step " + std::to_string(i));
        }
        if (r[i] != 0 && r[i] != 1) throw ValueError("student " + seq.student + ": response not in {0,1}");
        seq.steps.push_back({q[i], c[i], r[i], t[i]});
      }
      ds.students.push_back(std::move(seq));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset file: ") + e.what());
  }
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path.string());
  out << to_json(ds).dump() << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return dataset_from_json(j);
}

Window suffix_window(const Dataset& ds, std::size_t student, std::size_t length) {
  std::size_t n = ds.students.at(student).steps.size();
  return {student, n > length ? n - length : 0, n};
}

SequenceBatch make_batch(const Dataset& ds, const std::vector<Window>& windows, std::size_t length) {
  if (length < 2) throw ContractError("window length must be at least 2");
  SequenceBatch b;
  b.batch = windows.size();
  b.length = length;
  std::size_t cells = b.batch * length;
  b.question.assign(cells, kPadId);
  b.concept_id.assign(cells, kPadId);
  b.response.assign(cells, 0);
  b.mask.assign(cells, 0);
  for (std::size_t row = 0; row < windows.size(); ++row) {
    const auto& w = windows[row];
    const auto& steps = ds.students.at(w.student).steps;
    if (w.end > steps.size() || w.begin > w.end || w.end - w.begin > length) {
      throw ContractError("window does not fit student " + std::to_string(w.student));
    }
    for (std::size_t t = 0; t < w.end - w.begin; ++t) {
      const auto& st = steps[w.begin + t];
      auto k = b.at(row, t);
      b.question[k] = st.question;
      b.concept_id[k] = st.concept_id;
      b.response[k] = st.response;
      b.mask[k] = 1;
    }
    b.true_length.push_back(w.end - w.begin);
    b.student.push_back(w.student);
  }
  return b;
}

std::vector<SequenceBatch> window_pad_batch(const Dataset& ds, const std::vector<std::size_t>& students,
                                            std::size_t length, std::size_t batch_size,
                                            std::uint64_t seed, bool shuffle) {
  if (length < 2) throw ContractError("history length must be at least 2");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<std::size_t> order = students;
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<SequenceBatch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<Window> windows;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) {
      windows.push_back(suffix_window(ds, order[j], length));
    }
    out.push_back(make_batch(ds, windows, length));
  }
  return out;
}

SynthResult synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.students == 0 || cfg.concepts == 0 || cfg.questions == 0) {
    throw ContractError("synth: students, concepts and questions must be positive");
  }
  if (cfg.questions < cfg.concepts) throw ContractError("synth: need at least one question per concept");
  if (cfg.min_length == 0 || cfg.min_length > cfg.max_length) {
    throw ContractError("synth: need 0 < min_length <= max_length");
  }
  std::mt19937_64 rng(seed);
  auto normal = [&](double mean, double sd) {
    return sd > 0 ? std::normal_distribution<double>(mean, sd)(rng) : mean;
  };
  double gain = cfg.static_ability ? 0.0 : cfg.learning_gain;

  std::vector<double> concept_difficulty(cfg.concepts);
  for (auto& d : concept_difficulty) d = normal(cfg.difficulty_mean, cfg.concept_difficulty_sd);
  std::vector<std::size_t> question_concept(cfg.questions);
  std::vector<double> question_difficulty(cfg.questions);
  std::vector<std::vector<std::size_t>> by_concept(cfg.concepts);
  for (std::size_t q = 0; q < cfg.questions; ++q) {
    question_concept[q] = q % cfg.concepts;
    question_difficulty[q] = concept_difficulty[q % cfg.concepts] + normal(0.0, cfg.question_difficulty_sd);
    by_concept[q % cfg.concepts].push_back(q);
  }

  SynthResult result;
  nlohmann::json students = nlohmann::json::array();
  std::uniform_int_distribution<std::size_t> length_dist(cfg.min_length, cfg.max_length);
  std::uniform_int_distribution<std::size_t> concept_dist(0, cfg.concepts - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t s = 0; s < cfg.students; ++s) {
    double theta = normal(cfg.ability_mean, cfg.ability_sd);
    std::vector<double> ability(cfg.concepts);
    for (auto& a : ability) a = theta + normal(0.0, cfg.concept_ability_sd);
    std::vector<double> initial = ability;
    std::size_t steps = length_dist(rng);
    std::size_t current = concept_dist(rng);
    for (std::size_t t = 0; t < steps; ++t) {
      if (t > 0 && unit(rng) >= cfg.stay_probability) current = concept_dist(rng);
      const auto& pool = by_concept[current];
      std::size_t q = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      double p = 1.0 / (1.0 + std::exp(-(ability[current] - question_difficulty[q])));
      int r = unit(rng) < p ? 1 : 0;
      if (r == 1) ability[current] += gain;
      result.raw.rows.push_back({std::to_string(s + 1), std::to_string(q + 1), {std::to_string(current + 1)}, r,
                                 static_cast<std::int64_t>(1000 + 60 * t)});
    }
    students.push_back({{"id", std::to_string(s + 1)}, {"theta", theta}, {"initial_ability", initial},
                        {"final_ability", ability}});
  }
  nlohmann::json questions = nlohmann::json::array();
  for (std::size_t q = 0; q < cfg.questions; ++q) {
    questions.push_back({{"id", std::to_string(q + 1)},
                         {"concept", std::to_string(question_concept[q] + 1)},
                         {"difficulty", question_difficulty[q]}});
  }
  result.truth = {{"seed", seed},
                  {"learning_gain", gain},
                  {"concept_difficulty", concept_difficulty},
                  {"questions", questions},
                  {"students", students}};
  sort_rows(result.raw.rows);
  return result;
}

}  // namespace xkt::data
