#pragma once

// Interaction logs: CSV ingest, preprocessing, windowed batching and a
// synthetic IRT-style generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace xkt::data {

/// One raw log row. Ids are kept as strings; numeric ids order numerically.
struct Interaction {
  std::string student;
  std::string question;
  std::vector<std::string> concepts;  // empty when the field was empty or NA
  int response = 0;
  std::int64_t timestamp = 0;
};

/// Rows grouped by student (students in id order), each group sorted by
/// (timestamp, file order).
struct RawData {
  std::vector<Interaction> rows;
};

RawData ingest_csv(const std::filesystem::path& path);
RawData parse_csv(std::istream& in, const std::string& source = "<stream>");
void write_csv(std::ostream& out, const RawData& raw);

struct Step {
  int question = 0;
  int concept_id = 0;
  int response = 0;
  std::int64_t timestamp = 0;
};

struct StudentSequence {
  std::string student;
  std::vector<Step> steps;
};

struct Stats {
  std::size_t students = 0;
  std::size_t questions = 0;
  std::size_t concepts = 0;
  std::size_t interactions = 0;
  std::size_t dropped_students = 0;
  std::size_t dropped_interactions = 0;
};

struct Dataset {
  std::vector<StudentSequence> students;
  std::vector<std::string> questions;  // index -> raw question id
  /// index -> sorted raw concept set joined by '|'
  std::vector<std::string> concepts;
  Stats stats;
};

inline constexpr std::size_t kMinInteractions = 5;

/// Order used for ids everywhere: integers numerically, then other strings.
bool id_less(const std::string& a, const std::string& b);
std::string concept_key(std::vector<std::string> concepts);

/// Drops interactions without concepts, then students with fewer than five
/// interactions, and maps each distinct concept set to one index. Throws
/// ContractError when no student survives.
Dataset preprocess(const RawData& raw);
/// Inverse view: rows with the original ids and concept sets.
RawData to_raw(const Dataset& ds);

nlohmann::json to_json(const Dataset& ds);
Dataset dataset_from_json(const nlohmann::json& j);
nlohmann::json stats_json(const Stats& s);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

inline constexpr int kPadId = -1;

/// Row-major [batch x length] arrays. Padded cells hold kPadId in the id
/// arrays, 0 in responses and mask.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> question;
  std::vector<int> concept_id;
  std::vector<int> response;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> true_length;
  std::vector<std::size_t> student;  // dataset index of each row

  std::size_t at(std::size_t row, std::size_t t) const { return row * length + t; }
};

/// Builds one batch from explicit windows. Each window is a student index and
/// the [begin, end) step range to place at the start of its row.
struct Window {
  std::size_t student = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};
SequenceBatch make_batch(const Dataset& ds, const std::vector<Window>& windows, std::size_t length);

/// The most recent `length` steps of a student.
Window suffix_window(const Dataset& ds, std::size_t student, std::size_t length);

/// Suffix windows for `students`, shuffled by `seed` when `shuffle` is set,
/// cut into batches of at most `batch_size` rows.
std::vector<SequenceBatch> window_pad_batch(const Dataset& ds, const std::vector<std::size_t>& students,
                                            std::size_t length, std::size_t batch_size,
                                            std::uint64_t seed, bool shuffle);

struct SynthConfig {
  std::size_t students = 200;
  std::size_t concepts = 50;
  std::size_t questions = 300;
  std::size_t min_length = 50;
  std::size_t max_length = 100;
  double ability_mean = 0.0;
  double ability_sd = 2.0;
  double concept_ability_sd = 0.7;  // per-student, per-concept offset
  double difficulty_mean = 0.0;
  double concept_difficulty_sd = 3.0;
  double question_difficulty_sd = 0.3;
  double learning_gain = 0.15;  // ability increase after a correct answer
  double stay_probability = 0.6;  // chance the next question stays on the same concept
  bool static_ability = false;  // forces learning_gain to 0
};

struct SynthResult {
  RawData raw;
  nlohmann::json truth;
};

/// Responses are Bernoulli(sigmoid(ability[s][c] - difficulty[q])). Every
/// question belongs to one concept. Fully determined by `seed`.
SynthResult synth_generate(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace xkt::data
