#pragma once

// Synthetic EHR benchmark: code hierarchy, patient trajectories with
// learnable next-visit structure, lab events and templated QA pairs.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lqa/hierarchy.hpp"

namespace lqa::data {

struct SynthConfig {
  std::uint64_t seed = 42;
  std::size_t n_patients = 1000;
  std::size_t min_visits = 2;
  double visit_tail_p = 0.5;  // geometric tail parameter
  std::size_t max_visits = 8;
  std::vector<std::size_t> branching{3, 4, 4, 3};
  std::size_t min_codes_per_visit = 2;
  std::size_t max_codes_per_visit = 4;
  std::size_t n_procedures = 20;
  std::size_t n_drugs = 15;
  std::size_t n_lab_variables = 6;
  double lab_presence = 0.5;
  double transition_coherence = 0.9;
  std::size_t qa_per_patient = 1;  // per question type
  double no_answer_rate = 0.2;
  double mean_gap_days = 60.0;

  /// Throws ConfigError on invalid settings.
  void validate() const;
};

struct LabEvent {
  std::string var;
  double t = 0.0;
  double v = 0.0;
};

struct VisitRecord {
  double time = 0.0;
  std::vector<std::string> diag;
  std::vector<std::string> proc;
  std::vector<std::string> drug;
  std::vector<LabEvent> labs;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<VisitRecord> visits;
};

enum class QType { boolean, concept_id, value, count };
inline constexpr QType kQTypes[] = {QType::boolean, QType::concept_id, QType::value, QType::count};

const char* to_string(QType t);
QType qtype_from_string(const std::string& s);

/// A canonical answer array: [] or a single element whose kind follows the
/// question type (integer for boolean/count, string for concept, real for value).
struct Answer {
  bool empty = true;
  long long integer = 0;
  double real = 0.0;
  std::string text;

  static Answer none() { return {}; }
  static Answer of_int(long long v) { return {false, v, 0.0, {}}; }
  static Answer of_real(double v) { return {false, 0, v, {}}; }
  static Answer of_text(std::string s) { return {false, 0, 0.0, std::move(s)}; }
};

/// Element-wise equality; reals compare with |a - b| <= 1e-9.
bool answers_equal(QType type, const Answer& a, const Answer& b);
/// JSON array text for an answer, e.g. "[]", "[1]", "[\"A12.3\"]".
std::string answer_json(QType type, const Answer& a);

struct QAInstance {
  std::string qid;
  std::string patient_id;
  QType type = QType::boolean;
  std::string text;
  Answer answer;
};

struct GeneratedHierarchy {
  hier::CodeTrie trie;
  std::vector<std::string> leaves;
};

GeneratedHierarchy gen_hierarchy(const SynthConfig& config);
std::vector<std::string> procedure_codes(const SynthConfig& config);
std::vector<std::string> drug_codes(const SynthConfig& config);
std::vector<std::string> lab_variables(const SynthConfig& config);

std::vector<PatientRecord> gen_patients(const SynthConfig& config, const GeneratedHierarchy& h);
std::vector<QAInstance> gen_qa(const SynthConfig& config, const GeneratedHierarchy& h,
                               const std::vector<PatientRecord>& records);

/// Rule-based answer from question text and the record; throws DataError
/// on unparseable questions.
Answer oracle_answer(const hier::CodeTrie& trie, const PatientRecord& record, QType type, const std::string& text);

enum class Split { train, valid, test };
const char* to_string(Split s);
/// 8/1/1 by FNV-1a hash of the patient id.
Split split_of(const std::string& patient_id);
std::uint64_t fnv1a64(const std::string& s);

/// Whitespace tokenization of question text.
std::vector<std::string> tokenize(const std::string& text);

struct DataStats {
  std::size_t patients = 0;
  double avg_visits = 0.0;
  double avg_diag_per_visit = 0.0;
  std::size_t distinct_diag = 0;
  std::size_t lab_events = 0;
  std::size_t questions[4] = {0, 0, 0, 0};
  std::size_t no_answer[4] = {0, 0, 0, 0};
};

DataStats compute_stats(const std::vector<PatientRecord>& records, const std::vector<QAInstance>& qa);
std::string format_stats(const DataStats& s);

// JSONL IO; floats use 17 significant digits.
std::string patient_json(const PatientRecord& r);
std::string qa_json(const QAInstance& q);
void write_patients(const std::string& path, const std::vector<PatientRecord>& records);
void write_qa(const std::string& path, const std::vector<QAInstance>& qa);
std::vector<PatientRecord> read_patients(const std::string& path);
std::vector<QAInstance> read_qa(const std::string& path);

}  // namespace lqa::data
