#pragma once

// Question answering over frozen patient states: question projection onto
// the manifold, distance-based cross-attention, a top-k code rationale and
// one head per answer type.

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lqa/autodiff.hpp"
#include "lqa/encoder.hpp"
#include "lqa/geo_ops.hpp"
#include "lqa/synthdata.hpp"

namespace lqa::qa {

using ad::ParamStore;
using ad::Tape;
using ad::Var;
using ad::Vec;
using data::Answer;
using data::QType;

class TokenVocab {
 public:
  static constexpr std::size_t kUnk = 0;
  TokenVocab();
  explicit TokenVocab(const std::vector<std::string>& tokens);
  void add(const std::string& token);
  std::size_t size() const { return tokens_.size(); }
  /// Unknown tokens map to kUnk.
  std::size_t id(const std::string& token) const;
  std::vector<std::size_t> encode(const std::string& text) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Per-variable quantile cut points; bucket = number of cuts <= value.
class ValueBuckets {
 public:
  ValueBuckets() = default;
  ValueBuckets(std::vector<std::vector<double>> cuts) : cuts_(std::move(cuts)) {}
  /// n_buckets-quantiles of each variable's values: cut k is the element
  /// at rank floor(k * n / n_buckets) of the sorted values, k = 1..n_buckets-1.
  static ValueBuckets fit(const std::vector<std::vector<double>>& values, std::size_t n_buckets);
  std::size_t bucket(std::size_t var, double value) const;
  std::size_t n_vars() const { return cuts_.size(); }
  const std::vector<std::vector<double>>& cuts() const { return cuts_; }

 private:
  std::vector<std::vector<double>> cuts_;
};

struct QaConfig {
  std::size_t token_dim = 32;
  std::size_t hidden = 32;
  std::size_t var_dim = 8;
  std::size_t bucket_dim = 8;
  std::size_t n_buckets = 16;
  double gamma = 1.0;
  std::size_t top_k = 4;
  std::size_t k_max = 8;
};

struct Event {
  std::size_t var = 0;
  std::size_t visit = 0;
  double value = 0.0;
};

/// Frozen encoder outputs and record-derived sets for one patient.
struct PatientContext {
  std::vector<Vec> visit_states;
  Vec cls;
  std::vector<std::vector<std::size_t>> visit_codes;  // vocabulary ids
  std::vector<std::size_t> candidates;                // diagnosis ids in first-seen order
  std::vector<Event> events;
};

struct CrossAttention {
  Var weights;
  Var z_visit;
};

class QaModel {
 public:
  /// Registers parameters under "qa." and initializes them from seed.
  QaModel(QaConfig config, const enc::Encoder& encoder, TokenVocab tokens, std::vector<std::string> lab_vars,
          ValueBuckets buckets, ParamStore& store, std::uint64_t seed);
  /// Binds to parameters already in store.
  QaModel(QaConfig config, const enc::Encoder& encoder, TokenVocab tokens, std::vector<std::string> lab_vars,
          ValueBuckets buckets, ParamStore& store);

  const QaConfig& config() const { return config_; }
  const TokenVocab& tokens() const { return tokens_; }
  const std::vector<std::string>& lab_vars() const { return lab_vars_; }
  const ValueBuckets& buckets() const { return buckets_; }
  std::size_t var_id(const std::string& name) const;

  /// Uniform hyperbolic pooling of exp_o(W u_i + b).
  Var encode_question(Tape& t, const std::vector<std::size_t>& token_ids) const;
  CrossAttention cross_attend(Tape& t, Var z_q, const std::vector<Var>& states) const;
  /// Pools the codes of the top-k visits by alpha (ties to earlier visits).
  Var code_rationale(Tape& t, Var z_q, const Vec& alpha, const std::vector<std::vector<std::size_t>>& visit_codes) const;
  Var event_embedding(Tape& t, Var z_t, std::size_t var, double value) const;

  Var head_bool(Tape& t, Var z_visit, Var z_q) const;
  /// Scores each candidate then c_null (last).
  Var head_concept(Tape& t, Var z_code, const std::vector<std::size_t>& candidates) const;
  /// Scores each event embedding then e_null (last).
  Var head_value(Tape& t, Var z_visit, const std::vector<Var>& events) const;
  Var head_count(Tape& t, Var z_visit, Var z_q) const;

  struct Output {
    QType type = QType::boolean;
    Var logits;
    std::vector<std::size_t> candidates;  // concept
    std::vector<double> values;           // value
    Var loss;
  };

  /// Runs the head selected by type; loss is set when gold is given.
  Output forward(Tape& t, const PatientContext& ctx, QType type, const std::string& text,
                 const Answer* gold = nullptr) const;
  Answer predict(Tape& t, const PatientContext& ctx, QType type, const std::string& text) const;

  /// Builds the context from frozen encoder states. Code points are read
  /// once at construction, so later encoder updates are not seen.
  PatientContext context(const data::PatientRecord& record) const;

 private:
  void bind(ParamStore& store);
  void init(std::uint64_t seed);
  Var mlp(Tape& t, Var x, const std::string& head) const;
  Var pair_scores(Tape& t, Var anchor, const std::vector<Var>& others, const std::string& head) const;

  QaConfig config_;
  const enc::Encoder* encoder_;
  TokenVocab tokens_;
  std::vector<std::string> lab_vars_;
  ValueBuckets buckets_;
  ParamStore* store_;
  ad::GeoOps geo_;
  std::vector<Vec> code_points_;
  std::unordered_map<std::string, ad::Parameter*> p_;
};

/// Visit codes (diagnoses, procedures, drugs) as vocabulary ids.
enc::Sequence to_sequence(const enc::Vocabulary& vocab, const data::PatientRecord& record);

// Losses on head logits.
/// Cross-entropy over {no, yes}; empty gold counts as no.
Var loss_bool(Tape& t, Var logits, const Answer& gold);
/// Target = gold candidate's index, or the last (null) index for empty gold.
/// Throws DataError when the gold concept is not a candidate.
Var loss_concept(Tape& t, Var logits, const std::vector<std::string>& candidate_codes, const Answer& gold);
/// Multi-positive log-loss over events matching gold within
/// eps = 1e-6 * max(1, |gold|); falls back to the null event.
Var loss_value(Tape& t, Var logits, const std::vector<double>& values, const Answer& gold);
/// Cross-entropy to min(gold, k_max); empty gold counts as 0.
Var loss_count(Tape& t, Var logits, const Answer& gold);

std::vector<std::size_t> value_positives(const std::vector<double>& values, const Answer& gold);

/// 99th percentile of counts, capped at 20 and at least 1.
std::size_t k_max_from_counts(std::vector<long long> counts);

/// Linear task head on log_o(z_CLS).
enum class TaskKind { binary, multiclass, multilabel };

class ClassifyHead {
 public:
  ClassifyHead(std::string name, TaskKind kind, std::size_t arity, const ad::GeoOps& geo, ParamStore& store,
               std::uint64_t seed);
  std::size_t arity() const { return arity_; }
  TaskKind kind() const { return kind_; }
  Var logits(Tape& t, Var z_cls) const;
  /// binary/multilabel: targets are 0/1 per output; multiclass: one-hot.
  Var loss(Tape& t, Var logits, const Vec& targets) const;

 private:
  TaskKind kind_;
  std::size_t arity_;
  const ad::GeoOps* geo_;
  ad::Parameter* w_;
  ad::Parameter* b_;
};

struct FixtureItem {
  std::string name;
  QType type = QType::boolean;
  std::string text;
  PatientContext ctx;
  Answer gold;
};

struct HeadContractReport {
  std::vector<FixtureItem> items;
  std::vector<double> losses;  // final per-question loss
  std::size_t steps = 0;
  double max_loss = 0.0;
  bool null_bool = false;
  bool null_concept = false;
  bool null_value = false;
  bool null_count = false;
};

/// Trains every head on a 20-question fixture whose visit states, candidates
/// and events are fixed by hand, stopping once each loss is <= target.
HeadContractReport run_head_contracts(std::uint64_t seed, double target = 1e-3, std::size_t max_steps = 5000);

/// Area under the precision-recall curve (average precision).
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace lqa::qa
