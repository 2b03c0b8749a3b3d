#pragma once

// Run configuration, dataset files, the two training stages, evaluation and
// the reports behind the command-line tool.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lqa/autodiff.hpp"
#include "lqa/encoder.hpp"
#include "lqa/gradcheck.hpp"
#include "lqa/hierarchy.hpp"
#include "lqa/qa.hpp"
#include "lqa/synthdata.hpp"

namespace lqa::harness {

using nlohmann::json;

// ------------------------------------------------------------------- config

struct ModelConfig {
  std::string geometry = "lorentz";
  std::size_t dim = 16;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  double dropout = 0.1;
  double init_scale = 1e-3;
};

struct Stage1Config {
  double lambda = 0.5;
  double mu = 0.5;
  double alpha = 0.2;
  double beta = 0.2;
  double lr = 1e-2;
  double clip = 1.0;
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  std::size_t epochs = 60;
  std::size_t batch = 48;
  std::size_t patience = 10;
  std::size_t triplets_per_epoch = 1024;
  bool prefix_augmentation = false;
};

struct Stage2Config {
  double gamma = 1.0;
  std::size_t top_k = 4;
  double lr_qa = 3e-2;
  double clip = 1.0;
  double warmup_frac = 0.1;
  std::size_t epochs = 40;
  std::size_t batch = 48;
  std::size_t patience = 10;
  std::size_t token_dim = 32;
  std::size_t hidden = 32;
  std::size_t value_buckets = 16;
};

struct RunConfig {
  std::string data_dir = "data";
  std::string checkpoint_dir = "out";
  std::string report_dir = "out/reports";
  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds{42, 24, 33, 55, 67};
  /// false: the encoder keeps its random initialization (still frozen in stage 2).
  bool pretrain = true;
  data::SynthConfig data;
  ModelConfig model;
  Stage1Config stage1;
  Stage2Config stage2;

  /// Throws ConfigError.
  void validate() const;
  manifold::Mode mode() const;
  enc::EncoderConfig encoder_config() const;
};

json to_json(const RunConfig& c);
/// Missing keys keep defaults; unknown keys or wrong types throw ConfigError.
RunConfig config_from_json(const json& j);
RunConfig load_config(const std::string& path);
/// Full-scale preset: 250/200 epochs, lr 1e-4 / 3e-5, 3 layers, 6 heads, d = 390.
RunConfig paper_scale(RunConfig c);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::string& path);
/// SHA-256 of the canonical JSON dump of the config.
std::string config_hash(const RunConfig& c);
/// SHA-256 over the raw values of every parameter whose id has the prefix.
std::string params_hash(const ad::ParamStore& store, const std::string& prefix);

// ------------------------------------------------------------------ dataset

struct Dataset {
  hier::CodeTrie trie;
  std::vector<data::PatientRecord> records;
  std::vector<data::QAInstance> qa;
  std::vector<std::string> procedures;
  std::vector<std::string> drugs;
  std::vector<std::string> lab_vars;

  const data::PatientRecord& record(const std::string& patient_id) const;
  std::vector<std::size_t> split_records(data::Split s) const;
  std::vector<std::size_t> split_questions(data::Split s) const;

 private:
  friend Dataset make_dataset(hier::CodeTrie, std::vector<data::PatientRecord>, std::vector<data::QAInstance>);
  std::unordered_map<std::string, std::size_t> by_id_;
};

Dataset make_dataset(hier::CodeTrie trie, std::vector<data::PatientRecord> records, std::vector<data::QAInstance> qa);
Dataset generate_dataset(const data::SynthConfig& c);
/// hierarchy.edges, patients.jsonl, qa.jsonl, {train,valid,test}.ids, stats.txt
void write_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// ------------------------------------------------------------------ models

struct EncoderModel {
  enc::EncoderConfig config;
  enc::Vocabulary vocab;
  ad::ParamStore store;
  std::unique_ptr<enc::Encoder> encoder;
  std::string rng_state;
};

std::unique_ptr<EncoderModel> new_encoder_model(const RunConfig& c, const Dataset& d, std::uint64_t seed);

struct QaBundle {
  std::unique_ptr<EncoderModel> em;
  qa::QaConfig config;
  std::unique_ptr<qa::QaModel> model;
  std::string rng_state;
};

json encoder_checkpoint_json(const EncoderModel& m);
std::unique_ptr<EncoderModel> encoder_from_json(const json& j);
void save_encoder(const std::string& path, const EncoderModel& m, const json& meta = json::object());
std::unique_ptr<EncoderModel> load_encoder(const std::string& path, json* meta = nullptr);
void save_qa(const std::string& path, const QaBundle& b, const json& meta = json::object());
std::unique_ptr<QaBundle> load_qa(const std::string& path, json* meta = nullptr);

/// Canonical byte serialization of a JSON document (2-space indent, trailing newline).
void write_json_file(const std::string& path, const json& j);
json read_json_file(const std::string& path);

// ---------------------------------------------------------------- stage 1

struct PretrainInstance {
  enc::Sequence prefix;
  ad::Vec targets;
};

/// Full prefix v1..v_{T-1} -> diagnoses of v_T; every prefix when augment is set.
std::vector<PretrainInstance> pretrain_instances(const enc::Vocabulary& vocab, const Dataset& d,
                                                 const std::vector<std::size_t>& records, bool augment);

struct Stage1Epoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l_diag = 0.0;
  double l_rad = 0.0;
  double l_rel = 0.0;
  double val_loss = 0.0;
};

struct Stage1Losses {
  double total = 0.0;
  double l_diag = 0.0;
  double l_rad = 0.0;
  double l_rel = 0.0;
};

/// Loss without dropout on the given instances and triplets.
Stage1Losses stage1_eval(const EncoderModel& m, const RunConfig& c, const std::vector<PretrainInstance>& inst,
                         const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                         const std::vector<hier::Triplet>& triplets);

struct PretrainResult {
  std::unique_ptr<EncoderModel> model;
  std::vector<Stage1Epoch> log;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
};

/// Trains with RiemannianAdam and keeps the parameters of the best
/// validation epoch. Throws TrainingError on divergence.
PretrainResult pretrain(const RunConfig& c, const Dataset& d, std::ostream* log = nullptr);

/// Hierarchy pairs and triplets in vocabulary ids.
std::vector<std::pair<std::size_t, std::size_t>> vocab_pairs(const enc::Vocabulary& v, const hier::CodeTrie& t);
std::vector<hier::Triplet> vocab_triplets(const enc::Vocabulary& v, const hier::CodeTrie& t, std::size_t count,
                                          std::uint64_t seed);

/// Mean fraction of next-visit diagnoses found in the top k logits.
double recall_at_k(const EncoderModel& m, const std::vector<PretrainInstance>& inst, std::size_t k);

// ---------------------------------------------------------------- stage 2

struct Stage2Epoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_em = 0.0;
};

struct QaTrainResult {
  std::unique_ptr<QaBundle> bundle;
  std::vector<Stage2Epoch> log;
  std::size_t best_epoch = 0;
  double best_val_em = 0.0;
  double init_val_em = 0.0;
  std::string encoder_hash_before;
  std::string encoder_hash_after;
};

/// Freezes the encoder and trains the question encoder and heads; early
/// stops on validation exact match. Throws TrainingError if the encoder changed.
QaTrainResult train_qa(const RunConfig& c, const Dataset& d, std::unique_ptr<EncoderModel> em,
                       std::ostream* log = nullptr);

// ------------------------------------------------------------------ eval

struct TypeScore {
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

struct EvalReport {
  TypeScore per_type[4];
  double overall = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string split = "test";
};

EvalReport score(const std::vector<data::QType>& types, const std::vector<data::Answer>& pred,
                 const std::vector<data::Answer>& gold);
json report_json(const EvalReport& r);
std::string report_csv(const EvalReport& r);

struct Predictions {
  std::vector<std::string> qids;
  std::vector<data::QType> types;
  std::vector<data::Answer> pred;
  std::vector<data::Answer> gold;
};

Predictions predict_split(const QaBundle& b, const Dataset& d, data::Split s);
std::string predictions_jsonl(const Predictions& p);

// --------------------------------------------------------------- geometry

/// Pearson correlation of average ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);
/// Mean Spearman over draws of equal-size per-depth subsamples.
double balanced_spearman(const std::vector<std::size_t>& depth, const std::vector<double>& value, std::size_t draws,
                         std::uint64_t seed);

struct LevelStat {
  std::size_t depth = 0;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct GeometryReport {
  std::vector<LevelStat> levels;
  double spearman_balanced = 0.0;
  double spearman_all = 0.0;
  bool monotone = false;
};

/// Radius of each trie code (synthetic root excluded) against its depth.
GeometryReport geometry_report(const EncoderModel& m, const hier::CodeTrie& t, std::uint64_t seed = 0);
std::string geometry_csv(const GeometryReport& g);

// ---------------------------------------------------------------- ablation

enum class Variant { full, no_hier, no_pretrain, euclidean };
inline constexpr Variant kVariants[] = {Variant::full, Variant::no_hier, Variant::no_pretrain, Variant::euclidean};
const char* to_string(Variant v);
RunConfig variant_config(const RunConfig& base, Variant v);

struct PipelineResult {
  EvalReport report;
  GeometryReport geometry;
  std::size_t stage1_epochs = 0;
  std::size_t stage2_epochs = 0;
};

/// Stage 1 (skipped when pretrain is off), stage 2 and test evaluation.
PipelineResult run_pipeline(const RunConfig& c, const Dataset& d, std::ostream* log = nullptr);

struct AblationRow {
  Variant variant = Variant::full;
  std::vector<double> overall;  // per seed
  double mean = 0.0;
  double std = 0.0;
};

/// Every variant over base.seeds; runs, when set, receives [variant][seed] results.
std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& d, std::ostream* log = nullptr,
                                      std::vector<std::vector<PipelineResult>>* runs = nullptr);
std::string ablation_csv(const std::vector<AblationRow>& rows);
/// full >= every other variant and full - no_pretrain >= min_gap (points).
bool ablation_ordering_holds(const std::vector<AblationRow>& rows, double min_gap = 3.0);

// ------------------------------------------------------------------ sarkar

struct SarkarRow {
  std::uint64_t seed = 0;
  std::size_t nodes = 0;
  std::size_t max_degree = 0;
  double delta = 0.0;
  double tau = 0.0;
  double low = 0.0;
  double high = 0.0;
};

/// Random rooted tree on n nodes with every node's degree <= max_degree.
hier::CodeTrie random_tree(std::mt19937_64& rng, std::size_t n, std::size_t max_degree);
std::vector<SarkarRow> sarkar_check(double eps, const std::vector<std::size_t>& sizes,
                                    const std::vector<std::uint64_t>& seeds, std::size_t max_degree = 8);
std::string sarkar_csv(const std::vector<SarkarRow>& rows);

// --------------------------------------------------------------- gradcheck

struct GradOp {
  std::string name;
  std::function<ad::GradCheckResult(std::uint64_t seed, std::size_t n_coords)> run;
};

std::vector<GradOp> gradcheck_registry();
/// A distance op whose backward is deliberately off by 10%.
GradOp corrupted_gradcheck_op();

struct GradRow {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  bool pass = false;
};

std::vector<GradRow> run_gradcheck(const std::vector<GradOp>& ops, const std::string& selector, std::uint64_t seed,
                                   std::size_t n_coords = 100, double tol = 1e-4);

}  // namespace lqa::harness
