#pragma once

// Patient encoder: code embeddings on the hyperboloid, attention pooling
// inside a visit, a stack of Lorentz transformer layers over the visit
// sequence, and the pretraining objective.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lqa/autodiff.hpp"
#include "lqa/geo_ops.hpp"
#include "lqa/hierarchy.hpp"
#include "lqa/manifold.hpp"

namespace lqa::enc {

using ad::ParamStore;
using ad::Tape;
using ad::Var;
using ad::Vec;

enum class CodeType { diagnosis, procedure, drug, special };

inline constexpr const char* kPadCode = "[PAD]";
inline constexpr const char* kClsCode = "[CLS]";

class Vocabulary {
 public:
  Vocabulary() = default;
  /// Order: [PAD], [CLS], trie codes (synthetic root excluded), extra
  /// diagnosis codes, procedures, drugs. Diagnosis outputs are the trie
  /// leaves plus diagnosis codes absent from the trie.
  static Vocabulary build(const hier::CodeTrie& trie, const std::vector<std::string>& diagnoses,
                          const std::vector<std::string>& procedures, const std::vector<std::string>& drugs);
  /// Rebuilds from stored (code, type, is_output) rows.
  static Vocabulary from_rows(const std::vector<std::string>& codes, const std::vector<CodeType>& types,
                              const std::vector<std::size_t>& outputs);

  std::size_t size() const { return codes_.size(); }
  bool contains(const std::string& code) const { return index_.count(code) > 0; }
  /// Throws ArgumentError for unknown codes.
  std::size_t id(const std::string& code) const;
  const std::string& code(std::size_t i) const { return codes_.at(i); }
  CodeType type(std::size_t i) const { return types_.at(i); }
  std::size_t pad() const { return 0; }
  std::size_t cls() const { return 1; }

  const std::vector<std::string>& codes() const { return codes_; }
  const std::vector<CodeType>& types() const { return types_; }
  /// Vocabulary ids scored by the diagnosis head, in output order.
  const std::vector<std::size_t>& diag_outputs() const { return outputs_; }
  /// Position of a vocabulary id among the diagnosis outputs.
  std::optional<std::size_t> output_index(std::size_t id) const;

 private:
  void add(const std::string& code, CodeType type);
  std::vector<std::string> codes_;
  std::vector<CodeType> types_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> outputs_;
  std::unordered_map<std::size_t, std::size_t> output_pos_;
};

const char* to_string(CodeType t);
CodeType code_type_from_string(const std::string& s);

struct Visit {
  double time = 0.0;  // days since first visit
  std::vector<std::size_t> codes;
};

using Sequence = std::vector<Visit>;

/// Padded [patients x visits x codes] grid with masks.
struct VisitBatch {
  std::size_t patients = 0;
  std::size_t max_visits = 0;
  std::size_t max_codes = 0;
  std::vector<std::size_t> code_ids;
  std::vector<char> code_mask;
  std::vector<char> visit_mask;
  std::vector<double> visit_times;

  std::size_t code_at(std::size_t p, std::size_t v, std::size_t c) const {
    return code_ids[(p * max_visits + v) * max_codes + c];
  }
  bool code_on(std::size_t p, std::size_t v, std::size_t c) const {
    return code_mask[(p * max_visits + v) * max_codes + c] != 0;
  }
  bool visit_on(std::size_t p, std::size_t v) const { return visit_mask[p * max_visits + v] != 0; }
  double time(std::size_t p, std::size_t v) const { return visit_times[p * max_visits + v]; }
  std::size_t visit_count(std::size_t p) const;
};

/// Pads sequences into a batch; throws DataError on decreasing timestamps.
VisitBatch make_batch(std::span<const Sequence* const> seqs, std::size_t pad_id);

/// 0 for the first visit, then log-spaced buckets of days since the
/// previous visit: [0,7), [7,30), [30,90), [90,180), [180,365), [365,inf).
std::size_t time_bucket(bool first, double delta_days);
inline constexpr std::size_t kTimeBuckets = 7;

struct EncoderConfig {
  manifold::GeometryMode geometry{manifold::Mode::lorentz, 16};
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  double dropout = 0.1;
  double init_scale = 1e-3;
};

struct TrajectoryStates {
  std::vector<Var> visits;
  Var cls;
};

class Encoder {
 public:
  /// Registers parameters under "enc." and initializes them from seed.
  Encoder(EncoderConfig config, const Vocabulary& vocab, ParamStore& store, std::uint64_t seed);
  /// Binds to parameters already present in store (e.g. after loading).
  Encoder(EncoderConfig config, const Vocabulary& vocab, ParamStore& store);

  const EncoderConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return *vocab_; }
  const ad::GeoOps& geo() const { return geo_; }
  ad::Parameter& code_table() const { return *codes_; }

  /// Code point with the type offset applied in tangent space.
  Var code_point(Tape& t, std::size_t id) const;
  /// Attention pooling of one visit; masked codes get weight 0.
  Var embed_visit(Tape& t, std::span<const std::size_t> codes, std::span<const char> mask = {}) const;
  /// Pooling weights for a visit (for inspection).
  Var visit_weights(Tape& t, std::span<const std::size_t> codes, std::span<const char> mask = {}) const;

  /// Encodes patient p of the batch. Dropout is applied when rng is set.
  TrajectoryStates encode(Tape& t, const VisitBatch& batch, std::size_t p, std::mt19937_64* rng = nullptr) const;
  TrajectoryStates encode(Tape& t, const Sequence& seq, std::mt19937_64* rng = nullptr) const;

  /// -softplus(a) * dist(z_cls, e_c) + b_c over the diagnosis outputs.
  Var diag_logits(Tape& t, Var z_cls) const;
  double diag_scale() const;

  /// Mean over pairs of max(0, r(e_p) - r(e_c) + beta); pairs in vocabulary ids.
  Var loss_rad(Tape& t, std::span<const std::pair<std::size_t, std::size_t>> pairs, double beta) const;
  /// Mean over triplets of max(0, d(a,a+) - d(a,a-) + alpha); vocabulary ids.
  Var loss_rel(Tape& t, std::span<const hier::Triplet> triplets, double alpha) const;

  /// Hyperbolic (or euclidean) radius of every vocabulary row.
  std::vector<double> radii() const;

 private:
  void bind(ParamStore& store);
  void init(std::uint64_t seed);
  std::vector<Var> layer(Tape& t, std::size_t l, std::vector<Var> u, std::mt19937_64* rng) const;

  EncoderConfig config_;
  const Vocabulary* vocab_;
  ParamStore* store_;
  ad::GeoOps geo_;
  ad::GeoOps head_geo_;
  ad::Parameter* codes_ = nullptr;
  ad::Parameter* type_offset_ = nullptr;
  ad::Parameter* visit_query_ = nullptr;
  ad::Parameter* visit_log_temp_ = nullptr;
  ad::Parameter* time_ = nullptr;
  ad::Parameter* diag_scale_raw_ = nullptr;
  ad::Parameter* diag_bias_ = nullptr;
  struct LayerParams {
    ad::Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *log_temp, *g1, *w1, *b1, *w2, *b2, *g2;
  };
  std::vector<LayerParams> layers_;
};

/// Scalar hinge losses over precomputed distances, as in loss_rad/loss_rel.
Var hinge_rad(Tape& t, Var parent_radii, Var child_radii, double beta);
Var hinge_rel(Tape& t, Var d_pos, Var d_neg, double alpha);
/// Mean BCE of the diagnosis logits against multi-hot targets.
Var loss_diag(Tape& t, Var logits, std::span<const double> targets);
/// L_diag + lambda * (L_rad + mu * L_rel)
Var loss_total(Tape& t, Var l_diag, Var l_rad, Var l_rel, double lambda, double mu);

/// Multi-hot targets over the diagnosis outputs for one visit.
Vec diag_targets(const Vocabulary& vocab, std::span<const std::size_t> codes);

}  // namespace lqa::enc
