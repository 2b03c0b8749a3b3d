#include "lqa/qa.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "lqa/errors.hpp"
#include "lqa/optim.hpp"

namespace lqa::qa {

using ad::ParamKind;
using ad::Parameter;

// -------------------------------------------------------------------- tokens

TokenVocab::TokenVocab() { add("[UNK]"); }

TokenVocab::TokenVocab(const std::vector<std::string>& tokens) : TokenVocab() {
  for (const auto& tok : tokens) add(tok);
}

void TokenVocab::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, tokens_.size());
  tokens_.push_back(token);
}

std::size_t TokenVocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> TokenVocab::encode(const std::string& text) const {
  std::vector<std::size_t> ids;
  for (const auto& tok : data::tokenize(text)) ids.push_back(id(tok));
  return ids;
}

// ------------------------------------------------------------------- buckets

ValueBuckets ValueBuckets::fit(const std::vector<std::vector<double>>& values, std::size_t n_buckets) {
  if (n_buckets == 0) throw ArgumentError("n_buckets must be positive");
  std::vector<std::vector<double>> cuts;
  for (auto v : values) {
    std::sort(v.begin(), v.end());
    std::vector<double> c;
    if (!v.empty()) {
      for (std::size_t k = 1; k < n_buckets; ++k) c.push_back(v[k * v.size() / n_buckets]);
    }
    cuts.push_back(std::move(c));
  }
  return ValueBuckets(std::move(cuts));
}

std::size_t ValueBuckets::bucket(std::size_t var, double value) const {
  if (var >= cuts_.size()) throw ArgumentError("unknown variable id " + std::to_string(var));
  const auto& c = cuts_[var];
  return static_cast<std::size_t>(std::upper_bound(c.begin(), c.end(), value) - c.begin());
}

// --------------------------------------------------------------------- model

namespace {

void xavier(Parameter& p, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.rows + p.cols));
  std::uniform_real_distribution<double> u(-a, a);
  for (double& v : p.value) v = u(rng);
}

std::vector<Var> constants(Tape& t, const std::vector<Vec>& vs) {
  std::vector<Var> out;
  out.reserve(vs.size());
  for (const Vec& v : vs) out.push_back(t.constant(v));
  return out;
}

std::size_t argmax(const Vec& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

QaModel::QaModel(QaConfig config, const enc::Encoder& encoder, TokenVocab tokens, std::vector<std::string> lab_vars,
                 ValueBuckets buckets, ParamStore& store, std::uint64_t seed)
    : config_(config),
      encoder_(&encoder),
      tokens_(std::move(tokens)),
      lab_vars_(std::move(lab_vars)),
      buckets_(std::move(buckets)),
      store_(&store),
      geo_(encoder.geo().mode()) {
  const std::size_t d = geo_.dim();
  const std::size_t h = config_.hidden;
  const ParamKind point_kind = geo_.is_lorentz() ? ParamKind::manifold_point : ParamKind::euclidean;
  store.add("qa.tok", ParamKind::euclidean, tokens_.size(), config_.token_dim);
  store.add("qa.W", ParamKind::euclidean, d, config_.token_dim);
  store.add("qa.b", ParamKind::euclidean, 1, d);
  store.add("qa.c_null", point_kind, 1, d + 1);
  store.add("qa.e_null", point_kind, 1, d + 1);
  store.add("qa.var_emb", ParamKind::euclidean, lab_vars_.size(), config_.var_dim);
  store.add("qa.bucket_emb", ParamKind::euclidean, config_.n_buckets, config_.bucket_dim);
  store.add("qa.ev.W", ParamKind::euclidean, d, d + config_.var_dim + config_.bucket_dim);
  store.add("qa.ev.b", ParamKind::euclidean, 1, d);
  for (const char* head : {"bool", "cnt"}) {
    const std::string p = std::string("qa.") + head + ".";
    const std::size_t out = std::string(head) == "bool" ? 2 : config_.k_max + 1;
    store.add(p + "w1", ParamKind::euclidean, h, 2 * d);
    store.add(p + "b1", ParamKind::euclidean, 1, h);
    store.add(p + "w2", ParamKind::euclidean, out, h);
    store.add(p + "b2", ParamKind::euclidean, 1, out);
  }
  for (const char* head : {"con", "val"}) {
    const std::string p = std::string("qa.") + head + ".";
    store.add(p + "w1", ParamKind::euclidean, h, 2 * d);
    store.add(p + "b1", ParamKind::euclidean, 1, h);
    store.add(p + "w", ParamKind::euclidean, 1, h);
  }
  bind(store);
  init(seed);
}

QaModel::QaModel(QaConfig config, const enc::Encoder& encoder, TokenVocab tokens, std::vector<std::string> lab_vars,
                 ValueBuckets buckets, ParamStore& store)
    : config_(config),
      encoder_(&encoder),
      tokens_(std::move(tokens)),
      lab_vars_(std::move(lab_vars)),
      buckets_(std::move(buckets)),
      store_(&store),
      geo_(encoder.geo().mode()) {
  bind(store);
  if (p_.at("qa.tok")->rows != tokens_.size()) throw ConfigError("stored token table does not match vocabulary");
  if (p_.at("qa.cnt.w2")->rows != config_.k_max + 1) throw ConfigError("stored count head does not match k_max");
}

void QaModel::bind(ParamStore& store) {
  if (config_.k_max < 1) throw ConfigError("k_max must be at least 1");
  if (!(config_.gamma > 0.0)) throw ConfigError("gamma must be positive");
  if (config_.top_k < 1) throw ConfigError("top_k must be at least 1");
  if (buckets_.n_vars() != lab_vars_.size()) throw ConfigError("value buckets do not match lab variables");
  p_.clear();
  for (Parameter* p : store.with_prefix("qa.")) p_[p->id] = p;
  code_points_.clear();
  for (std::size_t i = 0; i < encoder_->vocab().size(); ++i) {
    Tape s;
    code_points_.push_back(s.value(encoder_->code_point(s, i)));
  }
}

void QaModel::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = geo_.dim();
  std::normal_distribution<double> tok(0.0, 1.0 / std::sqrt(static_cast<double>(config_.token_dim)));
  for (double& x : p_.at("qa.tok")->value) x = tok(rng);
  std::normal_distribution<double> n01(0.0, 0.1);
  const manifold::Geometry geom(geo_.mode());
  for (const char* id : {"qa.c_null", "qa.e_null"}) {
    Vec sp(d);
    for (double& x : sp) x = n01(rng);
    p_.at(id)->value = geom.exp0(sp);
  }
  for (const char* id : {"qa.var_emb", "qa.bucket_emb"}) {
    for (double& x : p_.at(id)->value) x = n01(rng);
  }
  for (const char* id : {"qa.W", "qa.ev.W", "qa.bool.w1", "qa.bool.w2", "qa.cnt.w1", "qa.cnt.w2", "qa.con.w1",
                         "qa.con.w", "qa.val.w1", "qa.val.w"}) {
    xavier(*p_.at(id), rng);
  }
}

std::size_t QaModel::var_id(const std::string& name) const {
  const auto it = std::find(lab_vars_.begin(), lab_vars_.end(), name);
  if (it == lab_vars_.end()) throw ArgumentError("unknown lab variable '" + name + "'");
  return static_cast<std::size_t>(it - lab_vars_.begin());
}

Var QaModel::encode_question(Tape& t, const std::vector<std::size_t>& token_ids) const {
  if (token_ids.empty()) throw ArgumentError("question has no tokens");
  Parameter& tok = *p_.at("qa.tok");
  std::vector<Var> tangents;
  tangents.reserve(token_ids.size());
  for (std::size_t id : token_ids) {
    if (id >= tok.rows) throw ArgumentError("token id out of range");
    tangents.push_back(ad::affine(t, *p_.at("qa.W"), t.row(tok, id), p_.at("qa.b")));
  }
  const double w = 1.0 / static_cast<double>(tangents.size());
  return geo_.agg_tangent(t, t.constant(Vec(tangents.size(), w)), tangents);
}

CrossAttention QaModel::cross_attend(Tape& t, Var z_q, const std::vector<Var>& states) const {
  if (states.empty()) throw ArgumentError("cross-attention over no visits");
  std::vector<Var> ds;
  ds.reserve(states.size());
  for (Var z : states) ds.push_back(geo_.dist(t, z_q, z));
  const Var w = ad::softmax(t, ad::scale(t, ad::concat(t, ds), -config_.gamma));
  return {w, geo_.agg(t, w, states)};
}

Var QaModel::code_rationale(Tape& t, Var z_q, const Vec& alpha,
                            const std::vector<std::vector<std::size_t>>& visit_codes) const {
  if (alpha.size() != visit_codes.size()) throw DimensionError("attention length does not match visits");
  std::vector<std::size_t> order(alpha.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return alpha[a] > alpha[b]; });
  order.resize(std::min(config_.top_k, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<Var> pts;
  std::vector<Var> ds;
  for (std::size_t v : order) {
    for (std::size_t c : visit_codes[v]) {
      pts.push_back(t.constant(code_points_.at(c)));
      ds.push_back(geo_.dist(t, z_q, pts.back()));
    }
  }
  if (pts.empty()) throw ModelingError("no codes in the attended visits");
  const Var w = ad::softmax(t, ad::scale(t, ad::concat(t, ds), -config_.gamma));
  return geo_.agg(t, w, pts);
}

Var QaModel::event_embedding(Tape& t, Var z_t, std::size_t var, double value) const {
  if (var >= lab_vars_.size()) throw ArgumentError("unknown variable id " + std::to_string(var));
  const std::size_t b = std::min(buckets_.bucket(var, value), config_.n_buckets - 1);
  const Var parts[] = {geo_.log0(t, z_t), t.row(*p_.at("qa.var_emb"), var), t.row(*p_.at("qa.bucket_emb"), b)};
  return geo_.exp0(t, ad::affine(t, *p_.at("qa.ev.W"), ad::concat(t, parts), p_.at("qa.ev.b")));
}

Var QaModel::mlp(Tape& t, Var x, const std::string& head) const {
  const std::string p = "qa." + head + ".";
  const Var hdn = ad::gelu(t, ad::affine(t, *p_.at(p + "w1"), x, p_.at(p + "b1")));
  return ad::affine(t, *p_.at(p + "w2"), hdn, p_.at(p + "b2"));
}

Var QaModel::pair_scores(Tape& t, Var anchor, const std::vector<Var>& others, const std::string& head) const {
  const std::string p = "qa." + head + ".";
  const Var a = geo_.log0(t, anchor);
  std::vector<Var> scores;
  scores.reserve(others.size());
  for (Var o : others) {
    const Var x[] = {a, geo_.log0(t, o)};
    const Var phi = ad::gelu(t, ad::affine(t, *p_.at(p + "w1"), ad::concat(t, x), p_.at(p + "b1")));
    scores.push_back(ad::affine(t, *p_.at(p + "w"), phi));
  }
  return ad::concat(t, scores);
}

Var QaModel::head_bool(Tape& t, Var z_visit, Var z_q) const {
  const Var x[] = {geo_.log0(t, z_visit), geo_.log0(t, z_q)};
  return mlp(t, ad::concat(t, x), "bool");
}

Var QaModel::head_count(Tape& t, Var z_visit, Var z_q) const {
  const Var x[] = {geo_.log0(t, z_visit), geo_.log0(t, z_q)};
  return mlp(t, ad::concat(t, x), "cnt");
}

Var QaModel::head_concept(Tape& t, Var z_code, const std::vector<std::size_t>& candidates) const {
  std::vector<Var> pts;
  pts.reserve(candidates.size() + 1);
  for (std::size_t c : candidates) pts.push_back(t.constant(code_points_.at(c)));
  pts.push_back(t.row(*p_.at("qa.c_null"), 0));
  return pair_scores(t, z_code, pts, "con");
}

Var QaModel::head_value(Tape& t, Var z_visit, const std::vector<Var>& events) const {
  std::vector<Var> pts = events;
  pts.push_back(t.row(*p_.at("qa.e_null"), 0));
  return pair_scores(t, z_visit, pts, "val");
}

QaModel::Output QaModel::forward(Tape& t, const PatientContext& ctx, QType type, const std::string& text,
                                 const Answer* gold) const {
  Output out;
  out.type = type;
  const Var z_q = encode_question(t, tokens_.encode(text));
  const std::vector<Var> states = constants(t, ctx.visit_states);
  const CrossAttention att = cross_attend(t, z_q, states);
  switch (type) {
    case QType::boolean:
      out.logits = head_bool(t, att.z_visit, z_q);
      if (gold) out.loss = loss_bool(t, out.logits, *gold);
      break;
    case QType::count:
      out.logits = head_count(t, att.z_visit, z_q);
      if (gold) out.loss = loss_count(t, out.logits, *gold);
      break;
    case QType::concept_id: {
      const Var z_code = code_rationale(t, z_q, t.value(att.weights), ctx.visit_codes);
      out.candidates = ctx.candidates;
      out.logits = head_concept(t, z_code, out.candidates);
      if (gold) {
        std::vector<std::string> names;
        for (std::size_t c : out.candidates) names.push_back(encoder_->vocab().code(c));
        out.loss = loss_concept(t, out.logits, names, *gold);
      }
      break;
    }
    case QType::value: {
      std::optional<std::size_t> var;
      for (const auto& tok : data::tokenize(text)) {
        const auto it = std::find(lab_vars_.begin(), lab_vars_.end(), tok);
        if (it != lab_vars_.end()) {
          var = static_cast<std::size_t>(it - lab_vars_.begin());
          break;
        }
      }
      std::vector<Var> evs;
      if (var) {
        for (const Event& e : ctx.events) {
          if (e.var != *var) continue;
          evs.push_back(event_embedding(t, states.at(e.visit), e.var, e.value));
          out.values.push_back(e.value);
        }
      }
      out.logits = head_value(t, att.z_visit, evs);
      if (gold) out.loss = loss_value(t, out.logits, out.values, *gold);
      break;
    }
  }
  return out;
}

Answer QaModel::predict(Tape& t, const PatientContext& ctx, QType type, const std::string& text) const {
  const Output out = forward(t, ctx, type, text);
  const std::size_t j = argmax(t.value(out.logits));
  switch (type) {
    case QType::boolean: return Answer::of_int(j == 1 ? 1 : 0);
    case QType::count: return j == 0 ? Answer::none() : Answer::of_int(static_cast<long long>(j));
    case QType::concept_id:
      return j < out.candidates.size() ? Answer::of_text(encoder_->vocab().code(out.candidates[j])) : Answer::none();
    case QType::value: return j < out.values.size() ? Answer::of_real(out.values[j]) : Answer::none();
  }
  return Answer::none();
}

PatientContext QaModel::context(const data::PatientRecord& record) const {
  PatientContext ctx;
  const enc::Sequence seq = to_sequence(encoder_->vocab(), record);
  if (seq.empty()) throw DataError("patient " + record.patient_id + " has no visits");
  Tape s;
  const enc::TrajectoryStates st = encoder_->encode(s, seq);
  for (Var v : st.visits) ctx.visit_states.push_back(s.value(v));
  ctx.cls = s.value(st.cls);
  for (std::size_t v = 0; v < record.visits.size(); ++v) {
    ctx.visit_codes.push_back(seq[v].codes);
    for (const auto& c : record.visits[v].diag) {
      const std::size_t id = encoder_->vocab().id(c);
      if (std::find(ctx.candidates.begin(), ctx.candidates.end(), id) == ctx.candidates.end()) {
        ctx.candidates.push_back(id);
      }
    }
    for (const auto& lab : record.visits[v].labs) {
      if (!std::isfinite(lab.v)) throw DataError("non-finite lab value in " + record.patient_id);
      ctx.events.push_back({var_id(lab.var), v, lab.v});
    }
  }
  return ctx;
}

enc::Sequence to_sequence(const enc::Vocabulary& vocab, const data::PatientRecord& record) {
  enc::Sequence seq;
  for (const auto& v : record.visits) {
    enc::Visit out;
    out.time = v.time;
    for (const auto* codes : {&v.diag, &v.proc, &v.drug}) {
      for (const auto& c : *codes) out.codes.push_back(vocab.id(c));
    }
    seq.push_back(std::move(out));
  }
  return seq;
}

// -------------------------------------------------------------------- losses

Var loss_bool(Tape& t, Var logits, const Answer& gold) {
  if (t.size_of(logits) != 2) throw DimensionError("boolean head expects 2 logits");
  return ad::cross_entropy(t, logits, (!gold.empty && gold.integer == 1) ? 1 : 0);
}

Var loss_concept(Tape& t, Var logits, const std::vector<std::string>& candidate_codes, const Answer& gold) {
  const std::size_t k = candidate_codes.size();
  if (t.size_of(logits) != k + 1) throw DimensionError("concept head expects K+1 logits");
  std::size_t target = k;
  if (!gold.empty) {
    const auto it = std::find(candidate_codes.begin(), candidate_codes.end(), gold.text);
    if (it == candidate_codes.end()) throw DataError("gold concept '" + gold.text + "' is not a candidate");
    target = static_cast<std::size_t>(it - candidate_codes.begin());
  }
  return ad::cross_entropy(t, logits, target);
}

std::vector<std::size_t> value_positives(const std::vector<double>& values, const Answer& gold) {
  std::vector<std::size_t> pos;
  if (!gold.empty) {
    const double eps = 1e-6 * std::max(1.0, std::abs(gold.real));
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (std::abs(values[j] - gold.real) < eps) pos.push_back(j);
    }
  }
  if (pos.empty()) pos.push_back(values.size());
  return pos;
}

Var loss_value(Tape& t, Var logits, const std::vector<double>& values, const Answer& gold) {
  if (t.size_of(logits) != values.size() + 1) throw DimensionError("value head expects M+1 logits");
  const auto pos = value_positives(values, gold);
  return ad::multi_positive_nll(t, logits, pos);
}

Var loss_count(Tape& t, Var logits, const Answer& gold) {
  const std::size_t n = t.size_of(logits);
  if (n < 2) throw DimensionError("count head expects K_max+1 >= 2 logits");
  const long long k = gold.empty ? 0 : std::max(0LL, gold.integer);
  return ad::cross_entropy(t, logits, std::min(static_cast<std::size_t>(k), n - 1));
}

std::size_t k_max_from_counts(std::vector<long long> counts) {
  if (counts.empty()) return 1;
  std::sort(counts.begin(), counts.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(counts.size())));
  const long long p = counts[std::max<std::size_t>(rank, 1) - 1];
  return static_cast<std::size_t>(std::clamp<long long>(p, 1, 20));
}

// ------------------------------------------------------------------ classify

ClassifyHead::ClassifyHead(std::string name, TaskKind kind, std::size_t arity, const ad::GeoOps& geo,
                           ParamStore& store, std::uint64_t seed)
    : kind_(kind), arity_(arity), geo_(&geo) {
  if (arity == 0) throw ArgumentError("task arity must be positive");
  if (kind == TaskKind::binary && arity != 1) throw ArgumentError("binary task has arity 1");
  w_ = &store.add("cls." + name + ".w", ParamKind::euclidean, arity, geo.dim());
  b_ = &store.add("cls." + name + ".b", ParamKind::euclidean, 1, arity);
  std::mt19937_64 rng(seed);
  xavier(*w_, rng);
}

Var ClassifyHead::logits(Tape& t, Var z_cls) const { return ad::affine(t, *w_, geo_->log0(t, z_cls), b_); }

Var ClassifyHead::loss(Tape& t, Var logits, const Vec& targets) const {
  if (targets.size() != arity_) throw DimensionError("target length does not match task arity");
  if (kind_ == TaskKind::multiclass) return ad::cross_entropy(t, logits, argmax(targets));
  return ad::bce_with_logits(t, logits, targets);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]]) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  }
  return hits > 0.0 ? sum / hits : 0.0;
}

}  // namespace lqa::qa

// ------------------------------------------------------------------- fixture

namespace lqa::qa {

namespace {

struct FixtureWorld {
  hier::CodeTrie trie = hier::build_trie_from_codes({"A", "A1", "A11", "A12", "A2", "A21", "B", "B1", "B11", "B12"});
  enc::Vocabulary vocab = enc::Vocabulary::build(trie, {}, {"PR01"}, {"RX01"});
  ParamStore store;
  std::unique_ptr<enc::Encoder> encoder;
};

}  // namespace

HeadContractReport run_head_contracts(std::uint64_t seed, double target, std::size_t max_steps) {
  FixtureWorld w;
  enc::EncoderConfig ec;
  ec.geometry = {manifold::Mode::lorentz, 8};
  ec.layers = 0;
  ec.heads = 2;
  w.encoder = std::make_unique<enc::Encoder>(ec, w.vocab, w.store, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  const manifold::Geometry geom(ec.geometry);
  auto random_point = [&](double scale) {
    Vec sp(ec.geometry.dim);
    for (double& x : sp) x = scale * n01(rng);
    return geom.exp0(sp);
  };
  for (std::size_t r = 0; r < w.vocab.size(); ++r) {
    const Vec p = random_point(0.8);
    std::copy(p.begin(), p.end(), w.encoder->code_table().row(r).begin());
  }

  const std::vector<std::string> vars{"glucose", "sodium"};
  const ValueBuckets buckets = ValueBuckets::fit({{4.1, 5.0, 5.0, 7.2, 9.9}, {135.0, 140.0, 142.0}}, 16);
  TokenVocab tokens;
  for (const char* tok : {"was", "diagnosis", "recorded", "which", "under", "what", "the", "highest", "lowest",
                          "value", "how", "many", "visits", "a", "in", "chapter", "glucose", "sodium", "A", "B",
                          "A1", "A2", "B1", "A11", "A12", "A21", "B11", "B12", "creatinine"}) {
    tokens.add(tok);
  }
  QaConfig qc;
  qc.gamma = 1.0;
  qc.top_k = 2;
  qc.k_max = 8;
  qc.hidden = 32;
  QaModel model(qc, *w.encoder, tokens, vars, buckets, w.store, seed + 1);

  auto id = [&](const std::string& c) { return w.vocab.id(c); };
  auto ctx = [&](std::size_t n_visits, std::vector<std::vector<std::string>> codes, std::vector<Event> events) {
    PatientContext c;
    for (std::size_t v = 0; v < n_visits; ++v) {
      c.visit_states.push_back(random_point(1.0));
      std::vector<std::size_t> ids;
      for (const auto& code : codes.at(v)) {
        ids.push_back(id(code));
        if (w.vocab.type(id(code)) == enc::CodeType::diagnosis &&
            std::find(c.candidates.begin(), c.candidates.end(), id(code)) == c.candidates.end()) {
          c.candidates.push_back(id(code));
        }
      }
      c.visit_codes.push_back(std::move(ids));
    }
    c.cls = random_point(1.0);
    c.events = std::move(events);
    return c;
  };

  HeadContractReport rep;
  auto add = [&](std::string name, QType type, std::string text, PatientContext c, Answer gold) {
    rep.items.push_back({std::move(name), type, std::move(text), std::move(c), std::move(gold)});
  };
  using A = Answer;
  add("bool-yes", QType::boolean, "was diagnosis A11 recorded", ctx(2, {{"A11", "PR01"}, {"B12"}}, {}), A::of_int(1));
  add("bool-no", QType::boolean, "was diagnosis A21 recorded", ctx(2, {{"A11"}, {"B11", "RX01"}}, {}), A::of_int(0));
  add("bool-empty", QType::boolean, "was diagnosis B12 recorded", ctx(1, {{"A12"}}, {}), A::none());
  add("bool-yes-late", QType::boolean, "was diagnosis B11 recorded", ctx(3, {{"A11"}, {"A12"}, {"B11"}}, {}),
      A::of_int(1));
  add("bool-no-long", QType::boolean, "was diagnosis A12 recorded", ctx(3, {{"B11"}, {"B12"}, {"A21"}}, {}),
      A::of_int(0));
  add("concept-one", QType::concept_id, "which diagnosis under A1 was recorded", ctx(2, {{"A11", "B12"}, {"B11"}}, {}),
      A::of_text("A11"));
  add("concept-other", QType::concept_id, "which diagnosis under B1 was recorded", ctx(2, {{"A12"}, {"B12", "PR01"}}, {}),
      A::of_text("B12"));
  add("concept-empty", QType::concept_id, "which diagnosis under A2 was recorded", ctx(2, {{"A11"}, {"B11"}}, {}),
      A::none());
  add("concept-single", QType::concept_id, "which diagnosis under A2 was recorded", ctx(1, {{"A21"}}, {}),
      A::of_text("A21"));
  add("concept-late", QType::concept_id, "which diagnosis under B1 was recorded",
      ctx(3, {{"A11"}, {"A12"}, {"B11", "A21"}}, {}), A::of_text("B11"));
  add("value-high", QType::value, "what was the highest glucose value",
      ctx(2, {{"A11"}, {"B11"}}, {{0, 0, 5.0}, {0, 1, 7.2}}), A::of_real(7.2));
  add("value-dup", QType::value, "what was the lowest glucose value",
      ctx(3, {{"A11"}, {"A12"}, {"B11"}}, {{0, 0, 5.0}, {0, 1, 9.9}, {0, 2, 5.0}}), A::of_real(5.0));
  add("value-empty", QType::value, "what was the highest sodium value", ctx(2, {{"A11"}, {"B12"}}, {{0, 0, 4.1}}),
      A::none());
  add("value-unknown-var", QType::value, "what was the highest creatinine value", ctx(1, {{"B11"}}, {{1, 0, 140.0}}),
      A::none());
  add("value-sodium", QType::value, "what was the lowest sodium value",
      ctx(2, {{"A21"}, {"B12"}}, {{1, 0, 142.0}, {1, 1, 135.0}, {0, 1, 4.1}}), A::of_real(135.0));
  add("count-two", QType::count, "how many visits recorded a diagnosis in chapter A",
      ctx(3, {{"A11"}, {"B11"}, {"A12"}}, {}), A::of_int(2));
  add("count-empty", QType::count, "how many visits recorded a diagnosis in chapter B", ctx(1, {{"A11"}}, {}),
      A::none());
  add("count-clip", QType::count, "how many visits recorded a diagnosis in chapter A",
      ctx(2, {{"A11"}, {"A12"}}, {}), A::of_int(12));
  add("count-one", QType::count, "how many visits recorded a diagnosis in chapter B", ctx(2, {{"A11"}, {"B12"}}, {}),
      A::of_int(1));
  add("count-three", QType::count, "how many visits recorded a diagnosis in chapter A",
      ctx(3, {{"A11"}, {"A21"}, {"A12"}}, {}), A::of_int(3));

  for (const auto& it : rep.items) {
    if (!it.gold.empty) continue;
    switch (it.type) {
      case QType::boolean: rep.null_bool = true; break;
      case QType::concept_id: rep.null_concept = true; break;
      case QType::value: rep.null_value = true; break;
      case QType::count: rep.null_count = true; break;
    }
  }

  std::vector<Parameter*> params;
  for (Parameter* p : w.store.with_prefix("qa.")) params.push_back(p);
  optim::RiemannianAdam opt(params, {});
  rep.losses.assign(rep.items.size(), 0.0);
  for (rep.steps = 0; rep.steps <= max_steps; ++rep.steps) {
    opt.zero_grad();
    rep.max_loss = 0.0;
    for (std::size_t i = 0; i < rep.items.size(); ++i) {
      const auto& it = rep.items[i];
      Tape t;
      const auto out = model.forward(t, it.ctx, it.type, it.text, &it.gold);
      rep.losses[i] = t.item(out.loss);
      rep.max_loss = std::max(rep.max_loss, rep.losses[i]);
      t.backward(ad::scale(t, out.loss, 1.0 / static_cast<double>(rep.items.size())));
    }
    if (rep.max_loss <= target || rep.steps == max_steps) break;
    opt.step_with_lr(1e-2, 0.0);
  }
  return rep;
}

}  // namespace lqa::qa
