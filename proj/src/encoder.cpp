#include "lqa/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lqa/errors.hpp"

namespace lqa::enc {

using ad::ParamKind;
using ad::Parameter;

// ---------------------------------------------------------------- vocabulary

void Vocabulary::add(const std::string& code, CodeType type) {
  if (index_.count(code)) return;
  index_.emplace(code, codes_.size());
  codes_.push_back(code);
  types_.push_back(type);
}

Vocabulary Vocabulary::build(const hier::CodeTrie& trie, const std::vector<std::string>& diagnoses,
                             const std::vector<std::string>& procedures, const std::vector<std::string>& drugs) {
  Vocabulary v;
  v.add(kPadCode, CodeType::special);
  v.add(kClsCode, CodeType::special);
  for (std::size_t i = 0; i < trie.size(); ++i) {
    if (trie.synthetic_root() && i == trie.root()) continue;
    v.add(trie.name(i), CodeType::diagnosis);
  }
  for (const auto& c : diagnoses) v.add(c, CodeType::diagnosis);
  for (const auto& c : procedures) {
    if (v.contains(c)) throw DataError("procedure code '" + c + "' collides with another code");
    v.add(c, CodeType::procedure);
  }
  for (const auto& c : drugs) {
    if (v.contains(c)) throw DataError("drug code '" + c + "' collides with another code");
    v.add(c, CodeType::drug);
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.types_[i] != CodeType::diagnosis) continue;
    const std::string& c = v.codes_[i];
    if (!trie.contains(c) || trie.children(trie.id(c)).empty()) {
      v.output_pos_.emplace(i, v.outputs_.size());
      v.outputs_.push_back(i);
    }
  }
  return v;
}

Vocabulary Vocabulary::from_rows(const std::vector<std::string>& codes, const std::vector<CodeType>& types,
                                 const std::vector<std::size_t>& outputs) {
  if (codes.size() != types.size() || codes.size() < 2 || codes[0] != kPadCode || codes[1] != kClsCode) {
    throw DataError("malformed stored vocabulary");
  }
  Vocabulary v;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (v.contains(codes[i])) throw DataError("duplicate code '" + codes[i] + "' in stored vocabulary");
    v.add(codes[i], types[i]);
  }
  for (std::size_t id : outputs) {
    if (id >= v.size() || v.types_[id] != CodeType::diagnosis) throw DataError("bad diagnosis output id");
    v.output_pos_.emplace(id, v.outputs_.size());
    v.outputs_.push_back(id);
  }
  return v;
}

std::size_t Vocabulary::id(const std::string& code) const {
  const auto it = index_.find(code);
  if (it == index_.end()) throw ArgumentError("code '" + code + "' not in vocabulary");
  return it->second;
}

std::optional<std::size_t> Vocabulary::output_index(std::size_t id) const {
  const auto it = output_pos_.find(id);
  if (it == output_pos_.end()) return std::nullopt;
  return it->second;
}

const char* to_string(CodeType t) {
  switch (t) {
    case CodeType::diagnosis: return "diagnosis";
    case CodeType::procedure: return "procedure";
    case CodeType::drug: return "drug";
    case CodeType::special: return "special";
  }
  return "special";
}

CodeType code_type_from_string(const std::string& s) {
  if (s == "diagnosis") return CodeType::diagnosis;
  if (s == "procedure") return CodeType::procedure;
  if (s == "drug") return CodeType::drug;
  if (s == "special") return CodeType::special;
  throw DataError("unknown code type '" + s + "'");
}

// -------------------------------------------------------------------- batch

std::size_t VisitBatch::visit_count(std::size_t p) const {
  std::size_t n = 0;
  for (std::size_t v = 0; v < max_visits; ++v) n += visit_on(p, v);
  return n;
}

VisitBatch make_batch(std::span<const Sequence* const> seqs, std::size_t pad_id) {
  VisitBatch b;
  b.patients = seqs.size();
  for (const Sequence* s : seqs) {
    b.max_visits = std::max(b.max_visits, s->size());
    for (const Visit& v : *s) b.max_codes = std::max(b.max_codes, v.codes.size());
  }
  b.code_ids.assign(b.patients * b.max_visits * b.max_codes, pad_id);
  b.code_mask.assign(b.code_ids.size(), 0);
  b.visit_mask.assign(b.patients * b.max_visits, 0);
  b.visit_times.assign(b.visit_mask.size(), 0.0);
  for (std::size_t p = 0; p < seqs.size(); ++p) {
    const Sequence& s = *seqs[p];
    for (std::size_t v = 0; v < s.size(); ++v) {
      if (v > 0 && s[v].time < s[v - 1].time) throw DataError("visit timestamps decrease");
      if (!std::isfinite(s[v].time)) throw DataError("non-finite visit timestamp");
      b.visit_mask[p * b.max_visits + v] = 1;
      b.visit_times[p * b.max_visits + v] = s[v].time;
      for (std::size_t c = 0; c < s[v].codes.size(); ++c) {
        const std::size_t k = (p * b.max_visits + v) * b.max_codes + c;
        b.code_ids[k] = s[v].codes[c];
        b.code_mask[k] = 1;
      }
    }
  }
  return b;
}

std::size_t time_bucket(bool first, double delta_days) {
  if (first) return 0;
  static constexpr double kEdges[] = {7.0, 30.0, 90.0, 180.0, 365.0};
  std::size_t b = 1;
  for (double e : kEdges) {
    if (delta_days < e) return b;
    ++b;
  }
  return b;
}

// ------------------------------------------------------------------ encoder

namespace {

std::size_t head_dim(const EncoderConfig& c) {
  if (c.heads == 0 || c.geometry.dim % c.heads != 0) {
    throw ConfigError("dim " + std::to_string(c.geometry.dim) + " is not divisible by heads " +
                      std::to_string(c.heads));
  }
  return c.geometry.dim / c.heads;
}

manifold::GeometryMode head_mode(const EncoderConfig& c) {
  manifold::GeometryMode m = c.geometry;
  m.dim = head_dim(c);
  return m;
}

std::string layer_prefix(std::size_t l) { return "enc.L" + std::to_string(l) + "."; }

void xavier(Parameter& p, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.rows + p.cols));
  std::uniform_real_distribution<double> u(-a, a);
  for (double& v : p.value) v = u(rng);
}

void check_finite(Tape& t, Var v, std::size_t layer) {
  for (double x : t.value(v)) {
    if (!std::isfinite(x)) throw TrainingError("non-finite activation in layer " + std::to_string(layer));
  }
}

}  // namespace

Encoder::Encoder(EncoderConfig config, const Vocabulary& vocab, ParamStore& store, std::uint64_t seed)
    : config_(config), vocab_(&vocab), store_(&store), geo_(config.geometry), head_geo_(head_mode(config)) {
  const std::size_t d = config_.geometry.dim;
  const ParamKind point_kind = geo_.is_lorentz() ? ParamKind::manifold_point : ParamKind::euclidean;
  store.add("enc.codes", point_kind, vocab.size(), d + 1);
  store.add("enc.type_offset", ParamKind::euclidean, 2, d);
  store.add("enc.visit_query", point_kind, 1, d + 1);
  store.add("enc.visit_log_temp", ParamKind::euclidean, 1, 1);
  store.add("enc.time", ParamKind::euclidean, kTimeBuckets, d);
  store.add("enc.diag_scale_raw", ParamKind::euclidean, 1, 1);
  store.add("enc.diag_bias", ParamKind::euclidean, 1, vocab.diag_outputs().size());
  const std::size_t h = config_.ffn_mult * d;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* w : {"wq", "wk", "wv", "wo"}) store.add(p + w, ParamKind::euclidean, d, d);
    for (const char* b : {"bq", "bk", "bv", "bo", "b2", "g1", "g2"}) store.add(p + b, ParamKind::euclidean, 1, d);
    store.add(p + "log_temp", ParamKind::euclidean, 1, config_.heads);
    store.add(p + "w1", ParamKind::euclidean, h, d);
    store.add(p + "b1", ParamKind::euclidean, 1, h);
    store.add(p + "w2", ParamKind::euclidean, d, h);
  }
  bind(store);
  init(seed);
}

Encoder::Encoder(EncoderConfig config, const Vocabulary& vocab, ParamStore& store)
    : config_(config), vocab_(&vocab), store_(&store), geo_(config.geometry), head_geo_(head_mode(config)) {
  bind(store);
  if (codes_->rows != vocab.size() || codes_->cols != config_.geometry.dim + 1) {
    throw ConfigError("stored code table does not match vocabulary and dim");
  }
}

void Encoder::bind(ParamStore& store) {
  codes_ = &store.get("enc.codes");
  type_offset_ = &store.get("enc.type_offset");
  visit_query_ = &store.get("enc.visit_query");
  visit_log_temp_ = &store.get("enc.visit_log_temp");
  time_ = &store.get("enc.time");
  diag_scale_raw_ = &store.get("enc.diag_scale_raw");
  diag_bias_ = &store.get("enc.diag_bias");
  layers_.clear();
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = layer_prefix(l);
    auto g = [&](const char* n) { return &store.get(p + n); };
    layers_.push_back({g("wq"), g("bq"), g("wk"), g("bk"), g("wv"), g("bv"), g("wo"), g("bo"), g("log_temp"),
                       g("g1"), g("w1"), g("b1"), g("w2"), g("b2"), g("g2")});
  }
}

void Encoder::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.geometry.dim;
  const manifold::Geometry geom(config_.geometry);
  std::uniform_real_distribution<double> small(-config_.init_scale, config_.init_scale);
  auto init_points = [&](Parameter& p) {
    for (std::size_t r = 0; r < p.rows; ++r) {
      Vec sp(d);
      for (double& x : sp) x = small(rng);
      const Vec pt = geom.exp0(sp);
      std::copy(pt.begin(), pt.end(), p.row(r).begin());
    }
  };
  init_points(*codes_);
  init_points(*visit_query_);
  std::normal_distribution<double> n02(0.0, 0.02);
  for (double& x : type_offset_->value) x = n02(rng);
  for (double& x : time_->value) x = n02(rng);
  visit_log_temp_->value[0] = 0.0;
  diag_scale_raw_->value[0] = std::log(std::expm1(1.0));
  const double gain = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& L : layers_) {
    for (Parameter* w : {L.wq, L.wk, L.wv, L.wo, L.w1, L.w2}) xavier(*w, rng);
    std::fill(L.g1->value.begin(), L.g1->value.end(), gain);
    std::fill(L.g2->value.begin(), L.g2->value.end(), gain);
  }
}

Var Encoder::code_point(Tape& t, std::size_t id) const {
  if (id >= vocab_->size()) throw ArgumentError("code id out of range");
  const Var e = t.row(*codes_, id);
  const CodeType ty = vocab_->type(id);
  if (ty != CodeType::procedure && ty != CodeType::drug) return e;
  const Var off = t.row(*type_offset_, ty == CodeType::procedure ? 0 : 1);
  return geo_.exp0(t, ad::add(t, geo_.log0(t, e), off));
}

Var Encoder::visit_weights(Tape& t, std::span<const std::size_t> codes, std::span<const char> mask) const {
  if (!mask.empty() && mask.size() != codes.size()) throw DimensionError("visit mask length mismatch");
  const bool any = mask.empty() ? !codes.empty() : std::any_of(mask.begin(), mask.end(), [](char m) { return m; });
  if (!any) throw ModelingError("visit has no unmasked codes");
  const Var q = t.row(*visit_query_, 0);
  const Var temp = ad::exp(t, t.row(*visit_log_temp_, 0));
  std::vector<Var> ds;
  ds.reserve(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (!mask.empty() && !mask[i]) {
      ds.push_back(t.scalar(0.0));
      continue;
    }
    ds.push_back(geo_.dist(t, q, code_point(t, codes[i])));
  }
  const Var scores = ad::scale(t, ad::scale_by(t, ad::concat(t, ds), temp), -1.0);
  return ad::softmax(t, scores, mask);
}

Var Encoder::embed_visit(Tape& t, std::span<const std::size_t> codes, std::span<const char> mask) const {
  const Var w = visit_weights(t, codes, mask);
  std::vector<Var> pts;
  pts.reserve(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    pts.push_back((!mask.empty() && !mask[i]) ? geo_.origin(t) : code_point(t, codes[i]));
  }
  return geo_.agg(t, w, pts);
}

std::vector<Var> Encoder::layer(Tape& t, std::size_t l, std::vector<Var> u, std::mt19937_64* rng) const {
  const LayerParams& L = layers_[l];
  const std::size_t n = u.size();
  const std::size_t dh = head_dim(config_);
  const double rate = rng ? config_.dropout : 0.0;
  std::vector<Var> q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = ad::affine(t, *L.wq, u[i], L.bq);
    k[i] = ad::affine(t, *L.wk, u[i], L.bk);
    v[i] = ad::affine(t, *L.wv, u[i], L.bv);
  }
  std::vector<std::vector<Var>> heads_out(n, std::vector<Var>(config_.heads));
  const Var log_temp = t.row(*L.log_temp, 0);
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const Var neg_temp = ad::scale(t, ad::exp(t, ad::at(t, log_temp, h)), -1.0);
    std::vector<Var> qp(n), kp(n), vt(n);
    for (std::size_t i = 0; i < n; ++i) {
      qp[i] = head_geo_.exp0(t, ad::slice(t, q[i], h * dh, dh));
      kp[i] = head_geo_.exp0(t, ad::slice(t, k[i], h * dh, dh));
      // value points enter only through log_o, which is the identity on
      // their tangent preimage
      vt[i] = ad::slice(t, v[i], h * dh, dh);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Var> ds(n);
      for (std::size_t j = 0; j < n; ++j) ds[j] = head_geo_.dist(t, qp[i], kp[j]);
      const Var w = ad::softmax(t, ad::scale_by(t, ad::concat(t, ds), neg_temp));
      heads_out[i][h] = head_geo_.log0(t, head_geo_.agg_tangent(t, w, vt));
    }
  }
  std::vector<Var> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var s = ad::affine(t, *L.wo, ad::concat(t, heads_out[i]), L.bo);
    if (rate > 0.0) s = ad::dropout(t, s, rate, *rng);
    const Var u1 = ad::rms_norm(t, ad::add(t, u[i], s), t.row(*L.g1, 0));
    Var hid = ad::gelu(t, ad::affine(t, *L.w1, u1, L.b1));
    if (rate > 0.0) hid = ad::dropout(t, hid, rate, *rng);
    Var f = ad::affine(t, *L.w2, hid, L.b2);
    if (rate > 0.0) f = ad::dropout(t, f, rate, *rng);
    out[i] = ad::rms_norm(t, ad::add(t, u1, f), t.row(*L.g2, 0));
    check_finite(t, out[i], l);
  }
  return out;
}

TrajectoryStates Encoder::encode(Tape& t, const Sequence& seq, std::mt19937_64* rng) const {
  if (seq.empty()) throw ModelingError("cannot encode an empty visit sequence");
  std::vector<Var> u;
  u.reserve(seq.size() + 1);
  u.push_back(geo_.log0(t, t.row(*codes_, vocab_->cls())));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Var h = embed_visit(t, seq[i].codes);
    const double delta = i == 0 ? 0.0 : seq[i].time - seq[i - 1].time;
    if (delta < 0.0) throw DataError("visit timestamps decrease");
    const Var te = t.row(*time_, time_bucket(i == 0, delta));
    u.push_back(ad::add(t, geo_.log0(t, h), te));
  }
  for (std::size_t l = 0; l < config_.layers; ++l) u = layer(t, l, std::move(u), rng);
  TrajectoryStates out;
  out.cls = geo_.exp0(t, u[0]);
  for (std::size_t i = 1; i < u.size(); ++i) out.visits.push_back(geo_.exp0(t, u[i]));
  return out;
}

TrajectoryStates Encoder::encode(Tape& t, const VisitBatch& batch, std::size_t p, std::mt19937_64* rng) const {
  if (p >= batch.patients) throw ArgumentError("patient index out of range");
  Sequence seq;
  for (std::size_t v = 0; v < batch.max_visits; ++v) {
    if (!batch.visit_on(p, v)) continue;
    Visit vis;
    vis.time = batch.time(p, v);
    for (std::size_t c = 0; c < batch.max_codes; ++c) {
      if (batch.code_on(p, v, c)) vis.codes.push_back(batch.code_at(p, v, c));
    }
    if (vis.codes.empty()) throw ModelingError("visit " + std::to_string(v) + " has no unmasked codes");
    seq.push_back(std::move(vis));
  }
  return encode(t, seq, rng);
}

double Encoder::diag_scale() const {
  const double r = diag_scale_raw_->value[0];
  return r > 30.0 ? r : std::log1p(std::exp(r));
}

Var Encoder::diag_logits(Tape& t, Var z_cls) const {
  const Var a = ad::softplus(t, t.row(*diag_scale_raw_, 0));
  const Var d = geo_.dist_to_rows(t, z_cls, *codes_, vocab_->diag_outputs());
  return ad::add(t, ad::scale(t, ad::scale_by(t, d, a), -1.0), t.row(*diag_bias_, 0));
}

Var Encoder::loss_rad(Tape& t, std::span<const std::pair<std::size_t, std::size_t>> pairs, double beta) const {
  if (pairs.empty()) return t.scalar(0.0);
  std::vector<std::size_t> rows;
  std::vector<std::size_t> pi, ci;
  rows.reserve(pairs.size() * 2);
  for (const auto& [p, c] : pairs) {
    if (p >= vocab_->size() || c >= vocab_->size()) throw ArgumentError("pair references unknown code");
    pi.push_back(rows.size());
    rows.push_back(p);
    ci.push_back(rows.size());
    rows.push_back(c);
  }
  const Var r = geo_.dist_to_rows(t, geo_.origin(t), *codes_, rows);
  return hinge_rad(t, ad::gather(t, r, pi), ad::gather(t, r, ci), beta);
}

Var Encoder::loss_rel(Tape& t, std::span<const hier::Triplet> triplets, double alpha) const {
  if (triplets.empty()) return t.scalar(0.0);
  std::vector<std::size_t> a, pos, neg;
  for (const auto& tr : triplets) {
    for (std::size_t id : {tr.anchor, tr.positive, tr.negative}) {
      if (id >= vocab_->size()) throw ArgumentError("triplet references unknown code");
    }
    a.push_back(tr.anchor);
    pos.push_back(tr.positive);
    neg.push_back(tr.negative);
  }
  return hinge_rel(t, geo_.row_pair_dists(t, *codes_, a, pos), geo_.row_pair_dists(t, *codes_, a, neg), alpha);
}

std::vector<double> Encoder::radii() const {
  const manifold::Geometry geom(config_.geometry);
  std::vector<double> out(codes_->rows);
  for (std::size_t r = 0; r < codes_->rows; ++r) out[r] = geom.radius(codes_->row(r));
  return out;
}

Var hinge_rad(Tape& t, Var parent_radii, Var child_radii, double beta) {
  if (!(beta > 0.0)) throw ArgumentError("beta must be positive");
  return ad::mean(t, ad::relu(t, ad::add_const(t, ad::sub(t, parent_radii, child_radii), beta)));
}

Var hinge_rel(Tape& t, Var d_pos, Var d_neg, double alpha) {
  if (!(alpha > 0.0)) throw ArgumentError("alpha must be positive");
  return ad::mean(t, ad::relu(t, ad::add_const(t, ad::sub(t, d_pos, d_neg), alpha)));
}

Var loss_diag(Tape& t, Var logits, std::span<const double> targets) {
  if (t.size_of(logits) != targets.size()) throw DimensionError("diagnosis targets do not match logits");
  return ad::bce_with_logits(t, logits, targets);
}

Var loss_total(Tape& t, Var l_diag, Var l_rad, Var l_rel, double lambda, double mu) {
  if (lambda < 0.0 || mu < 0.0) throw ArgumentError("lambda and mu must be non-negative");
  if (lambda == 0.0) return l_diag;
  const Var hier = ad::add(t, l_rad, ad::scale(t, l_rel, mu));
  return ad::add(t, l_diag, ad::scale(t, hier, lambda));
}

Vec diag_targets(const Vocabulary& vocab, std::span<const std::size_t> codes) {
  Vec y(vocab.diag_outputs().size(), 0.0);
  for (std::size_t c : codes) {
    if (const auto k = vocab.output_index(c)) y[*k] = 1.0;
  }
  return y;
}

}  // namespace lqa::enc
