#include <cmath>
#include <memory>

#include "lqa/errors.hpp"
#include "lqa/geo_ops.hpp"
#include "lqa/harness.hpp"

namespace lqa::harness {

namespace {

using ad::Parameter;
using ad::ParamKind;
using ad::ParamStore;
using ad::Tape;
using ad::Var;
using ad::Vec;
using LossFn = std::function<Var(Tape&)>;
using Builder = std::function<LossFn(ParamStore&, std::mt19937_64&)>;

constexpr std::size_t kDim = 4;

/// Fixed pseudo-random projection so vector outputs reduce to a scalar.
Var reduce(Tape& t, Var out) {
  Vec c(t.size_of(out));
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sin(1.3 * static_cast<double>(i) + 0.7);
  return ad::dot(t, out, t.constant(c));
}

Parameter& points(ParamStore& s, const std::string& id, std::size_t rows, std::mt19937_64& rng,
                  manifold::Mode mode = manifold::Mode::lorentz, double scale = 0.8) {
  const manifold::Geometry g({mode, kDim});
  auto& p = s.add(id, mode == manifold::Mode::lorentz ? ParamKind::manifold_point : ParamKind::euclidean, rows,
                  kDim + 1);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t r = 0; r < rows; ++r) {
    Vec sp(kDim);
    for (double& x : sp) x = n(rng);
    const Vec v = g.exp0(sp);
    std::copy(v.begin(), v.end(), p.row(r).begin());
  }
  return p;
}

Parameter& dense(ParamStore& s, const std::string& id, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  auto& p = s.add(id, ParamKind::euclidean, rows, cols);
  std::normal_distribution<double> n(0.0, 0.7);
  for (double& x : p.value) x = n(rng);
  return p;
}

GradOp make_op(std::string name, Builder build) {
  return {std::move(name), [build](std::uint64_t seed, std::size_t n_coords) {
            ParamStore store;
            std::mt19937_64 rng(seed);
            const LossFn f = build(store, rng);
            return ad::check_gradients(store, f, seed + 1, n_coords);
          }};
}

struct ModelWorld {
  hier::CodeTrie trie = hier::build_trie_from_codes({"A", "A1", "A11", "A12", "B", "B1", "B11"});
  enc::Vocabulary vocab = enc::Vocabulary::build(trie, {}, {"PR01"}, {"RX01"});
  ParamStore* store;
  std::unique_ptr<enc::Encoder> encoder;
  std::unique_ptr<qa::QaModel> qa;
  qa::PatientContext ctx;

  ModelWorld(ParamStore& s, std::mt19937_64& rng, manifold::Mode mode, bool with_qa) : store(&s) {
    enc::EncoderConfig ec;
    ec.geometry = {mode, kDim};
    ec.layers = 1;
    ec.heads = 2;
    encoder = std::make_unique<enc::Encoder>(ec, vocab, s, rng());
    const manifold::Geometry g(ec.geometry);
    std::normal_distribution<double> n(0.0, 0.6);
    for (std::size_t r = 0; r < vocab.size(); ++r) {
      Vec sp(kDim);
      for (double& x : sp) x = n(rng);
      const Vec v = g.exp0(sp);
      std::copy(v.begin(), v.end(), encoder->code_table().row(r).begin());
    }
    if (!with_qa) return;
    for (auto* p : s.with_prefix("enc.")) p->trainable = false;
    qa::QaConfig qc;
    qc.token_dim = 5;
    qc.hidden = 6;
    qc.var_dim = 3;
    qc.bucket_dim = 3;
    qc.k_max = 4;
    qa = std::make_unique<qa::QaModel>(qc, *encoder, qa::TokenVocab({"was", "A11", "glucose", "value"}),
                                       std::vector<std::string>{"glucose"}, qa::ValueBuckets::fit({{1.0, 2.0, 3.0}}, 16),
                                       s, rng());
    data::PatientRecord r;
    r.patient_id = "P1";
    r.visits.push_back({0.0, {"A11", "B11"}, {"PR01"}, {}, {{"glucose", 0.0, 2.0}}});
    r.visits.push_back({20.0, {"A12"}, {}, {"RX01"}, {{"glucose", 20.0, 3.0}}});
    ctx = qa->context(r);
  }

  enc::Sequence sequence() const {
    return {{0.0, {vocab.id("A11"), vocab.id("PR01")}}, {12.0, {vocab.id("B11"), vocab.id("A12"), vocab.id("RX01")}}};
  }
};

LossFn qa_head(ParamStore& s, std::mt19937_64& rng, data::QType type, data::Answer gold) {
  auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, true);
  return [w, type, gold](Tape& t) { return w->qa->forward(t, w->ctx, type, "was A11 glucose value", &gold).loss; };
}

}  // namespace

std::vector<GradOp> gradcheck_registry() {
  using M = manifold::Mode;
  std::vector<GradOp> ops;
  ops.push_back(make_op("geometry.minkowski", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& x = points(s, "x", 1, rng);
    auto& y = points(s, "y", 1, rng);
    return [&x, &y](Tape& t) { return ad::minkowski(t, t.row(x, 0), t.row(y, 0)); };
  }));
  ops.push_back(make_op("geometry.lorentz_dist", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& x = points(s, "x", 1, rng);
    auto& y = points(s, "y", 1, rng);
    return [&x, &y](Tape& t) { return ad::lorentz_dist(t, t.row(x, 0), t.row(y, 0)); };
  }));
  ops.push_back(make_op("geometry.exp0", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& v = dense(s, "v", 1, kDim, rng);
    return [&v](Tape& t) { return reduce(t, ad::lorentz_exp0(t, t.row(v, 0))); };
  }));
  ops.push_back(make_op("geometry.log0", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& x = points(s, "x", 1, rng);
    return [&x](Tape& t) { return reduce(t, ad::lorentz_log0(t, t.row(x, 0))); };
  }));
  ops.push_back(make_op("geometry.euclid_dist", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& x = points(s, "x", 1, rng, M::euclidean);
    auto& y = points(s, "y", 1, rng, M::euclidean);
    return [&x, &y](Tape& t) { return ad::euclid_dist(t, t.row(x, 0), t.row(y, 0)); };
  }));
  for (M mode : {M::lorentz, M::euclidean}) {
    const std::string tag = mode == M::lorentz ? "lorentz" : "euclidean";
    ops.push_back(make_op("geometry.hyp_agg." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto& z = points(s, "z", 3, rng, mode);
      auto& w = dense(s, "w", 1, 3, rng);
      const ad::GeoOps geo({mode, kDim});
      return [&z, &w, geo](Tape& t) {
        const Var pts[] = {t.row(z, 0), t.row(z, 1), t.row(z, 2)};
        return reduce(t, geo.agg(t, ad::softmax(t, t.row(w, 0)), pts));
      };
    }));
    ops.push_back(make_op("geometry.dist_to_rows." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto& x = points(s, "x", 1, rng, mode);
      auto& table = points(s, "table", 5, rng, mode);
      const ad::GeoOps geo({mode, kDim});
      return [&x, &table, geo](Tape& t) {
        const std::size_t rows[] = {0, 2, 3, 2};
        return reduce(t, geo.dist_to_rows(t, t.row(x, 0), table, rows));
      };
    }));
    ops.push_back(make_op("geometry.row_pair_dists." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto& table = points(s, "table", 5, rng, mode);
      const ad::GeoOps geo({mode, kDim});
      return [&table, geo](Tape& t) {
        const std::size_t a[] = {0, 1, 4};
        const std::size_t b[] = {3, 2, 0};
        return reduce(t, geo.row_pair_dists(t, table, a, b));
      };
    }));
  }
  ops.push_back(make_op("nn.softmax", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& a = dense(s, "a", 1, 5, rng);
    return [&a](Tape& t) {
      const char mask[] = {1, 1, 0, 1, 1};
      return reduce(t, ad::softmax(t, t.row(a, 0), mask));
    };
  }));
  ops.push_back(make_op("nn.rms_norm", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& a = dense(s, "a", 1, 5, rng);
    auto& g = dense(s, "g", 1, 5, rng);
    return [&a, &g](Tape& t) { return reduce(t, ad::rms_norm(t, t.row(a, 0), t.row(g, 0))); };
  }));
  ops.push_back(make_op("nn.affine_gelu", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& w = dense(s, "w", 3, 4, rng);
    auto& b = dense(s, "b", 1, 3, rng);
    auto& x = dense(s, "x", 1, 4, rng);
    return [&w, &b, &x](Tape& t) { return reduce(t, ad::gelu(t, ad::affine(t, w, t.row(x, 0), &b))); };
  }));
  for (M mode : {M::lorentz, M::euclidean}) {
    const std::string tag = mode == M::lorentz ? "lorentz" : "euclidean";
    ops.push_back(make_op("encoder.visit_pooling." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto w = std::make_shared<ModelWorld>(s, rng, mode, false);
      return [w](Tape& t) {
        const std::size_t codes[] = {w->vocab.id("A11"), w->vocab.id("PR01"), w->vocab.id("B11")};
        return reduce(t, w->encoder->embed_visit(t, codes));
      };
    }));
    ops.push_back(make_op("encoder.attention." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto w = std::make_shared<ModelWorld>(s, rng, mode, false);
      return [w](Tape& t) {
        const auto st = w->encoder->encode(t, w->sequence());
        return ad::add(t, reduce(t, w->encoder->geo().log0(t, st.cls)),
                       reduce(t, w->encoder->geo().log0(t, st.visits.back())));
      };
    }));
    ops.push_back(make_op("loss.diag." + tag, [mode](ParamStore& s, std::mt19937_64& rng) -> LossFn {
      auto w = std::make_shared<ModelWorld>(s, rng, mode, false);
      return [w](Tape& t) {
        const auto st = w->encoder->encode(t, w->sequence());
        const std::size_t next[] = {w->vocab.id("A12"), w->vocab.id("B11")};
        return enc::loss_diag(t, w->encoder->diag_logits(t, st.cls), enc::diag_targets(w->vocab, next));
      };
    }));
  }
  // Margins are set large so every hinge is active.
  ops.push_back(make_op("loss.rad", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, false);
    return [w](Tape& t) { return w->encoder->loss_rad(t, vocab_pairs(w->vocab, w->trie), 5.0); };
  }));
  ops.push_back(make_op("loss.rel", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, false);
    auto tr = vocab_triplets(w->vocab, w->trie, 8, rng());
    return [w, tr](Tape& t) { return w->encoder->loss_rel(t, tr, 5.0); };
  }));
  ops.push_back(make_op("loss.total", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, false);
    auto tr = vocab_triplets(w->vocab, w->trie, 8, rng());
    return [w, tr](Tape& t) {
      const auto st = w->encoder->encode(t, w->sequence());
      const std::size_t next[] = {w->vocab.id("A12")};
      const Var l_diag = enc::loss_diag(t, w->encoder->diag_logits(t, st.cls), enc::diag_targets(w->vocab, next));
      const Var l_rad = w->encoder->loss_rad(t, vocab_pairs(w->vocab, w->trie), 5.0);
      const Var l_rel = w->encoder->loss_rel(t, tr, 5.0);
      return enc::loss_total(t, l_diag, l_rad, l_rel, 0.5, 0.5);
    };
  }));
  ops.push_back(make_op("qa.cross_attend", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, true);
    return [w](Tape& t) {
      const Var q = w->qa->encode_question(t, {1, 2, 3});
      std::vector<Var> states;
      for (const auto& v : w->ctx.visit_states) states.push_back(t.constant(v));
      return reduce(t, w->qa->cross_attend(t, q, states).z_visit);
    };
  }));
  ops.push_back(make_op("qa.event_embedding", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto w = std::make_shared<ModelWorld>(s, rng, manifold::Mode::lorentz, true);
    return [w](Tape& t) {
      return reduce(t, w->qa->event_embedding(t, t.constant(w->ctx.visit_states[0]), 0, 2.5));
    };
  }));
  ops.push_back(make_op("qa.head_bool", [](ParamStore& s, std::mt19937_64& rng) {
    return qa_head(s, rng, data::QType::boolean, data::Answer::of_int(1));
  }));
  ops.push_back(make_op("qa.head_concept", [](ParamStore& s, std::mt19937_64& rng) {
    return qa_head(s, rng, data::QType::concept_id, data::Answer::of_text("A12"));
  }));
  ops.push_back(make_op("qa.head_value", [](ParamStore& s, std::mt19937_64& rng) {
    return qa_head(s, rng, data::QType::value, data::Answer::of_real(3.0));
  }));
  ops.push_back(make_op("qa.head_count", [](ParamStore& s, std::mt19937_64& rng) {
    return qa_head(s, rng, data::QType::count, data::Answer::of_int(2));
  }));
  ops.push_back(make_op("qa.classify", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& z = points(s, "z", 1, rng);
    auto geo = std::make_shared<ad::GeoOps>(manifold::GeometryMode{manifold::Mode::lorentz, kDim});
    auto head = std::make_shared<qa::ClassifyHead>("pheno", qa::TaskKind::multilabel, 3, *geo, s, rng());
    return [&z, geo, head](Tape& t) { return head->loss(t, head->logits(t, t.row(z, 0)), {1.0, 0.0, 1.0}); };
  }));
  return ops;
}

GradOp corrupted_gradcheck_op() {
  return make_op("control.corrupted_dist", [](ParamStore& s, std::mt19937_64& rng) -> LossFn {
    auto& x = points(s, "x", 1, rng);
    auto& y = points(s, "y", 1, rng);
    return [&x, &y](Tape& t) {
      const Var d = ad::lorentz_dist(t, t.row(x, 0), t.row(y, 0));
      return t.push(t.value(d), t.requires_grad(d), [d](Tape& tp, std::uint32_t self) {
        tp.grad(d)[0] += 1.1 * tp.grad(self)[0];
      });
    };
  });
}

std::vector<GradRow> run_gradcheck(const std::vector<GradOp>& ops, const std::string& selector, std::uint64_t seed,
                                   std::size_t n_coords, double tol) {
  std::vector<GradRow> rows;
  for (const auto& op : ops) {
    if (!selector.empty() && selector != "all" && op.name.compare(0, selector.size(), selector) != 0) continue;
    const auto r = op.run(seed, n_coords);
    rows.push_back({op.name, r.max_rel_error, r.coords_checked, r.max_rel_error <= tol});
  }
  if (rows.empty()) throw ArgumentError("no gradcheck op matches '" + selector + "'");
  return rows;
}

}  // namespace lqa::harness
