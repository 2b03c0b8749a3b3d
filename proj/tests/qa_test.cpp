#include "lqa/qa.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lqa/errors.hpp"
#include "lqa/gradcheck.hpp"
#include "lqa/optim.hpp"

using namespace lqa;
using namespace lqa::qa;

namespace {

struct World {
  hier::CodeTrie trie = hier::build_trie_from_codes({"A", "A1", "A11", "A12", "B", "B1", "B11"});
  enc::Vocabulary vocab = enc::Vocabulary::build(trie, {}, {"PR01"}, {"RX01"});
  ParamStore store;
  std::unique_ptr<enc::Encoder> encoder;
  std::unique_ptr<QaModel> model;
  std::mt19937_64 rng{11};

  explicit World(manifold::Mode mode = manifold::Mode::lorentz, QaConfig qc = {}) {
    enc::EncoderConfig ec;
    ec.geometry = {mode, 4};
    ec.layers = 1;
    ec.heads = 2;
    encoder = std::make_unique<enc::Encoder>(ec, vocab, store, 3);
    for (std::size_t r = 0; r < vocab.size(); ++r) {
      const Vec p = point(0.7);
      std::copy(p.begin(), p.end(), encoder->code_table().row(r).begin());
    }
    TokenVocab tok({"was", "diagnosis", "A11", "recorded", "what", "glucose", "value"});
    qc.token_dim = 6;
    qc.hidden = 8;
    model = std::make_unique<QaModel>(qc, *encoder, tok, std::vector<std::string>{"glucose", "sodium"},
                                      ValueBuckets::fit({{1.0, 2.0, 3.0}, {140.0}}, 16), store, 5);
  }

  Vec point(double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Vec sp(encoder->config().geometry.dim);
    for (double& x : sp) x = n(rng);
    return manifold::Geometry(encoder->config().geometry).exp0(sp);
  }

  double dist(const Vec& a, const Vec& b) const {
    return manifold::Geometry(encoder->config().geometry).dist(a, b);
  }

  data::PatientRecord record() const {
    data::PatientRecord r;
    r.patient_id = "P000001";
    r.visits.push_back({0.0, {"A11", "B11"}, {"PR01"}, {}, {{"glucose", 0.0, 2.0}}});
    r.visits.push_back({30.0, {"A12", "A11"}, {}, {"RX01"}, {{"glucose", 30.0, 3.0}, {"sodium", 30.0, 140.0}}});
    return r;
  }
};

void expect_close(const Vec& a, const Vec& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "coord " << i;
}

}  // namespace

TEST(TokenVocab, UnknownMapsToZero) {
  TokenVocab v({"was", "A11"});
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.id("nope"), TokenVocab::kUnk);
  EXPECT_EQ(v.encode("was  nope A11"), (std::vector<std::size_t>{1, 0, 2}));
}

TEST(ValueBuckets, EqualMassOnDistinctValues) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  std::vector<double> vals(160);
  for (double& x : vals) x = u(rng);
  const auto b = ValueBuckets::fit({vals}, 16);
  ASSERT_EQ(b.cuts()[0].size(), 15u);
  std::vector<int> hist(16, 0);
  for (double x : vals) ++hist.at(b.bucket(0, x));
  for (int h : hist) EXPECT_EQ(h, 10);
  EXPECT_EQ(b.bucket(0, -1.0), 0u);
  EXPECT_EQ(b.bucket(0, 1e9), 15u);
  EXPECT_THROW(b.bucket(1, 0.0), ArgumentError);
}

TEST(EncodeQuestion, SingleTokenIsItsProjection) {
  World w;
  Tape t;
  const Var z = w.model->encode_question(t, {2});
  const Var u = ad::affine(t, w.store.get("qa.W"), t.row(w.store.get("qa.tok"), 2), &w.store.get("qa.b"));
  const Vec expect = t.value(w.encoder->geo().exp0(t, u));
  expect_close(t.value(z), expect, 1e-12);
  EXPECT_LE(manifold::manifold_residual(t.value(z)), 1e-9);
}

TEST(EncodeQuestion, PermutationInvariantAndZeroIsOrigin) {
  World w;
  Tape t;
  const Vec a = t.value(w.model->encode_question(t, {1, 2, 3}));
  const Vec b = t.value(w.model->encode_question(t, {3, 1, 2}));
  expect_close(a, b, 1e-12);
  for (const char* id : {"qa.tok", "qa.b"}) {
    auto& p = w.store.get(id);
    std::fill(p.value.begin(), p.value.end(), 0.0);
  }
  expect_close(t.value(w.model->encode_question(t, {1, 2})), Vec{1.0, 0.0, 0.0, 0.0, 0.0}, 0.0);
  EXPECT_THROW(w.model->encode_question(t, {}), ArgumentError);
}

TEST(CrossAttend, SingleVisitAndSymmetry) {
  World w;
  Tape t;
  const Var q = t.constant(w.point(0.5));
  const Var z1 = t.constant(w.point(0.5));
  const auto one = w.model->cross_attend(t, q, {z1});
  EXPECT_DOUBLE_EQ(t.item(one.weights), 1.0);
  expect_close(t.value(one.z_visit), t.value(z1), 1e-12);

  // Mirror images through the origin are equidistant from it.
  const Var o = t.constant({1, 0, 0, 0, 0});
  const Vec a = w.point(0.8);
  const Var za = t.constant(a);
  const Var zb = t.constant({a[0], -a[1], -a[2], -a[3], -a[4]});
  const auto two = w.model->cross_attend(t, o, {za, zb});
  EXPECT_NEAR(t.value(two.weights)[0], 0.5, 1e-12);
  EXPECT_NEAR(t.value(two.weights)[1], 0.5, 1e-12);
}

TEST(CrossAttend, WeightsFollowDistanceAndSharpenWithGamma) {
  double prev_max = 0.0;
  for (double gamma : {0.5, 1.0, 2.0, 4.0}) {
    QaConfig qc;
    qc.gamma = gamma;
    World w(manifold::Mode::lorentz, qc);
    Tape t;
    const Vec q = w.point(0.5);
    std::vector<Vec> zs{w.point(0.5), w.point(0.5), w.point(0.5), w.point(0.5)};
    std::vector<Var> vs;
    for (const auto& z : zs) vs.push_back(t.constant(z));
    const auto att = w.model->cross_attend(t, t.constant(q), vs);
    const Vec& a = t.value(att.weights);
    double s = 0.0;
    for (double x : a) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (std::size_t i = 0; i < zs.size(); ++i) {
      for (std::size_t j = 0; j < zs.size(); ++j) {
        if (w.dist(q, zs[i]) < w.dist(q, zs[j])) EXPECT_GE(a[i], a[j]);
      }
    }
    const double m = *std::max_element(a.begin(), a.end());
    EXPECT_GT(m, prev_max);
    prev_max = m;
  }
}

TEST(CodeRationale, ClippingSingleCodeAndTies) {
  QaConfig qc;
  qc.top_k = 1;
  World w(manifold::Mode::lorentz, qc);
  Tape t;
  const Var q = t.constant(w.point(0.5));
  const std::size_t a11 = w.vocab.id("A11");
  const std::size_t b11 = w.vocab.id("B11");
  Tape s;
  const Vec e_a11 = s.value(w.encoder->code_point(s, a11));
  const Vec e_b11 = s.value(w.encoder->code_point(s, b11));
  expect_close(t.value(w.model->code_rationale(t, q, {1.0}, {{a11}})), e_a11, 1e-12);
  // Equal attention: the earlier visit wins the single slot.
  expect_close(t.value(w.model->code_rationale(t, q, {0.5, 0.5}, {{b11}, {a11}})), e_b11, 1e-12);
  expect_close(t.value(w.model->code_rationale(t, q, {0.2, 0.8}, {{b11}, {a11}})), e_a11, 1e-12);
}

TEST(CodeRationale, PoolsAllVisitsWhenKExceedsLength) {
  QaConfig qc;
  qc.top_k = 10;
  qc.gamma = 1.0;
  World w(manifold::Mode::lorentz, qc);
  Tape t;
  const Vec qv = w.point(0.5);
  const Var q = t.constant(qv);
  const std::vector<std::size_t> ids{w.vocab.id("A11"), w.vocab.id("B11"), w.vocab.id("PR01")};
  std::vector<Vec> pts;
  Vec logits;
  for (std::size_t c : ids) {
    Tape s;
    pts.push_back(s.value(w.encoder->code_point(s, c)));
    logits.push_back(-w.dist(qv, pts.back()));
  }
  const Vec wts = ad::softmax_values(logits);
  const Vec expect = manifold::Geometry(w.encoder->config().geometry).agg(wts, pts);
  expect_close(t.value(w.model->code_rationale(t, q, {0.7, 0.3}, {{ids[0], ids[2]}, {ids[1]}})), expect, 1e-12);
}

TEST(HeadLosses, BooleanForms) {
  Tape t;
  EXPECT_LE(t.item(loss_bool(t, t.constant({20.0, -20.0}), Answer::of_int(0))), 1e-8);
  EXPECT_NEAR(t.item(loss_bool(t, t.constant({0.0, 0.0}), Answer::of_int(1))), std::log(2.0), 1e-15);
  const double l_empty = t.item(loss_bool(t, t.constant({1.0, -2.0}), Answer::none()));
  EXPECT_DOUBLE_EQ(l_empty, t.item(loss_bool(t, t.constant({1.0, -2.0}), Answer::of_int(0))));
}

TEST(HeadLosses, ConceptForms) {
  Tape t;
  EXPECT_LE(t.item(loss_concept(t, t.constant({30.0, 0.0}), {"A11"}, Answer::of_text("A11"))), 1e-12);
  EXPECT_NEAR(t.item(loss_concept(t, t.constant({0.3, 0.3, 0.3, 0.3}), {"A", "B", "C"}, Answer::of_text("B"))),
              std::log(4.0), 1e-15);
  // Empty gold targets the null slot.
  EXPECT_LE(t.item(loss_concept(t, t.constant({0.0, 0.0, 40.0}), {"A", "B"}, Answer::none())), 1e-12);
  EXPECT_THROW(loss_concept(t, t.constant({0.0, 0.0}), {"A"}, Answer::of_text("Z")), DataError);
}

TEST(HeadLosses, ValuePositivesAndForms) {
  EXPECT_EQ(value_positives({5.0, 7.2}, Answer::of_real(5.0)), (std::vector<std::size_t>{0}));
  EXPECT_EQ(value_positives({5.0, 7.2, 5.0}, Answer::of_real(5.0)), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(value_positives({5.0, 7.2}, Answer::none()), (std::vector<std::size_t>{2}));
  EXPECT_EQ(value_positives({5.0, 7.2}, Answer::of_real(6.0)), (std::vector<std::size_t>{2}));
  // Tolerance scales with |gold|: 10 at 1e7, 1e-6 below 1.
  EXPECT_EQ(value_positives({1e7 + 9.0, 1e7 + 11.0}, Answer::of_real(1e7)), (std::vector<std::size_t>{0}));
  EXPECT_EQ(value_positives({0.5 + 2e-6}, Answer::of_real(0.5)), (std::vector<std::size_t>{1}));
  Tape t;
  // Duplicate matches: loss is -log of the summed probability.
  const Vec logits{1.0, -0.5, 1.0, 0.2};
  const Vec p = ad::softmax_values(logits);
  EXPECT_NEAR(t.item(loss_value(t, t.constant(logits), {5.0, 7.2, 5.0}, Answer::of_real(5.0))),
              -std::log(p[0] + p[2]), 1e-14);
  EXPECT_NEAR(t.item(loss_value(t, t.constant(logits), {5.0, 7.2, 5.0}, Answer::none())), -std::log(p[3]), 1e-14);
}

TEST(HeadLosses, CountForms) {
  Tape t;
  Vec logits(21, 0.0);
  logits[20] = 50.0;
  EXPECT_LE(t.item(loss_count(t, t.constant(logits), Answer::of_int(25))), 1e-8);
  Vec zero(21, 0.0);
  zero[0] = 50.0;
  EXPECT_LE(t.item(loss_count(t, t.constant(zero), Answer::none())), 1e-8);
  EXPECT_NEAR(t.item(loss_count(t, t.constant(Vec(5, 0.0)), Answer::of_int(2))), std::log(5.0), 1e-15);
}

TEST(HeadLosses, KMaxFromCounts) {
  std::vector<long long> c(100, 3);
  c[99] = 50;
  EXPECT_EQ(k_max_from_counts(c), 3u);
  c[98] = 50;
  EXPECT_EQ(k_max_from_counts(c), 20u);
  EXPECT_EQ(k_max_from_counts(std::vector<long long>(10, 0)), 1u);
  EXPECT_EQ(k_max_from_counts({}), 1u);
}

TEST(EventEmbedding, OnManifoldAndDistinctPerVariable) {
  World w;
  Tape t;
  const Var z = t.constant(w.point(0.6));
  const Var g = w.model->event_embedding(t, z, 0, 2.0);
  const Var s = w.model->event_embedding(t, z, 1, 2.0);
  EXPECT_LE(manifold::manifold_residual(t.value(g)), 1e-9);
  EXPECT_GT(w.dist(t.value(g), t.value(s)), 1e-6);
  EXPECT_THROW(w.model->event_embedding(t, z, 2, 2.0), ArgumentError);
}

TEST(Context, CandidatesAndEventsFromRecord) {
  World w;
  const auto ctx = w.model->context(w.record());
  ASSERT_EQ(ctx.visit_states.size(), 2u);
  EXPECT_EQ(ctx.candidates, (std::vector<std::size_t>{w.vocab.id("A11"), w.vocab.id("B11"), w.vocab.id("A12")}));
  ASSERT_EQ(ctx.events.size(), 3u);
  EXPECT_EQ(ctx.events[2].var, 1u);
  EXPECT_EQ(ctx.events[2].visit, 1u);
  EXPECT_EQ(ctx.visit_codes[0].size(), 3u);
  for (const auto& s : ctx.visit_states) EXPECT_LE(manifold::manifold_residual(s), 1e-9);
}

TEST(Forward, ExactlyOneHeadReceivesGradient) {
  World w;
  const auto ctx = w.model->context(w.record());
  const std::pair<data::QType, const char*> heads[] = {
      {data::QType::boolean, "qa.bool."}, {data::QType::count, "qa.cnt."}, {data::QType::concept_id, "qa.con."},
      {data::QType::value, "qa.val."}};
  const Answer golds[] = {Answer::of_int(1), Answer::of_int(2), Answer::of_text("A12"), Answer::of_real(3.0)};
  for (std::size_t h = 0; h < 4; ++h) {
    w.store.zero_grad();
    Tape t;
    const auto out = w.model->forward(t, ctx, heads[h].first, "what glucose value was recorded", &golds[h]);
    t.backward(out.loss);
    for (const auto& [type, prefix] : heads) {
      double g = 0.0;
      for (auto* p : w.store.with_prefix(prefix)) {
        for (double x : p->grad) g += std::abs(x);
      }
      if (type == heads[h].first) {
        EXPECT_GT(g, 0.0) << prefix;
      } else {
        EXPECT_EQ(g, 0.0) << prefix;
      }
    }
    for (auto* p : w.store.with_prefix("enc.")) {
      for (double x : p->grad) EXPECT_EQ(x, 0.0) << p->id;
    }
  }
}

class QaGrad : public ::testing::TestWithParam<manifold::Mode> {};

TEST_P(QaGrad, EveryHeadMatchesFiniteDifferences) {
  World w(GetParam());
  const auto ctx = w.model->context(w.record());
  for (auto* p : w.store.with_prefix("enc.")) p->trainable = false;
  const std::pair<data::QType, Answer> cases[] = {{data::QType::boolean, Answer::of_int(1)},
                                                  {data::QType::count, Answer::of_int(2)},
                                                  {data::QType::concept_id, Answer::of_text("A12")},
                                                  {data::QType::value, Answer::of_real(3.0)}};
  std::uint64_t seed = 1;
  for (const auto& [type, gold] : cases) {
    const auto r = ad::check_gradients(
        w.store,
        [&](Tape& t) { return w.model->forward(t, ctx, type, "what glucose value was recorded", &gold).loss; },
        seed++, 100);
    EXPECT_LT(r.max_rel_error, 1e-4) << data::to_string(type) << " worst " << r.worst_param;
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, QaGrad, ::testing::Values(manifold::Mode::lorentz, manifold::Mode::euclidean));

TEST(HeadContracts, FixtureReachesOptimaAndCoversNullRules) {
  const auto rep = run_head_contracts(7);
  ASSERT_EQ(rep.items.size(), 20u);
  EXPECT_LE(rep.max_loss, 1e-3) << "after " << rep.steps << " steps";
  EXPECT_TRUE(rep.null_bool);
  EXPECT_TRUE(rep.null_concept);
  EXPECT_TRUE(rep.null_value);
  EXPECT_TRUE(rep.null_count);
  std::size_t per_type[4] = {0, 0, 0, 0};
  for (const auto& it : rep.items) ++per_type[static_cast<int>(it.type)];
  for (std::size_t n : per_type) EXPECT_EQ(n, 5u);
}

TEST(Classify, ZeroWeightsAreUniformAndShapesMatch) {
  World w;
  ClassifyHead los("los", TaskKind::multiclass, 4, w.encoder->geo(), w.store, 1);
  ClassifyHead mort("mort", TaskKind::binary, 1, w.encoder->geo(), w.store, 2);
  EXPECT_THROW(ClassifyHead("bad", TaskKind::binary, 2, w.encoder->geo(), w.store, 3), ArgumentError);
  for (auto* p : w.store.with_prefix("cls.los.")) std::fill(p->value.begin(), p->value.end(), 0.0);
  Tape t;
  const Var z = t.constant(w.point(0.5));
  const Var l = los.logits(t, z);
  ASSERT_EQ(t.size_of(l), 4u);
  EXPECT_EQ(t.size_of(mort.logits(t, z)), 1u);
  for (double p : ad::softmax_values(t.value(l))) EXPECT_DOUBLE_EQ(p, 0.25);
  EXPECT_NEAR(t.item(los.loss(t, l, {0, 0, 1, 0})), std::log(4.0), 1e-15);
}

TEST(Classify, AveragePrecisionHandExample) {
  // Ranking: 1, 0, 1, 0 -> (1/1 + 2/3) / 2
  EXPECT_NEAR(average_precision({0.9, 0.8, 0.7, 0.1}, {1, 0, 1, 0}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(average_precision({0.1, 0.2}, {0, 0}), 0.0);
}

TEST(Classify, SeparableLabelsBeatPrevalence) {
  World w;
  ClassifyHead head("mort", TaskKind::binary, 1, w.encoder->geo(), w.store, 9);
  std::mt19937_64 rng(21);
  std::vector<Vec> pts;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    const Vec p = w.point(0.7);
    pts.push_back(p);
    labels.push_back(p[1] + 0.5 * p[2] > 0.4 ? 1 : 0);
  }
  const double prevalence = std::count(labels.begin(), labels.end(), 1) / 200.0;
  ASSERT_GT(prevalence, 0.05);
  optim::RiemannianAdam opt(w.store.with_prefix("cls.mort."), {});
  for (int epoch = 0; epoch < 200; ++epoch) {
    opt.zero_grad();
    Tape t;
    std::vector<Var> ls;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ls.push_back(head.loss(t, head.logits(t, t.constant(pts[i])), {static_cast<double>(labels[i])}));
    }
    t.backward(ad::mean(t, ad::concat(t, ls)));
    opt.step_with_lr(0.05, 0.0);
  }
  std::vector<double> scores;
  for (const auto& p : pts) {
    Tape t;
    scores.push_back(t.item(head.logits(t, t.constant(p))));
  }
  EXPECT_GT(average_precision(scores, labels), prevalence + 0.3);
}
