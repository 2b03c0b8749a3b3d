#include "lqa/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lqa/errors.hpp"
#include "lqa/gradcheck.hpp"
#include "lqa/optim.hpp"

using namespace lqa;
using namespace lqa::enc;

namespace {

struct Fixture {
  hier::CodeTrie trie = hier::build_trie_from_codes({"A", "A1", "A11", "A12", "A2", "A21", "B", "B1", "B11", "B12"});
  Vocabulary vocab = Vocabulary::build(trie, {}, {"P1", "P2"}, {"D1"});
  ParamStore store;
  std::unique_ptr<Encoder> enc;

  explicit Fixture(EncoderConfig cfg = {}, std::uint64_t seed = 1) {
    enc = std::make_unique<Encoder>(cfg, vocab, store, seed);
  }

  std::size_t id(const std::string& c) const { return vocab.id(c); }

  void spread_codes(double scale, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    const manifold::Geometry g(enc->config().geometry);
    auto& tab = enc->code_table();
    for (std::size_t r = 0; r < tab.rows; ++r) {
      Vec sp(tab.cols - 1);
      for (double& x : sp) x = u(rng);
      const Vec p = g.exp0(sp);
      std::copy(p.begin(), p.end(), tab.row(r).begin());
    }
  }

  void set_point(std::size_t row, const Vec& spatial) {
    const Vec p = manifold::Geometry(enc->config().geometry).exp0(spatial);
    std::copy(p.begin(), p.end(), enc->code_table().row(row).begin());
  }

  Sequence sample_sequence() const {
    return {{0.0, {id("A11"), id("P1")}}, {3.0, {id("B12"), id("A2"), id("D1")}}, {40.0, {id("A21")}}};
  }
};

EncoderConfig small_config(manifold::Mode mode = manifold::Mode::lorentz, std::size_t layers = 2) {
  EncoderConfig c;
  c.geometry = {mode, 4};
  c.layers = layers;
  c.heads = 2;
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST(Vocabulary, LayoutAndOutputs) {
  Fixture f(small_config());
  EXPECT_EQ(f.vocab.code(0), kPadCode);
  EXPECT_EQ(f.vocab.code(1), kClsCode);
  EXPECT_FALSE(f.vocab.contains(hier::kSyntheticRoot));
  EXPECT_EQ(f.vocab.type(f.id("P1")), CodeType::procedure);
  EXPECT_EQ(f.vocab.type(f.id("D1")), CodeType::drug);
  // leaves: A11 A12 A21 B11 B12
  EXPECT_EQ(f.vocab.diag_outputs().size(), 5u);
  EXPECT_FALSE(f.vocab.output_index(f.id("A1")).has_value());
  EXPECT_TRUE(f.vocab.output_index(f.id("B12")).has_value());
  const auto again = Vocabulary::from_rows(f.vocab.codes(), f.vocab.types(), f.vocab.diag_outputs());
  EXPECT_EQ(again.codes(), f.vocab.codes());
  EXPECT_EQ(again.diag_outputs(), f.vocab.diag_outputs());
  EXPECT_THROW(f.vocab.id("nope"), ArgumentError);
}

TEST(Batch, MasksAndTimes) {
  Fixture f(small_config());
  const Sequence a = f.sample_sequence();
  const Sequence b{{0.0, {f.id("A11")}}};
  const Sequence* seqs[] = {&a, &b};
  const auto batch = make_batch(seqs, f.vocab.pad());
  EXPECT_EQ(batch.max_visits, 3u);
  EXPECT_EQ(batch.max_codes, 3u);
  EXPECT_EQ(batch.visit_count(0), 3u);
  EXPECT_EQ(batch.visit_count(1), 1u);
  EXPECT_FALSE(batch.code_on(1, 0, 1));
  EXPECT_EQ(batch.code_at(1, 0, 1), f.vocab.pad());
  EXPECT_DOUBLE_EQ(batch.time(0, 2), 40.0);
  const Sequence bad{{5.0, {f.id("A11")}}, {1.0, {f.id("A12")}}};
  const Sequence* bads[] = {&bad};
  EXPECT_THROW(make_batch(bads, 0), DataError);
}

TEST(TimeBucket, Edges) {
  EXPECT_EQ(time_bucket(true, 100.0), 0u);
  EXPECT_EQ(time_bucket(false, 0.0), 1u);
  EXPECT_EQ(time_bucket(false, 7.0), 2u);
  EXPECT_EQ(time_bucket(false, 364.9), 5u);
  EXPECT_EQ(time_bucket(false, 365.0), 6u);
}

TEST(EmbedVisit, SingleCodeIsTheCodePoint) {
  Fixture f(small_config());
  f.spread_codes(0.8, 2);
  Tape t;
  const std::size_t c = f.id("A12");
  const Vec& h = t.value(f.enc->embed_visit(t, std::vector<std::size_t>{c}));
  const auto e = f.enc->code_table().row(c);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], e[i], 1e-12);
}

TEST(EmbedVisit, EquidistantCodesGetEqualWeights) {
  Fixture f(small_config());
  auto& q = f.store.get("enc.visit_query");
  q.value = manifold::LorentzPoint::origin(4).coords();
  f.set_point(f.id("A11"), {0.7, 0.0, 0.0, 0.0});
  f.set_point(f.id("B11"), {0.0, 0.0, -0.7, 0.0});
  Tape t;
  const Vec& w = t.value(f.enc->visit_weights(t, std::vector<std::size_t>{f.id("A11"), f.id("B11")}));
  EXPECT_NEAR(w[0], 0.5, 1e-15);
  EXPECT_NEAR(w[1], 0.5, 1e-15);
}

TEST(EmbedVisit, WeightsFollowDistanceAndMasks) {
  Fixture f(small_config());
  f.spread_codes(1.0, 3);
  const manifold::Geometry g(f.enc->config().geometry);
  const std::vector<std::size_t> codes{f.id("A11"), f.id("A12"), f.id("B11"), f.id("B12"), f.id("A21")};
  Tape t;
  const Vec w = t.value(f.enc->visit_weights(t, codes));
  const auto q = f.store.get("enc.visit_query").row(0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (std::size_t j = 0; j < codes.size(); ++j) {
      const double di = g.dist(q, f.enc->code_table().row(codes[i]));
      const double dj = g.dist(q, f.enc->code_table().row(codes[j]));
      if (di < dj) EXPECT_GT(w[i], w[j]);
    }
  }
  const std::vector<char> mask{1, 0, 1, 0, 1};
  const Vec wm = t.value(f.enc->visit_weights(t, codes, mask));
  EXPECT_EQ(wm[1], 0.0);
  EXPECT_EQ(wm[3], 0.0);
  EXPECT_NEAR(wm[0] + wm[2] + wm[4], 1.0, 1e-15);
  const std::vector<char> none(5, 0);
  EXPECT_THROW(f.enc->embed_visit(t, codes, none), ModelingError);
}

TEST(Encode, ZeroLayersIsInputPlusTime) {
  Fixture f(small_config(manifold::Mode::lorentz, 0));
  f.spread_codes(0.8, 4);
  const Sequence s = f.sample_sequence();
  Tape t;
  const auto out = f.enc->encode(t, s);
  ASSERT_EQ(out.visits.size(), 3u);
  const auto& tm = f.store.get("enc.time");
  for (std::size_t i = 0; i < 3; ++i) {
    const Var h = f.enc->embed_visit(t, s[i].codes);
    const Vec lh = manifold::log0(manifold::LorentzPoint::from_coords(t.value(h)));
    const std::size_t b = time_bucket(i == 0, i == 0 ? 0.0 : s[i].time - s[i - 1].time);
    Vec u(4);
    for (std::size_t k = 0; k < 4; ++k) u[k] = lh[k] + tm.row(b)[k];
    const Vec expect = manifold::exp0(u).coords();
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(t.value(out.visits[i])[k], expect[k], 1e-12);
  }
}

TEST(Encode, PermutationEquivariantWithEqualTimestamps) {
  Fixture f(small_config());
  f.spread_codes(0.8, 5);
  const Sequence s{{2.0, {f.id("A11")}}, {2.0, {f.id("B12"), f.id("P2")}}, {2.0, {f.id("A21"), f.id("D1")}}};
  const Sequence p{s[0], s[2], s[1]};
  Tape t;
  const auto a = f.enc->encode(t, s);
  const auto b = f.enc->encode(t, p);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_NEAR(t.value(a.visits[1])[k], t.value(b.visits[2])[k], 1e-12);
    EXPECT_NEAR(t.value(a.visits[2])[k], t.value(b.visits[1])[k], 1e-12);
    EXPECT_NEAR(t.value(a.cls)[k], t.value(b.cls)[k], 1e-12);
  }
}

TEST(Encode, OutputsOnManifold) {
  EncoderConfig cfg = small_config();
  cfg.layers = 3;
  cfg.geometry.dim = 8;
  Fixture f(cfg, 9);
  f.spread_codes(1.5, 6);
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> pick(2, f.vocab.size() - 1);
  for (int trial = 0; trial < 50; ++trial) {
    Sequence s;
    double time = 0.0;
    const int n = 1 + trial % 6;
    for (int v = 0; v < n; ++v) {
      time += static_cast<double>(pick(rng) * 13);
      Visit vis{time, {}};
      for (int c = 0; c < 1 + v % 3; ++c) vis.codes.push_back(pick(rng));
      s.push_back(vis);
    }
    Tape t;
    const auto out = f.enc->encode(t, s, trial % 2 ? &rng : nullptr);
    EXPECT_LE(manifold::manifold_residual(t.value(out.cls)), manifold::kManifoldTol);
    for (Var z : out.visits) EXPECT_LE(manifold::manifold_residual(t.value(z)), manifold::kManifoldTol);
  }
}

TEST(Encode, EuclideanTwinHasSameShapes) {
  Fixture h(small_config(manifold::Mode::lorentz));
  Fixture e(small_config(manifold::Mode::euclidean));
  EXPECT_EQ(h.store.scalar_count(), e.store.scalar_count());
  Tape t;
  const auto a = h.enc->encode(t, h.sample_sequence());
  const auto b = e.enc->encode(t, e.sample_sequence());
  EXPECT_EQ(t.size_of(a.cls), t.size_of(b.cls));
  EXPECT_EQ(t.value(b.cls)[0], 0.0);
  EXPECT_EQ(t.size_of(h.enc->diag_logits(t, a.cls)), t.size_of(e.enc->diag_logits(t, b.cls)));
}

TEST(DiagLogits, MonotoneAndLimit) {
  Fixture f(small_config());
  f.set_point(f.id("A11"), {0.5, 0.0, 0.0, 0.0});
  f.set_point(f.id("A12"), {2.0, 0.0, 0.0, 0.0});
  Tape t;
  const Var z = t.constant(manifold::LorentzPoint::origin(4).coords());
  const Vec logits = t.value(f.enc->diag_logits(t, z));
  const auto ia = *f.vocab.output_index(f.id("A11"));
  const auto ib = *f.vocab.output_index(f.id("A12"));
  EXPECT_GT(logits[ia], logits[ib]);
  f.store.get("enc.diag_scale_raw").value[0] = -60.0;
  const Vec flat = t.value(f.enc->diag_logits(t, z));
  for (double l : flat) EXPECT_NEAR(l, 0.0, 1e-20);
  for (double l : logits) {
    const double s = 1.0 / (1.0 + std::exp(-l));
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

TEST(Losses, ClosedForms) {
  Tape t;
  EXPECT_EQ(t.item(hinge_rad(t, t.constant({0.5}), t.constant({1.0}), 0.2)), 0.0);
  EXPECT_NEAR(t.item(hinge_rad(t, t.constant({1.0}), t.constant({0.9}), 0.2)), 0.3, 1e-12);
  EXPECT_EQ(t.item(hinge_rel(t, t.constant({0.5}), t.constant({1.0}), 0.2)), 0.0);
  EXPECT_NEAR(t.item(hinge_rel(t, t.constant({1.0}), t.constant({0.9}), 0.2)), 0.3, 1e-12);
  const Var tot = loss_total(t, t.scalar(1.0), t.scalar(0.4), t.scalar(0.2), 0.5, 0.5);
  EXPECT_NEAR(t.item(tot), 1.25, 1e-12);
  EXPECT_EQ(t.item(loss_total(t, t.scalar(0.7), t.scalar(0.4), t.scalar(0.2), 0.0, 0.5)), 0.7);
  EXPECT_THROW(hinge_rad(t, t.constant({1.0}), t.constant({1.0}), 0.0), ArgumentError);
}

TEST(Losses, RadialAndRelationalOnTable) {
  Fixture f(small_config());
  f.set_point(f.id("A"), {1.0, 0.0, 0.0, 0.0});
  f.set_point(f.id("A1"), {0.0, 0.9, 0.0, 0.0});
  Tape t;
  const std::pair<std::size_t, std::size_t> pair{f.id("A"), f.id("A1")};
  EXPECT_NEAR(t.item(f.enc->loss_rad(t, std::span(&pair, 1), 0.2)), 0.3, 1e-12);
  const std::pair<std::size_t, std::size_t> bad{f.id("A"), 999};
  EXPECT_THROW(f.enc->loss_rad(t, std::span(&bad, 1), 0.2), ArgumentError);
  // d(A, A1) = dist between radius-1 and radius-0.9 orthogonal points
  f.set_point(f.id("B"), {-1.0, 0.0, 0.0, 0.0});
  const hier::Triplet tr{f.id("A"), f.id("A1"), f.id("B")};
  const manifold::Geometry g(f.enc->config().geometry);
  const double dp = g.dist(f.enc->code_table().row(tr.anchor), f.enc->code_table().row(tr.positive));
  const double dn = g.dist(f.enc->code_table().row(tr.anchor), f.enc->code_table().row(tr.negative));
  EXPECT_NEAR(t.item(f.enc->loss_rel(t, std::span(&tr, 1), 0.2)), std::max(0.0, dp - dn + 0.2), 1e-12);
}

TEST(Losses, DiagBce) {
  Tape t;
  const Vec y{1, 0, 1};
  EXPECT_LE(t.item(loss_diag(t, t.constant({20, -20, 20}), y)), 1e-8);
  EXPECT_NEAR(t.item(loss_diag(t, t.constant({0, 0, 0}), y)), std::log(2.0), 1e-15);
  EXPECT_THROW(loss_diag(t, t.constant({0, 0}), y), DimensionError);
}

class EncoderGrad : public ::testing::TestWithParam<manifold::Mode> {};

TEST_P(EncoderGrad, TotalLossMatchesFiniteDifferences) {
  Fixture f(small_config(GetParam()), 3);
  f.spread_codes(0.7, 8);
  for (auto* p : f.store.all()) {
    if (p->id.find(".b") != std::string::npos || p->id == "enc.time" || p->id == "enc.type_offset") {
      std::mt19937_64 rng(p->value.size());
      std::normal_distribution<double> n(0.0, 0.3);
      for (double& x : p->value) x = n(rng);
    }
  }
  const Sequence s = f.sample_sequence();
  const Vec y = diag_targets(f.vocab, s.back().codes);
  const Sequence prefix(s.begin(), s.end() - 1);
  const auto pairs_trie = hier::extract_pairs(f.trie).pairs;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto [p, c] : pairs_trie) pairs.emplace_back(f.id(f.trie.name(p)), f.id(f.trie.name(c)));
  std::vector<hier::Triplet> trips;
  for (const auto& tr : hier::sample_triplets(f.trie, 20, 5).triplets) {
    trips.push_back({f.id(f.trie.name(tr.anchor)), f.id(f.trie.name(tr.positive)), f.id(f.trie.name(tr.negative))});
  }
  auto loss = [&](Tape& t) {
    const auto z = f.enc->encode(t, prefix);
    const Var ld = loss_diag(t, f.enc->diag_logits(t, z.cls), y);
    // large beta/alpha keep every hinge active
    return loss_total(t, ld, f.enc->loss_rad(t, pairs, 5.0), f.enc->loss_rel(t, trips, 5.0), 0.5, 0.5);
  };
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = ad::check_gradients(f.store, loss, seed);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param;
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, EncoderGrad, ::testing::Values(manifold::Mode::lorentz, manifold::Mode::euclidean));

TEST(Hierarchy, MarginsBecomeFeasible) {
  Fixture f(small_config());
  const auto pairs_trie = hier::extract_pairs(f.trie).pairs;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto [p, c] : pairs_trie) pairs.emplace_back(f.id(f.trie.name(p)), f.id(f.trie.name(c)));
  auto& codes = f.enc->code_table();
  optim::RiemannianAdam opt({&codes}, {});
  for (int step = 0; step < 1500; ++step) {
    std::vector<hier::Triplet> trips;
    for (const auto& tr : hier::sample_triplets(f.trie, 32, step).triplets) {
      trips.push_back({f.id(f.trie.name(tr.anchor)), f.id(f.trie.name(tr.positive)), f.id(f.trie.name(tr.negative))});
    }
    Tape t;
    codes.zero_grad();
    const Var l = loss_total(t, t.scalar(0.0), f.enc->loss_rad(t, pairs, 0.2), f.enc->loss_rel(t, trips, 0.2), 10.0, 0.5);
    t.backward(l);
    opt.step_with_lr(0.01, 0.0);
  }
  Tape t;
  EXPECT_EQ(t.item(f.enc->loss_rad(t, pairs, 0.2)), 0.0);
  std::vector<hier::Triplet> all;
  for (const auto& tr : hier::sample_triplets(f.trie, 500, 99).triplets) {
    all.push_back({f.id(f.trie.name(tr.anchor)), f.id(f.trie.name(tr.positive)), f.id(f.trie.name(tr.negative))});
  }
  EXPECT_EQ(t.item(f.enc->loss_rel(t, all, 0.2)), 0.0);
  const auto r = f.enc->radii();
  for (auto [p, c] : pairs) EXPECT_GE(r[c] - r[p], 0.2 - 1e-9);
}
