#include "lqa/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lqa/errors.hpp"
#include "lqa/manifold.hpp"

using namespace lqa;
using namespace lqa::optim;
using lqa::ad::ParamKind;
using lqa::ad::ParamStore;

TEST(Schedule, WarmupAndCosine) {
  const Schedule s{0.01, 0.1, 1000};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 0.005);
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 0.01);
  EXPECT_NEAR(lr_at(s, 550), 0.005, 1e-15);
  EXPECT_NEAR(lr_at(s, 1000), 0.0, 1e-18);
  EXPECT_GE(lr_at(s, 1000), 0.0);
  EXPECT_THROW(lr_at(s, 1001), ArgumentError);
  // continuity at the warmup boundary
  EXPECT_NEAR(lr_at(s, 99), lr_at(s, 100), 0.01 * 0.011);
}

TEST(Schedule, NoWarmup) {
  const Schedule s{1.0, 0.0, 10};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1.0);
}

TEST(RiemannianGrad, TangentAndProjectionCases) {
  ParamStore ps;
  auto& p = ps.add("p", ParamKind::manifold_point, 2, 4);
  const auto x0 = manifold::exp0(manifold::Vec{0.3, -0.2, 0.5});
  const auto x1 = manifold::exp0(manifold::Vec{-1.0, 0.4, 0.1});
  std::copy(x0.coords().begin(), x0.coords().end(), p.value.begin());
  std::copy(x1.coords().begin(), x1.coords().end(), p.value.begin() + 4);
  // row 0: euclidean grad = M x0, which flips to x0 itself -> projects to 0
  for (std::size_t i = 0; i < 4; ++i) p.grad[i] = (i == 0 ? -1.0 : 1.0) * x0.coords()[i];
  // row 1: random
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (std::size_t i = 4; i < 8; ++i) p.grad[i] = n(rng);
  const auto rg = riemannian_grad(p);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rg[i], 0.0, 1e-12);
  EXPECT_LE(std::abs(manifold::minkowski_inner(x1.coords(), std::span<const double>(rg.data() + 4, 4))), 1e-8);

  // a flipped gradient that is already tangent is unchanged
  const auto t = manifold::project_to_tangent(x1, manifold::Vec{0.1, 0.7, -0.3, 0.2}).vec;
  for (std::size_t i = 0; i < 4; ++i) p.grad[4 + i] = (i == 0 ? -1.0 : 1.0) * t[i];
  const auto rg2 = riemannian_grad(p);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rg2[4 + i], t[i], 1e-12);
}

TEST(Adam, FirstStepOnScalar) {
  ParamStore ps;
  auto& w = ps.add("w", ParamKind::euclidean, 1, 1);
  w.value = {2.0};
  w.grad = {1.0};
  RiemannianAdam opt({&w}, AdamConfig{});
  opt.step_with_lr(0.1, 10.0);
  EXPECT_NEAR(w.value[0], 2.0 - 0.1, 1e-8);
  EXPECT_EQ(opt.states()[0].step, 1u);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  ParamStore ps;
  auto& w = ps.add("w", ParamKind::euclidean, 1, 3);
  auto& p = ps.add("p", ParamKind::manifold_point, 1, 3);
  w.value = {1, 2, 3};
  const auto x = manifold::exp0(manifold::Vec{0.4, 0.1});
  p.value = x.coords();
  RiemannianAdam opt({&w, &p}, AdamConfig{});
  opt.step_with_lr(0.1, 1.0);
  EXPECT_EQ(w.value, (ad::Vec{1, 2, 3}));
  EXPECT_EQ(p.value, x.coords());
  EXPECT_EQ(opt.states()[1].step, 1u);
}

TEST(Adam, ManifoldParameterStaysOnHyperboloid) {
  ParamStore ps;
  auto& p = ps.add("p", ParamKind::manifold_point, 5, 9);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (std::size_t r = 0; r < 5; ++r) {
    manifold::Vec v(8);
    for (double& x : v) x = 0.3 * n(rng);
    const auto pt = manifold::exp0(v);
    std::copy(pt.coords().begin(), pt.coords().end(), p.value.begin() + r * 9);
  }
  RiemannianAdam opt({&p}, AdamConfig{});
  for (int s = 0; s < 1000; ++s) {
    for (double& g : p.grad) g = n(rng);
    opt.step_with_lr(0.05, 1.0);
    for (std::size_t r = 0; r < 5; ++r) {
      ASSERT_LE(manifold::manifold_residual(p.row(r)), manifold::kManifoldTol);
    }
  }
}

TEST(Adam, ClipsGlobalNorm) {
  ParamStore ps;
  auto& a = ps.add("a", ParamKind::euclidean, 1, 2);
  a.grad = {3.0, 4.0};
  RiemannianAdam opt({&a}, AdamConfig{});
  EXPECT_DOUBLE_EQ(opt.step_with_lr(0.0, 1.0), 5.0);
  // m after one clipped step is (1-beta1) * g / 5
  EXPECT_NEAR(opt.states()[0].m[0], 0.1 * 0.6, 1e-15);
}

TEST(Adam, RejectsNonFiniteGradient) {
  ParamStore ps;
  auto& a = ps.add("embedding", ParamKind::euclidean, 1, 2);
  a.grad = {NAN, 0.0};
  RiemannianAdam opt({&a}, AdamConfig{});
  try {
    opt.step_with_lr(0.1, 1.0);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("embedding"), std::string::npos);
  }
}

TEST(Adam, WeightDecaySkipsManifoldPoints) {
  ParamStore ps;
  auto& e = ps.add("e", ParamKind::euclidean, 1, 1);
  auto& p = ps.add("p", ParamKind::manifold_point, 1, 2);
  e.value = {1.0};
  const auto x = manifold::exp0(manifold::Vec{0.5});
  p.value = x.coords();
  RiemannianAdam opt({&e, &p}, AdamConfig{0.9, 0.999, 1e-8, 0.01});
  opt.step_with_lr(0.1, 1.0);
  EXPECT_DOUBLE_EQ(e.value[0], 1.0 - 0.1 * 0.01);
  EXPECT_EQ(p.value, x.coords());
}

TEST(Adam, MinimizesDistanceOnManifold) {
  // Pull a point toward a target; checks that the retraction moves downhill.
  ParamStore ps;
  auto& p = ps.add("p", ParamKind::manifold_point, 1, 3);
  p.value = manifold::LorentzPoint::origin(2).coords();
  const auto target = manifold::exp0(manifold::Vec{1.0, -0.5});
  RiemannianAdam opt({&p}, AdamConfig{});
  for (int s = 0; s < 400; ++s) {
    // d/dx of -<x, target>_L (monotone in distance)
    p.grad = {target.coords()[0], -target.coords()[1], -target.coords()[2]};
    opt.step_with_lr(0.01, 0.0);
  }
  const auto x = manifold::LorentzPoint::from_coords(p.value);
  EXPECT_LE(manifold::dist(x, target), 0.05);
}
