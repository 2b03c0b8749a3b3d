// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance --cli <path to lqa> [--only 1,3,9]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "lqa/encoder.hpp"
#include "lqa/harness.hpp"
#include "lqa/manifold.hpp"
#include "lqa/qa.hpp"

namespace fs = std::filesystem;
using namespace lqa;
using manifold::LorentzPoint;
using manifold::Vec;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Vec random_tangent(std::mt19937_64& rng, std::size_t dim, double max_norm) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.0, max_norm);
  Vec v(dim);
  double s = 0.0;
  for (double& x : v) x = n01(rng), s += x * x;
  const double target = u(rng);
  for (double& x : v) x *= target / std::sqrt(s);
  return v;
}

manifold::TangentVector scaled_tangent(std::mt19937_64& rng, const LorentzPoint& base, double max_norm) {
  auto t = manifold::project_to_tangent(base, random_tangent(rng, base.dim() + 1, 1.0));
  const double n = manifold::lorentz_norm(t.vec);
  const double target = std::uniform_real_distribution<double>(0.0, max_norm)(rng);
  for (double& c : t.vec) c *= target / n;
  return t;
}

double abs_residual(const LorentzPoint& x) {
  return std::abs(manifold::minkowski_inner(x.coords(), x.coords()) + 1.0);
}

double coord_gap(const LorentzPoint& a, const LorentzPoint& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.coords().size(); ++k) {
    m = std::max(m, std::abs(a.coords()[k] - b.coords()[k]) / std::max(1.0, std::abs(b.coords()[k])));
  }
  return m;
}

// ---------------------------------------------------------------- 1

Outcome geometry_suite() {
  const Timer timer;
  constexpr std::size_t kDim = 16;
  constexpr int kN = 10000;
  std::mt19937_64 rng(1601);
  double res = 0.0, res_abs = 0.0, rt = 0.0, rt_base = 0.0, rt_far = 0.0, sym = 0.0, tri = 0.0, agg = 0.0;
  bool axioms = true;
  for (int i = 0; i < kN; ++i) {
    const Vec v = random_tangent(rng, kDim, 10.0);
    const LorentzPoint x = manifold::exp0(v);
    const LorentzPoint y = manifold::exp0(random_tangent(rng, kDim, 10.0));
    const LorentzPoint z = manifold::exp0(random_tangent(rng, kDim, 10.0));
    const LorentzPoint b = manifold::exp0(random_tangent(rng, kDim, 1.0));
    const auto u = scaled_tangent(rng, b, 10.0);
    const LorentzPoint w = manifold::exp_map(b, u);
    for (const auto* p : {&x, &y, &z, &w}) {
      res = std::max(res, manifold::manifold_residual(p->coords()));
      res_abs = std::max(res_abs, abs_residual(*p));
    }

    const Vec back = manifold::log0(x);
    for (std::size_t k = 0; k < kDim; ++k) rt = std::max(rt, std::abs(back[k] - v[k]));
    rt = std::max(rt, coord_gap(manifold::exp0(manifold::log0(y)), y));
    const auto lu = manifold::log_map(b, w);
    for (std::size_t k = 0; k <= kDim; ++k) {
      rt_base = std::max(rt_base, std::abs(lu.vec[k] - u.vec[k]) / std::max(1.0, std::abs(u.vec[k])));
    }
    rt_base = std::max(rt_base, manifold::dist(manifold::exp_map(b, manifold::log_map(b, y)), y));
    rt_far = std::max(rt_far, manifold::dist(manifold::exp_map(x, manifold::log_map(x, y)), y));

    const double dxy = manifold::dist(x, y), dyx = manifold::dist(y, x);
    const double dyz = manifold::dist(y, z), dxz = manifold::dist(x, z);
    axioms = axioms && dxy >= 0.0 && manifold::dist(x, x) == 0.0 && (dxy > 0.0 || x == y);
    sym = std::max(sym, std::abs(dxy - dyx));
    tri = std::max(tri, dxz - dxy - dyz);

    const std::vector<LorentzPoint> one{x};
    agg = std::max(agg, coord_gap(manifold::hyp_agg(Vec{1.0}, one), x));
    Vec mv = v;
    for (double& c : mv) c = -c;
    const std::vector<LorentzPoint> pair{x, manifold::exp0(mv)};
    agg = std::max(agg, manifold::dist(manifold::hyp_agg(Vec{0.5, 0.5}, pair), LorentzPoint::origin(kDim)));
    const std::vector<LorentzPoint> three{x, y, z};
    const std::vector<LorentzPoint> rev{z, y, x};
    agg = std::max(agg, coord_gap(manifold::hyp_agg(Vec{0.0, 1.0, 0.0}, three), y));
    agg = std::max(agg, manifold::dist(manifold::hyp_agg(Vec{0.2, 0.3, 0.5}, three),
                                       manifold::hyp_agg(Vec{0.5, 0.3, 0.2}, rev)));
  }
  const double secs = timer.seconds();
  const bool pass = res <= 1e-9 && rt <= 1e-7 && rt_base <= 1e-7 && axioms && sym <= 1e-12 && tri <= 1e-9 &&
                    agg <= 1e-12 && secs < 10.0;
  return {pass, fmt("n=%d d=%zu residual %.2e (absolute %.2e), round trip %.2e at origin, %.2e at radius-1 bases "
                    "(%.2e at radius-10 bases, not gated), symmetry %.2e, triangle slack %.2e, agg cases %.2e, %.1fs",
                    kN, kDim, res, res_abs, rt, rt_base, rt_far, sym, tri, agg, secs)};
}

// ---------------------------------------------------------------- 2

Outcome gradient_audit() {
  const Timer timer;
  const auto ops = harness::gradcheck_registry();
  const auto rows = harness::run_gradcheck(ops, "all", 20, 100, 1e-4);
  bool pass = !rows.empty();
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& r : rows) {
    pass = pass && r.pass;
    if (!r.pass) failed += " " + r.name;
    if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = r.name;
  }
  auto has = [&](const std::string& prefix) {
    return std::any_of(ops.begin(), ops.end(), [&](const auto& o) { return o.name.rfind(prefix, 0) == 0; });
  };
  std::string missing;
  for (const char* p : {"geometry.", "encoder.attention", "qa.head_bool", "qa.head_concept", "qa.head_value",
                        "qa.head_count", "loss.diag", "loss.rad", "loss.rel", "loss.total"}) {
    if (!has(p)) missing += std::string(" ") + p;
  }
  const bool sentinel = !harness::run_gradcheck({harness::corrupted_gradcheck_op()}, "all", 20)[0].pass;
  const double secs = timer.seconds();
  pass = pass && missing.empty() && sentinel && secs < 120.0;
  return {pass, fmt("%zu ops, worst %.2e (%s), corrupted op rejected: %s, %.1fs%s%s", rows.size(), worst,
                    worst_name.c_str(), sentinel ? "yes" : "no", secs,
                    failed.empty() ? "" : (" failed:" + failed).c_str(),
                    missing.empty() ? "" : (" missing:" + missing).c_str())};
}

// ---------------------------------------------------------------- 3

Outcome loss_closed_forms() {
  double worst = 0.0;
  auto check = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  {
    ad::Tape t;
    check(t.item(enc::hinge_rad(t, t.constant({0.5}), t.constant({1.0}), 0.2)), 0.0);
    check(t.item(enc::hinge_rad(t, t.constant({1.0}), t.constant({0.9}), 0.2)), 0.3);
    check(t.item(enc::hinge_rel(t, t.constant({0.5}), t.constant({1.0}), 0.2)), 0.0);
    check(t.item(enc::hinge_rel(t, t.constant({1.0}), t.constant({0.9}), 0.2)), 0.3);
    const auto one = t.scalar(1.0);
    check(t.item(enc::loss_total(t, one, t.scalar(0.4), t.scalar(0.2), 0.5, 0.5)), 1.25);
    check(t.item(enc::loss_total(t, one, t.scalar(0.4), t.scalar(0.2), 0.0, 0.5)), 1.0);
  }
  // The same cases read off an embedding table, where radii and distances are geodesic.
  for (auto mode : {manifold::Mode::lorentz, manifold::Mode::euclidean}) {
    const auto trie = hier::build_trie_from_codes({"A", "A1", "B"});
    const auto vocab = enc::Vocabulary::build(trie, {}, {}, {});
    ad::ParamStore store;
    enc::EncoderConfig cfg;
    cfg.geometry = {mode, 4};
    cfg.layers = 0;
    enc::Encoder e(cfg, vocab, store, 1);
    const manifold::Geometry g(cfg.geometry);
    auto put = [&](const std::string& code, Vec spatial) {
      const Vec p = g.exp0(spatial);
      std::copy(p.begin(), p.end(), e.code_table().row(vocab.id(code)).begin());
    };
    const std::pair<std::size_t, std::size_t> pr{vocab.id("A"), vocab.id("A1")};
    const hier::Triplet tr{vocab.id("B"), vocab.id("A"), vocab.id("A1")};
    ad::Tape t;
    put("A", {0.5, 0, 0, 0});
    put("A1", {0, 1.0, 0, 0});
    check(t.item(e.loss_rad(t, std::span(&pr, 1), 0.2)), 0.0);
    put("A", {1.0, 0, 0, 0});
    put("A1", {0, 0.9, 0, 0});
    put("B", {0, 0, 0, 0});
    check(t.item(e.loss_rad(t, std::span(&pr, 1), 0.2)), 0.3);
    check(t.item(e.loss_rel(t, std::span(&tr, 1), 0.2)), 0.3);
    put("A", {0.5, 0, 0, 0});
    put("A1", {0, 1.0, 0, 0});
    check(t.item(e.loss_rel(t, std::span(&tr, 1), 0.2)), 0.0);
  }
  return {worst <= 1e-12, fmt("max deviation %.2e over 14 hand-evaluated cases", worst)};
}

// ---------------------------------------------------------------- 4

Outcome tree_embedding() {
  const Timer timer;
  const auto rows = harness::sarkar_check(0.1, {8, 12, 16, 32, 64}, {1, 2, 3, 4}, 8);
  double delta = 0.0, low = 1e300, high = 0.0;
  std::size_t max_n = 0, max_deg = 0;
  for (const auto& r : rows) {
    delta = std::max(delta, r.delta);
    low = std::min(low, r.low);
    high = std::max(high, r.high);
    max_n = std::max(max_n, r.nodes);
    max_deg = std::max(max_deg, r.max_degree);
  }
  const double secs = timer.seconds();
  const bool pass = rows.size() == 20 && delta == 0.0 && low >= 0.9 && high <= 1.1 && max_n <= 64 && max_deg <= 8 &&
                    secs < 60.0;
  return {pass, fmt("%zu trees (<= %zu nodes, degree <= %zu): delta %g, ratios [%.4f, %.4f], %.1fs", rows.size(),
                    max_n, max_deg, delta, low, high, secs)};
}

// ---------------------------------------------------------------- 5, 6

struct AblationRun {
  std::vector<harness::AblationRow> rows;
  std::vector<std::vector<harness::PipelineResult>> runs;
  double secs = 0.0;
};

const AblationRun& ablation() {
  static const AblationRun r = [] {
    const Timer timer;
    AblationRun a;
    const harness::RunConfig base;
    const auto d = harness::generate_dataset(base.data);
    a.rows = harness::run_ablation(base, d, nullptr, &a.runs);
    a.secs = timer.seconds();
    return a;
  }();
  return r;
}

Outcome radius_depth() {
  const auto& a = ablation();
  const harness::RunConfig base;
  const auto& lor = a.runs[static_cast<std::size_t>(harness::Variant::full)];
  const auto& euc = a.runs[static_cast<std::size_t>(harness::Variant::euclidean)];
  std::size_t ok = 0, ok_lorentz = 0;
  std::string per;
  for (std::size_t i = 0; i < lor.size(); ++i) {
    const auto& gl = lor[i].geometry;
    const auto& ge = euc[i].geometry;
    const bool l = gl.spearman_balanced >= 0.9 && gl.monotone;
    const bool gap = ge.spearman_balanced <= gl.spearman_balanced - 0.2;
    ok_lorentz += l;
    ok += l && gap;
    per += fmt(" [seed %llu: %.3f%s vs euclidean %.3f]", static_cast<unsigned long long>(base.seeds[i]),
               gl.spearman_balanced, gl.monotone ? " monotone" : "", ge.spearman_balanced);
  }
  return {ok >= 4, fmt("%zu/5 seeds meet all parts; correlation and monotone levels alone %zu/5;%s", ok, ok_lorentz,
                       per.c_str())};
}

Outcome ablation_order() {
  const auto& a = ablation();
  std::string per;
  for (const auto& r : a.rows) per += fmt(" %s %.2f+-%.2f;", harness::to_string(r.variant), r.mean, r.std);
  const bool pass = harness::ablation_ordering_holds(a.rows, 3.0) && a.secs < 1800.0;
  return {pass, fmt("mean test EM:%s %.0fs for 20 runs", per.c_str(), a.secs)};
}

// ---------------------------------------------------------------- 7

Outcome head_contracts() {
  const auto r = qa::run_head_contracts(42, 1e-3, 5000);
  const bool pass = r.items.size() == 20 && r.max_loss <= 1e-3 && r.null_bool && r.null_concept && r.null_value &&
                    r.null_count;
  return {pass, fmt("%zu questions, max loss %.2e after %zu steps, no-answer cases bool %d concept %d value %d "
                    "count %d",
                    r.items.size(), r.max_loss, r.steps, r.null_bool, r.null_concept, r.null_value, r.null_count)};
}

// ---------------------------------------------------------------- 8

Outcome learnability() {
  double recall[2] = {0, 0};
  double chance = 0.0;
  const double rho[2] = {0.0, 0.9};
  for (int i = 0; i < 2; ++i) {
    harness::RunConfig c;
    c.data.n_patients = 3000;
    c.data.transition_coherence = rho[i];
    const auto d = harness::generate_dataset(c.data);
    const auto r = harness::pretrain(c, d);
    const auto inst = harness::pretrain_instances(r.model->vocab, d, d.split_records(data::Split::test), false);
    recall[i] = 100.0 * harness::recall_at_k(*r.model, inst, 10);
    chance = 100.0 * 10.0 / static_cast<double>(r.model->vocab.diag_outputs().size());
  }
  const bool pass = std::abs(recall[0] - chance) <= 2.0 && recall[1] - chance >= 15.0;
  return {pass, fmt("recall@10 %.2f at rho=0, %.2f at rho=0.9, chance %.2f", recall[0], recall[1], chance)};
}

// ---------------------------------------------------------------- 9

Outcome determinism(const std::string& cli) {
  if (cli.empty()) return {false, "no --cli binary given"};
  const std::string exe = fs::absolute(cli).string();
  const fs::path root = fs::temp_directory_path() / ("lqa_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<std::string> steps{"gen-data", "pretrain", "train-qa", "eval"};
  for (const char* run : {"a", "b"}) {
    fs::create_directories(root / run);
    for (const auto& s : steps) {
      const std::string cmd = "cd '" + (root / run).string() + "' && '" + exe + "' " + s + " > log_" + s + ".txt 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, "command failed: lqa " + s};
    }
  }
  std::size_t files = 0;
  std::string differ;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file() || e.path().filename().string().rfind("log_", 0) == 0) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ++files;
    if (!fs::exists(root / "b" / rel) ||
        harness::file_sha256(e.path().string()) != harness::file_sha256((root / "b" / rel).string())) {
      differ += " " + rel.string();
    }
  }
  fs::remove_all(root);
  return {differ.empty() && files >= 12,
          fmt("%zu output files compared across two runs%s", files, differ.empty() ? ", all SHA-256 equal"
                                                                                   : (", differ:" + differ).c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cli;
  std::vector<int> only;
  app.add_option("--cli", cli, "Path to the lqa binary");
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"geometry suite", geometry_suite}},
      {2, {"gradient audit", gradient_audit}},
      {3, {"loss closed forms", loss_closed_forms}},
      {4, {"tree hyperbolicity and embedding distortion", tree_embedding}},
      {5, {"radius grows with depth, lorentz ahead of euclidean", radius_depth}},
      {6, {"ablation ordering", ablation_order}},
      {7, {"QA head contracts", head_contracts}},
      {8, {"learnability control", learnability}},
      {9, {"determinism", [&] { return determinism(cli); }}},
  };
  int failed = 0;
  for (const auto& [id, c] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s | %s\n", id, o.pass ? "PASS" : "FAIL", c.first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
