#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "lqa/errors.hpp"
#include "lqa/geo_ops.hpp"
#include "lqa/harness.hpp"

namespace lqa::harness {

// --------------------------------------------------------------------- eval

EvalReport score(const std::vector<data::QType>& types, const std::vector<data::Answer>& pred,
                 const std::vector<data::Answer>& gold) {
  if (types.size() != pred.size() || pred.size() != gold.size()) {
    throw DimensionError("prediction and gold lists differ in length");
  }
  EvalReport r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < types.size(); ++i) {
    TypeScore& s = r.per_type[static_cast<int>(types[i])];
    ++s.n;
    if (data::answers_equal(types[i], pred[i], gold[i])) {
      ++s.correct;
      ++correct;
    }
  }
  r.n = types.size();
  r.overall = r.n ? 100.0 * static_cast<double>(correct) / static_cast<double>(r.n) : 0.0;
  return r;
}

json report_json(const EvalReport& r) {
  json per_type = json::object();
  json weights = json::object();
  for (data::QType t : data::kQTypes) {
    const TypeScore& s = r.per_type[static_cast<int>(t)];
    per_type[data::to_string(t)] = {{"n", s.n}, {"correct", s.correct}, {"accuracy", s.accuracy()}};
    weights[data::to_string(t)] = r.n ? static_cast<double>(s.n) / static_cast<double>(r.n) : 0.0;
  }
  return json{{"split", r.split},       {"seed", r.seed},       {"config_hash", r.config_hash},
              {"n", r.n},               {"overall", r.overall}, {"per_type", per_type},
              {"weights", weights}};
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream ss;
  ss << "type,n,correct,accuracy\n";
  char buf[64];
  for (data::QType t : data::kQTypes) {
    const TypeScore& s = r.per_type[static_cast<int>(t)];
    std::snprintf(buf, sizeof buf, "%.4f", s.accuracy());
    ss << data::to_string(t) << ',' << s.n << ',' << s.correct << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.4f", r.overall);
  ss << "overall," << r.n << ',' << static_cast<std::size_t>(std::llround(r.overall * r.n / 100.0)) << ',' << buf
     << '\n';
  return ss.str();
}

std::string predictions_jsonl(const Predictions& p) {
  std::string out;
  for (std::size_t i = 0; i < p.qids.size(); ++i) {
    out += "{\"qid\": " + json(p.qids[i]).dump() + ", \"type\": \"" + data::to_string(p.types[i]) +
           "\", \"pred\": " + data::answer_json(p.types[i], p.pred[i]) +
           ", \"gold\": " + data::answer_json(p.types[i], p.gold[i]) +
           ", \"correct\": " + (data::answers_equal(p.types[i], p.pred[i], p.gold[i]) ? "true" : "false") + "}\n";
  }
  return out;
}

// ----------------------------------------------------------------- geometry

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman inputs differ in length");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double balanced_spearman(const std::vector<std::size_t>& depth, const std::vector<double>& value, std::size_t draws,
                         std::uint64_t seed) {
  if (depth.size() != value.size()) throw DimensionError("spearman inputs differ in length");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < depth.size(); ++i) groups[depth[i]].push_back(i);
  if (groups.size() < 2 || draws == 0) return 0.0;
  std::size_t m = depth.size();
  for (const auto& [d, g] : groups) m = std::min(m, g.size());
  std::mt19937_64 rng(seed);
  double sum = 0.0;
  for (std::size_t k = 0; k < draws; ++k) {
    std::vector<double> x, y;
    for (auto& [d, g] : groups) {
      std::shuffle(g.begin(), g.end(), rng);
      for (std::size_t i = 0; i < m; ++i) {
        x.push_back(static_cast<double>(d));
        y.push_back(value[g[i]]);
      }
    }
    sum += spearman(x, y);
  }
  return sum / static_cast<double>(draws);
}

GeometryReport geometry_report(const EncoderModel& m, const hier::CodeTrie& t, std::uint64_t seed) {
  const manifold::Geometry geom(m.config.geometry);
  const auto& table = m.encoder->code_table();
  std::vector<std::size_t> depth;
  std::vector<double> radius;
  std::vector<double> depth_d;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t.synthetic_root() && i == t.root()) continue;
    depth.push_back(static_cast<std::size_t>(t.depth(i)));
    depth_d.push_back(static_cast<double>(t.depth(i)));
    radius.push_back(geom.radius(table.row(m.vocab.id(t.name(i)))));
  }
  GeometryReport g;
  std::map<std::size_t, std::vector<double>> by_depth;
  for (std::size_t i = 0; i < depth.size(); ++i) by_depth[depth[i]].push_back(radius[i]);
  for (const auto& [d, rs] : by_depth) {
    LevelStat s;
    s.depth = d;
    s.n = rs.size();
    s.mean = std::accumulate(rs.begin(), rs.end(), 0.0) / static_cast<double>(rs.size());
    double v = 0.0;
    for (double r : rs) v += (r - s.mean) * (r - s.mean);
    s.std = std::sqrt(v / static_cast<double>(rs.size()));
    g.levels.push_back(s);
  }
  g.monotone = !g.levels.empty();
  for (std::size_t k = 1; k < g.levels.size(); ++k) g.monotone = g.monotone && g.levels[k].mean > g.levels[k - 1].mean;
  g.spearman_all = spearman(depth_d, radius);
  g.spearman_balanced = balanced_spearman(depth, radius, 200, seed);
  return g;
}

std::string geometry_csv(const GeometryReport& g) {
  std::ostringstream ss;
  ss << "depth,n_codes,mean_radius,std_radius\n";
  char buf[128];
  for (const auto& l : g.levels) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.10f,%.10f\n", l.depth, l.n, l.mean, l.std);
    ss << buf;
  }
  std::snprintf(buf, sizeof buf, "# spearman_balanced,%.6f\n# spearman_all,%.6f\n# monotone,%s\n",
                g.spearman_balanced, g.spearman_all, g.monotone ? "true" : "false");
  ss << buf;
  return ss.str();
}

// ---------------------------------------------------------------- ablation

const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_hier: return "w/o L_hier";
    case Variant::no_pretrain: return "w/o pretraining";
    case Variant::euclidean: return "euclidean";
  }
  return "full";
}

RunConfig variant_config(const RunConfig& base, Variant v) {
  RunConfig c = base;
  switch (v) {
    case Variant::full: break;
    case Variant::no_hier: c.stage1.lambda = 0.0; break;
    case Variant::no_pretrain: c.pretrain = false; break;
    case Variant::euclidean: c.model.geometry = "euclidean"; break;
  }
  return c;
}

PipelineResult run_pipeline(const RunConfig& c, const Dataset& d, std::ostream* log) {
  PipelineResult out;
  std::unique_ptr<EncoderModel> em;
  if (c.pretrain) {
    auto pr = pretrain(c, d, log);
    out.stage1_epochs = pr.log.size();
    em = std::move(pr.model);
  } else {
    em = new_encoder_model(c, d, c.seed);
  }
  out.geometry = geometry_report(*em, d.trie, c.seed);
  auto qr = train_qa(c, d, std::move(em), log);
  out.stage2_epochs = qr.log.size();
  const auto p = predict_split(*qr.bundle, d, data::Split::test);
  out.report = score(p.types, p.pred, p.gold);
  out.report.seed = c.seed;
  out.report.config_hash = config_hash(c);
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& d, std::ostream* log,
                                      std::vector<std::vector<PipelineResult>>* runs) {
  std::vector<AblationRow> rows;
  if (runs) runs->assign(std::size(kVariants), {});
  for (Variant v : kVariants) {
    AblationRow row;
    row.variant = v;
    for (std::uint64_t s : base.seeds) {
      RunConfig c = variant_config(base, v);
      c.seed = s;
      const auto r = run_pipeline(c, d, nullptr);
      row.overall.push_back(r.report.overall);
      if (log) *log << to_string(v) << " seed " << s << " EM " << r.report.overall << '\n';
      if (runs) (*runs)[static_cast<std::size_t>(v)].push_back(r);
    }
    const double n = static_cast<double>(row.overall.size());
    row.mean = std::accumulate(row.overall.begin(), row.overall.end(), 0.0) / n;
    double var = 0.0;
    for (double x : row.overall) var += (x - row.mean) * (x - row.mean);
    row.std = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream ss;
  ss << "variant,mean_em,std_em,per_seed\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,", r.mean, r.std);
    ss << to_string(r.variant) << ',' << buf;
    for (std::size_t i = 0; i < r.overall.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.4f", i ? ";" : "", r.overall[i]);
      ss << buf;
    }
    ss << '\n';
  }
  return ss.str();
}

bool ablation_ordering_holds(const std::vector<AblationRow>& rows, double min_gap) {
  const AblationRow* full = nullptr;
  for (const auto& r : rows) {
    if (r.variant == Variant::full) full = &r;
  }
  if (!full) return false;
  for (const auto& r : rows) {
    if (r.variant == Variant::full) continue;
    if (full->mean < r.mean) return false;
    if (r.variant == Variant::no_pretrain && full->mean - r.mean < min_gap) return false;
  }
  return true;
}

// ------------------------------------------------------------------- sarkar

hier::CodeTrie random_tree(std::mt19937_64& rng, std::size_t n, std::size_t max_degree) {
  if (n == 0) throw ArgumentError("tree needs at least one node");
  if (max_degree < 2 && n > 2) throw ArgumentError("max_degree must be at least 2");
  std::vector<std::size_t> deg(n, 0);
  std::vector<hier::Edge> edges;
  for (std::size_t v = 1; v < n; ++v) {
    std::vector<std::size_t> open;
    for (std::size_t p = 0; p < v; ++p) {
      if (deg[p] + 1 <= max_degree) open.push_back(p);
    }
    const std::size_t p = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
    ++deg[p];
    ++deg[v];
    edges.emplace_back("n" + std::to_string(p), "n" + std::to_string(v));
  }
  if (edges.empty()) return hier::build_trie_from_codes({"n0"});
  return hier::build_trie(edges);
}

std::vector<SarkarRow> sarkar_check(double eps, const std::vector<std::size_t>& sizes,
                                    const std::vector<std::uint64_t>& seeds, std::size_t max_degree) {
  if (!(eps > 0.0 && eps <= 1.0)) throw ArgumentError("epsilon must lie in (0, 1]");
  std::vector<SarkarRow> rows;
  for (std::uint64_t s : seeds) {
    for (std::size_t n : sizes) {
      std::mt19937_64 rng(s * 1000003ULL + n);
      const auto t = random_tree(rng, n, max_degree);
      SarkarRow row;
      row.seed = s;
      row.nodes = n;
      row.max_degree = t.max_degree();
      row.delta = hier::gromov_delta(t, s);
      const auto e = hier::sarkar_embed(t, eps);
      const auto dd = hier::distortion(e, t);
      row.tau = e.tau();
      row.low = dd.low;
      row.high = dd.high;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string sarkar_csv(const std::vector<SarkarRow>& rows) {
  std::ostringstream ss;
  ss << "seed,nodes,max_degree,delta,tau,low,high\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%zu,%zu,%.17g,%.10f,%.10f,%.10f\n", static_cast<unsigned long long>(r.seed),
                  r.nodes, r.max_degree, r.delta, r.tau, r.low, r.high);
    ss << buf;
  }
  return ss.str();
}

}  // namespace lqa::harness
