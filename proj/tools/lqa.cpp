// Command-line entry point: data generation, both training stages,
// evaluation and the diagnostic reports.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "lqa/errors.hpp"
#include "lqa/harness.hpp"

namespace fs = std::filesystem;
using namespace lqa;
using harness::json;
using harness::RunConfig;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kConfigError = 2;

struct Globals {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string geometry;
  bool paper = false;
  std::string out;
  bool dump = false;
};

RunConfig resolve(const Globals& g, bool data_out) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : harness::load_config(g.config_path);
  if (g.paper) c = harness::paper_scale(c);
  if (g.seed_set) {
    c.seed = g.seed;
    if (data_out) c.data.seed = g.seed;
  }
  if (!g.geometry.empty()) c.model.geometry = g.geometry;
  if (!g.out.empty()) {
    if (data_out) {
      c.data_dir = g.out;
    } else {
      c.checkpoint_dir = g.out;
      c.report_dir = g.out;
    }
  }
  c.validate();
  return c;
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write '" + path + "'");
}

std::string stage1_csv(const std::vector<harness::Stage1Epoch>& log) {
  std::string s = "epoch,loss,l_diag,l_rad,l_rel,val_loss\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.loss, e.l_diag, e.l_rad, e.l_rel,
                  e.val_loss);
    s += buf;
  }
  return s;
}

std::string stage2_csv(const std::vector<harness::Stage2Epoch>& log) {
  std::string s = "epoch,loss,val_em\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.epoch, e.loss, e.val_em);
    s += buf;
  }
  return s;
}

data::Split split_from(const std::string& s) {
  if (s == "train") return data::Split::train;
  if (s == "valid") return data::Split::valid;
  if (s == "test") return data::Split::test;
  throw ConfigError("split must be train, valid or test");
}

void print_report(const harness::EvalReport& r) {
  std::printf("%-10s %6s %9s\n", "type", "n", "EM(%)");
  for (data::QType t : data::kQTypes) {
    const auto& s = r.per_type[static_cast<int>(t)];
    std::printf("%-10s %6zu %9.2f\n", data::to_string(t), s.n, s.accuracy());
  }
  std::printf("%-10s %6zu %9.2f\n", "overall", r.n, r.overall);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperbolic patient encoder and EHR question answering"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option_function<std::uint64_t>(
      "--seed", [&](std::uint64_t s) { g.seed = s, g.seed_set = true; }, "Run seed (data seed for gen-data)");
  app.add_option("--geometry", g.geometry, "lorentz or euclidean")->check(CLI::IsMember({"lorentz", "euclidean"}));
  app.add_flag("--paper-scale", g.paper, "Full-scale epochs, learning rates and dims");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--dump-config", g.dump, "Print the resolved configuration and exit");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
  auto* pre = app.add_subcommand("pretrain", "Stage 1: train the patient encoder");
  std::string enc_ckpt;
  auto* tqa = app.add_subcommand("train-qa", "Stage 2: train the QA heads on a frozen encoder");
  tqa->add_option("--checkpoint", enc_ckpt, "Encoder checkpoint (default <checkpoint_dir>/encoder.json)");
  std::string qa_ckpt;
  std::string split = "test";
  bool multi = false;
  auto* ev = app.add_subcommand("eval", "Exact-match evaluation");
  ev->add_option("--checkpoint", qa_ckpt, "QA checkpoint (default <checkpoint_dir>/qa.json)");
  ev->add_option("--split", split, "train, valid or test");
  ev->add_flag("--multi-seed", multi, "Train and evaluate once per configured seed; report mean and std");
  std::string geo_ckpt;
  auto* geo = app.add_subcommand("geometry-report", "Radius against depth for the code table");
  geo->add_option("--checkpoint", geo_ckpt, "Encoder checkpoint (default <checkpoint_dir>/encoder.json)");
  bool assert_order = false;
  double min_gap = 3.0;
  auto* abl = app.add_subcommand("ablate", "Full model against its three ablations");
  abl->add_flag("--assert-ordering", assert_order, "Fail unless full >= each variant and beats w/o pretraining");
  abl->add_option("--min-gap", min_gap, "Required lead over w/o pretraining, in points");
  double eps = 0.1;
  std::vector<std::size_t> sizes{8, 12, 16, 32, 64};
  std::vector<std::uint64_t> sk_seeds{1, 2, 3, 4};
  std::size_t max_degree = 8;
  auto* sk = app.add_subcommand("sarkar-check", "Tree hyperbolicity and embedding distortion");
  sk->add_option("--epsilon", eps, "Distortion budget in (0, 1]");
  sk->add_option("--sizes", sizes, "Tree sizes")->delimiter(',');
  sk->add_option("--seeds", sk_seeds, "Tree seeds")->delimiter(',');
  sk->add_option("--max-degree", max_degree, "Degree cap");
  std::string selector = "all";
  std::size_t coords = 100;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of every differentiable op");
  gc->add_option("--select", selector, "Op name prefix, or all");
  gc->add_option("--coords", coords, "Coordinates probed per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    const bool data_out = gen->parsed();
    const RunConfig c = resolve(g, data_out);
    if (g.dump) {
      std::cout << harness::to_json(c).dump(2) << '\n';
      return kOk;
    }
    const std::string hash = harness::config_hash(c);

    if (gen->parsed()) {
      const auto d = harness::generate_dataset(c.data);
      harness::write_dataset(d, c.data_dir);
      std::cout << data::format_stats(data::compute_stats(d.records, d.qa));
      for (const char* f : {"hierarchy.edges", "patients.jsonl", "qa.jsonl"}) {
        std::cout << harness::file_sha256(c.data_dir + "/" + f) << "  " << f << '\n';
      }
      return kOk;
    }
    if (pre->parsed()) {
      const auto d = harness::load_dataset(c.data_dir);
      auto r = harness::pretrain(c, d, &std::cout);
      const std::string path = c.checkpoint_dir + "/encoder.json";
      harness::save_encoder(path, *r.model,
                            {{"config_hash", hash},
                             {"config", harness::to_json(c)},
                             {"best_epoch", r.best_epoch},
                             {"best_val_loss", r.best_val},
                             {"epochs_run", r.log.size()}});
      write_text(c.report_dir + "/pretrain_log.csv", stage1_csv(r.log));
      std::cout << "best epoch " << r.best_epoch << " val " << r.best_val << "\nwrote " << path << '\n';
      return kOk;
    }
    if (tqa->parsed()) {
      const std::string in = enc_ckpt.empty() ? c.checkpoint_dir + "/encoder.json" : enc_ckpt;
      if (!fs::exists(in)) throw ConfigError("missing encoder checkpoint '" + in + "'");
      const auto d = harness::load_dataset(c.data_dir);
      auto r = harness::train_qa(c, d, harness::load_encoder(in), &std::cout);
      const std::string path = c.checkpoint_dir + "/qa.json";
      harness::save_qa(path, *r.bundle,
                       {{"config_hash", hash},
                        {"best_epoch", r.best_epoch},
                        {"best_val_em", r.best_val_em},
                        {"init_val_em", r.init_val_em}});
      write_text(c.report_dir + "/train_qa_log.csv", stage2_csv(r.log));
      std::cout << "encoder hash before " << r.encoder_hash_before << "\nencoder hash after  "
                << r.encoder_hash_after << "\nbest val EM " << r.best_val_em << "\nwrote " << path << '\n';
      return kOk;
    }
    if (ev->parsed()) {
      const std::string in = qa_ckpt.empty() ? c.checkpoint_dir + "/qa.json" : qa_ckpt;
      if (!multi && !fs::exists(in)) throw ConfigError("missing qa checkpoint '" + in + "'");
      const auto d = harness::load_dataset(c.data_dir);
      if (multi) {
        std::vector<double> em;
        json runs = json::array();
        for (std::uint64_t s : c.seeds) {
          RunConfig cs = c;
          cs.seed = s;
          const auto r = harness::run_pipeline(cs, d);
          em.push_back(r.report.overall);
          runs.push_back(harness::report_json(r.report));
          std::printf("seed %llu EM %.2f\n", static_cast<unsigned long long>(s), r.report.overall);
        }
        const double mean = std::accumulate(em.begin(), em.end(), 0.0) / static_cast<double>(em.size());
        double var = 0.0;
        for (double x : em) var += (x - mean) * (x - mean);
        const double sd = em.size() > 1 ? std::sqrt(var / static_cast<double>(em.size() - 1)) : 0.0;
        harness::write_json_file(c.report_dir + "/eval_multi_seed.json",
                                 {{"config_hash", hash}, {"mean", mean}, {"std", sd}, {"runs", runs}});
        std::printf("overall EM %.2f +- %.2f over %zu seeds\n", mean, sd, em.size());
        return kOk;
      }
      const auto b = harness::load_qa(in);
      const auto p = harness::predict_split(*b, d, split_from(split));
      auto r = harness::score(p.types, p.pred, p.gold);
      r.seed = c.seed;
      r.split = split;
      r.config_hash = hash;
      harness::write_json_file(c.report_dir + "/eval_" + split + ".json", harness::report_json(r));
      write_text(c.report_dir + "/eval_" + split + ".csv", harness::report_csv(r));
      write_text(c.report_dir + "/predictions_" + split + ".jsonl", harness::predictions_jsonl(p));
      print_report(r);
      return kOk;
    }
    if (geo->parsed()) {
      const std::string in = geo_ckpt.empty() ? c.checkpoint_dir + "/encoder.json" : geo_ckpt;
      if (!fs::exists(in)) throw ConfigError("missing encoder checkpoint '" + in + "'");
      const auto d = harness::load_dataset(c.data_dir);
      const auto m = harness::load_encoder(in);
      const auto r = harness::geometry_report(*m, d.trie, c.seed);
      const std::string csv = harness::geometry_csv(r);
      write_text(c.report_dir + "/geometry.csv", csv);
      std::cout << csv;
      return kOk;
    }
    if (abl->parsed()) {
      const auto d = harness::load_dataset(c.data_dir);
      const auto rows = harness::run_ablation(c, d, &std::cout);
      const std::string csv = harness::ablation_csv(rows);
      write_text(c.report_dir + "/ablation.csv", csv);
      std::cout << csv;
      if (assert_order) {
        const bool ok = harness::ablation_ordering_holds(rows, min_gap);
        std::cout << "ordering " << (ok ? "holds" : "violated") << '\n';
        return ok ? kOk : kFailed;
      }
      return kOk;
    }
    if (sk->parsed()) {
      const auto rows = harness::sarkar_check(eps, sizes, sk_seeds, max_degree);
      const std::string csv = harness::sarkar_csv(rows);
      write_text(c.report_dir + "/sarkar.csv", csv);
      std::cout << csv;
      bool ok = true;
      for (const auto& r : rows) ok = ok && r.delta == 0.0 && r.low >= 1.0 - eps && r.high <= 1.0 + eps;
      std::cout << (ok ? "all trees within bounds" : "bound violated") << '\n';
      return ok ? kOk : kFailed;
    }
    if (gc->parsed()) {
      const auto rows = harness::run_gradcheck(harness::gradcheck_registry(), selector, c.seed, coords);
      bool ok = true;
      for (const auto& r : rows) {
        std::printf("%-36s %4zu coords  max rel err %.3e  %s\n", r.name.c_str(), r.coords, r.max_rel_error,
                    r.pass ? "pass" : "FAIL");
        ok = ok && r.pass;
      }
      return ok ? kOk : kFailed;
    }
    std::cout << app.help();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
}
