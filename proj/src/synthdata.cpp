#include "lqa/synthdata.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lqa/errors.hpp"

namespace lqa::data {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string fmt_real(double v) {
  if (!std::isfinite(v)) throw DataError("non-finite number in output");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (unsigned char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (c < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += static_cast<char>(c);
        }
    }
  }
  return out + "\"";
}

std::string string_array(const std::vector<std::string>& xs) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + quote(xs[i]);
  return out + "]";
}

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& xs) {
  return xs[std::uniform_int_distribution<std::size_t>(0, xs.size() - 1)(rng)];
}

bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

/// Leaf -> parent group, depth-1 chapter; chapter -> leaves, group -> leaves.
struct Layout {
  std::map<std::string, std::string> group_of, chapter_of;
  std::map<std::string, std::vector<std::string>> group_leaves, chapter_leaves;
  std::vector<std::string> groups, chapters;
};

Layout layout_of(const GeneratedHierarchy& h) {
  Layout L;
  const auto& t = h.trie;
  for (const auto& leaf : h.leaves) {
    const std::size_t id = t.id(leaf);
    const std::string group = t.parent(id) >= 0 && static_cast<std::size_t>(t.parent(id)) != t.root()
                                  ? t.name(static_cast<std::size_t>(t.parent(id)))
                                  : leaf;
    const std::string chapter = t.name(t.branch(id));
    L.group_of[leaf] = group;
    L.chapter_of[leaf] = chapter;
    if (!L.group_leaves.count(group)) L.groups.push_back(group);
    if (!L.chapter_leaves.count(chapter)) L.chapters.push_back(chapter);
    L.group_leaves[group].push_back(leaf);
    L.chapter_leaves[chapter].push_back(leaf);
  }
  return L;
}

const char* kLabNames[] = {"glucose", "sodium", "potassium", "creatinine", "hemoglobin", "lactate"};
const double kLabBase[] = {100.0, 140.0, 4.2, 1.0, 13.5, 1.5};

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic data config: " + m); };
  if (n_patients == 0) fail("n_patients must be positive");
  if (min_visits < 2) fail("min_visits must be at least 2");
  if (max_visits < min_visits) fail("max_visits must be >= min_visits");
  if (!(visit_tail_p > 0.0 && visit_tail_p <= 1.0)) fail("visit_tail_p must lie in (0, 1]");
  if (branching.empty()) fail("branching must be nonempty");
  if (branching[0] < 2 || branching[0] > 26) fail("top-level branching must lie in [2, 26]");
  for (std::size_t i = 1; i < branching.size(); ++i) {
    if (branching[i] < 1 || branching[i] > 9) fail("branching below the top level must lie in [1, 9]");
  }
  if (min_codes_per_visit < 1 || max_codes_per_visit < min_codes_per_visit) fail("bad codes-per-visit range");
  if (n_procedures == 0 || n_drugs == 0) fail("need at least one procedure and drug code");
  if (n_lab_variables == 0) fail("need at least one lab variable");
  if (!(lab_presence >= 0.0 && lab_presence <= 1.0)) fail("lab_presence must lie in [0, 1]");
  if (!(transition_coherence >= 0.0 && transition_coherence <= 1.0)) fail("transition_coherence must lie in [0, 1]");
  if (!(no_answer_rate >= 0.0 && no_answer_rate <= 1.0)) fail("no_answer_rate must lie in [0, 1]");
  if (!(mean_gap_days > 0.0)) fail("mean_gap_days must be positive");
}

const char* to_string(QType t) {
  switch (t) {
    case QType::boolean: return "boolean";
    case QType::concept_id: return "concept";
    case QType::value: return "value";
    case QType::count: return "count";
  }
  return "boolean";
}

QType qtype_from_string(const std::string& s) {
  for (QType t : kQTypes) {
    if (s == to_string(t)) return t;
  }
  throw DataError("unknown question type '" + s + "'");
}

bool answers_equal(QType type, const Answer& a, const Answer& b) {
  if (a.empty || b.empty) return a.empty == b.empty;
  switch (type) {
    case QType::boolean:
    case QType::count: return a.integer == b.integer;
    case QType::value: return std::abs(a.real - b.real) <= 1e-9;
    case QType::concept_id: return a.text == b.text;
  }
  return false;
}

std::string answer_json(QType type, const Answer& a) {
  if (a.empty) return "[]";
  switch (type) {
    case QType::boolean:
    case QType::count: return "[" + std::to_string(a.integer) + "]";
    case QType::value: return "[" + fmt_real(a.real) + "]";
    case QType::concept_id: return "[" + quote(a.text) + "]";
  }
  return "[]";
}

GeneratedHierarchy gen_hierarchy(const SynthConfig& config) {
  config.validate();
  std::vector<hier::Edge> edges;
  std::vector<std::string> level;
  for (std::size_t i = 0; i < config.branching[0]; ++i) {
    const std::string c(1, static_cast<char>('A' + i));
    edges.emplace_back(hier::kSyntheticRoot, c);
    level.push_back(c);
  }
  for (std::size_t d = 1; d < config.branching.size(); ++d) {
    std::vector<std::string> next;
    for (const auto& p : level) {
      for (std::size_t k = 1; k <= config.branching[d]; ++k) {
        const std::string c = p + (d == 3 ? "." : "") + std::to_string(k);
        edges.emplace_back(p, c);
        next.push_back(c);
      }
    }
    level = std::move(next);
  }
  return {hier::build_trie(edges), level};
}

std::vector<std::string> procedure_codes(const SynthConfig& config) {
  std::vector<std::string> out;
  char buf[16];
  for (std::size_t i = 1; i <= config.n_procedures; ++i) {
    std::snprintf(buf, sizeof buf, "PR%02zu", i);
    out.emplace_back(buf);
  }
  return out;
}

std::vector<std::string> drug_codes(const SynthConfig& config) {
  std::vector<std::string> out;
  char buf[16];
  for (std::size_t i = 1; i <= config.n_drugs; ++i) {
    std::snprintf(buf, sizeof buf, "RX%02zu", i);
    out.emplace_back(buf);
  }
  return out;
}

std::vector<std::string> lab_variables(const SynthConfig& config) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < config.n_lab_variables; ++i) {
    out.push_back(i < std::size(kLabNames) ? kLabNames[i] : "lab" + std::to_string(i + 1));
  }
  return out;
}

std::vector<PatientRecord> gen_patients(const SynthConfig& config, const GeneratedHierarchy& h) {
  config.validate();
  const Layout L = layout_of(h);
  const auto procs = procedure_codes(config);
  const auto drugs = drug_codes(config);
  const auto labs = lab_variables(config);
  const double rho = config.transition_coherence;
  std::vector<PatientRecord> out;
  out.reserve(config.n_patients);
  for (std::size_t p = 0; p < config.n_patients; ++p) {
    std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(p)));
    PatientRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "P%06zu", p);
    rec.patient_id = id;
    std::size_t n_visits = config.min_visits;
    while (n_visits < config.max_visits && !coin(rng, config.visit_tail_p)) ++n_visits;
    const std::string& home_chapter = pick(rng, L.chapters);
    std::vector<std::string> home_groups;
    for (const auto& g : L.groups) {
      if (L.chapter_of.at(L.group_leaves.at(g).front()) == home_chapter) home_groups.push_back(g);
    }
    const std::string& home_group = pick(rng, home_groups);
    double time = 0.0;
    std::exponential_distribution<double> gap(1.0 / config.mean_gap_days);
    std::uniform_int_distribution<std::size_t> n_codes(config.min_codes_per_visit, config.max_codes_per_visit);
    std::lognormal_distribution<double> lab_noise(0.0, 0.3);
    for (std::size_t v = 0; v < n_visits; ++v) {
      VisitRecord vis;
      if (v > 0) time += 1.0 + std::floor(gap(rng));
      vis.time = time;
      const std::size_t want = n_codes(rng);
      std::set<std::string> chosen;
      for (std::size_t attempt = 0; chosen.size() < want && attempt < 50 * want; ++attempt) {
        std::string code;
        if (!coin(rng, rho)) {
          code = pick(rng, h.leaves);
        } else if (v == 0) {
          code = pick(rng, L.group_leaves.at(home_group));
        } else {
          const std::string& prev = pick(rng, rec.visits.back().diag);
          const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
          if (r < 0.5) {
            code = prev;
          } else if (r < 0.75) {
            code = pick(rng, L.group_leaves.at(L.group_of.at(prev)));
          } else {
            code = pick(rng, L.chapter_leaves.at(L.chapter_of.at(prev)));
          }
        }
        chosen.insert(code);
      }
      vis.diag.assign(chosen.begin(), chosen.end());
      std::set<std::string> pr, dr;
      const std::size_t np = 1 + (coin(rng, 0.5) ? 1 : 0);
      const std::size_t nd = 1 + (coin(rng, 0.5) ? 1 : 0);
      while (pr.size() < np) pr.insert(pick(rng, procs));
      while (dr.size() < nd) dr.insert(pick(rng, drugs));
      vis.proc.assign(pr.begin(), pr.end());
      vis.drug.assign(dr.begin(), dr.end());
      for (std::size_t k = 0; k < labs.size(); ++k) {
        if (!coin(rng, config.lab_presence)) continue;
        const double base = k < std::size(kLabBase) ? kLabBase[k] : 10.0 * static_cast<double>(k + 1);
        const double value = std::round(base * lab_noise(rng) * 100.0) / 100.0;
        vis.labs.push_back({labs[k], time, value});
      }
      rec.visits.push_back(std::move(vis));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

Answer oracle_answer(const hier::CodeTrie& trie, const PatientRecord& record, QType type, const std::string& text) {
  const auto tok = tokenize(text);
  auto bad = [&]() { return DataError("unrecognized question: '" + text + "'"); };
  switch (type) {
    case QType::boolean: {
      if (tok.size() != 4 || tok[0] != "was" || tok[1] != "diagnosis" || tok[3] != "recorded") throw bad();
      for (const auto& v : record.visits) {
        if (std::find(v.diag.begin(), v.diag.end(), tok[2]) != v.diag.end()) return Answer::of_int(1);
      }
      return Answer::of_int(0);
    }
    case QType::concept_id: {
      if (tok.size() != 6 || tok[0] != "which" || tok[1] != "diagnosis" || tok[2] != "under" || tok[4] != "was" ||
          tok[5] != "recorded") {
        throw bad();
      }
      std::set<std::string> hits;
      for (const auto& v : record.visits) {
        for (const auto& c : v.diag) {
          if (!trie.contains(c)) continue;
          const long par = trie.parent(trie.id(c));
          if (par >= 0 && trie.name(static_cast<std::size_t>(par)) == tok[3]) hits.insert(c);
        }
      }
      if (hits.empty()) return Answer::none();
      if (hits.size() > 1) throw DataError("ambiguous concept question: '" + text + "'");
      return Answer::of_text(*hits.begin());
    }
    case QType::value: {
      if (tok.size() != 6 || tok[0] != "what" || tok[1] != "was" || tok[2] != "the" || tok[5] != "value" ||
          (tok[3] != "highest" && tok[3] != "lowest")) {
        throw bad();
      }
      std::optional<double> best;
      for (const auto& v : record.visits) {
        for (const auto& e : v.labs) {
          if (e.var != tok[4]) continue;
          if (!best || (tok[3] == "highest" ? e.v > *best : e.v < *best)) best = e.v;
        }
      }
      return best ? Answer::of_real(*best) : Answer::none();
    }
    case QType::count: {
      if (tok.size() != 9 || tok[0] != "how" || tok[1] != "many" || tok[2] != "visits" || tok[3] != "recorded" ||
          tok[4] != "a" || tok[5] != "diagnosis" || tok[6] != "in" || tok[7] != "chapter") {
        throw bad();
      }
      long long n = 0;
      for (const auto& v : record.visits) {
        bool hit = false;
        for (const auto& c : v.diag) {
          hit = hit || (trie.contains(c) && trie.name(trie.branch(trie.id(c))) == tok[8]);
        }
        n += hit;
      }
      return n == 0 ? Answer::none() : Answer::of_int(n);
    }
  }
  throw bad();
}

std::vector<QAInstance> gen_qa(const SynthConfig& config, const GeneratedHierarchy& h,
                               const std::vector<PatientRecord>& records) {
  config.validate();
  const Layout L = layout_of(h);
  const auto labs = lab_variables(config);
  std::vector<QAInstance> out;
  for (std::size_t p = 0; p < records.size(); ++p) {
    const PatientRecord& rec = records[p];
    std::mt19937_64 rng(splitmix64(splitmix64(config.seed) ^ splitmix64(p + 0x5151)));
    std::set<std::string> present;
    std::map<std::string, std::set<std::string>> group_hits;
    std::set<std::string> chapters_hit;
    std::set<std::string> vars_hit;
    for (const auto& v : rec.visits) {
      for (const auto& c : v.diag) {
        present.insert(c);
        group_hits[L.group_of.at(c)].insert(c);
        chapters_hit.insert(L.chapter_of.at(c));
      }
      for (const auto& e : v.labs) vars_hit.insert(e.var);
    }
    std::vector<std::string> present_v(present.begin(), present.end()), absent_v;
    for (const auto& leaf : h.leaves) {
      if (!present.count(leaf)) absent_v.push_back(leaf);
    }
    std::vector<std::string> single_groups, empty_groups;
    for (const auto& g : L.groups) {
      const auto it = group_hits.find(g);
      if (it == group_hits.end()) empty_groups.push_back(g);
      else if (it->second.size() == 1) single_groups.push_back(g);
    }
    std::vector<std::string> hit_ch(chapters_hit.begin(), chapters_hit.end()), miss_ch;
    for (const auto& c : L.chapters) {
      if (!chapters_hit.count(c)) miss_ch.push_back(c);
    }
    std::vector<std::string> hit_var(vars_hit.begin(), vars_hit.end()), miss_var;
    for (const auto& v : labs) {
      if (!vars_hit.count(v)) miss_var.push_back(v);
    }
    auto choose = [&](const std::vector<std::string>& with, const std::vector<std::string>& without,
                      double p_without) -> std::optional<std::string> {
      const bool use_without = (coin(rng, p_without) && !without.empty()) || with.empty();
      if (use_without) return without.empty() ? std::nullopt : std::optional(pick(rng, without));
      return pick(rng, with);
    };
    std::size_t counter = 0;
    for (std::size_t rep = 0; rep < config.qa_per_patient; ++rep) {
      for (QType type : kQTypes) {
        std::string text;
        if (type == QType::boolean) {
          const auto x = choose(present_v, absent_v, 0.5);
          if (!x) continue;
          text = "was diagnosis " + *x + " recorded";
        } else if (type == QType::concept_id) {
          const auto g = choose(single_groups, empty_groups, config.no_answer_rate);
          if (!g) continue;
          text = "which diagnosis under " + *g + " was recorded";
        } else if (type == QType::value) {
          const auto var = choose(hit_var, miss_var, config.no_answer_rate);
          if (!var) continue;
          text = std::string("what was the ") + (coin(rng, 0.5) ? "highest" : "lowest") + " " + *var + " value";
        } else {
          const auto c = choose(hit_ch, miss_ch, config.no_answer_rate);
          if (!c) continue;
          text = "how many visits recorded a diagnosis in chapter " + *c;
        }
        QAInstance q;
        q.qid = rec.patient_id + "-q" + std::to_string(counter++);
        q.patient_id = rec.patient_id;
        q.type = type;
        q.text = text;
        q.answer = oracle_answer(h.trie, rec, type, text);
        out.push_back(std::move(q));
      }
    }
  }
  return out;
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Split split_of(const std::string& patient_id) {
  const auto b = fnv1a64(patient_id) % 10;
  if (b < 8) return Split::train;
  return b == 8 ? Split::valid : Split::test;
}

DataStats compute_stats(const std::vector<PatientRecord>& records, const std::vector<QAInstance>& qa) {
  DataStats s;
  s.patients = records.size();
  std::size_t visits = 0, diags = 0;
  std::set<std::string> distinct;
  for (const auto& r : records) {
    visits += r.visits.size();
    for (const auto& v : r.visits) {
      diags += v.diag.size();
      distinct.insert(v.diag.begin(), v.diag.end());
      s.lab_events += v.labs.size();
    }
  }
  s.avg_visits = records.empty() ? 0.0 : static_cast<double>(visits) / static_cast<double>(records.size());
  s.avg_diag_per_visit = visits == 0 ? 0.0 : static_cast<double>(diags) / static_cast<double>(visits);
  s.distinct_diag = distinct.size();
  for (const auto& q : qa) {
    const auto k = static_cast<std::size_t>(q.type);
    ++s.questions[k];
    s.no_answer[k] += q.answer.empty;
  }
  return s;
}

std::string format_stats(const DataStats& s) {
  std::ostringstream o;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %10zu\n", "patients", s.patients);
  o << buf;
  std::snprintf(buf, sizeof buf, "%-28s %10.3f\n", "avg visits / patient", s.avg_visits);
  o << buf;
  std::snprintf(buf, sizeof buf, "%-28s %10.3f\n", "avg diagnoses / visit", s.avg_diag_per_visit);
  o << buf;
  std::snprintf(buf, sizeof buf, "%-28s %10zu\n", "distinct diagnosis codes", s.distinct_diag);
  o << buf;
  std::snprintf(buf, sizeof buf, "%-28s %10zu\n", "lab events", s.lab_events);
  o << buf;
  for (QType t : kQTypes) {
    const auto k = static_cast<std::size_t>(t);
    std::snprintf(buf, sizeof buf, "%-28s %10zu  (no answer %zu)\n", (std::string("questions: ") + to_string(t)).c_str(),
                  s.questions[k], s.no_answer[k]);
    o << buf;
  }
  return o.str();
}

std::string patient_json(const PatientRecord& r) {
  std::string out = "{\"patient_id\":" + quote(r.patient_id) + ",\"visits\":[";
  for (std::size_t i = 0; i < r.visits.size(); ++i) {
    const auto& v = r.visits[i];
    out += i ? "," : "";
    out += "{\"time\":" + fmt_real(v.time) + ",\"diag\":" + string_array(v.diag) + ",\"proc\":" +
           string_array(v.proc) + ",\"drug\":" + string_array(v.drug) + ",\"labs\":[";
    for (std::size_t k = 0; k < v.labs.size(); ++k) {
      out += k ? "," : "";
      out += "{\"var\":" + quote(v.labs[k].var) + ",\"t\":" + fmt_real(v.labs[k].t) + ",\"v\":" +
             fmt_real(v.labs[k].v) + "}";
    }
    out += "]}";
  }
  return out + "]}";
}

std::string qa_json(const QAInstance& q) {
  return "{\"qid\":" + quote(q.qid) + ",\"patient_id\":" + quote(q.patient_id) + ",\"type\":" +
         quote(to_string(q.type)) + ",\"text\":" + quote(q.text) + ",\"answer\":" + answer_json(q.type, q.answer) +
         "}";
}

namespace {

template <class T, class F>
void write_lines(const std::string& path, const std::vector<T>& xs, F f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& x : xs) out << f(x) << '\n';
  if (!out) throw DataError("write failed for '" + path + "'");
}

template <class F>
void read_lines(const std::string& path, F f) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

}  // namespace

void write_patients(const std::string& path, const std::vector<PatientRecord>& records) {
  write_lines(path, records, patient_json);
}

void write_qa(const std::string& path, const std::vector<QAInstance>& qa) { write_lines(path, qa, qa_json); }

std::vector<PatientRecord> read_patients(const std::string& path) {
  std::vector<PatientRecord> out;
  read_lines(path, [&](const nlohmann::json& j) {
    PatientRecord r;
    r.patient_id = j.at("patient_id").get<std::string>();
    for (const auto& jv : j.at("visits")) {
      VisitRecord v;
      v.time = jv.at("time").get<double>();
      v.diag = jv.at("diag").get<std::vector<std::string>>();
      v.proc = jv.at("proc").get<std::vector<std::string>>();
      v.drug = jv.at("drug").get<std::vector<std::string>>();
      for (const auto& jl : jv.at("labs")) {
        v.labs.push_back({jl.at("var").get<std::string>(), jl.at("t").get<double>(), jl.at("v").get<double>()});
      }
      if (!r.visits.empty() && v.time <= r.visits.back().time) {
        throw DataError("patient " + r.patient_id + ": visit times not strictly increasing");
      }
      r.visits.push_back(std::move(v));
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<QAInstance> read_qa(const std::string& path) {
  std::vector<QAInstance> out;
  read_lines(path, [&](const nlohmann::json& j) {
    QAInstance q;
    q.qid = j.at("qid").get<std::string>();
    q.patient_id = j.at("patient_id").get<std::string>();
    q.type = qtype_from_string(j.at("type").get<std::string>());
    q.text = j.at("text").get<std::string>();
    const auto& a = j.at("answer");
    if (!a.is_array() || a.size() > 1) throw DataError("answer for " + q.qid + " must be an array of length <= 1");
    if (a.size() == 1) {
      switch (q.type) {
        case QType::boolean:
        case QType::count: q.answer = Answer::of_int(a[0].get<long long>()); break;
        case QType::value: q.answer = Answer::of_real(a[0].get<double>()); break;
        case QType::concept_id: q.answer = Answer::of_text(a[0].get<std::string>()); break;
      }
    }
    out.push_back(std::move(q));
  });
  return out;
}

}  // namespace lqa::data
