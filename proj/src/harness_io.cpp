#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "lqa/errors.hpp"
#include "lqa/harness.hpp"

namespace lqa::harness {

namespace fs = std::filesystem;

// ------------------------------------------------------------------- config

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where("") + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key " + where(k));
    }
  }

  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void get_list(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number_unsigned()) fail(key, "an array of non-negative integers");
        out.push_back(x.get<T>());
      }
    }
  }
  const json* section(const char* key) { return find(key); }
  std::string child(const char* key) const { return where(key); }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const std::string& k) const {
    if (path_.empty()) return "'" + k + "'";
    return "'" + path_ + (k.empty() ? "" : "." + k) + "'";
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config key " + where(key) + " must be " + what);
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  data.validate();
  mode();
  if (model.dim == 0) fail("model.dim must be positive");
  if (model.heads == 0 || model.dim % model.heads != 0) fail("model.dim must be divisible by model.heads");
  if (model.ffn_mult == 0) fail("model.ffn_mult must be positive");
  if (!(model.dropout >= 0.0 && model.dropout < 1.0)) fail("model.dropout must lie in [0, 1)");
  if (!(model.init_scale > 0.0)) fail("model.init_scale must be positive");
  const auto& s1 = stage1;
  if (!(s1.lambda >= 0.0) || !(s1.mu >= 0.0)) fail("stage1.lambda and stage1.mu must be >= 0");
  if (!(s1.alpha > 0.0) || !(s1.beta > 0.0)) fail("stage1.alpha and stage1.beta must be > 0");
  if (!(s1.lr > 0.0)) fail("stage1.lr must be positive");
  if (!(s1.warmup_frac >= 0.0 && s1.warmup_frac < 1.0)) fail("stage1.warmup_frac must lie in [0, 1)");
  if (s1.epochs == 0 || s1.batch == 0) fail("stage1.epochs and stage1.batch must be positive");
  const auto& s2 = stage2;
  if (!(s2.gamma > 0.0)) fail("stage2.gamma must be positive");
  if (s2.top_k == 0) fail("stage2.top_k must be at least 1");
  if (!(s2.lr_qa > 0.0)) fail("stage2.lr_qa must be positive");
  if (!(s2.warmup_frac >= 0.0 && s2.warmup_frac < 1.0)) fail("stage2.warmup_frac must lie in [0, 1)");
  if (s2.epochs == 0 || s2.batch == 0) fail("stage2.epochs and stage2.batch must be positive");
  if (s2.token_dim == 0 || s2.hidden == 0 || s2.value_buckets == 0) fail("stage2 dims must be positive");
  if (seeds.empty()) fail("seeds must be nonempty");
}

manifold::Mode RunConfig::mode() const {
  if (model.geometry == "lorentz") return manifold::Mode::lorentz;
  if (model.geometry == "euclidean") return manifold::Mode::euclidean;
  throw ConfigError("model.geometry must be 'lorentz' or 'euclidean', got '" + model.geometry + "'");
}

enc::EncoderConfig RunConfig::encoder_config() const {
  enc::EncoderConfig e;
  e.geometry = {mode(), model.dim};
  e.layers = model.layers;
  e.heads = model.heads;
  e.ffn_mult = model.ffn_mult;
  e.dropout = model.dropout;
  e.init_scale = model.init_scale;
  return e;
}

json to_json(const RunConfig& c) {
  const auto& d = c.data;
  const auto& s1 = c.stage1;
  const auto& s2 = c.stage2;
  return json{
      {"data_dir", c.data_dir},
      {"checkpoint_dir", c.checkpoint_dir},
      {"report_dir", c.report_dir},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"pretrain", c.pretrain},
      {"data",
       {{"seed", d.seed},
        {"n_patients", d.n_patients},
        {"min_visits", d.min_visits},
        {"visit_tail_p", d.visit_tail_p},
        {"max_visits", d.max_visits},
        {"branching", d.branching},
        {"min_codes_per_visit", d.min_codes_per_visit},
        {"max_codes_per_visit", d.max_codes_per_visit},
        {"n_procedures", d.n_procedures},
        {"n_drugs", d.n_drugs},
        {"n_lab_variables", d.n_lab_variables},
        {"lab_presence", d.lab_presence},
        {"transition_coherence", d.transition_coherence},
        {"qa_per_patient", d.qa_per_patient},
        {"no_answer_rate", d.no_answer_rate},
        {"mean_gap_days", d.mean_gap_days}}},
      {"model",
       {{"geometry", c.model.geometry},
        {"dim", c.model.dim},
        {"layers", c.model.layers},
        {"heads", c.model.heads},
        {"ffn_mult", c.model.ffn_mult},
        {"dropout", c.model.dropout},
        {"init_scale", c.model.init_scale}}},
      {"stage1",
       {{"lambda", s1.lambda},
        {"mu", s1.mu},
        {"alpha", s1.alpha},
        {"beta", s1.beta},
        {"lr", s1.lr},
        {"clip", s1.clip},
        {"warmup_frac", s1.warmup_frac},
        {"weight_decay", s1.weight_decay},
        {"epochs", s1.epochs},
        {"batch", s1.batch},
        {"patience", s1.patience},
        {"triplets_per_epoch", s1.triplets_per_epoch},
        {"prefix_augmentation", s1.prefix_augmentation}}},
      {"stage2",
       {{"gamma", s2.gamma},
        {"top_k", s2.top_k},
        {"lr_qa", s2.lr_qa},
        {"clip", s2.clip},
        {"warmup_frac", s2.warmup_frac},
        {"epochs", s2.epochs},
        {"batch", s2.batch},
        {"patience", s2.patience},
        {"token_dim", s2.token_dim},
        {"hidden", s2.hidden},
        {"value_buckets", s2.value_buckets}}},
  };
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  {
    Reader r(j, "");
    r.get("data_dir", c.data_dir);
    r.get("checkpoint_dir", c.checkpoint_dir);
    r.get("report_dir", c.report_dir);
    r.get("seed", c.seed, 0);
    r.get_list("seeds", c.seeds);
    r.get("pretrain", c.pretrain);
    if (const json* s = r.section("data")) {
      auto& d = c.data;
      Reader q(*s, "data");
      q.get("seed", d.seed, 0);
      q.get("n_patients", d.n_patients);
      q.get("min_visits", d.min_visits);
      q.get("visit_tail_p", d.visit_tail_p);
      q.get("max_visits", d.max_visits);
      q.get_list("branching", d.branching);
      q.get("min_codes_per_visit", d.min_codes_per_visit);
      q.get("max_codes_per_visit", d.max_codes_per_visit);
      q.get("n_procedures", d.n_procedures);
      q.get("n_drugs", d.n_drugs);
      q.get("n_lab_variables", d.n_lab_variables);
      q.get("lab_presence", d.lab_presence);
      q.get("transition_coherence", d.transition_coherence);
      q.get("qa_per_patient", d.qa_per_patient);
      q.get("no_answer_rate", d.no_answer_rate);
      q.get("mean_gap_days", d.mean_gap_days);
    }
    if (const json* s = r.section("model")) {
      Reader q(*s, "model");
      q.get("geometry", c.model.geometry);
      q.get("dim", c.model.dim);
      q.get("layers", c.model.layers);
      q.get("heads", c.model.heads);
      q.get("ffn_mult", c.model.ffn_mult);
      q.get("dropout", c.model.dropout);
      q.get("init_scale", c.model.init_scale);
    }
    if (const json* s = r.section("stage1")) {
      auto& s1 = c.stage1;
      Reader q(*s, "stage1");
      q.get("lambda", s1.lambda);
      q.get("mu", s1.mu);
      q.get("alpha", s1.alpha);
      q.get("beta", s1.beta);
      q.get("lr", s1.lr);
      q.get("clip", s1.clip);
      q.get("warmup_frac", s1.warmup_frac);
      q.get("weight_decay", s1.weight_decay);
      q.get("epochs", s1.epochs);
      q.get("batch", s1.batch);
      q.get("patience", s1.patience);
      q.get("triplets_per_epoch", s1.triplets_per_epoch);
      q.get("prefix_augmentation", s1.prefix_augmentation);
    }
    if (const json* s = r.section("stage2")) {
      auto& s2 = c.stage2;
      Reader q(*s, "stage2");
      q.get("gamma", s2.gamma);
      q.get("top_k", s2.top_k);
      q.get("lr_qa", s2.lr_qa);
      q.get("clip", s2.clip);
      q.get("warmup_frac", s2.warmup_frac);
      q.get("epochs", s2.epochs);
      q.get("batch", s2.batch);
      q.get("patience", s2.patience);
      q.get("token_dim", s2.token_dim);
      q.get("hidden", s2.hidden);
      q.get("value_buckets", s2.value_buckets);
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

RunConfig paper_scale(RunConfig c) {
  c.stage1.epochs = 250;
  c.stage2.epochs = 200;
  c.stage1.lr = 1e-4;
  c.stage2.lr_qa = 3e-5;
  c.model.layers = 3;
  c.model.heads = 6;
  c.model.dim = 390;
  return c;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string config_hash(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

std::string params_hash(const ad::ParamStore& store, const std::string& prefix) {
  std::string bytes;
  for (const ad::Parameter* p : store.all()) {
    if (p->id.compare(0, prefix.size(), prefix) != 0) continue;
    bytes += p->id;
    bytes.push_back('\0');
    bytes.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

// ------------------------------------------------------------------ dataset

const data::PatientRecord& Dataset::record(const std::string& patient_id) const {
  const auto it = by_id_.find(patient_id);
  if (it == by_id_.end()) throw DataError("unknown patient '" + patient_id + "'");
  return records[it->second];
}

std::vector<std::size_t> Dataset::split_records(data::Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (data::split_of(records[i].patient_id) == s) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::split_questions(data::Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    if (data::split_of(qa[i].patient_id) == s) out.push_back(i);
  }
  return out;
}

Dataset make_dataset(hier::CodeTrie trie, std::vector<data::PatientRecord> records, std::vector<data::QAInstance> qa) {
  Dataset d;
  d.trie = std::move(trie);
  d.records = std::move(records);
  d.qa = std::move(qa);
  std::set<std::string> procs, drugs, labs;
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    if (!d.by_id_.emplace(r.patient_id, i).second) throw DataError("duplicate patient '" + r.patient_id + "'");
    for (const auto& v : r.visits) {
      procs.insert(v.proc.begin(), v.proc.end());
      drugs.insert(v.drug.begin(), v.drug.end());
      for (const auto& l : v.labs) labs.insert(l.var);
      for (const auto& c : v.diag) {
        if (!d.trie.contains(c)) throw DataError("diagnosis '" + c + "' of " + r.patient_id + " is not in the hierarchy");
      }
    }
  }
  for (const auto& q : d.qa) {
    if (!d.by_id_.count(q.patient_id)) throw DataError("question " + q.qid + " names unknown patient");
  }
  d.procedures.assign(procs.begin(), procs.end());
  d.drugs.assign(drugs.begin(), drugs.end());
  d.lab_vars.assign(labs.begin(), labs.end());
  return d;
}

Dataset generate_dataset(const data::SynthConfig& c) {
  c.validate();
  auto h = data::gen_hierarchy(c);
  auto records = data::gen_patients(c, h);
  auto qa = data::gen_qa(c, h, records);
  return make_dataset(std::move(h.trie), std::move(records), std::move(qa));
}

void write_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  hier::write_edges(d.trie, dir + "/hierarchy.edges");
  data::write_patients(dir + "/patients.jsonl", d.records);
  data::write_qa(dir + "/qa.jsonl", d.qa);
  for (data::Split s : {data::Split::train, data::Split::valid, data::Split::test}) {
    std::ofstream out(dir + "/" + data::to_string(s) + ".ids", std::ios::binary);
    for (std::size_t i : d.split_records(s)) out << d.records[i].patient_id << '\n';
    if (!out) throw DataError("cannot write split manifest in '" + dir + "'");
  }
  std::ofstream stats(dir + "/stats.txt", std::ios::binary);
  stats << data::format_stats(data::compute_stats(d.records, d.qa));
}

Dataset load_dataset(const std::string& dir) {
  for (const char* f : {"hierarchy.edges", "patients.jsonl", "qa.jsonl"}) {
    if (!fs::exists(dir + "/" + f)) throw ConfigError("missing data file '" + dir + "/" + f + "'");
  }
  return make_dataset(hier::read_hierarchy(dir + "/hierarchy.edges"), data::read_patients(dir + "/patients.jsonl"),
                      data::read_qa(dir + "/qa.jsonl"));
}

// -------------------------------------------------------------- checkpoints

std::unique_ptr<EncoderModel> new_encoder_model(const RunConfig& c, const Dataset& d, std::uint64_t seed) {
  auto m = std::make_unique<EncoderModel>();
  m->config = c.encoder_config();
  m->vocab = enc::Vocabulary::build(d.trie, {}, d.procedures, d.drugs);
  m->encoder = std::make_unique<enc::Encoder>(m->config, m->vocab, m->store, seed);
  return m;
}

namespace {

constexpr int kFormatVersion = 1;

json params_json(const ad::ParamStore& store, const std::string& prefix) {
  json out = json::array();
  for (const ad::Parameter* p : store.all()) {
    if (p->id.compare(0, prefix.size(), prefix) != 0) continue;
    out.push_back({{"id", p->id},
                   {"kind", p->kind == ad::ParamKind::manifold_point ? "manifold_point" : "euclidean"},
                   {"rows", p->rows},
                   {"cols", p->cols},
                   {"value", p->value}});
  }
  return out;
}

void load_params(ad::ParamStore& store, const json& arr) {
  for (const auto& e : arr) {
    const auto kind = e.at("kind").get<std::string>() == "manifold_point" ? ad::ParamKind::manifold_point
                                                                           : ad::ParamKind::euclidean;
    auto& p = store.add(e.at("id").get<std::string>(), kind, e.at("rows").get<std::size_t>(),
                        e.at("cols").get<std::size_t>());
    p.value = e.at("value").get<ad::Vec>();
    if (p.value.size() != p.rows * p.cols) throw DataError("parameter '" + p.id + "' has the wrong size");
  }
}

void check_format(const json& j, const char* kind) {
  if (j.value("format", "") != "lqa-checkpoint" || j.value("kind", "") != kind) {
    throw DataError(std::string("not an lqa ") + kind + " checkpoint");
  }
  if (j.value("version", 0) != kFormatVersion) throw DataError("unsupported checkpoint version");
}

}  // namespace

json encoder_checkpoint_json(const EncoderModel& m) {
  json types = json::array();
  for (auto t : m.vocab.types()) types.push_back(enc::to_string(t));
  return json{{"format", "lqa-checkpoint"},
              {"version", kFormatVersion},
              {"kind", "encoder"},
              {"geometry", manifold::to_string(m.config.geometry.mode)},
              {"dim", m.config.geometry.dim},
              {"layers", m.config.layers},
              {"heads", m.config.heads},
              {"ffn_mult", m.config.ffn_mult},
              {"dropout", m.config.dropout},
              {"init_scale", m.config.init_scale},
              {"vocab", {{"codes", m.vocab.codes()}, {"types", types}, {"outputs", m.vocab.diag_outputs()}}},
              {"rng_state", m.rng_state},
              {"params", params_json(m.store, "enc.")}};
}

std::unique_ptr<EncoderModel> encoder_from_json(const json& j) {
  try {
    check_format(j, "encoder");
    auto m = std::make_unique<EncoderModel>();
    m->config.geometry = {manifold::mode_from_string(j.at("geometry").get<std::string>()),
                          j.at("dim").get<std::size_t>()};
    m->config.layers = j.at("layers").get<std::size_t>();
    m->config.heads = j.at("heads").get<std::size_t>();
    m->config.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    m->config.dropout = j.at("dropout").get<double>();
    m->config.init_scale = j.at("init_scale").get<double>();
    std::vector<enc::CodeType> types;
    for (const auto& t : j.at("vocab").at("types")) types.push_back(enc::code_type_from_string(t.get<std::string>()));
    m->vocab = enc::Vocabulary::from_rows(j.at("vocab").at("codes").get<std::vector<std::string>>(), types,
                                          j.at("vocab").at("outputs").get<std::vector<std::size_t>>());
    m->rng_state = j.at("rng_state").get<std::string>();
    load_params(m->store, j.at("params"));
    m->encoder = std::make_unique<enc::Encoder>(m->config, m->vocab, m->store);
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed encoder checkpoint: ") + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write '" + path + "'");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void save_encoder(const std::string& path, const EncoderModel& m, const json& meta) {
  json j = encoder_checkpoint_json(m);
  j["meta"] = meta;
  write_json_file(path, j);
}

std::unique_ptr<EncoderModel> load_encoder(const std::string& path, json* meta) {
  const json j = read_json_file(path);
  auto m = encoder_from_json(j);
  if (meta) *meta = j.value("meta", json::object());
  return m;
}

void save_qa(const std::string& path, const QaBundle& b, const json& meta) {
  const auto& q = b.config;
  const auto& model = *b.model;
  json j{{"format", "lqa-checkpoint"},
         {"version", kFormatVersion},
         {"kind", "qa"},
         {"encoder", encoder_checkpoint_json(*b.em)},
         {"encoder_hash", params_hash(b.em->store, "enc.")},
         {"qa_config",
          {{"token_dim", q.token_dim},
           {"hidden", q.hidden},
           {"var_dim", q.var_dim},
           {"bucket_dim", q.bucket_dim},
           {"n_buckets", q.n_buckets},
           {"gamma", q.gamma},
           {"top_k", q.top_k},
           {"k_max", q.k_max}}},
         {"tokens", model.tokens().tokens()},
         {"lab_vars", model.lab_vars()},
         {"bucket_cuts", model.buckets().cuts()},
         {"params", params_json(b.em->store, "qa.")},
         {"rng_state", b.rng_state},
         {"meta", meta}};
  write_json_file(path, j);
}

std::unique_ptr<QaBundle> load_qa(const std::string& path, json* meta) {
  const json j = read_json_file(path);
  try {
    check_format(j, "qa");
    auto b = std::make_unique<QaBundle>();
    b->em = encoder_from_json(j.at("encoder"));
    if (params_hash(b->em->store, "enc.") != j.at("encoder_hash").get<std::string>()) {
      throw DataError("encoder hash mismatch in qa checkpoint");
    }
    const auto& qc = j.at("qa_config");
    b->config.token_dim = qc.at("token_dim").get<std::size_t>();
    b->config.hidden = qc.at("hidden").get<std::size_t>();
    b->config.var_dim = qc.at("var_dim").get<std::size_t>();
    b->config.bucket_dim = qc.at("bucket_dim").get<std::size_t>();
    b->config.n_buckets = qc.at("n_buckets").get<std::size_t>();
    b->config.gamma = qc.at("gamma").get<double>();
    b->config.top_k = qc.at("top_k").get<std::size_t>();
    b->config.k_max = qc.at("k_max").get<std::size_t>();
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.empty() || tokens[0] != "[UNK]") throw DataError("token list must start with [UNK]");
    qa::TokenVocab tv(std::vector<std::string>(tokens.begin() + 1, tokens.end()));
    load_params(b->em->store, j.at("params"));
    b->model = std::make_unique<qa::QaModel>(
        b->config, *b->em->encoder, std::move(tv), j.at("lab_vars").get<std::vector<std::string>>(),
        qa::ValueBuckets(j.at("bucket_cuts").get<std::vector<std::vector<double>>>()), b->em->store);
    b->rng_state = j.at("rng_state").get<std::string>();
    if (meta) *meta = j.value("meta", json::object());
    return b;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed qa checkpoint: ") + e.what());
  }
}

}  // namespace lqa::harness
