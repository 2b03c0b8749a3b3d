#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "lqa/errors.hpp"
#include "lqa/harness.hpp"
#include "lqa/optim.hpp"

namespace lqa::harness {

namespace {

std::string rng_string(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

std::vector<ad::Vec> snapshot(const std::vector<ad::Parameter*>& ps) {
  std::vector<ad::Vec> out;
  out.reserve(ps.size());
  for (const auto* p : ps) out.push_back(p->value);
  return out;
}

void restore(const std::vector<ad::Parameter*>& ps, const std::vector<ad::Vec>& vals) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = vals[i];
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw TrainingError("training diverged: " + what + " is not finite");
}

}  // namespace

// ------------------------------------------------------------------ stage 1

std::vector<PretrainInstance> pretrain_instances(const enc::Vocabulary& vocab, const Dataset& d,
                                                 const std::vector<std::size_t>& records, bool augment) {
  std::vector<PretrainInstance> out;
  for (std::size_t r : records) {
    const enc::Sequence seq = qa::to_sequence(vocab, d.records[r]);
    if (seq.size() < 2) throw DataError("patient " + d.records[r].patient_id + " has fewer than two visits");
    const std::size_t first = augment ? 1 : seq.size() - 1;
    for (std::size_t T = first; T < seq.size(); ++T) {
      PretrainInstance inst;
      inst.prefix.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(T));
      inst.targets = enc::diag_targets(vocab, seq[T].codes);
      out.push_back(std::move(inst));
    }
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> vocab_pairs(const enc::Vocabulary& v, const hier::CodeTrie& t) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (auto [p, c] : hier::extract_pairs(t).pairs) out.emplace_back(v.id(t.name(p)), v.id(t.name(c)));
  return out;
}

std::vector<hier::Triplet> vocab_triplets(const enc::Vocabulary& v, const hier::CodeTrie& t, std::size_t count,
                                          std::uint64_t seed) {
  std::vector<hier::Triplet> out;
  for (const auto& tr : hier::sample_triplets(t, count, seed).triplets) {
    out.push_back({v.id(t.name(tr.anchor)), v.id(t.name(tr.positive)), v.id(t.name(tr.negative))});
  }
  return out;
}

Stage1Losses stage1_eval(const EncoderModel& m, const RunConfig& c, const std::vector<PretrainInstance>& inst,
                         const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                         const std::vector<hier::Triplet>& triplets) {
  Stage1Losses out;
  for (const auto& in : inst) {
    ad::Tape t;
    const auto st = m.encoder->encode(t, in.prefix);
    out.l_diag += t.item(enc::loss_diag(t, m.encoder->diag_logits(t, st.cls), in.targets));
  }
  if (!inst.empty()) out.l_diag /= static_cast<double>(inst.size());
  ad::Tape t;
  if (!pairs.empty()) out.l_rad = t.item(m.encoder->loss_rad(t, pairs, c.stage1.beta));
  if (!triplets.empty()) out.l_rel = t.item(m.encoder->loss_rel(t, triplets, c.stage1.alpha));
  out.total = out.l_diag + c.stage1.lambda * (out.l_rad + c.stage1.mu * out.l_rel);
  return out;
}

PretrainResult pretrain(const RunConfig& c, const Dataset& d, std::ostream* log) {
  c.validate();
  const auto& s1 = c.stage1;
  PretrainResult res;
  res.model = new_encoder_model(c, d, c.seed);
  EncoderModel& m = *res.model;
  std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);

  const auto train = pretrain_instances(m.vocab, d, d.split_records(data::Split::train), s1.prefix_augmentation);
  const auto valid = pretrain_instances(m.vocab, d, d.split_records(data::Split::valid), false);
  if (train.empty()) throw DataError("no training patients");
  const auto pairs = vocab_pairs(m.vocab, d.trie);
  const auto val_triplets = vocab_triplets(m.vocab, d.trie, s1.triplets_per_epoch, c.seed + 7);

  std::vector<ad::Parameter*> params = m.store.with_prefix("enc.");
  optim::AdamConfig ac;
  ac.weight_decay = s1.weight_decay;
  optim::RiemannianAdam opt(params, ac);
  const std::size_t per_epoch = (train.size() + s1.batch - 1) / s1.batch;
  optim::Schedule sched{s1.lr, s1.warmup_frac, s1.epochs * per_epoch};

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<ad::Vec> best = snapshot(params);
  res.best_val = stage1_eval(m, c, valid, pairs, val_triplets).total;
  std::size_t bad = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= s1.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto triplets = vocab_triplets(m.vocab, d.trie, s1.triplets_per_epoch, rng());
    const std::size_t tri_per_batch = std::max<std::size_t>(1, triplets.size() / per_epoch);
    Stage1Epoch ep;
    ep.epoch = epoch;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      opt.zero_grad();
      const std::size_t lo = b * s1.batch;
      const std::size_t hi = std::min(order.size(), lo + s1.batch);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      double l_diag = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& in = train[order[k]];
        ad::Tape t;
        const auto st = m.encoder->encode(t, in.prefix, &rng);
        const ad::Var l = enc::loss_diag(t, m.encoder->diag_logits(t, st.cls), in.targets);
        l_diag += t.item(l) * inv;
        t.backward(ad::scale(t, l, inv));
      }
      require_finite(l_diag, "L_diag at epoch " + std::to_string(epoch) + " batch " + std::to_string(b));
      ad::Tape t;
      const std::size_t tlo = std::min(triplets.size(), b * tri_per_batch);
      const std::size_t thi = std::min(triplets.size(), tlo + tri_per_batch);
      const std::vector<hier::Triplet> slice(triplets.begin() + static_cast<std::ptrdiff_t>(tlo),
                                             triplets.begin() + static_cast<std::ptrdiff_t>(thi));
      const ad::Var l_rad = pairs.empty() ? t.scalar(0.0) : m.encoder->loss_rad(t, pairs, s1.beta);
      const ad::Var l_rel = slice.empty() ? t.scalar(0.0) : m.encoder->loss_rel(t, slice, s1.alpha);
      const ad::Var hier_part = enc::loss_total(t, t.scalar(0.0), l_rad, l_rel, s1.lambda, s1.mu);
      require_finite(t.item(hier_part), "L_hier at epoch " + std::to_string(epoch));
      if (s1.lambda > 0.0) t.backward(hier_part);
      opt.step(sched, step++, s1.clip);
      ep.l_diag += l_diag / static_cast<double>(per_epoch);
      ep.l_rad += t.item(l_rad) / static_cast<double>(per_epoch);
      ep.l_rel += t.item(l_rel) / static_cast<double>(per_epoch);
    }
    ep.loss = ep.l_diag + s1.lambda * (ep.l_rad + s1.mu * ep.l_rel);
    ep.val_loss = stage1_eval(m, c, valid, pairs, val_triplets).total;
    require_finite(ep.val_loss, "validation loss at epoch " + std::to_string(epoch));
    res.log.push_back(ep);
    if (log) {
      *log << "epoch " << epoch << " loss " << ep.loss << " L_diag " << ep.l_diag << " L_rad " << ep.l_rad
           << " L_rel " << ep.l_rel << " val " << ep.val_loss << '\n';
    }
    if (ep.val_loss < res.best_val) {
      res.best_val = ep.val_loss;
      res.best_epoch = epoch;
      best = snapshot(params);
      bad = 0;
    } else if (++bad >= s1.patience) {
      break;
    }
  }
  restore(params, best);
  m.rng_state = rng_string(rng);
  return res;
}

double recall_at_k(const EncoderModel& m, const std::vector<PretrainInstance>& inst, std::size_t k) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& in : inst) {
    const double positives = std::accumulate(in.targets.begin(), in.targets.end(), 0.0);
    if (positives == 0.0) continue;
    ad::Tape t;
    const auto st = m.encoder->encode(t, in.prefix);
    const ad::Vec& logits = t.value(m.encoder->diag_logits(t, st.cls));
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t kk = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    double hits = 0.0;
    for (std::size_t i = 0; i < kk; ++i) hits += in.targets[idx[i]];
    sum += hits / positives;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// ------------------------------------------------------------------ stage 2

namespace {

class ContextCache {
 public:
  ContextCache(const qa::QaModel& model, const Dataset& d) : model_(model), d_(d) {}
  const qa::PatientContext& get(const std::string& pid) {
    auto it = cache_.find(pid);
    if (it == cache_.end()) it = cache_.emplace(pid, model_.context(d_.record(pid))).first;
    return it->second;
  }

 private:
  const qa::QaModel& model_;
  const Dataset& d_;
  std::unordered_map<std::string, qa::PatientContext> cache_;
};

Predictions predict_questions(const qa::QaModel& model, const Dataset& d, const std::vector<std::size_t>& qs,
                              ContextCache& cache) {
  Predictions p;
  for (std::size_t i : qs) {
    const auto& q = d.qa[i];
    ad::Tape t;
    p.qids.push_back(q.qid);
    p.types.push_back(q.type);
    p.pred.push_back(model.predict(t, cache.get(q.patient_id), q.type, q.text));
    p.gold.push_back(q.answer);
  }
  return p;
}

}  // namespace

QaTrainResult train_qa(const RunConfig& c, const Dataset& d, std::unique_ptr<EncoderModel> em, std::ostream* log) {
  c.validate();
  if (!em) throw ConfigError("stage 2 needs an encoder checkpoint");
  const auto& s2 = c.stage2;
  QaTrainResult res;
  res.encoder_hash_before = params_hash(em->store, "enc.");
  for (ad::Parameter* p : em->store.with_prefix("enc.")) p->trainable = false;

  const auto train_q = d.split_questions(data::Split::train);
  const auto valid_q = d.split_questions(data::Split::valid);
  if (train_q.empty()) throw DataError("no training questions");

  qa::TokenVocab tokens;
  for (std::size_t i : train_q) {
    for (const auto& tok : data::tokenize(d.qa[i].text)) tokens.add(tok);
  }
  for (std::size_t i = 0; i < d.trie.size(); ++i) {
    if (!(d.trie.synthetic_root() && i == d.trie.root())) tokens.add(d.trie.name(i));
  }
  for (const auto& v : d.lab_vars) tokens.add(v);

  std::vector<std::vector<double>> values(d.lab_vars.size());
  for (std::size_t r : d.split_records(data::Split::train)) {
    for (const auto& v : d.records[r].visits) {
      for (const auto& l : v.labs) {
        const auto it = std::lower_bound(d.lab_vars.begin(), d.lab_vars.end(), l.var);
        values[static_cast<std::size_t>(it - d.lab_vars.begin())].push_back(l.v);
      }
    }
  }
  std::vector<long long> counts;
  for (std::size_t i : train_q) {
    if (d.qa[i].type == data::QType::count) counts.push_back(d.qa[i].answer.empty ? 0 : d.qa[i].answer.integer);
  }

  res.bundle = std::make_unique<QaBundle>();
  QaBundle& b = *res.bundle;
  b.config.token_dim = s2.token_dim;
  b.config.hidden = s2.hidden;
  b.config.n_buckets = s2.value_buckets;
  b.config.gamma = s2.gamma;
  b.config.top_k = s2.top_k;
  b.config.k_max = qa::k_max_from_counts(counts);
  b.em = std::move(em);
  b.model = std::make_unique<qa::QaModel>(b.config, *b.em->encoder, tokens, d.lab_vars,
                                          qa::ValueBuckets::fit(values, s2.value_buckets), b.em->store, c.seed + 1);
  const qa::QaModel& model = *b.model;
  ContextCache cache(model, d);

  auto val_em = [&]() {
    const auto p = predict_questions(model, d, valid_q, cache);
    return score(p.types, p.pred, p.gold).overall;
  };

  std::vector<ad::Parameter*> params = b.em->store.with_prefix("qa.");
  optim::RiemannianAdam opt(params, {});
  const std::size_t per_epoch = (train_q.size() + s2.batch - 1) / s2.batch;
  optim::Schedule sched{s2.lr_qa, s2.warmup_frac, s2.epochs * per_epoch};
  std::mt19937_64 rng(c.seed ^ 0x51ed2701ULL);
  std::vector<std::size_t> order = train_q;
  std::vector<ad::Vec> best = snapshot(params);
  res.init_val_em = res.best_val_em = val_em();
  std::size_t bad = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= s2.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Stage2Epoch ep;
    ep.epoch = epoch;
    for (std::size_t bt = 0; bt < per_epoch; ++bt) {
      opt.zero_grad();
      const std::size_t lo = bt * s2.batch;
      const std::size_t hi = std::min(order.size(), lo + s2.batch);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& q = d.qa[order[k]];
        ad::Tape t;
        const auto out = model.forward(t, cache.get(q.patient_id), q.type, q.text, &q.answer);
        ep.loss += t.item(out.loss) / static_cast<double>(order.size());
        t.backward(ad::scale(t, out.loss, inv));
      }
      require_finite(ep.loss, "QA loss at epoch " + std::to_string(epoch));
      opt.step(sched, step++, s2.clip);
    }
    ep.val_em = val_em();
    res.log.push_back(ep);
    if (log) *log << "epoch " << epoch << " qa_loss " << ep.loss << " val_em " << ep.val_em << '\n';
    if (ep.val_em > res.best_val_em) {
      res.best_val_em = ep.val_em;
      res.best_epoch = epoch;
      best = snapshot(params);
      bad = 0;
    } else if (++bad >= s2.patience) {
      break;
    }
  }
  restore(params, best);
  res.encoder_hash_after = params_hash(b.em->store, "enc.");
  if (res.encoder_hash_after != res.encoder_hash_before) throw TrainingError("encoder parameters changed in stage 2");
  b.rng_state = rng_string(rng);
  return res;
}

Predictions predict_split(const QaBundle& b, const Dataset& d, data::Split s) {
  ContextCache cache(*b.model, d);
  return predict_questions(*b.model, d, d.split_questions(s), cache);
}

}  // namespace lqa::harness
