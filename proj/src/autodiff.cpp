#include "lqa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lqa/errors.hpp"

namespace lqa::ad {

// ---------------------------------------------------------------- params

Parameter& ParamStore::add(std::string id, ParamKind kind, std::size_t rows, std::size_t cols) {
  if (contains(id)) throw ArgumentError("duplicate parameter id '" + id + "'");
  auto p = std::make_unique<Parameter>();
  p->id = std::move(id);
  p->kind = kind;
  p->rows = rows;
  p->cols = cols;
  p->value.assign(rows * cols, 0.0);
  p->grad.assign(rows * cols, 0.0);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParamStore::get(const std::string& id) {
  for (auto& p : params_) {
    if (p->id == id) return *p;
  }
  throw ArgumentError("unknown parameter '" + id + "'");
}

const Parameter& ParamStore::get(const std::string& id) const {
  for (const auto& p : params_) {
    if (p->id == id) return *p;
  }
  throw ArgumentError("unknown parameter '" + id + "'");
}

bool ParamStore::contains(const std::string& id) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p->id == id; });
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParamStore::with_prefix(const std::string& prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->id.rfind(prefix, 0) == 0) out.push_back(p.get());
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

// ------------------------------------------------------------------ tape

Var Tape::constant(Vec value) { return push(std::move(value), false, nullptr); }

Var Tape::row(Parameter& p, std::size_t r) {
  if (r >= p.rows) throw ArgumentError("row " + std::to_string(r) + " out of range for '" + p.id + "'");
  auto rv = p.row(r);
  Vec value(rv.begin(), rv.end());
  if (!p.trainable) return constant(std::move(value));
  Parameter* pp = &p;
  return push(std::move(value), true, [pp, r](Tape& t, std::uint32_t self) {
    const Vec& g = t.grad(self);
    auto gr = pp->grad_row(r);
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
  });
}

Vec& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Tape::push(Vec value, bool requires_grad, Backward back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Tape::any_requires_grad(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return nodes_[v.id].requires_grad; });
}

bool Tape::any_requires_grad(std::span<const Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return nodes_[v.id].requires_grad; });
}

void Tape::backward(Var loss) {
  if (nodes_[loss.id].value.size() != 1) throw ArgumentError("backward needs a scalar loss");
  if (!std::isfinite(nodes_[loss.id].value[0])) throw TrainingError("non-finite loss");
  grad(loss)[0] += 1.0;
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.back) continue;
    n.back(*this, i);
  }
}

// ------------------------------------------------------------------- ops

namespace {

void require_same(const Tape& t, Var a, Var b, const char* op) {
  if (t.size_of(a) != t.size_of(b)) {
    throw DimensionError(std::string(op) + ": length mismatch " + std::to_string(t.size_of(a)) +
                         " vs " + std::to_string(t.size_of(b)));
  }
}

void accumulate(Tape& t, Var dst, const Vec& g, double c = 1.0) {
  if (!t.requires_grad(dst)) return;
  Vec& d = t.grad(dst);
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logsumexp(std::span<const double> a, std::span<const char> mask) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask.empty() || mask[i]) m = std::max(m, a[i]);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask.empty() || mask[i]) s += std::exp(a[i] - m);
  }
  return m + std::log(s);
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  require_same(t, a, b, "add");
  Vec out = t.value(a);
  const Vec& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), t.any_requires_grad({a, b}), [a, b](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same(t, a, b, "sub");
  Vec out = t.value(a);
  const Vec& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.push(std::move(out), t.any_requires_grad({a, b}), [a, b](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    accumulate(t, a, g);
    accumulate(t, b, g, -1.0);
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_same(t, a, b, "mul");
  Vec out = t.value(a);
  const Vec& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), t.any_requires_grad({a, b}), [a, b](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    const Vec av = t.value(a);
    const Vec bv = t.value(b);
    Vec ga(g.size()), gb(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    accumulate(t, a, ga);
    accumulate(t, b, gb);
  });
}

Var scale(Tape& t, Var a, double c) {
  Vec out = t.value(a);
  for (double& v : out) v *= c;
  return t.push(std::move(out), t.requires_grad(a),
                [a, c](Tape& t, std::uint32_t s) { accumulate(t, a, Vec(t.grad(s)), c); });
}

Var scale_by(Tape& t, Var a, Var sv) {
  if (t.size_of(sv) != 1) throw DimensionError("scale_by expects a scalar factor");
  const double c = t.item(sv);
  Vec out = t.value(a);
  for (double& v : out) v *= c;
  return t.push(std::move(out), t.any_requires_grad({a, sv}), [a, sv](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    accumulate(t, a, g, t.item(sv));
    const Vec& av = t.value(a);
    double gs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gs += g[i] * av[i];
    accumulate(t, sv, Vec{gs});
  });
}

Var add_const(Tape& t, Var a, double c) {
  Vec out = t.value(a);
  for (double& v : out) v += c;
  return t.push(std::move(out), t.requires_grad(a),
                [a](Tape& t, std::uint32_t s) { accumulate(t, a, Vec(t.grad(s))); });
}

Var sum(Tape& t, Var a) {
  const Vec& av = t.value(a);
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return t.push(Vec{s}, t.requires_grad(a), [a](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    accumulate(t, a, Vec(t.size_of(a), g));
  });
}

Var mean(Tape& t, Var a) {
  const std::size_t n = t.size_of(a);
  if (n == 0) throw ArgumentError("mean of empty vector");
  return scale(t, sum(t, a), 1.0 / static_cast<double>(n));
}

Var dot(Tape& t, Var a, Var b) {
  require_same(t, a, b, "dot");
  const Vec& av = t.value(a);
  const Vec& bv = t.value(b);
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return t.push(Vec{s}, t.any_requires_grad({a, b}), [a, b](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    const Vec av = t.value(a);
    const Vec bv = t.value(b);
    accumulate(t, a, bv, g);
    accumulate(t, b, av, g);
  });
}

Var concat(Tape& t, std::span<const Var> parts) {
  Vec out;
  for (Var p : parts) {
    const Vec& v = t.value(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), t.any_requires_grad(parts), [ps](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t n = t.size_of(p);
      if (t.requires_grad(p)) {
        Vec& d = t.grad(p);
        for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var slice(Tape& t, Var a, std::size_t offset, std::size_t len) {
  const Vec& av = t.value(a);
  if (offset + len > av.size()) throw DimensionError("slice out of range");
  Vec out(av.begin() + static_cast<std::ptrdiff_t>(offset),
          av.begin() + static_cast<std::ptrdiff_t>(offset + len));
  return t.push(std::move(out), t.requires_grad(a), [a, offset](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    Vec& d = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[offset + i] += g[i];
  });
}

Var at(Tape& t, Var a, std::size_t i) { return slice(t, a, i, 1); }

Var gather(Tape& t, Var a, std::span<const std::size_t> idx) {
  const Vec& av = t.value(a);
  Vec out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= av.size()) throw DimensionError("gather: index out of range");
    out[k] = av[idx[k]];
  }
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return t.push(std::move(out), t.requires_grad(a), [a, ids = std::move(ids)](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    Vec& ga = t.grad(a);
    for (std::size_t k = 0; k < ids.size(); ++k) ga[ids[k]] += g[k];
  });
}

Var add_n(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("add_n of nothing");
  Vec out = t.value(parts[0]);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    require_same(t, parts[0], parts[k], "add_n");
    const Vec& v = t.value(parts[k]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), t.any_requires_grad(parts), [ps](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    for (Var p : ps) accumulate(t, p, g);
  });
}

namespace {

template <class F, class DF>
Var unary(Tape& t, Var a, F f, DF df) {
  Vec out = t.value(a);
  for (double& v : out) v = f(v);
  return t.push(std::move(out), t.requires_grad(a), [a, df](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    const Vec& av = t.value(a);
    Vec ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(av[i]);
    accumulate(t, a, ga);
  });
}

}  // namespace

Var exp(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Tape& t, Var a) {
  for (double v : t.value(a)) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary(t, a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var relu(Tape& t, Var a) {
  return unary(t, a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Tape& t, Var a) { return unary(t, a, log1pexp, sigmoid); }

Var gelu(Tape& t, Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      t, a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var affine(Tape& t, Parameter& w, Var x, Parameter* b) {
  const Vec& xv = t.value(x);
  if (xv.size() != w.cols) {
    throw DimensionError("affine '" + w.id + "': input length " + std::to_string(xv.size()) +
                         ", expected " + std::to_string(w.cols));
  }
  if (b != nullptr && b->value.size() != w.rows) throw DimensionError("affine bias length mismatch");
  Vec out(w.rows, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.value.data() + r * w.cols;
    double s = b != nullptr ? b->value[r] : 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) s += wr[c] * xv[c];
    out[r] = s;
  }
  const bool rg = t.requires_grad(x) || w.trainable || (b != nullptr && b->trainable);
  Parameter* wp = &w;
  return t.push(std::move(out), rg, [wp, b, x](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    const Vec xv = t.value(x);
    if (wp->trainable) {
      for (std::size_t r = 0; r < wp->rows; ++r) {
        double* gr = wp->grad.data() + r * wp->cols;
        for (std::size_t c = 0; c < wp->cols; ++c) gr[c] += g[r] * xv[c];
      }
    }
    if (b != nullptr && b->trainable) {
      for (std::size_t r = 0; r < wp->rows; ++r) b->grad[r] += g[r];
    }
    if (t.requires_grad(x)) {
      Vec& gx = t.grad(x);
      for (std::size_t r = 0; r < wp->rows; ++r) {
        const double* wr = wp->value.data() + r * wp->cols;
        for (std::size_t c = 0; c < wp->cols; ++c) gx[c] += g[r] * wr[c];
      }
    }
  });
}

Vec softmax_values(std::span<const double> a, std::span<const char> mask) {
  if (!mask.empty() && mask.size() != a.size()) throw DimensionError("softmax mask length mismatch");
  bool any = mask.empty() ? !a.empty() : std::any_of(mask.begin(), mask.end(), [](char m) { return m != 0; });
  if (!any) throw ArgumentError("softmax over an empty (fully masked) set");
  const double lse = logsumexp(a, mask);
  Vec out(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask.empty() || mask[i]) out[i] = std::exp(a[i] - lse);
  }
  return out;
}

Var softmax(Tape& t, Var a, std::span<const char> mask) {
  Vec out = softmax_values(t.value(a), mask);
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    const Vec& y = t.value(Var{s});
    double yg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) yg += y[i] * g[i];
    Vec ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = y[i] * (g[i] - yg);
    accumulate(t, a, ga);
  });
}

Var weighted_sum(Tape& t, Var w, std::span<const Var> xs) {
  if (t.size_of(w) != xs.size()) throw DimensionError("weighted_sum: weight count mismatch");
  if (xs.empty()) throw ArgumentError("weighted_sum of nothing");
  const Vec& wv = t.value(w);
  Vec out(t.size_of(xs[0]), 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Vec& xv = t.value(xs[k]);
    if (xv.size() != out.size()) throw DimensionError("weighted_sum: mixed lengths");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wv[k] * xv[i];
  }
  std::vector<Var> ps(xs.begin(), xs.end());
  const bool rg = t.requires_grad(w) || t.any_requires_grad(xs);
  return t.push(std::move(out), rg, [w, ps](Tape& t, std::uint32_t s) {
    const Vec g = t.grad(s);
    const Vec wv = t.value(w);
    Vec gw(ps.size(), 0.0);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const Vec& xv = t.value(ps[k]);
      double d = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) d += g[i] * xv[i];
      gw[k] = d;
      if (wv[k] != 0.0) accumulate(t, ps[k], g, wv[k]);
    }
    accumulate(t, w, gw);
  });
}

Var rms_norm(Tape& t, Var a, Var gain, double eps) {
  require_same(t, a, gain, "rms_norm");
  const Vec& av = t.value(a);
  const Vec& gv = t.value(gain);
  const double n = static_cast<double>(av.size());
  double ms = 0.0;
  for (double v : av) ms += v * v;
  ms /= n;
  const double inv = 1.0 / std::sqrt(ms + eps);
  Vec out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = gv[i] * av[i] * inv;
  return t.push(std::move(out), t.any_requires_grad({a, gain}),
                [a, gain, inv, n](Tape& t, std::uint32_t s) {
                  const Vec g = t.grad(s);
                  const Vec av = t.value(a);
                  const Vec gv = t.value(gain);
                  Vec ggain(g.size()), ga(g.size());
                  double c = 0.0;  // sum_i g_i gain_i a_i
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    ggain[i] = g[i] * av[i] * inv;
                    c += g[i] * gv[i] * av[i];
                  }
                  const double inv3 = inv * inv * inv;
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] = g[i] * gv[i] * inv - c * inv3 * av[i] / n;
                  }
                  accumulate(t, a, ga);
                  accumulate(t, gain, ggain);
                });
}

Var dropout(Tape& t, Var a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ArgumentError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Vec mask(t.size_of(a));
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(t, a, t.constant(std::move(mask)));
}

Var bce_with_logits(Tape& t, Var logits, std::span<const double> targets) {
  const Vec& x = t.value(logits);
  if (x.size() != targets.size()) throw DimensionError("bce: target length mismatch");
  if (x.empty()) throw ArgumentError("bce over an empty vector");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const double n = static_cast<double>(x.size());
  Vec y(targets.begin(), targets.end());
  return t.push(Vec{s / n}, t.requires_grad(logits), [logits, y, n](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    const Vec& x = t.value(logits);
    Vec gx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g * (sigmoid(x[i]) - y[i]) / n;
    accumulate(t, logits, gx);
  });
}

Var cross_entropy(Tape& t, Var logits, std::size_t target) {
  const std::size_t positives[] = {target};
  return multi_positive_nll(t, logits, positives);
}

Var multi_positive_nll(Tape& t, Var logits, std::span<const std::size_t> positives) {
  const Vec& x = t.value(logits);
  if (positives.empty()) throw ArgumentError("multi-positive loss needs at least one positive");
  std::vector<char> pmask(x.size(), 0);
  for (std::size_t j : positives) {
    if (j >= x.size()) throw ArgumentError("positive index out of range");
    pmask[j] = 1;
  }
  const double loss = logsumexp(x, {}) - logsumexp(x, pmask);
  return t.push(Vec{loss}, t.requires_grad(logits), [logits, pmask](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    const Vec& x = t.value(logits);
    const Vec p = softmax_values(x);
    const Vec q = softmax_values(x, pmask);
    Vec gx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g * (p[i] - q[i]);
    accumulate(t, logits, gx);
  });
}

}  // namespace lqa::ad
