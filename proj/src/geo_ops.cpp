#include "lqa/geo_ops.hpp"

#include <cmath>

#include "lqa/errors.hpp"

namespace lqa::ad {
namespace {

void add_into(Tape& t, Var dst, const Vec& g) {
  if (!t.requires_grad(dst)) return;
  Vec& d = t.grad(dst);
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

// (n*cosh(n) - sinh(n)) / n^3
double sinhc_prime_over_n(double n) {
  if (n < 1e-3) return 1.0 / 3.0 + n * n / 30.0;
  return (n * std::cosh(n) - std::sinh(n)) / (n * n * n);
}

// d/dr [asinh(r)/r] / r = (r/sqrt(1+r^2) - asinh(r)) / r^3
double asinhc_prime_over_r(double r) {
  if (r < 1e-3) return -1.0 / 3.0 + 0.3 * r * r;
  return (r / std::sqrt(1.0 + r * r) - std::asinh(r)) / (r * r * r);
}

double asinhc(double r) {
  if (r < 1e-6) return 1.0 - r * r / 6.0;
  return std::asinh(r) / r;
}

}  // namespace

Var minkowski(Tape& t, Var x, Var y) {
  const double v = manifold::minkowski_inner(t.value(x), t.value(y));
  return t.push(Vec{v}, t.any_requires_grad({x, y}), [x, y](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    Vec gx = t.value(y), gy = t.value(x);
    gx[0] = -gx[0];
    gy[0] = -gy[0];
    for (double& v : gx) v *= g;
    for (double& v : gy) v *= g;
    add_into(t, x, gx);
    add_into(t, y, gy);
  });
}

Var lorentz_dist(Tape& t, Var x, Var y) {
  const Vec& xv = t.value(x);
  const Vec& yv = t.value(y);
  if (xv.size() != yv.size()) throw DimensionError("lorentz_dist: length mismatch");
  Vec delta(xv.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = xv[i] - yv[i];
  const double q = manifold::minkowski_inner(delta, delta);
  const double n = std::sqrt(std::max(0.0, q));
  const double d = 2.0 * std::asinh(0.5 * n);
  return t.push(Vec{d}, t.any_requires_grad({x, y}),
                [x, y, delta = std::move(delta), n](Tape& t, std::uint32_t s) {
                  if (n <= 1e-300) return;  // coincident points: subgradient 0
                  const double g = t.grad(s)[0] / (n * std::sqrt(1.0 + 0.25 * n * n));
                  Vec gx(delta.size());
                  for (std::size_t i = 0; i < delta.size(); ++i) gx[i] = g * delta[i];
                  gx[0] = -gx[0];
                  add_into(t, x, gx);
                  for (double& v : gx) v = -v;
                  add_into(t, y, gx);
                });
}

Var lorentz_exp0(Tape& t, Var v) {
  const Vec& vv = t.value(v);
  double n2 = 0.0;
  for (double a : vv) n2 += a * a;
  const double n = std::sqrt(n2);
  const double sc = manifold::sinhc(n);
  Vec out(vv.size() + 1);
  double s2 = 0.0;
  for (std::size_t i = 0; i < vv.size(); ++i) {
    out[i + 1] = sc * vv[i];
    s2 += out[i + 1] * out[i + 1];
  }
  out[0] = std::sqrt(1.0 + s2);
  return t.push(std::move(out), t.requires_grad(v), [v, n, sc](Tape& t, std::uint32_t s) {
    const Vec& g = t.grad(s);
    const Vec& vv = t.value(v);
    const double c = sinhc_prime_over_n(n);
    double vg = 0.0;
    for (std::size_t i = 0; i < vv.size(); ++i) vg += vv[i] * g[i + 1];
    Vec gv(vv.size());
    for (std::size_t i = 0; i < vv.size(); ++i) {
      gv[i] = g[0] * sc * vv[i] + sc * g[i + 1] + c * vg * vv[i];
    }
    add_into(t, v, gv);
  });
}

Var lorentz_log0(Tape& t, Var x) {
  const Vec& xv = t.value(x);
  if (xv.size() < 2) throw DimensionError("lorentz_log0: ambient vector too short");
  double r2 = 0.0;
  for (std::size_t i = 1; i < xv.size(); ++i) r2 += xv[i] * xv[i];
  const double r = std::sqrt(r2);
  const double sc = asinhc(r);
  Vec out(xv.size() - 1);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sc * xv[i + 1];
  return t.push(std::move(out), t.requires_grad(x), [x, r, sc](Tape& t, std::uint32_t s) {
    const Vec& g = t.grad(s);
    const Vec& xv = t.value(x);
    const double c = asinhc_prime_over_r(r);
    double xg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) xg += xv[i + 1] * g[i];
    Vec gx(xv.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i + 1] = sc * g[i] + c * xg * xv[i + 1];
    add_into(t, x, gx);
  });
}

Var euclid_dist(Tape& t, Var x, Var y) {
  const Vec& xv = t.value(x);
  const Vec& yv = t.value(y);
  if (xv.size() != yv.size()) throw DimensionError("euclid_dist: length mismatch");
  Vec delta(xv.size(), 0.0);
  double s2 = 0.0;
  for (std::size_t i = 1; i < delta.size(); ++i) {
    delta[i] = xv[i] - yv[i];
    s2 += delta[i] * delta[i];
  }
  const double n = std::sqrt(s2);
  return t.push(Vec{n}, t.any_requires_grad({x, y}),
                [x, y, delta = std::move(delta), n](Tape& t, std::uint32_t s) {
                  if (n <= 1e-300) return;
                  const double g = t.grad(s)[0] / n;
                  Vec gx(delta.size());
                  for (std::size_t i = 0; i < delta.size(); ++i) gx[i] = g * delta[i];
                  add_into(t, x, gx);
                  for (double& v : gx) v = -v;
                  add_into(t, y, gx);
                });
}

Var euclid_exp0(Tape& t, Var v) {
  Vec out(t.size_of(v) + 1, 0.0);
  const Vec& vv = t.value(v);
  std::copy(vv.begin(), vv.end(), out.begin() + 1);
  return t.push(std::move(out), t.requires_grad(v), [v](Tape& t, std::uint32_t s) {
    const Vec& g = t.grad(s);
    add_into(t, v, Vec(g.begin() + 1, g.end()));
  });
}

Var euclid_log0(Tape& t, Var x) {
  const Vec& xv = t.value(x);
  if (xv.size() < 2) throw DimensionError("euclid_log0: ambient vector too short");
  return slice(t, x, 1, xv.size() - 1);
}

Var GeoOps::dist(Tape& t, Var x, Var y) const {
  return is_lorentz() ? lorentz_dist(t, x, y) : euclid_dist(t, x, y);
}

Var GeoOps::exp0(Tape& t, Var v) const {
  return is_lorentz() ? lorentz_exp0(t, v) : euclid_exp0(t, v);
}

Var GeoOps::log0(Tape& t, Var x) const {
  return is_lorentz() ? lorentz_log0(t, x) : euclid_log0(t, x);
}

Var GeoOps::origin(Tape& t) const { return t.constant(manifold::Geometry(mode_).origin()); }

Var GeoOps::radius(Tape& t, Var x) const { return dist(t, x, origin(t)); }

Var GeoOps::dist_to_rows(Tape& t, Var x, Parameter& table, std::span<const std::size_t> rows) const {
  const Vec& xv = t.value(x);
  const std::size_t cols = table.cols;
  if (xv.size() != cols) throw DimensionError("dist_to_rows: length mismatch");
  const bool lorentz = is_lorentz();
  const std::size_t first = lorentz ? 0 : 1;
  Vec out(rows.size());
  Vec coef(rows.size(), 0.0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto y = table.row(rows[k]);
    double q = 0.0;
    for (std::size_t i = first; i < cols; ++i) q += (xv[i] - y[i]) * (xv[i] - y[i]);
    if (lorentz) q -= 2.0 * (xv[0] - y[0]) * (xv[0] - y[0]);
    const double n = std::sqrt(std::max(0.0, q));
    if (lorentz) {
      out[k] = 2.0 * std::asinh(0.5 * n);
      if (n > 1e-300) coef[k] = 1.0 / (n * std::sqrt(1.0 + 0.25 * n * n));
    } else {
      out[k] = n;
      if (n > 1e-300) coef[k] = 1.0 / n;
    }
  }
  const bool table_grad = table.trainable;
  std::vector<std::size_t> row_ids(rows.begin(), rows.end());
  return t.push(std::move(out), t.requires_grad(x) || table_grad,
                [x, &table, row_ids = std::move(row_ids), coef = std::move(coef), lorentz, first,
                 table_grad](Tape& t, std::uint32_t s) {
                  const Vec g = t.grad(s);
                  const std::size_t cols = table.cols;
                  const Vec xv = t.value(x);
                  Vec gx(cols, 0.0);
                  for (std::size_t k = 0; k < row_ids.size(); ++k) {
                    const double c = g[k] * coef[k];
                    if (c == 0.0) continue;
                    const auto y = table.row(row_ids[k]);
                    auto gy = table.grad_row(row_ids[k]);
                    for (std::size_t i = first; i < cols; ++i) {
                      double e = c * (xv[i] - y[i]);
                      if (lorentz && i == 0) e = -e;
                      gx[i] += e;
                      if (table_grad) gy[i] -= e;
                    }
                  }
                  if (t.requires_grad(x)) add_into(t, x, gx);
                });
}

Var GeoOps::row_pair_dists(Tape& t, Parameter& table, std::span<const std::size_t> a,
                           std::span<const std::size_t> b) const {
  if (a.size() != b.size()) throw DimensionError("row_pair_dists: index lists differ in length");
  const bool lorentz = is_lorentz();
  const std::size_t first = lorentz ? 0 : 1;
  const std::size_t cols = table.cols;
  Vec out(a.size());
  Vec coef(a.size(), 0.0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto x = table.row(a[k]);
    const auto y = table.row(b[k]);
    double q = 0.0;
    for (std::size_t i = first; i < cols; ++i) q += (x[i] - y[i]) * (x[i] - y[i]);
    if (lorentz) q -= 2.0 * (x[0] - y[0]) * (x[0] - y[0]);
    const double n = std::sqrt(std::max(0.0, q));
    if (lorentz) {
      out[k] = 2.0 * std::asinh(0.5 * n);
      if (n > 1e-300) coef[k] = 1.0 / (n * std::sqrt(1.0 + 0.25 * n * n));
    } else {
      out[k] = n;
      if (n > 1e-300) coef[k] = 1.0 / n;
    }
  }
  std::vector<std::size_t> ia(a.begin(), a.end()), ib(b.begin(), b.end());
  return t.push(std::move(out), table.trainable,
                [&table, ia = std::move(ia), ib = std::move(ib), coef = std::move(coef), lorentz,
                 first](Tape& t, std::uint32_t s) {
                  const Vec g = t.grad(s);
                  for (std::size_t k = 0; k < ia.size(); ++k) {
                    const double c = g[k] * coef[k];
                    if (c == 0.0) continue;
                    const auto x = table.row(ia[k]);
                    const auto y = table.row(ib[k]);
                    auto gx = table.grad_row(ia[k]);
                    auto gy = table.grad_row(ib[k]);
                    for (std::size_t i = first; i < table.cols; ++i) {
                      double e = c * (x[i] - y[i]);
                      if (lorentz && i == 0) e = -e;
                      gx[i] += e;
                      gy[i] -= e;
                    }
                  }
                });
}

Var GeoOps::agg(Tape& t, Var weights, std::span<const Var> points) const {
  std::vector<Var> tangents;
  tangents.reserve(points.size());
  for (Var p : points) tangents.push_back(log0(t, p));
  return agg_tangent(t, weights, tangents);
}

Var GeoOps::agg_tangent(Tape& t, Var weights, std::span<const Var> tangents) const {
  if (tangents.empty()) throw ArgumentError("aggregation over an empty point set");
  return exp0(t, weighted_sum(t, weights, tangents));
}

}  // namespace lqa::ad
