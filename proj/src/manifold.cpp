#include "lqa/manifold.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lqa/errors.hpp"

namespace lqa::manifold {
namespace {

void require_same_size(ConstSpan x, ConstSpan y) {
  if (x.size() != y.size()) {
    throw DimensionError("ambient length mismatch: " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  }
}

void require_finite(ConstSpan x) {
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericError("non-finite coordinate");
  }
}

double spatial_norm(ConstSpan x) {
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += x[i] * x[i];
  return std::sqrt(s);
}

}  // namespace

double minkowski_inner(ConstSpan x, ConstSpan y) {
  require_same_size(x, y);
  if (x.empty()) throw DimensionError("empty ambient vector");
  double s = -x[0] * y[0];
  for (std::size_t i = 1; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

double manifold_residual(ConstSpan x) {
  const double r = std::abs(minkowski_inner(x, x) + 1.0);
  return r / std::max(1.0, x[0] * x[0]);
}

void require_on_manifold(ConstSpan x, double tol) {
  if (x.size() < 2) throw DimensionError("ambient vector needs at least 2 coordinates");
  require_finite(x);
  if (x[0] <= 0.0 || manifold_residual(x) > tol) {
    throw GeometryError("point is off the hyperboloid (residual " +
                        std::to_string(manifold_residual(x)) + ")");
  }
}

LorentzPoint LorentzPoint::origin(std::size_t dim) {
  Vec c(dim + 1, 0.0);
  c[0] = 1.0;
  return LorentzPoint(std::move(c));
}

LorentzPoint LorentzPoint::from_coords(Vec coords, double tol) {
  require_on_manifold(coords, tol);
  return LorentzPoint(std::move(coords));
}

LorentzPoint LorentzPoint::from_spatial(ConstSpan spatial) {
  Vec c(spatial.size() + 1);
  double s = 0.0;
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    if (!std::isfinite(spatial[i])) throw NumericError("non-finite spatial coordinate");
    c[i + 1] = spatial[i];
    s += spatial[i] * spatial[i];
  }
  c[0] = std::sqrt(1.0 + s);
  return LorentzPoint(std::move(c));
}

double sinhc(double x) {
  if (std::abs(x) < 1e-6) return 1.0 + x * x / 6.0;
  return std::sinh(x) / x;
}

double lorentz_norm(ConstSpan v) { return std::sqrt(std::max(0.0, minkowski_inner(v, v))); }

double dist(const LorentzPoint& x, const LorentzPoint& y) {
  require_same_size(x.coords(), y.coords());
  Vec delta(x.coords().size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = x.coords()[i] - y.coords()[i];
  const double chord = std::sqrt(std::max(0.0, minkowski_inner(delta, delta)));
  return 2.0 * std::asinh(0.5 * chord);
}

LorentzPoint project_to_manifold(ConstSpan ambient) {
  if (ambient.size() < 2) throw DimensionError("ambient vector needs at least 2 coordinates");
  return LorentzPoint::from_spatial(ambient.subspan(1));
}

TangentVector project_to_tangent(const LorentzPoint& base, ConstSpan g) {
  require_same_size(base.coords(), g);
  require_finite(g);
  const double ip = minkowski_inner(base.coords(), g);
  Vec out(g.begin(), g.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += ip * base.coords()[i];
  return {base, std::move(out)};
}

LorentzPoint exp_map(const LorentzPoint& base, const TangentVector& v) {
  require_same_size(base.coords(), v.vec);
  require_finite(v.vec);
  const double scale = std::max(1.0, lorentz_norm(v.vec)) * std::max(1.0, base.time());
  if (std::abs(minkowski_inner(base.coords(), v.vec)) > kTangentTol * scale) {
    throw GeometryError("vector is not tangent at the base point");
  }
  const double n = lorentz_norm(v.vec);
  if (n < 1e-12) return base;
  const double c = std::cosh(n);
  const double s = sinhc(n);
  Vec out(v.vec.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * base.coords()[i] + s * v.vec[i];
  return project_to_manifold(out);
}

TangentVector log_map(const LorentzPoint& base, const LorentzPoint& y) {
  require_same_size(base.coords(), y.coords());
  const double d = dist(base, y);
  const double a = std::max(1.0, -minkowski_inner(base.coords(), y.coords()));
  Vec u(y.coords().size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = y.coords()[i] - a * base.coords()[i];
  const double nu = lorentz_norm(u);
  if (d == 0.0 || nu == 0.0) return {base, Vec(u.size(), 0.0)};
  for (double& ui : u) ui *= d / nu;
  return project_to_tangent(base, u);
}

LorentzPoint exp0(ConstSpan spatial) {
  double n2 = 0.0;
  for (double v : spatial) n2 += v * v;
  const double n = std::sqrt(n2);
  const double s = sinhc(n);
  Vec sp(spatial.size());
  for (std::size_t i = 0; i < sp.size(); ++i) sp[i] = s * spatial[i];
  return LorentzPoint::from_spatial(sp);
}

Vec log0(const LorentzPoint& x) {
  // On the hyperboloid arcosh(x0) = asinh(|x_s|); the spatial form avoids
  // the cancellation in sqrt(x0^2 - 1).
  const double r = spatial_norm(x.coords());
  const double scale = r < 1e-12 ? 1.0 : std::asinh(r) / r;
  Vec out(x.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x.coords()[i + 1];
  return out;
}

namespace {

void check_weights(ConstSpan weights, std::size_t n) {
  if (n == 0) throw ArgumentError("aggregation over an empty point set");
  if (weights.size() != n) throw ArgumentError("weight count does not match point count");
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ArgumentError("negative aggregation weight");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ArgumentError("aggregation weights do not sum to 1");
}

}  // namespace

LorentzPoint hyp_agg(ConstSpan weights, std::span<const LorentzPoint> points) {
  check_weights(weights, points.size());
  Vec acc(points.front().dim(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].dim() != acc.size()) throw DimensionError("mixed dimensions in aggregation");
    const Vec t = log0(points[i]);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += weights[i] * t[k];
  }
  return exp0(acc);
}

const char* to_string(Mode mode) { return mode == Mode::lorentz ? "lorentz" : "euclidean"; }

Mode mode_from_string(const std::string& s) {
  if (s == "lorentz") return Mode::lorentz;
  if (s == "euclidean") return Mode::euclidean;
  throw ArgumentError("unknown geometry mode '" + s + "'");
}

Geometry::Geometry(GeometryMode mode) : mode_(mode) {
  if (mode_.dim == 0) throw ArgumentError("geometry dimension must be positive");
}

void Geometry::check_dim(ConstSpan x) const {
  if (x.size() != mode_.dim + 1) {
    throw DimensionError("expected ambient length " + std::to_string(mode_.dim + 1) + ", got " +
                         std::to_string(x.size()));
  }
}

Vec Geometry::origin() const {
  Vec o(mode_.dim + 1, 0.0);
  if (is_lorentz()) o[0] = 1.0;
  return o;
}

double Geometry::dist(ConstSpan x, ConstSpan y) const {
  check_dim(x);
  check_dim(y);
  if (is_lorentz()) {
    Vec delta(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] = x[i] - y[i];
    return 2.0 * std::asinh(0.5 * lorentz_norm(delta));
  }
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

Vec Geometry::exp0(ConstSpan spatial) const {
  if (spatial.size() != mode_.dim) throw DimensionError("tangent length mismatch");
  if (is_lorentz()) return manifold::exp0(spatial).coords();
  Vec out(mode_.dim + 1, 0.0);
  std::copy(spatial.begin(), spatial.end(), out.begin() + 1);
  return out;
}

Vec Geometry::log0(ConstSpan x) const {
  check_dim(x);
  if (is_lorentz()) return manifold::log0(LorentzPoint::from_spatial(x.subspan(1)));
  return Vec(x.begin() + 1, x.end());
}

double Geometry::radius(ConstSpan x) const {
  check_dim(x);
  return is_lorentz() ? std::asinh(spatial_norm(x)) : spatial_norm(x);
}

Vec Geometry::agg(ConstSpan weights, std::span<const Vec> points) const {
  check_weights(weights, points.size());
  Vec acc(mode_.dim, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec t = log0(points[i]);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += weights[i] * t[k];
  }
  return exp0(acc);
}

Vec Geometry::project(ConstSpan x) const {
  check_dim(x);
  if (is_lorentz()) return project_to_manifold(x).coords();
  Vec out(x.begin(), x.end());
  out[0] = 0.0;
  return out;
}

}  // namespace lqa::manifold
