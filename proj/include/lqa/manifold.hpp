#pragma once

// Lorentz (hyperboloid) model of hyperbolic space with curvature -1.
//
// Points live in R^{d+1} with <x,x>_L = -1 and x0 > 0. Coordinate 0 is the
// time coordinate; coordinates 1..d are the spatial part. The euclidean
// mode stores points as (0, spatial...) in the same layout so callers can
// switch geometry without changing shapes.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lqa::manifold {

using Vec = std::vector<double>;
using ConstSpan = std::span<const double>;

/// Residual tolerance guaranteed by every producing operation.
inline constexpr double kManifoldTol = 1e-9;
/// Residual tolerance accepted on inputs.
inline constexpr double kInputTol = 1e-7;
inline constexpr double kTangentTol = 1e-8;

/// -x0*y0 + sum_{i>=1} x_i*y_i
double minkowski_inner(ConstSpan x, ConstSpan y);

/// |<x,x>_L + 1| scaled by max(1, x0^2). The scaling makes the residual a
/// relative quantity: far from the origin x0^2 is large and the absolute
/// residual of a correctly rounded point grows like ulp(x0)*x0.
double manifold_residual(ConstSpan x);

/// Throws GeometryError when x is off the upper sheet beyond tol.
void require_on_manifold(ConstSpan x, double tol = kInputTol);

class LorentzPoint {
 public:
  LorentzPoint() = default;

  static LorentzPoint origin(std::size_t dim);
  /// Validates membership; throws GeometryError.
  static LorentzPoint from_coords(Vec coords, double tol = kInputTol);
  /// Lifts a spatial vector: x0 = sqrt(1 + |s|^2).
  static LorentzPoint from_spatial(ConstSpan spatial);

  const Vec& coords() const { return coords_; }
  std::size_t dim() const { return coords_.empty() ? 0 : coords_.size() - 1; }
  double time() const { return coords_[0]; }
  ConstSpan spatial() const { return ConstSpan(coords_).subspan(1); }

  friend bool operator==(const LorentzPoint&, const LorentzPoint&) = default;

 private:
  explicit LorentzPoint(Vec coords) : coords_(std::move(coords)) {}
  Vec coords_;
};

struct TangentVector {
  LorentzPoint base;
  Vec vec;
};

/// sqrt(max(0, <v,v>_L)).
double lorentz_norm(ConstSpan v);

/// Geodesic distance arcosh(-<x,y>_L), evaluated through the chord
/// 2*asinh(|x-y|_L / 2), which is the same function on the manifold but
/// keeps full precision for nearby points.
double dist(const LorentzPoint& x, const LorentzPoint& y);

LorentzPoint exp_map(const LorentzPoint& base, const TangentVector& v);
TangentVector log_map(const LorentzPoint& base, const LorentzPoint& y);

/// Exponential / logarithmic map at the origin, in spatial coordinates.
LorentzPoint exp0(ConstSpan spatial);
Vec log0(const LorentzPoint& x);

LorentzPoint project_to_manifold(ConstSpan ambient);
TangentVector project_to_tangent(const LorentzPoint& base, ConstSpan g);

/// exp_o(sum_i w_i log_o(z_i)).
LorentzPoint hyp_agg(ConstSpan weights, std::span<const LorentzPoint> points);

/// sinh(x)/x with a series branch near zero.
double sinhc(double x);

enum class Mode { lorentz, euclidean };

const char* to_string(Mode mode);
Mode mode_from_string(const std::string& s);

struct GeometryMode {
  Mode mode = Mode::lorentz;
  std::size_t dim = 16;
  double tol = kManifoldTol;
};

/// Mode-dispatching geometry over ambient vectors of length dim+1.
class Geometry {
 public:
  explicit Geometry(GeometryMode mode);

  const GeometryMode& mode() const { return mode_; }
  bool is_lorentz() const { return mode_.mode == Mode::lorentz; }

  Vec origin() const;
  double dist(ConstSpan x, ConstSpan y) const;
  Vec exp0(ConstSpan spatial) const;
  Vec log0(ConstSpan x) const;
  /// Distance to the origin (hyperbolic radius or L2 norm).
  double radius(ConstSpan x) const;
  Vec agg(ConstSpan weights, std::span<const Vec> points) const;
  /// Canonicalizes an ambient vector for this mode.
  Vec project(ConstSpan x) const;

 private:
  void check_dim(ConstSpan x) const;
  GeometryMode mode_;
};

}  // namespace lqa::manifold
