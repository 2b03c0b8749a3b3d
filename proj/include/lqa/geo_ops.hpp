#pragma once

// Differentiable geometry kernels on the tape, with a mode switch so the
// model code is identical for the Lorentz model and its euclidean twin.

#include <span>

#include "lqa/autodiff.hpp"
#include "lqa/manifold.hpp"

namespace lqa::ad {

Var minkowski(Tape& t, Var x, Var y);
/// 2*asinh(|x-y|_L / 2) == arcosh(-<x,y>_L) on the hyperboloid.
Var lorentz_dist(Tape& t, Var x, Var y);
/// Spatial (d) -> ambient (d+1).
Var lorentz_exp0(Tape& t, Var v);
/// Ambient (d+1) -> spatial (d); reads only the spatial coordinates.
Var lorentz_log0(Tape& t, Var x);
/// L2 distance between the spatial parts.
Var euclid_dist(Tape& t, Var x, Var y);
Var euclid_exp0(Tape& t, Var v);
Var euclid_log0(Tape& t, Var x);

class GeoOps {
 public:
  explicit GeoOps(manifold::GeometryMode mode) : mode_(mode) {}

  const manifold::GeometryMode& mode() const { return mode_; }
  bool is_lorentz() const { return mode_.mode == manifold::Mode::lorentz; }
  std::size_t dim() const { return mode_.dim; }

  Var dist(Tape& t, Var x, Var y) const;
  Var exp0(Tape& t, Var v) const;
  Var log0(Tape& t, Var x) const;
  Var origin(Tape& t) const;
  Var radius(Tape& t, Var x) const;
  /// exp_o(sum_i w_i log_o(x_i)).
  Var agg(Tape& t, Var weights, std::span<const Var> points) const;
  /// Distances from x to the given rows of a point table, as one node.
  Var dist_to_rows(Tape& t, Var x, Parameter& table, std::span<const std::size_t> rows) const;
  /// d(table[a_k], table[b_k]) for each k, as one node.
  Var row_pair_dists(Tape& t, Parameter& table, std::span<const std::size_t> a,
                     std::span<const std::size_t> b) const;
  /// Same, with log-mapped points already available.
  Var agg_tangent(Tape& t, Var weights, std::span<const Var> tangents) const;

 private:
  manifold::GeometryMode mode_;
};

}  // namespace lqa::ad
