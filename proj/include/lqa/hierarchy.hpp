#pragma once

// Rooted code hierarchies, the tree metric, supervision sets and the
// plane-embedding check for tree-likeness.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lqa::hier {

inline constexpr const char* kSyntheticRoot = "<ROOT>";

using Edge = std::pair<std::string, std::string>;

class CodeTrie {
 public:
  std::size_t size() const { return names_.size(); }
  std::size_t root() const { return root_; }
  bool synthetic_root() const { return synthetic_root_; }

  bool contains(const std::string& code) const { return index_.count(code) > 0; }
  /// Throws ArgumentError for unknown codes.
  std::size_t id(const std::string& code) const;
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const { return names_; }

  /// -1 for the root.
  long parent(std::size_t i) const { return parent_.at(i); }
  int depth(std::size_t i) const { return depth_.at(i); }
  const std::vector<std::size_t>& children(std::size_t i) const { return children_.at(i); }
  /// Number of incident edges.
  std::size_t degree(std::size_t i) const;
  std::size_t max_degree() const;
  int max_depth() const;
  /// Depth-1 ancestor of i (i itself at depth 1); the root maps to itself.
  std::size_t branch(std::size_t i) const { return branch_.at(i); }
  bool is_ancestor(std::size_t anc, std::size_t node) const;
  std::vector<std::size_t> leaves() const;
  std::vector<std::size_t> at_depth(int d) const;
  std::size_t lca(std::size_t u, std::size_t v) const;

  /// Edges in node order.
  std::vector<Edge> edges() const;

 private:
  friend CodeTrie build_trie(const std::vector<Edge>& edges);
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<long> parent_;
  std::vector<int> depth_;
  std::vector<std::size_t> branch_;
  std::vector<std::vector<std::size_t>> children_;
  std::size_t root_ = 0;
  bool synthetic_root_ = false;
};

/// Validates edges into a trie. Throws StructureError on cycles, multiple
/// roots, duplicate parents or empty input. A root named kSyntheticRoot
/// marks the trie as having a synthetic root.
CodeTrie build_trie(const std::vector<Edge>& edges);

/// Parent of each code is its longest proper prefix present in the set,
/// ignoring a trailing '.'. Several top-level codes get a synthetic root.
std::vector<Edge> prefix_edges(const std::vector<std::string>& codes);
CodeTrie build_trie_from_codes(const std::vector<std::string>& codes);

int tree_distance(const CodeTrie& t, std::size_t u, std::size_t v);
int tree_distance(const CodeTrie& t, const std::string& u, const std::string& v);

struct PairSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (parent, child)
};

PairSet extract_pairs(const CodeTrie& t, bool exclude_synthetic_root = true);

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

struct TripletSet {
  std::vector<Triplet> triplets;
};

/// Anchors uniform over non-root nodes; positive uniform over the parent
/// (unless it is a synthetic root) and the other nodes of the anchor's
/// depth-1 branch; negative uniform over nodes of other branches.
TripletSet sample_triplets(const CodeTrie& t, std::size_t count, std::uint64_t seed);

/// True when pos shares the anchor's branch and neg does not.
bool valid_triplet(const CodeTrie& t, const Triplet& tr);

using DistanceFn = std::function<double(std::size_t, std::size_t)>;

/// Largest four-point defect over 4-subsets of n points; exhaustive when
/// n <= exhaustive_limit, otherwise over `samples` seeded random 4-tuples.
double gromov_delta(std::size_t n, const DistanceFn& d, std::uint64_t seed = 0,
                    std::size_t exhaustive_limit = 12, std::size_t samples = 100000);
double gromov_delta(const CodeTrie& t, std::uint64_t seed = 0);

/// Node embedding into the 2-D hyperboloid. Coordinates are kept in
/// arbitrary precision since radii grow with tau times depth.
class PlaneEmbedding {
 public:
  struct Impl;
  PlaneEmbedding(std::shared_ptr<const Impl> impl, double tau);

  double tau() const { return tau_; }
  std::size_t size() const;
  unsigned precision_bits() const;
  /// Geodesic distance, evaluated at full precision then rounded.
  double dist(std::size_t u, std::size_t v) const;
  /// |<x,x>_L + 1| / max(1, x0^2) at full precision.
  double residual(std::size_t u) const;
  /// Coordinates rounded to double (may overflow far from the origin).
  std::vector<double> coords(std::size_t u) const;

 private:
  std::shared_ptr<const Impl> impl_;
  double tau_;
};

/// tau = (1+eps)/eps * 2 log(1/sin(pi/deg_max)), or 1 when deg_max <= 2.
double sarkar_scale(std::size_t max_degree, double epsilon);

/// Children sit on a circle of radius tau around their parent, spread
/// evenly over the angles not taken by the edge back to the grandparent.
PlaneEmbedding sarkar_embed(const CodeTrie& t, double epsilon, std::optional<double> tau = std::nullopt);

struct Distortion {
  double low = 0.0;
  double high = 0.0;
};

/// min / max over u != v of d_H(u,v) / (tau * d_T(u,v)).
Distortion distortion(const PlaneEmbedding& e, const CodeTrie& t);

/// Tab-separated edge file or a codes-only file (prefix parenting). Lines
/// starting with '#' and blank lines are skipped.
CodeTrie read_hierarchy(const std::string& path);
void write_edges(const CodeTrie& t, const std::string& path);

}  // namespace lqa::hier
