#include "lqa/hierarchy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <boost/multiprecision/mpfr.hpp>

#include "lqa/errors.hpp"

namespace lqa::hier {

namespace mp = boost::multiprecision;
using Real = mp::mpfr_float;

std::size_t CodeTrie::id(const std::string& code) const {
  const auto it = index_.find(code);
  if (it == index_.end()) throw ArgumentError("unknown code '" + code + "'");
  return it->second;
}

std::size_t CodeTrie::degree(std::size_t i) const {
  return children_.at(i).size() + (parent_.at(i) >= 0 ? 1 : 0);
}

std::size_t CodeTrie::max_degree() const {
  std::size_t m = 0;
  for (std::size_t i = 0; i < size(); ++i) m = std::max(m, degree(i));
  return m;
}

int CodeTrie::max_depth() const { return *std::max_element(depth_.begin(), depth_.end()); }

bool CodeTrie::is_ancestor(std::size_t anc, std::size_t node) const {
  long cur = parent_.at(node);
  while (cur >= 0) {
    if (static_cast<std::size_t>(cur) == anc) return true;
    cur = parent_[cur];
  }
  return false;
}

std::vector<std::size_t> CodeTrie::leaves() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (children_[i].empty()) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> CodeTrie::at_depth(int d) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (depth_[i] == d) out.push_back(i);
  }
  return out;
}

std::size_t CodeTrie::lca(std::size_t u, std::size_t v) const {
  while (depth_.at(u) > depth_.at(v)) u = parent_[u];
  while (depth_[v] > depth_[u]) v = parent_[v];
  while (u != v) {
    u = parent_[u];
    v = parent_[v];
  }
  return u;
}

std::vector<Edge> CodeTrie::edges() const {
  std::vector<Edge> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (parent_[i] >= 0) out.emplace_back(names_[parent_[i]], names_[i]);
  }
  return out;
}

CodeTrie build_trie(const std::vector<Edge>& edges) {
  if (edges.empty()) throw StructureError("hierarchy has no edges");
  CodeTrie t;
  auto intern = [&](const std::string& s) {
    const auto [it, fresh] = t.index_.emplace(s, t.names_.size());
    if (fresh) {
      t.names_.push_back(s);
      t.parent_.push_back(-1);
      t.children_.emplace_back();
    }
    return it->second;
  };
  for (const auto& [p, c] : edges) {
    if (p.empty() || c.empty()) throw StructureError("empty code in edge");
    if (p == c) throw StructureError("self loop at '" + c + "'");
    const std::size_t pi = intern(p);
    const std::size_t ci = intern(c);
    if (t.parent_[ci] >= 0) {
      if (static_cast<std::size_t>(t.parent_[ci]) == pi) throw StructureError("duplicate edge to '" + c + "'");
      throw StructureError("node '" + c + "' has two parents: '" + t.names_[t.parent_[ci]] + "' and '" + p + "'");
    }
    t.parent_[ci] = static_cast<long>(pi);
    t.children_[pi].push_back(ci);
  }
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t.parent_[i] < 0) roots.push_back(i);
  }
  if (roots.empty()) throw StructureError("cycle: no root node (starting at '" + t.names_[0] + "')");
  if (roots.size() > 1) {
    throw StructureError("multiple roots: '" + t.names_[roots[0]] + "' and '" + t.names_[roots[1]] + "'");
  }
  t.root_ = roots[0];
  t.synthetic_root_ = t.names_[t.root_] == kSyntheticRoot;
  t.depth_.assign(t.size(), -1);
  t.branch_.assign(t.size(), t.root_);
  t.depth_[t.root_] = 0;
  std::vector<std::size_t> queue{t.root_};
  for (std::size_t q = 0; q < queue.size(); ++q) {
    const std::size_t u = queue[q];
    for (std::size_t c : t.children_[u]) {
      t.depth_[c] = t.depth_[u] + 1;
      t.branch_[c] = t.depth_[c] == 1 ? c : t.branch_[u];
      queue.push_back(c);
    }
  }
  if (queue.size() != t.size()) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t.depth_[i] < 0) throw StructureError("cycle or orphan at '" + t.names_[i] + "'");
    }
  }
  return t;
}

namespace {

std::string strip_dot(std::string s) {
  while (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

}  // namespace

std::vector<Edge> prefix_edges(const std::vector<std::string>& codes) {
  const std::set<std::string> present(codes.begin(), codes.end());
  if (present.size() != codes.size()) throw StructureError("duplicate code in code list");
  std::vector<Edge> edges;
  std::vector<std::string> top;
  for (const std::string& c : codes) {
    if (c.empty()) throw StructureError("empty code");
    std::string parent;
    for (std::size_t len = c.size() - 1; len >= 1 && parent.empty(); --len) {
      const std::string p = strip_dot(c.substr(0, len));
      if (!p.empty() && p != c && present.count(p)) parent = p;
    }
    if (parent.empty()) {
      top.push_back(c);
    } else {
      edges.emplace_back(parent, c);
    }
  }
  if (top.size() > 1) {
    std::vector<Edge> with_root;
    for (const auto& c : top) with_root.emplace_back(kSyntheticRoot, c);
    with_root.insert(with_root.end(), edges.begin(), edges.end());
    return with_root;
  }
  return edges;
}

CodeTrie build_trie_from_codes(const std::vector<std::string>& codes) {
  if (codes.size() == 1) throw StructureError("a single code forms no hierarchy");
  return build_trie(prefix_edges(codes));
}

int tree_distance(const CodeTrie& t, std::size_t u, std::size_t v) {
  if (u >= t.size() || v >= t.size()) throw ArgumentError("node index out of range");
  return t.depth(u) + t.depth(v) - 2 * t.depth(t.lca(u, v));
}

int tree_distance(const CodeTrie& t, const std::string& u, const std::string& v) {
  return tree_distance(t, t.id(u), t.id(v));
}

PairSet extract_pairs(const CodeTrie& t, bool exclude_synthetic_root) {
  PairSet out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const long p = t.parent(i);
    if (p < 0) continue;
    if (exclude_synthetic_root && t.synthetic_root() && static_cast<std::size_t>(p) == t.root()) continue;
    out.pairs.emplace_back(static_cast<std::size_t>(p), i);
  }
  return out;
}

bool valid_triplet(const CodeTrie& t, const Triplet& tr) {
  const std::size_t b = t.branch(tr.anchor);
  if (tr.anchor == t.root() || tr.negative == t.root()) return false;
  const bool pos_ok = tr.positive != tr.anchor &&
                      (t.is_ancestor(tr.positive, tr.anchor) || t.branch(tr.positive) == b);
  return pos_ok && t.branch(tr.negative) != b;
}

TripletSet sample_triplets(const CodeTrie& t, std::size_t count, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_branch;
  std::vector<std::size_t> slot(t.size(), 0);
  for (std::size_t c : t.children(t.root())) {
    slot[c] = by_branch.size();
    by_branch.emplace_back();
  }
  if (by_branch.size() < 2) throw StructureError("triplet sampling needs at least two top-level branches");
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i == t.root()) continue;
    by_branch[slot[t.branch(i)]].push_back(i);
    anchors.push_back(i);
  }
  std::mt19937_64 rng(seed);
  TripletSet out;
  out.triplets.reserve(count);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  while (out.triplets.size() < count) {
    const std::size_t a = anchors[pick(anchors.size())];
    const auto& own = by_branch[slot[t.branch(a)]];
    const std::size_t parent = static_cast<std::size_t>(t.parent(a));
    const bool parent_ok = !(t.synthetic_root() && parent == t.root());
    // candidates: parent (optional) + own branch minus a
    const std::size_t n_pos = own.size() - 1 + (parent_ok ? 1 : 0);
    if (n_pos == 0) continue;
    std::size_t k = pick(n_pos);
    std::size_t pos = a;
    if (parent_ok && k == 0) {
      pos = parent;
    } else {
      if (parent_ok) --k;
      std::size_t idx = 0;
      for (std::size_t j : own) {
        if (j == a) continue;
        if (idx++ == k) {
          pos = j;
          break;
        }
      }
    }
    std::size_t total_other = anchors.size() - own.size();
    std::size_t r = pick(total_other);
    std::size_t neg = 0;
    for (const auto& br : by_branch) {
      if (&br == &own) continue;
      if (r < br.size()) {
        neg = br[r];
        break;
      }
      r -= br.size();
    }
    out.triplets.push_back({a, pos, neg});
  }
  return out;
}

namespace {

double four_point(const DistanceFn& d, std::size_t x, std::size_t y, std::size_t z, std::size_t w) {
  std::array<double, 3> s{d(x, y) + d(z, w), d(x, z) + d(y, w), d(x, w) + d(y, z)};
  std::sort(s.begin(), s.end());
  return (s[2] - s[1]) / 2.0;
}

}  // namespace

double gromov_delta(std::size_t n, const DistanceFn& d, std::uint64_t seed, std::size_t exhaustive_limit,
                    std::size_t samples) {
  if (n < 4) throw ArgumentError("gromov_delta needs at least 4 points");
  double delta = 0.0;
  if (n <= exhaustive_limit) {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        for (std::size_t c = b + 1; c < n; ++c)
          for (std::size_t e = c + 1; e < n; ++e) delta = std::max(delta, four_point(d, a, b, c, e));
    return delta;
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> u(0, n - 1);
  for (std::size_t s = 0; s < samples; ++s) {
    std::array<std::size_t, 4> q{};
    for (auto& x : q) x = u(rng);
    delta = std::max(delta, four_point(d, q[0], q[1], q[2], q[3]));
  }
  return delta;
}

double gromov_delta(const CodeTrie& t, std::uint64_t seed) {
  return gromov_delta(t.size(), [&](std::size_t u, std::size_t v) {
    return static_cast<double>(tree_distance(t, u, v));
  }, seed);
}

struct PlaneEmbedding::Impl {
  unsigned bits = 0;
  std::vector<std::array<Real, 3>> pts;
};

namespace {

unsigned digits10_for(unsigned bits) { return static_cast<unsigned>(std::ceil(bits * 0.30103)) + 2; }

class PrecisionScope {
 public:
  explicit PrecisionScope(unsigned bits) : saved_(Real::default_precision()) {
    Real::default_precision(digits10_for(bits));
  }
  ~PrecisionScope() { Real::default_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  unsigned saved_;
};

using Mat = std::array<std::array<Real, 3>, 3>;

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      Real s = 0;
      for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

Mat identity() {
  Mat m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = i == j ? 1 : 0;
  return m;
}

Mat rotation(const Real& a) {
  Mat m = identity();
  m[1][1] = mp::cos(a);
  m[1][2] = -mp::sin(a);
  m[2][1] = mp::sin(a);
  m[2][2] = mp::cos(a);
  return m;
}

Mat boost_x(const Real& t) {
  Mat m = identity();
  m[0][0] = mp::cosh(t);
  m[0][1] = mp::sinh(t);
  m[1][0] = mp::sinh(t);
  m[1][1] = mp::cosh(t);
  return m;
}

Real inner(const std::array<Real, 3>& x, const std::array<Real, 3>& y) {
  return -x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
}

}  // namespace

PlaneEmbedding::PlaneEmbedding(std::shared_ptr<const Impl> impl, double tau) : impl_(std::move(impl)), tau_(tau) {}

std::size_t PlaneEmbedding::size() const { return impl_->pts.size(); }
unsigned PlaneEmbedding::precision_bits() const { return impl_->bits; }

double PlaneEmbedding::dist(std::size_t u, std::size_t v) const {
  PrecisionScope scope(impl_->bits);
  if (u == v) return 0.0;
  Real ip = -inner(impl_->pts.at(u), impl_->pts.at(v));
  if (ip < 1) ip = 1;
  return static_cast<double>(mp::acosh(ip));
}

double PlaneEmbedding::residual(std::size_t u) const {
  PrecisionScope scope(impl_->bits);
  const auto& x = impl_->pts.at(u);
  Real r = mp::abs(inner(x, x) + 1);
  const Real scale = x[0] * x[0];
  if (scale > 1) r /= scale;
  return static_cast<double>(r);
}

std::vector<double> PlaneEmbedding::coords(std::size_t u) const {
  const auto& x = impl_->pts.at(u);
  return {static_cast<double>(x[0]), static_cast<double>(x[1]), static_cast<double>(x[2])};
}

double sarkar_scale(std::size_t max_degree, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ArgumentError("epsilon must lie in (0, 1]");
  if (max_degree <= 2) return 1.0;
  const double c = -2.0 * std::log(std::sin(std::numbers::pi / static_cast<double>(max_degree)));
  return (1.0 + epsilon) / epsilon * c;
}

PlaneEmbedding sarkar_embed(const CodeTrie& t, double epsilon, std::optional<double> tau_override) {
  const double tau = tau_override ? *tau_override : sarkar_scale(t.max_degree(), epsilon);
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ArgumentError("scale must be positive");
  const auto bits = static_cast<unsigned>(2.0 * std::max(1, t.max_depth()) * tau / std::log(2.0)) + 128;
  PrecisionScope scope(bits);
  auto impl = std::make_shared<PlaneEmbedding::Impl>();
  impl->bits = bits;
  impl->pts.resize(t.size());
  const Real pi = mp::acos(Real(-1));
  const Mat step = mat_mul(boost_x(Real(tau)), rotation(pi));
  std::vector<Mat> frame(t.size());
  frame[t.root()] = identity();
  std::vector<std::size_t> queue{t.root()};
  for (std::size_t q = 0; q < queue.size(); ++q) {
    const std::size_t v = queue[q];
    const Real deg = static_cast<double>(t.degree(v));
    const std::size_t base = t.parent(v) >= 0 ? 1 : 0;
    const auto& kids = t.children(v);
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const Real angle = 2 * pi * static_cast<double>(k + base) / deg;
      frame[kids[k]] = mat_mul(mat_mul(frame[v], rotation(angle)), step);
      queue.push_back(kids[k]);
    }
  }
  for (std::size_t v = 0; v < t.size(); ++v) {
    for (int i = 0; i < 3; ++i) impl->pts[v][i] = frame[v][i][0];
  }
  return PlaneEmbedding(std::move(impl), tau);
}

Distortion distortion(const PlaneEmbedding& e, const CodeTrie& t) {
  if (e.size() != t.size()) throw ArgumentError("embedding does not cover the trie");
  Distortion out{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t u = 0; u < t.size(); ++u) {
    for (std::size_t v = u + 1; v < t.size(); ++v) {
      const double r = e.dist(u, v) / (e.tau() * tree_distance(t, u, v));
      out.low = std::min(out.low, r);
      out.high = std::max(out.high, r);
    }
  }
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

CodeTrie read_hierarchy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open hierarchy file '" + path + "'");
  std::vector<Edge> edges;
  std::vector<std::string> codes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab != std::string::npos) {
      edges.emplace_back(trim(line.substr(0, tab)), trim(line.substr(tab + 1)));
    } else {
      codes.push_back(s);
    }
  }
  if (!edges.empty() && !codes.empty()) {
    throw DataError(path + ": mixes edge lines and code-only lines");
  }
  if (!edges.empty()) return build_trie(edges);
  if (codes.empty()) throw DataError(path + ": no hierarchy entries");
  return build_trie_from_codes(codes);
}

void write_edges(const CodeTrie& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& [p, c] : t.edges()) out << p << '\t' << c << '\n';
}

}  // namespace lqa::hier
