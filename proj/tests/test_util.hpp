#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "lqa/hierarchy.hpp"
#include "lqa/manifold.hpp"

namespace lqa::testing {

using manifold::Vec;

/// Uniform direction, norm uniform in [0, max_norm].
inline Vec random_tangent(std::mt19937_64& rng, std::size_t dim, double max_norm) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, max_norm);
  Vec v(dim);
  double s = 0.0;
  for (double& x : v) {
    x = n01(rng);
    s += x * x;
  }
  const double target = u(rng);
  for (double& x : v) x *= target / std::sqrt(s);
  return v;
}

inline manifold::LorentzPoint random_point(std::mt19937_64& rng, std::size_t dim, double max_radius) {
  return manifold::exp0(random_tangent(rng, dim, max_radius));
}

/// Weighted Frechet mean by Karcher iteration at a moving base point:
/// x <- exp_x(sum_i w_i log_x(z_i)). Independent of the origin-tangent route.
inline manifold::LorentzPoint frechet_mean(const std::vector<double>& w,
                                           const std::vector<manifold::LorentzPoint>& z,
                                           int iters = 500) {
  manifold::LorentzPoint x = z.front();
  for (int it = 0; it < iters; ++it) {
    Vec step(x.coords().size(), 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const auto l = manifold::log_map(x, z[i]);
      for (std::size_t k = 0; k < step.size(); ++k) step[k] += w[i] * l.vec[k];
    }
    x = manifold::exp_map(x, manifold::project_to_tangent(x, step));
  }
  return x;
}

/// Random rooted tree with n nodes; no node exceeds max_degree incident edges.
inline hier::CodeTrie random_trie(std::mt19937_64& rng, std::size_t n, std::size_t max_degree) {
  std::vector<std::size_t> deg(n, 0);
  std::vector<hier::Edge> edges;
  for (std::size_t v = 1; v < n; ++v) {
    std::size_t p;
    do {
      p = std::uniform_int_distribution<std::size_t>(0, v - 1)(rng);
    } while (deg[p] + 1 > max_degree);
    ++deg[p];
    ++deg[v];
    edges.emplace_back("n" + std::to_string(p), "n" + std::to_string(v));
  }
  return hier::build_trie(edges);
}

/// Hop distances by breadth-first search over the undirected edge set.
inline std::vector<std::vector<int>> bfs_distances(const hier::CodeTrie& t) {
  const std::size_t n = t.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (t.parent(i) >= 0) {
      adj[i].push_back(static_cast<std::size_t>(t.parent(i)));
      adj[static_cast<std::size_t>(t.parent(i))].push_back(i);
    }
  }
  std::vector<std::vector<int>> d(n, std::vector<int>(n, -1));
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::size_t> q{s};
    d[s][s] = 0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      for (std::size_t w : adj[q[k]]) {
        if (d[s][w] < 0) {
          d[s][w] = d[s][q[k]] + 1;
          q.push_back(w);
        }
      }
    }
  }
  return d;
}

}  // namespace lqa::testing
