#pragma once

#include <random>
#include <utility>
#include <vector>

#include "khop/graph.hpp"

namespace khop::testing {

/// Random connected graph: a random attachment tree plus extra edges.
/// Deterministic for a given engine state.
inline Graph random_connected_graph(std::mt19937& rng, int max_nodes = 12) {
  std::uniform_int_distribution<int> size_dist(2, max_nodes);
  const int n = size_dist(rng);
  std::vector<std::pair<int, int>> edges;
  for (int v = 2; v <= n; ++v) {
    std::uniform_int_distribution<int> parent(1, v - 1);
    edges.emplace_back(parent(rng), v);
  }
  std::uniform_int_distribution<int> extra_dist(0, n);
  std::uniform_int_distribution<int> node_dist(1, n);
  const int extra = extra_dist(rng);
  for (int e = 0; e < extra; ++e) {
    int a = node_dist(rng), b = node_dist(rng);
    if (a != b) edges.emplace_back(a, b);
  }
  return Graph(n, edges);
}

inline Graph path_graph(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 1; i < n; ++i) edges.emplace_back(i, i + 1);
  return Graph(n, edges);
}

inline Graph cycle_graph(int n) {
  auto edges = std::vector<std::pair<int, int>>{};
  for (int i = 1; i < n; ++i) edges.emplace_back(i, i + 1);
  edges.emplace_back(n, 1);
  return Graph(n, edges);
}

}  // namespace khop::testing
