#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "khop/errors.hpp"

namespace khop {

/// Undirected communication topology. Node ids are 1-based everywhere,
/// matching the edge-list file format and the agent numbering used in
/// scenario configs.
class Graph {
 public:
  Graph(int node_count, const std::vector<std::pair<int, int>>& edges)
      : n_(node_count), adj_(static_cast<size_t>(std::max(node_count, 0))) {
    if (node_count <= 0) throw std::invalid_argument("graph needs at least one node");
    for (auto [a, b] : edges) add_edge(a, b);
    for (auto& nb : adj_) std::sort(nb.begin(), nb.end());
  }

  int node_count() const { return n_; }

  const std::vector<int>& neighbors(int i) const {
    check_node(i);
    return adj_[static_cast<size_t>(i - 1)];
  }

  int degree(int i) const { return static_cast<int>(neighbors(i).size()); }

  bool has_edge(int i, int j) const {
    const auto& nb = neighbors(i);
    check_node(j);
    return std::binary_search(nb.begin(), nb.end(), j);
  }

  std::vector<std::pair<int, int>> edges() const {
    std::vector<std::pair<int, int>> out;
    for (int i = 1; i <= n_; ++i)
      for (int j : neighbors(i))
        if (i < j) out.emplace_back(i, j);
    return out;
  }

  /// Shortest-path hop counts from node i; -1 where unreachable.
  std::vector<int> bfs_distances(int i) const {
    check_node(i);
    std::vector<int> dist(static_cast<size_t>(n_), -1);
    std::vector<int> queue;
    queue.reserve(static_cast<size_t>(n_));
    dist[static_cast<size_t>(i - 1)] = 0;
    queue.push_back(i);
    for (size_t head = 0; head < queue.size(); ++head) {
      int u = queue[head];
      for (int v : adj_[static_cast<size_t>(u - 1)]) {
        if (dist[static_cast<size_t>(v - 1)] < 0) {
          dist[static_cast<size_t>(v - 1)] = dist[static_cast<size_t>(u - 1)] + 1;
          queue.push_back(v);
        }
      }
    }
    return dist;
  }

  int common_neighbor_count(int i, int j) const {
    const auto& a = neighbors(i);
    const auto& b = neighbors(j);
    int count = 0;
    size_t p = 0, q = 0;
    while (p < a.size() && q < b.size()) {
      if (a[p] == b[q]) { ++count; ++p; ++q; }
      else if (a[p] < b[q]) ++p;
      else ++q;
    }
    return count;
  }

  // Edge-list format: first line N, then one "i j" pair per line (1-based).
  // Blank lines and '#' comments are ignored.
  static Graph from_edge_list(std::istream& in) {
    std::string line;
    int n = -1;
    std::vector<std::pair<int, int>> edges;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      if (n < 0) {
        if (ls >> n) {
          int extra;
          if (ls >> extra) throw config_error("edge list line 1: expected node count only");
        }
        continue;
      }
      int a, b;
      if (!(ls >> a)) continue;  // blank
      if (!(ls >> b)) throw config_error("edge list line " + std::to_string(lineno) + ": expected two node ids");
      edges.emplace_back(a, b);
    }
    if (n < 0) throw config_error("edge list: missing node count");
    return Graph(n, edges);
  }

  static Graph load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open graph file: " + path);
    return from_edge_list(in);
  }

  void save(std::ostream& out) const {
    out << n_ << "\n";
    for (auto [a, b] : edges()) out << a << " " << b << "\n";
  }

 private:
  void add_edge(int a, int b) {
    check_node(a);
    check_node(b);
    if (a == b) throw std::invalid_argument("self-loop on node " + std::to_string(a));
    if (has_edge_unsorted(a, b)) return;  // duplicates collapse
    adj_[static_cast<size_t>(a - 1)].push_back(b);
    adj_[static_cast<size_t>(b - 1)].push_back(a);
  }

  bool has_edge_unsorted(int a, int b) const {
    const auto& nb = adj_[static_cast<size_t>(a - 1)];
    return std::find(nb.begin(), nb.end(), b) != nb.end();
  }

  void check_node(int i) const {
    if (i < 1 || i > n_)
      throw std::invalid_argument("node id " + std::to_string(i) + " out of range 1.." +
                                  std::to_string(n_));
  }

  int n_ = 0;
  std::vector<std::vector<int>> adj_;
};

inline bool is_connected(const Graph& g) {
  auto dist = g.bfs_distances(1);
  return std::all_of(dist.begin(), dist.end(), [](int d) { return d >= 0; });
}

/// Hop range defining who estimates whom. In standard mode an agent's
/// estimators sit at shortest-path distance 2..k; the extended variant pulls
/// the 1-hop neighbors in as well, which keeps the scheme usable when true
/// values cannot be relayed across two hops.
enum class NeighborhoodMode { standard, extended };

inline const char* to_string(NeighborhoodMode m) {
  return m == NeighborhoodMode::standard ? "standard" : "extended";
}

struct KhopNeighborhood {
  int agent = 0;
  int k = 2;
  NeighborhoodMode mode = NeighborhoodMode::standard;
  std::vector<int> members;  // ascending node ids; fixed stack order

  int eta() const { return static_cast<int>(members.size()); }

  bool contains(int node) const {
    return std::binary_search(members.begin(), members.end(), node);
  }

  /// Position of a node in the stack order, or -1.
  int index_of(int node) const {
    auto it = std::lower_bound(members.begin(), members.end(), node);
    if (it == members.end() || *it != node) return -1;
    return static_cast<int>(it - members.begin());
  }
};

inline KhopNeighborhood khop_neighbors(const Graph& g, int agent, int k,
                                       NeighborhoodMode mode) {
  if (k < 2) throw std::invalid_argument("k-hop bound must be >= 2");
  auto dist = g.bfs_distances(agent);  // validates agent id
  KhopNeighborhood out;
  out.agent = agent;
  out.k = k;
  out.mode = mode;
  const int lo = (mode == NeighborhoodMode::standard) ? 2 : 1;
  for (int node = 1; node <= g.node_count(); ++node) {
    int d = dist[static_cast<size_t>(node - 1)];
    if (d >= lo && d <= k) out.members.push_back(node);
  }
  return out;
}

/// Weight on the (estimate - true value) term of one member's disagreement.
/// Standard mode counts the common 1-hop neighbors relaying the true value;
/// extended mode uses 1 for members that are themselves 1-hop neighbors.
inline double anchor_weight(const Graph& g, int agent, int member,
                            NeighborhoodMode mode) {
  if (mode == NeighborhoodMode::extended && g.has_edge(agent, member)) return 1.0;
  return static_cast<double>(g.common_neighbor_count(agent, member));
}

/// L + H for one agent's neighborhood: induced-subgraph Laplacian plus the
/// diagonal of anchor weights. Positive definite on connected graphs.
struct DisagreementMatrix {
  int agent = 0;
  Eigen::MatrixXd laplacian;
  Eigen::VectorXd anchors;
  Eigen::MatrixXd m;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
};

inline DisagreementMatrix disagreement_matrix(const Graph& g,
                                              const KhopNeighborhood& nbhd) {
  const int eta = nbhd.eta();
  if (eta < 1) throw std::invalid_argument("nothing to estimate: empty neighborhood");
  DisagreementMatrix out;
  out.agent = nbhd.agent;
  out.laplacian = Eigen::MatrixXd::Zero(eta, eta);
  out.anchors = Eigen::VectorXd::Zero(eta);
  for (int a = 0; a < eta; ++a) {
    int node = nbhd.members[static_cast<size_t>(a)];
    for (int other : g.neighbors(node)) {
      int b = nbhd.index_of(other);
      if (b < 0) continue;
      out.laplacian(a, a) += 1.0;
      out.laplacian(a, b) -= 1.0;
    }
    out.anchors(a) = anchor_weight(g, nbhd.agent, node, nbhd.mode);
  }
  out.m = out.laplacian;
  out.m.diagonal() += out.anchors;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.m, Eigen::EigenvaluesOnly);
  out.lambda_min = eig.eigenvalues().minCoeff();
  out.lambda_max = eig.eigenvalues().maxCoeff();
  return out;
}

}  // namespace khop
