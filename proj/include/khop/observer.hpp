#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "khop/errors.hpp"
#include "khop/funnel.hpp"
#include "khop/graph.hpp"

namespace khop {

/// Which terms the state observer keeps. The correction term is always
/// present; the drift model and the input estimate can each be dropped when
/// the corresponding boundedness assumption covers them.
enum class ObserverVariant { full, no_input_observer, no_drift, no_drift_no_input };

inline bool variant_has_drift(ObserverVariant v) {
  return v == ObserverVariant::full || v == ObserverVariant::no_input_observer;
}

inline bool variant_has_input_observer(ObserverVariant v) {
  return v == ObserverVariant::full || v == ObserverVariant::no_drift;
}

inline const char* to_string(ObserverVariant v) {
  switch (v) {
    case ObserverVariant::full: return "full";
    case ObserverVariant::no_input_observer: return "no_input_observer";
    case ObserverVariant::no_drift: return "no_drift";
    default: return "no_drift_no_input";
  }
}

/// Static recipe for one estimator's disagreement about one target: which
/// 1-hop peers contribute estimate differences, and the weight on the
/// true-value residual. Everything referenced here reaches the estimator
/// through single-hop exchange.
struct SlotPlan {
  int estimator = 0;
  int target = 0;
  std::vector<int> peers;  // N(estimator) ∩ members(target), ascending
  double anchor = 0.0;
};

inline SlotPlan make_slot_plan(const Graph& g, const KhopNeighborhood& target_nbhd,
                               int estimator) {
  if (!target_nbhd.contains(estimator))
    throw protocol_error("node " + std::to_string(estimator) +
                         " does not estimate agent " + std::to_string(target_nbhd.agent));
  SlotPlan plan;
  plan.estimator = estimator;
  plan.target = target_nbhd.agent;
  for (int nb : g.neighbors(estimator))
    if (target_nbhd.contains(nb)) plan.peers.push_back(nb);
  plan.anchor = anchor_weight(g, target_nbhd.agent, estimator, target_nbhd.mode);
  return plan;
}

/// Values one estimator can read when evaluating a disagreement: its own
/// estimate, the matching estimates held by 1-hop peers, and the target's
/// true value where the anchor weight grants access to it.
struct LocalView {
  Eigen::VectorXd own_estimate;
  std::function<Eigen::VectorXd(int peer)> peer_estimate;
  std::function<Eigen::VectorXd()> target_truth;
};

/// xi (or mu) for one slot:
///   sum over peers of (own - peer estimate) + anchor * (own - truth).
/// Works for state and input estimates alike; the view decides which.
inline Eigen::VectorXd local_disagreement(const SlotPlan& plan, const LocalView& view) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(view.own_estimate.size());
  for (int peer : plan.peers) {
    if (!view.peer_estimate) throw protocol_error("peer estimate accessor missing");
    Eigen::VectorXd other = view.peer_estimate(peer);
    if (other.size() != acc.size())
      throw protocol_error("peer estimate dimension mismatch from node " + std::to_string(peer));
    acc += view.own_estimate - other;
  }
  if (plan.anchor != 0.0) {
    if (!view.target_truth) throw protocol_error("target truth unavailable to estimator");
    acc += plan.anchor * (view.own_estimate - view.target_truth());
  }
  return acc;
}

/// rho(t)^{-1} J_T(e) T(e) for one scalar component, e = xi/rho(t) after the
/// numerical clamp. Sign matches xi, so subtracting it steers the estimate
/// back toward zero disagreement.
struct CorrectionTerm {
  double value = 0.0;
  bool clamped = false;
};

inline CorrectionTerm funnel_correction(double disagreement, double rho_t) {
  CorrectionTerm out;
  const double e = disagreement / rho_t;
  out.clamped = out_of_funnel(e);
  out.value = transform_jacobian(e) * transform(e) / rho_t;
  return out;
}

/// State-estimate derivative for one slot, componentwise:
///   f(x_hat) + g_hat - rho^{-1} J_T(e) eps, with terms dropped per variant.
/// `clamp_count`, when given, accumulates funnel-contact events.
inline Eigen::VectorXd ppso_derivative(
    const Eigen::VectorXd& xi, const FunnelBank& bank, int neighbor_index, double t,
    ObserverVariant variant, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& drift,
    const Eigen::VectorXd& estimate, const Eigen::VectorXd& g_hat, long* clamp_count = nullptr) {
  const int n = static_cast<int>(xi.size());
  Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
  if (variant_has_drift(variant)) d = drift(estimate);
  if (variant_has_input_observer(variant)) d += g_hat;
  for (int l = 0; l < n; ++l) {
    auto corr = funnel_correction(xi(l), bank.at(neighbor_index, l).value(t));
    if (corr.clamped && clamp_count) ++*clamp_count;
    d(l) -= corr.value;
  }
  return d;
}

/// Input-estimate derivative for one slot: -omega^{-1} J_T(q) nu.
inline Eigen::VectorXd ppio_derivative(const Eigen::VectorXd& mu, const FunnelBank& bank,
                                       int neighbor_index, double t,
                                       long* clamp_count = nullptr) {
  const int n = static_cast<int>(mu.size());
  Eigen::VectorXd d(n);
  for (int l = 0; l < n; ++l) {
    auto corr = funnel_correction(mu(l), bank.at(neighbor_index, l).value(t));
    if (corr.clamped && clamp_count) ++*clamp_count;
    d(l) = -corr.value;
  }
  return d;
}

/// Simulator-side oracle for the stacked identity: the locally accumulated
/// disagreements of one target, reassembled in neighbor order, must equal
/// M times the estimation-error stack. Returns the max-abs residual across
/// components. The matrix route is computed here, independent of the local
/// sums being checked.
inline double stacked_residual(const Eigen::MatrixXd& m,
                               const std::vector<Eigen::VectorXd>& local_disagreements,
                               const std::vector<Eigen::VectorXd>& estimation_errors) {
  const int eta = static_cast<int>(m.rows());
  if (static_cast<int>(local_disagreements.size()) != eta ||
      static_cast<int>(estimation_errors.size()) != eta)
    throw std::invalid_argument("stack size does not match disagreement matrix");
  if (eta == 0) return 0.0;
  const int n = static_cast<int>(local_disagreements[0].size());
  double worst = 0.0;
  Eigen::VectorXd err(eta), dis(eta);
  for (int l = 0; l < n; ++l) {
    for (int j = 0; j < eta; ++j) {
      err(j) = estimation_errors[static_cast<size_t>(j)](l);
      dis(j) = local_disagreements[static_cast<size_t>(j)](l);
    }
    worst = std::max(worst, (dis - m * err).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace khop
