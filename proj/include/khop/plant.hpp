#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "khop/errors.hpp"

namespace khop {

using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using DisturbanceFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x_global, double t)>;

/// Declared boundedness of an input map. `bounded` admits dropping the input
/// observer entirely; `derivative_bounded` is what the input observer needs.
enum class InputMapClass { bounded, derivative_bounded, unbounded };

/// One agent's dynamics: dx/dt = drift(x) + input_map(u) + disturbance(x, t).
struct AgentModel {
  int id = 0;
  int dim = 1;
  VectorFn drift;
  double drift_lipschitz = 0.0;
  VectorFn input_map;
  InputMapClass input_class = InputMapClass::unbounded;
  DisturbanceFn disturbance;
  double disturbance_bound = 0.0;
};

/// Planar drift used by the consensus demo:
///   [tanh(0.5 x1 + 0.5 x2), sin(0.5 x1 - 0.5 x2)], Lipschitz constant 1.
inline Eigen::VectorXd tanh_sin_drift(const Eigen::VectorXd& x) {
  Eigen::VectorXd out(2);
  out(0) = std::tanh(0.5 * x(0) + 0.5 * x(1));
  out(1) = std::sin(0.5 * x(0) - 0.5 * x(1));
  return out;
}

/// Componentwise-tanh consensus input: each neighbor, true or estimated,
/// pulls the agent toward itself with force tanh(x_j - x_i), scaled by the
/// gain. Bounded by gain * (#neighbors) in every component.
inline Eigen::VectorXd consensus_control(const Eigen::VectorXd& x_own,
                                         std::span<const Eigen::VectorXd> truth_neighbors,
                                         std::span<const Eigen::VectorXd> estimated_neighbors,
                                         double gain) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(x_own.size());
  for (const auto& xj : truth_neighbors) u += (xj - x_own).array().tanh().matrix();
  for (const auto& xj : estimated_neighbors) u += (xj - x_own).array().tanh().matrix();
  return gain * u;
}

/// Consensus-controller wiring: truth-mode feeds every task neighbor's real
/// state; estimated mode substitutes the local estimate exactly on the task
/// neighbors outside the communication neighborhood.
enum class ControlMode { truth, estimated };

/// Projector onto the orthogonal complement of the consensus manifold,
/// I_{Nn} - (1 1^T ⊗ I_n)/N. Built explicitly for verification; the
/// simulator applies it via mean subtraction instead.
inline Eigen::MatrixXd consensus_projector(int agents, int dim) {
  const int total = agents * dim;
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(total, total);
  for (int i = 0; i < agents; ++i)
    for (int j = 0; j < agents; ++j)
      for (int l = 0; l < dim; ++l)
        p(i * dim + l, j * dim + l) -= 1.0 / agents;
  return p;
}

/// (Pi x, ||Pi x||) computed as deviation from the agent-mean state.
inline std::pair<Eigen::VectorXd, double> consensus_disagreement(const Eigen::VectorXd& x_global,
                                                                 int dim) {
  if (x_global.size() % dim != 0)
    throw std::invalid_argument("global state size not divisible by agent dimension");
  const int agents = static_cast<int>(x_global.size()) / dim;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (int i = 0; i < agents; ++i) mean += x_global.segment(i * dim, dim);
  mean /= agents;
  Eigen::VectorXd out(x_global.size());
  for (int i = 0; i < agents; ++i)
    out.segment(i * dim, dim) = x_global.segment(i * dim, dim) - mean;
  return {out, out.norm()};
}

/// Built-in disturbance families. All are continuous in t, deterministic
/// given the seed, and bounded by the declared amplitude.
struct DisturbanceSpec {
  enum class Family { zero, sinusoid, bounded_random };
  Family family = Family::zero;
  double amplitude = 0.0;
  double omega = 1.0;
  unsigned seed = 0;
};

inline DisturbanceFn make_disturbance(const DisturbanceSpec& spec, int agent_id, int dim) {
  using Family = DisturbanceSpec::Family;
  if (spec.family == Family::zero || spec.amplitude == 0.0) {
    return [dim](const Eigen::VectorXd&, double) { return Eigen::VectorXd::Zero(dim); };
  }
  if (spec.family == Family::sinusoid) {
    std::mt19937 rng(spec.seed * 8191u + static_cast<unsigned>(agent_id) * 131u + 7u);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::vector<double> phases(static_cast<size_t>(dim));
    for (auto& p : phases) p = phase(rng);
    double a = spec.amplitude, w = spec.omega;
    return [dim, a, w, phases](const Eigen::VectorXd&, double t) {
      Eigen::VectorXd out(dim);
      for (int l = 0; l < dim; ++l) out(l) = a * std::sin(w * t + phases[static_cast<size_t>(l)]);
      return out;
    };
  }
  // bounded_random: three incommensurate sinusoids per component with
  // seed-drawn frequencies and phases, scaled so the sup stays within the
  // amplitude. Smooth, so integrator order checks remain valid.
  std::mt19937 rng(spec.seed * 48271u + static_cast<unsigned>(agent_id) * 257u + 11u);
  std::uniform_real_distribution<double> freq(0.5, 3.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  std::vector<double> ws(static_cast<size_t>(3 * dim)), ps(static_cast<size_t>(3 * dim));
  for (auto& w : ws) w = freq(rng) * spec.omega;
  for (auto& p : ps) p = phase(rng);
  double a = spec.amplitude / 3.0;
  return [dim, a, ws, ps](const Eigen::VectorXd&, double t) {
    Eigen::VectorXd out(dim);
    for (int l = 0; l < dim; ++l) {
      double acc = 0.0;
      for (int m = 0; m < 3; ++m)
        acc += std::sin(ws[static_cast<size_t>(3 * l + m)] * t + ps[static_cast<size_t>(3 * l + m)]);
      out(l) = a * acc;
    }
    return out;
  };
}

}  // namespace khop
