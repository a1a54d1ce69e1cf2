#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "khop/errors.hpp"
#include "khop/graph.hpp"

namespace khop {

/// Numerical guard on normalized disagreements: values are clamped into
/// [-1 + guard, 1 - guard] before the logarithmic transform. A clamp should
/// never fire from a feasible start; the simulator records each one as a
/// funnel-contact diagnostic.
inline constexpr double kNormalizedGuard = 1e-9;

inline bool out_of_funnel(double e) { return std::abs(e) >= 1.0 - kNormalizedGuard; }

inline double clamp_normalized(double e) {
  const double lim = 1.0 - kNormalizedGuard;
  if (e > lim) return lim;
  if (e < -lim) return -lim;
  return e;
}

/// Strictly increasing transform sending (-1,1) to the real line, T(0) = 0.
inline double transform(double e) {
  e = clamp_normalized(e);
  return std::log1p(e) - std::log1p(-e);  // ln((1+e)/(1-e))
}

/// dT/de = 2/(1-e^2), always >= 2.
inline double transform_jacobian(double e) {
  e = clamp_normalized(e);
  return 2.0 / (1.0 - e * e);
}

/// Decreasing-exponential performance envelope
///   value(t) = (rho0 - rho_inf) e^{-decay t} + rho_inf.
struct Funnel {
  double rho0 = 1.0;     // value at t = 0
  double rho_inf = 1.0;  // steady-state value
  double decay = 1.0;    // 1/s

  Funnel() = default;
  Funnel(double rho0_, double rho_inf_, double decay_)
      : rho0(rho0_), rho_inf(rho_inf_), decay(decay_) {
    if (!(rho_inf > 0.0) || !(rho0 >= rho_inf))
      throw std::invalid_argument("funnel requires rho0 >= rho_inf > 0");
    if (!(decay > 0.0)) throw std::invalid_argument("funnel decay must be > 0");
  }

  double value(double t) const { return (rho0 - rho_inf) * std::exp(-decay * t) + rho_inf; }
  double derivative(double t) const { return -decay * (rho0 - rho_inf) * std::exp(-decay * t); }

  double upper_bound() const { return rho0; }
  double derivative_bound() const { return decay * (rho0 - rho_inf); }
};

/// All per-(neighbor, component) envelopes guarding one agent's estimation,
/// together with the target bound they certify. Row-major storage:
/// (neighbor j, component l) -> funnels[j * dim + l].
struct FunnelBank {
  int eta = 0;
  int dim = 1;
  std::vector<Funnel> funnels;
  Funnel target_bound;     // the delta (or theta) bound this bank enforces
  double lambda_min = 0.0; // of the disagreement matrix the bank was built for

  const Funnel& at(int neighbor, int component) const {
    return funnels[static_cast<size_t>(neighbor * dim + component)];
  }
  Funnel& at(int neighbor, int component) {
    return funnels[static_cast<size_t>(neighbor * dim + component)];
  }

  /// Stacked envelope magnitude of one state component across neighbors.
  double norm_value(int component, double t) const {
    double acc = 0.0;
    for (int j = 0; j < eta; ++j) {
      double v = at(j, component).value(t);
      acc += v * v;
    }
    return std::sqrt(acc);
  }

  /// Slack of the design inequality ||rho_vec(t)|| <= lambda_min * bound(t)
  /// for one component; negative slack means the certificate is broken.
  double certificate_slack(int component, double t) const {
    return lambda_min * target_bound.value(t) - norm_value(component, t);
  }
};

/// Uniform funnel allocation: every (neighbor, component) pair gets
///   rho(t) = safety * lambda_min(M) * bound(t) / sqrt(eta * dim),
/// which makes the stacked norm satisfy the design inequality with margin
/// (1 - safety). Fails if any initial disagreement component already sits on
/// or outside its funnel; widening rho0 here would break the certificate.
inline FunnelBank design_funnel_bank(const DisagreementMatrix& m, const Funnel& bound,
                                     int eta, int dim, const Eigen::VectorXd& xi0,
                                     double safety = 0.95) {
  if (m.lambda_min <= 0.0)
    throw std::invalid_argument("disagreement matrix is not positive definite");
  if (eta != static_cast<int>(m.m.rows()))
    throw std::invalid_argument("eta does not match disagreement matrix size");
  if (!(safety > 0.0 && safety <= 1.0))
    throw std::invalid_argument("safety factor must be in (0, 1]");
  if (xi0.size() != static_cast<Eigen::Index>(eta) * dim)
    throw std::invalid_argument("xi0 must have eta*dim components");

  const double scale = safety * m.lambda_min / std::sqrt(static_cast<double>(eta) * dim);
  Funnel rho(scale * bound.rho0, scale * bound.rho_inf, bound.decay);

  FunnelBank bank;
  bank.eta = eta;
  bank.dim = dim;
  bank.funnels.assign(static_cast<size_t>(eta) * dim, rho);
  bank.target_bound = bound;
  bank.lambda_min = m.lambda_min;

  for (int j = 0; j < eta; ++j) {
    for (int l = 0; l < dim; ++l) {
      double x = std::abs(xi0(static_cast<Eigen::Index>(j) * dim + l));
      if (x >= rho.rho0) {
        // smallest bound(0) that would have admitted this start
        double need = x * std::sqrt(static_cast<double>(eta) * dim) / (safety * m.lambda_min);
        throw feasibility_error(
            "initial disagreement |xi(0)|=" + std::to_string(x) + " at neighbor index " +
            std::to_string(j) + ", component " + std::to_string(l) +
            " is not inside its funnel rho(0)=" + std::to_string(rho.rho0) +
            "; the target bound would need bound(0) > " + std::to_string(need));
      }
    }
  }
  return bank;
}

/// Numerically checks that the stacked norm of each component's envelopes is
/// itself a valid performance function on the sample grid: positive, below
/// sqrt(sum rho0^2), with derivative magnitude below sqrt(sum bound^2).
inline bool ppf_norm_is_ppf(const FunnelBank& bank, const std::vector<double>& sample_times) {
  if (bank.eta < 1 || bank.funnels.empty()) return false;
  for (int l = 0; l < bank.dim; ++l) {
    double ub2 = 0.0, db2 = 0.0;
    for (int j = 0; j < bank.eta; ++j) {
      ub2 += bank.at(j, l).upper_bound() * bank.at(j, l).upper_bound();
      db2 += bank.at(j, l).derivative_bound() * bank.at(j, l).derivative_bound();
    }
    const double ub = std::sqrt(ub2);
    const double db = std::sqrt(db2);
    for (double t : sample_times) {
      double norm = bank.norm_value(l, t);
      if (!(norm > 0.0) || norm > ub * (1.0 + 1e-12)) return false;
      double dot = 0.0;
      for (int j = 0; j < bank.eta; ++j)
        dot += bank.at(j, l).value(t) * bank.at(j, l).derivative(t);
      if (std::abs(dot) / norm > db * (1.0 + 1e-12)) return false;
    }
  }
  return true;
}

}  // namespace khop
