#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "khop/errors.hpp"
#include "khop/scenario.hpp"

namespace khop {

/// One (estimator, target) estimate pair and its precomputed wiring into the
/// flat state vector.
struct SlotInfo {
  int estimator = 0;
  int target = 0;
  int dim = 0;
  int offset = 0;          // into the estimate block
  int neighbor_index = 0;  // row of the estimator in the target's stack order
  SlotPlan plan;
  std::vector<int> peer_offsets;  // estimate-block offsets of 1-hop peer slots
};

/// Everything attached to one estimated agent: stack order, disagreement
/// matrix, and the funnel banks guarding its state and input estimates.
struct TargetInfo {
  int agent = 0;
  KhopNeighborhood nbhd;
  DisagreementMatrix dmat;
  FunnelBank rho_bank;
  FunnelBank omega_bank;  // used only when the input observer runs
  std::vector<int> slot_ids;
};

/// Scenario compiled into flat-vector form, feasibility gate passed.
/// State layout: [ plant | state estimates | input estimates (optional) ].
struct Prepared {
  Scenario scenario;
  std::vector<int> agent_offset;
  int plant_dim = 0;
  std::vector<SlotInfo> slots;
  int slot_dim = 0;
  std::vector<TargetInfo> targets;
  std::vector<int> target_index;  // per agent id-1; -1 when nobody estimates it
  bool input_observer = false;
  int total_dim = 0;
  std::vector<std::vector<int>> ctrl_truth;  // per agent: task neighbors read as truth
  std::vector<std::vector<int>> ctrl_est;    // per agent: slot ids read as estimates
  Eigen::VectorXd y0;

  int x_offset(int agent_id) const { return agent_offset[static_cast<size_t>(agent_id - 1)]; }
  int xhat_begin() const { return plant_dim; }
  int ghat_begin() const { return plant_dim + slot_dim; }
};

namespace detail_sim {

inline Eigen::VectorXd initial_xhat(const Prepared& p) {
  Eigen::VectorXd xh = Eigen::VectorXd::Zero(p.slot_dim);
  if (p.scenario.estimate_init == EstimateInit::truth) {
    for (const auto& s : p.slots)
      for (int l = 0; l < s.dim; ++l)
        xh(s.offset + l) =
            p.scenario.initial_states[static_cast<size_t>(s.target - 1)](l);
  }
  return xh;
}

/// Controls for all agents given plant states and state estimates, written
/// into `u` (plant layout). Estimates are read slot-wise; truth neighbors
/// directly.
inline void eval_controls(const Prepared& p, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& xhat, Eigen::VectorXd& u) {
  u.setZero();
  if (p.scenario.controller.type == ControllerType::none) return;
  const double gain = p.scenario.controller.gain;
  const int n = p.scenario.comm.node_count();
  std::vector<Eigen::VectorXd> truth_vals, est_vals;
  for (int i = 1; i <= n; ++i) {
    const auto& model = p.scenario.agents[static_cast<size_t>(i - 1)];
    truth_vals.clear();
    est_vals.clear();
    for (int j : p.ctrl_truth[static_cast<size_t>(i - 1)])
      truth_vals.push_back(x.segment(p.x_offset(j), model.dim));
    for (int sid : p.ctrl_est[static_cast<size_t>(i - 1)]) {
      const auto& s = p.slots[static_cast<size_t>(sid)];
      est_vals.push_back(xhat.segment(s.offset, s.dim));
    }
    u.segment(p.x_offset(i), model.dim) =
        consensus_control(x.segment(p.x_offset(i), model.dim), truth_vals, est_vals, gain);
  }
}

inline void eval_input_maps(const Prepared& p, const Eigen::VectorXd& u, Eigen::VectorXd& g) {
  const int n = p.scenario.comm.node_count();
  for (int i = 1; i <= n; ++i) {
    const auto& model = p.scenario.agents[static_cast<size_t>(i - 1)];
    g.segment(p.x_offset(i), model.dim) =
        model.input_map(u.segment(p.x_offset(i), model.dim));
  }
}

/// xi (or mu) of one slot from the flat estimate block and the stacked true
/// values, using the slot's precomputed 1-hop wiring.
inline void slot_disagreement(const SlotInfo& s, const Eigen::VectorXd& estimates,
                              const Eigen::VectorXd& truth_stack, Eigen::VectorXd& out) {
  out = Eigen::VectorXd::Zero(s.dim);
  for (int off : s.peer_offsets)
    out += estimates.segment(s.offset, s.dim) - estimates.segment(off, s.dim);
  if (s.plan.anchor != 0.0)
    out += s.plan.anchor *
           (estimates.segment(s.offset, s.dim) - truth_stack.segment(s.offset, s.dim));
}

/// True values arranged in slot layout: entry of slot (j -> i) holds x_i
/// (or g_i), so estimate blocks and truth blocks align.
inline void scatter_truth(const Prepared& p, const Eigen::VectorXd& plant_quantity,
                          Eigen::VectorXd& out) {
  for (const auto& s : p.slots)
    out.segment(s.offset, s.dim) = plant_quantity.segment(p.x_offset(s.target), s.dim);
}

struct Workspace {
  Eigen::VectorXd x, u, g, truth_slots, gtruth_slots, xi, mu;
  void resize(const Prepared& p) {
    x.resize(p.plant_dim);
    u.resize(p.plant_dim);
    g.resize(p.plant_dim);
    truth_slots.resize(p.slot_dim);
    gtruth_slots.resize(p.slot_dim);
    xi.resize(p.slot_dim);
    mu.resize(p.slot_dim);
  }
};

}  // namespace detail_sim

/// Coupled vector field of plant, state observers and input observers.
inline void eval_rhs(const Prepared& p, double t, const Eigen::VectorXd& y,
                     Eigen::VectorXd& dy, detail_sim::Workspace& ws) {
  using namespace detail_sim;
  dy.resize(p.total_dim);
  ws.x = y.head(p.plant_dim);
  eval_controls(p, ws.x, y.segment(p.xhat_begin(), p.slot_dim), ws.u);
  eval_input_maps(p, ws.u, ws.g);

  const int n = p.scenario.comm.node_count();
  for (int i = 1; i <= n; ++i) {
    const auto& model = p.scenario.agents[static_cast<size_t>(i - 1)];
    const int off = p.x_offset(i);
    dy.segment(off, model.dim) = model.drift(ws.x.segment(off, model.dim)) +
                                 ws.g.segment(off, model.dim) +
                                 model.disturbance(ws.x, t);
  }

  scatter_truth(p, ws.x, ws.truth_slots);
  if (p.input_observer) scatter_truth(p, ws.g, ws.gtruth_slots);

  Eigen::VectorXd xi, mu;
  for (const auto& s : p.slots) {
    const auto& tinfo = p.targets[static_cast<size_t>(p.target_index[static_cast<size_t>(s.target - 1)])];
    const auto& model = p.scenario.agents[static_cast<size_t>(s.target - 1)];
    slot_disagreement(s, y.segment(p.xhat_begin(), p.slot_dim), ws.truth_slots, xi);
    Eigen::VectorXd ghat = p.input_observer
                               ? Eigen::VectorXd(y.segment(p.ghat_begin() + s.offset, s.dim))
                               : Eigen::VectorXd(Eigen::VectorXd::Zero(s.dim));
    dy.segment(p.xhat_begin() + s.offset, s.dim) =
        ppso_derivative(xi, tinfo.rho_bank, s.neighbor_index, t, p.scenario.variant,
                        model.drift, y.segment(p.xhat_begin() + s.offset, s.dim), ghat);
    if (p.input_observer) {
      slot_disagreement(s, y.segment(p.ghat_begin(), p.slot_dim), ws.gtruth_slots, mu);
      dy.segment(p.ghat_begin() + s.offset, s.dim) =
          ppio_derivative(mu, tinfo.omega_bank, s.neighbor_index, t);
    }
  }
}

/// One committed-state evaluation: disagreements, margins against every
/// active envelope, stacked-identity residuals, clamp events, consensus.
struct StepEval {
  Eigen::VectorXd u, g, xi, mu, e, q;
  double margin_xi = 0.0, margin_mu = 0.0, margin_xerr = 0.0, margin_gerr = 0.0;
  double residual_state = 0.0, residual_input = 0.0;
  long clamps = 0;
  double consensus_norm = 0.0;
};

inline void evaluate_step(const Prepared& p, double t, const Eigen::VectorXd& y, StepEval& ev,
                          detail_sim::Workspace& ws) {
  using namespace detail_sim;
  constexpr double inf = std::numeric_limits<double>::infinity();
  ws.x = y.head(p.plant_dim);
  eval_controls(p, ws.x, y.segment(p.xhat_begin(), p.slot_dim), ws.u);
  eval_input_maps(p, ws.u, ws.g);
  scatter_truth(p, ws.x, ws.truth_slots);
  if (p.input_observer) scatter_truth(p, ws.g, ws.gtruth_slots);

  ev.u = ws.u;
  ev.g = ws.g;
  ev.xi.resize(p.slot_dim);
  ev.e.resize(p.slot_dim);
  if (p.input_observer) {
    ev.mu.resize(p.slot_dim);
    ev.q.resize(p.slot_dim);
  }
  ev.margin_xi = ev.margin_mu = ev.margin_xerr = ev.margin_gerr = inf;
  ev.residual_state = ev.residual_input = 0.0;
  ev.clamps = 0;

  const Funnel& delta = p.scenario.funnels.delta;
  Eigen::VectorXd dis;
  for (const auto& s : p.slots) {
    const auto& tinfo =
        p.targets[static_cast<size_t>(p.target_index[static_cast<size_t>(s.target - 1)])];
    slot_disagreement(s, y.segment(p.xhat_begin(), p.slot_dim), ws.truth_slots, dis);
    for (int l = 0; l < s.dim; ++l) {
      const double rho = tinfo.rho_bank.at(s.neighbor_index, l).value(t);
      const double xi = dis(l);
      ev.xi(s.offset + l) = xi;
      const double en = xi / rho;
      ev.e(s.offset + l) = clamp_normalized(en);
      if (out_of_funnel(en)) ++ev.clamps;
      ev.margin_xi = std::min(ev.margin_xi, rho - std::abs(xi));
      const double xerr =
          y(p.xhat_begin() + s.offset + l) - ws.truth_slots(s.offset + l);
      ev.margin_xerr = std::min(ev.margin_xerr, delta.value(t) - std::abs(xerr));
    }
    if (p.input_observer) {
      slot_disagreement(s, y.segment(p.ghat_begin(), p.slot_dim), ws.gtruth_slots, dis);
      const Funnel& theta = *p.scenario.funnels.theta;
      for (int l = 0; l < s.dim; ++l) {
        const double om = tinfo.omega_bank.at(s.neighbor_index, l).value(t);
        const double mu = dis(l);
        ev.mu(s.offset + l) = mu;
        const double qn = mu / om;
        ev.q(s.offset + l) = clamp_normalized(qn);
        if (out_of_funnel(qn)) ++ev.clamps;
        ev.margin_mu = std::min(ev.margin_mu, om - std::abs(mu));
        const double gerr =
            y(p.ghat_begin() + s.offset + l) - ws.gtruth_slots(s.offset + l);
        ev.margin_gerr = std::min(ev.margin_gerr, theta.value(t) - std::abs(gerr));
      }
    }
  }

  // stacked identity against the matrix route, per target
  for (const auto& tinfo : p.targets) {
    const int eta = tinfo.nbhd.eta();
    const int dim = p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim;
    std::vector<Eigen::VectorXd> local(static_cast<size_t>(eta)), errs(static_cast<size_t>(eta));
    for (int j = 0; j < eta; ++j) {
      const auto& s = p.slots[static_cast<size_t>(tinfo.slot_ids[static_cast<size_t>(j)])];
      local[static_cast<size_t>(j)] = ev.xi.segment(s.offset, dim);
      errs[static_cast<size_t>(j)] =
          y.segment(p.xhat_begin() + s.offset, dim) - ws.truth_slots.segment(s.offset, dim);
    }
    ev.residual_state = std::max(ev.residual_state, stacked_residual(tinfo.dmat.m, local, errs));
    if (p.input_observer) {
      for (int j = 0; j < eta; ++j) {
        const auto& s = p.slots[static_cast<size_t>(tinfo.slot_ids[static_cast<size_t>(j)])];
        local[static_cast<size_t>(j)] = ev.mu.segment(s.offset, dim);
        errs[static_cast<size_t>(j)] =
            y.segment(p.ghat_begin() + s.offset, dim) - ws.gtruth_slots.segment(s.offset, dim);
      }
      ev.residual_input = std::max(ev.residual_input, stacked_residual(tinfo.dmat.m, local, errs));
    }
  }

  bool uniform = true;
  for (const auto& a : p.scenario.agents) uniform = uniform && a.dim == p.scenario.agents[0].dim;
  ev.consensus_norm =
      uniform ? consensus_disagreement(ws.x, p.scenario.agents[0].dim).second : 0.0;
}

inline Prepared prepare(const Scenario& sc) {
  Prepared p;
  p.scenario = sc;
  const int n = sc.comm.node_count();

  p.agent_offset.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    p.agent_offset[static_cast<size_t>(i)] = p.plant_dim;
    p.plant_dim += sc.agents[static_cast<size_t>(i)].dim;
  }

  p.input_observer = variant_has_input_observer(sc.variant);
  p.target_index.assign(static_cast<size_t>(n), -1);

  // slots grouped by target, member order inside each target
  std::vector<std::vector<int>> peer_nodes_per_slot;
  for (int i = 1; i <= n; ++i) {
    KhopNeighborhood nbhd = khop_neighbors(sc.comm, i, sc.k, sc.mode);
    if (nbhd.eta() == 0) continue;
    TargetInfo tinfo;
    tinfo.agent = i;
    tinfo.nbhd = nbhd;
    tinfo.dmat = disagreement_matrix(sc.comm, nbhd);
    const int dim = sc.agents[static_cast<size_t>(i - 1)].dim;
    for (int j = 0; j < nbhd.eta(); ++j) {
      SlotInfo s;
      s.estimator = nbhd.members[static_cast<size_t>(j)];
      s.target = i;
      s.dim = dim;
      s.offset = p.slot_dim;
      s.neighbor_index = j;
      s.plan = make_slot_plan(sc.comm, nbhd, s.estimator);
      tinfo.slot_ids.push_back(static_cast<int>(p.slots.size()));
      p.slots.push_back(std::move(s));
      p.slot_dim += dim;
    }
    p.target_index[static_cast<size_t>(i - 1)] = static_cast<int>(p.targets.size());
    p.targets.push_back(std::move(tinfo));
  }
  // resolve peer slot offsets now that every slot has one
  for (auto& s : p.slots) {
    const auto& tinfo = p.targets[static_cast<size_t>(p.target_index[static_cast<size_t>(s.target - 1)])];
    for (int peer : s.plan.peers) {
      int j = tinfo.nbhd.index_of(peer);
      if (j < 0) throw protocol_error("slot peer is not a member of the target stack");
      s.peer_offsets.push_back(
          p.slots[static_cast<size_t>(tinfo.slot_ids[static_cast<size_t>(j)])].offset);
    }
  }

  // controller wiring
  p.ctrl_truth.resize(static_cast<size_t>(n));
  p.ctrl_est.resize(static_cast<size_t>(n));
  if (sc.controller.type == ControllerType::consensus_tanh) {
    const Graph& task = sc.task_graph();
    for (int i = 1; i <= n; ++i) {
      for (int j : task.neighbors(i)) {
        if (sc.controller.mode == ControlMode::truth || sc.comm.has_edge(i, j)) {
          p.ctrl_truth[static_cast<size_t>(i - 1)].push_back(j);
          continue;
        }
        // i must hold an estimate of j: slot (estimator=i, target=j)
        int tj = p.target_index[static_cast<size_t>(j - 1)];
        int member = tj >= 0 ? p.targets[static_cast<size_t>(tj)].nbhd.index_of(i) : -1;
        if (member < 0)
          throw config_error("task edge " + std::to_string(i) + "-" + std::to_string(j) +
                             " needs an estimate, but agent " + std::to_string(j) +
                             " is outside agent " + std::to_string(i) + "'s " +
                             std::to_string(sc.k) + "-hop range");
        p.ctrl_est[static_cast<size_t>(i - 1)].push_back(
            p.targets[static_cast<size_t>(tj)].slot_ids[static_cast<size_t>(member)]);
      }
    }
  }

  p.total_dim = p.plant_dim + p.slot_dim * (p.input_observer ? 2 : 1);

  // initial flat state
  Eigen::VectorXd x0(p.plant_dim);
  for (int i = 1; i <= n; ++i)
    x0.segment(p.x_offset(i), sc.agents[static_cast<size_t>(i - 1)].dim) =
        sc.initial_states[static_cast<size_t>(i - 1)];
  Eigen::VectorXd xhat0 = detail_sim::initial_xhat(p);
  p.y0.resize(p.total_dim);
  p.y0.head(p.plant_dim) = x0;
  p.y0.segment(p.xhat_begin(), p.slot_dim) = xhat0;
  if (p.input_observer) p.y0.segment(p.ghat_begin(), p.slot_dim).setZero();

  // initial disagreements, then funnel banks (the feasibility gate)
  detail_sim::Workspace ws;
  ws.resize(p);
  ws.x = x0;
  detail_sim::eval_controls(p, x0, xhat0, ws.u);
  detail_sim::eval_input_maps(p, ws.u, ws.g);
  detail_sim::scatter_truth(p, ws.x, ws.truth_slots);
  detail_sim::scatter_truth(p, ws.g, ws.gtruth_slots);

  auto stack_dis = [&](const TargetInfo& tinfo, bool input_side) {
    const int dim = sc.agents[static_cast<size_t>(tinfo.agent - 1)].dim;
    Eigen::VectorXd stack(tinfo.nbhd.eta() * dim);
    Eigen::VectorXd dis;
    for (int j = 0; j < tinfo.nbhd.eta(); ++j) {
      const auto& s = p.slots[static_cast<size_t>(tinfo.slot_ids[static_cast<size_t>(j)])];
      if (input_side)
        detail_sim::slot_disagreement(s, p.y0.segment(p.ghat_begin(), p.slot_dim),
                                      ws.gtruth_slots, dis);
      else
        detail_sim::slot_disagreement(s, p.y0.segment(p.xhat_begin(), p.slot_dim),
                                      ws.truth_slots, dis);
      stack.segment(static_cast<Eigen::Index>(j) * dim, dim) = dis;
    }
    return stack;
  };

  auto explicit_bank = [&](const TargetInfo& tinfo, const Funnel& envelope,
                           const Funnel& bound, const Eigen::VectorXd& dis0,
                           const char* label) {
    const int dim = sc.agents[static_cast<size_t>(tinfo.agent - 1)].dim;
    FunnelBank bank;
    bank.eta = tinfo.nbhd.eta();
    bank.dim = dim;
    bank.funnels.assign(static_cast<size_t>(bank.eta) * dim, envelope);
    bank.target_bound = bound;
    bank.lambda_min = tinfo.dmat.lambda_min;
    for (Eigen::Index c = 0; c < dis0.size(); ++c) {
      if (std::abs(dis0(c)) >= envelope.rho0)
        throw feasibility_error("agent " + std::to_string(tinfo.agent) + " " + label +
                                ": initial disagreement " + std::to_string(std::abs(dis0(c))) +
                                " is not inside the explicit funnel rho(0)=" +
                                std::to_string(envelope.rho0));
    }
    for (int l = 0; l < dim; ++l) {
      for (int i = 0; i <= 999; ++i) {
        double t = sc.t_end * i / 999.0;
        if (bank.certificate_slack(l, t) < 0.0)
          throw feasibility_error("agent " + std::to_string(tinfo.agent) + " " + label +
                                  ": explicit funnel violates the norm bound at t=" +
                                  std::to_string(t));
      }
    }
    return bank;
  };

  for (auto& tinfo : p.targets) {
    const int dim = sc.agents[static_cast<size_t>(tinfo.agent - 1)].dim;
    Eigen::VectorXd xi0 = stack_dis(tinfo, false);
    if (auto env = sc.funnels.rho.for_agent(tinfo.agent))
      tinfo.rho_bank = explicit_bank(tinfo, *env, sc.funnels.delta, xi0, "state funnel");
    else
      tinfo.rho_bank = design_funnel_bank(tinfo.dmat, sc.funnels.delta, tinfo.nbhd.eta(), dim,
                                          xi0, sc.funnels.safety);
    if (p.input_observer) {
      Eigen::VectorXd mu0 = stack_dis(tinfo, true);
      if (auto env = sc.funnels.omega.for_agent(tinfo.agent))
        tinfo.omega_bank = explicit_bank(tinfo, *env, *sc.funnels.theta, mu0, "input funnel");
      else
        tinfo.omega_bank = design_funnel_bank(tinfo.dmat, *sc.funnels.theta, tinfo.nbhd.eta(),
                                              dim, mu0, sc.funnels.safety);
    }
  }
  return p;
}

/// Column-labelled numeric table; what trajectory and assertion CSVs hold.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  int col(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }
};

struct RunSummary {
  std::string scenario;
  long steps = 0;
  double dt = 0.0, t_end = 0.0;
  long violations_xi = 0, violations_mu = 0, violations_xerr = 0, violations_gerr = 0;
  long clamp_events = 0;
  double min_margin_xi = 0.0, min_margin_mu = 0.0, min_margin_xerr = 0.0, min_margin_gerr = 0.0;
  double max_residual_state = 0.0, max_residual_input = 0.0;
  double consensus_initial = 0.0, consensus_terminal = 0.0;
  double wall_seconds = 0.0;

  long total_violations() const {
    return violations_xi + violations_mu + violations_xerr + violations_gerr;
  }
  bool certified() const { return total_violations() == 0 && clamp_events == 0; }
};

struct RunResult {
  Table trajectory;
  Table assertions;
  RunSummary summary;
};

namespace detail_sim {

inline std::string slot_tag(const SlotInfo& s) {
  return "agent" + std::to_string(s.target) + ".slot" + std::to_string(s.estimator);
}

inline std::vector<std::string> trajectory_columns(const Prepared& p) {
  std::vector<std::string> cols;
  cols.push_back("t");
  const int n = p.scenario.comm.node_count();
  for (int i = 1; i <= n; ++i)
    for (int l = 0; l < p.scenario.agents[static_cast<size_t>(i - 1)].dim; ++l)
      cols.push_back("agent" + std::to_string(i) + ".x.c" + std::to_string(l + 1));
  for (int i = 1; i <= n; ++i)
    for (int l = 0; l < p.scenario.agents[static_cast<size_t>(i - 1)].dim; ++l)
      cols.push_back("agent" + std::to_string(i) + ".u.c" + std::to_string(l + 1));
  for (int i = 1; i <= n; ++i)
    for (int l = 0; l < p.scenario.agents[static_cast<size_t>(i - 1)].dim; ++l)
      cols.push_back("agent" + std::to_string(i) + ".g.c" + std::to_string(l + 1));
  const std::vector<std::string> quantities =
      p.input_observer ? std::vector<std::string>{"xhat", "ghat", "xi", "mu", "e", "q"}
                       : std::vector<std::string>{"xhat", "xi", "e"};
  for (const auto& s : p.slots)
    for (const auto& qn : quantities)
      for (int l = 0; l < s.dim; ++l)
        cols.push_back(slot_tag(s) + "." + qn + ".c" + std::to_string(l + 1));
  for (const auto& tinfo : p.targets)
    for (int l = 0; l < p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim; ++l)
      cols.push_back("agent" + std::to_string(tinfo.agent) + ".rho.c" + std::to_string(l + 1));
  if (p.input_observer)
    for (const auto& tinfo : p.targets)
      for (int l = 0; l < p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim; ++l)
        cols.push_back("agent" + std::to_string(tinfo.agent) + ".omega.c" +
                       std::to_string(l + 1));
  cols.push_back("delta");
  if (p.input_observer) cols.push_back("theta");
  return cols;
}

inline std::vector<double> trajectory_row(const Prepared& p, double t, const Eigen::VectorXd& y,
                                          const StepEval& ev) {
  std::vector<double> row;
  row.push_back(t);
  for (int c = 0; c < p.plant_dim; ++c) row.push_back(y(c));
  for (int c = 0; c < p.plant_dim; ++c) row.push_back(ev.u(c));
  for (int c = 0; c < p.plant_dim; ++c) row.push_back(ev.g(c));
  for (const auto& s : p.slots) {
    for (int l = 0; l < s.dim; ++l) row.push_back(y(p.xhat_begin() + s.offset + l));
    if (p.input_observer)
      for (int l = 0; l < s.dim; ++l) row.push_back(y(p.ghat_begin() + s.offset + l));
    for (int l = 0; l < s.dim; ++l) row.push_back(ev.xi(s.offset + l));
    if (p.input_observer)
      for (int l = 0; l < s.dim; ++l) row.push_back(ev.mu(s.offset + l));
    for (int l = 0; l < s.dim; ++l) row.push_back(ev.e(s.offset + l));
    if (p.input_observer)
      for (int l = 0; l < s.dim; ++l) row.push_back(ev.q(s.offset + l));
  }
  for (const auto& tinfo : p.targets)
    for (int l = 0; l < p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim; ++l)
      row.push_back(tinfo.rho_bank.at(0, l).value(t));
  if (p.input_observer)
    for (const auto& tinfo : p.targets)
      for (int l = 0; l < p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim; ++l)
        row.push_back(tinfo.omega_bank.at(0, l).value(t));
  row.push_back(p.scenario.funnels.delta.value(t));
  if (p.input_observer) row.push_back(p.scenario.funnels.theta->value(t));
  return row;
}

inline void check_finite(const Prepared& p, double t, const Eigen::VectorXd& y) {
  if (y.allFinite()) return;
  for (int i = 1; i <= p.scenario.comm.node_count(); ++i) {
    const int dim = p.scenario.agents[static_cast<size_t>(i - 1)].dim;
    for (int l = 0; l < dim; ++l)
      if (!std::isfinite(y(p.x_offset(i) + l)))
        throw numeric_error("non-finite plant state: agent " + std::to_string(i) +
                            " component " + std::to_string(l + 1) + " at t=" + std::to_string(t));
  }
  for (const auto& s : p.slots) {
    for (int l = 0; l < s.dim; ++l) {
      if (!std::isfinite(y(p.xhat_begin() + s.offset + l)))
        throw numeric_error("non-finite state estimate in slot " + slot_tag(s) + ".c" +
                            std::to_string(l + 1) + " at t=" + std::to_string(t));
      if (p.input_observer && !std::isfinite(y(p.ghat_begin() + s.offset + l)))
        throw numeric_error("non-finite input estimate in slot " + slot_tag(s) + ".c" +
                            std::to_string(l + 1) + " at t=" + std::to_string(t));
    }
  }
  throw numeric_error("non-finite value at t=" + std::to_string(t));
}

}  // namespace detail_sim

/// Advances the coupled system by one explicit step. Envelope values inside
/// RK4 stages are taken at the stage times.
inline void step(const Prepared& p, IntegratorMethod method, double t, double dt,
                 Eigen::VectorXd& y, detail_sim::Workspace& ws) {
  static thread_local Eigen::VectorXd k1, k2, k3, k4, tmp;
  if (method == IntegratorMethod::euler) {
    eval_rhs(p, t, y, k1, ws);
    y += dt * k1;
    return;
  }
  eval_rhs(p, t, y, k1, ws);
  tmp = y + 0.5 * dt * k1;
  eval_rhs(p, t + 0.5 * dt, tmp, k2, ws);
  tmp = y + 0.5 * dt * k2;
  eval_rhs(p, t + 0.5 * dt, tmp, k3, ws);
  tmp = y + dt * k3;
  eval_rhs(p, t + dt, tmp, k4, ws);
  y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline RunResult run(const Prepared& p) {
  const auto t_start = std::chrono::steady_clock::now();
  const Scenario& sc = p.scenario;
  const long steps = std::lround(sc.t_end / sc.dt);

  RunResult out;
  out.trajectory.columns = detail_sim::trajectory_columns(p);
  out.assertions.columns = {"t",
                            "margin_xi",
                            "margin_mu",
                            "margin_xerr",
                            "margin_gerr",
                            "residual_state",
                            "residual_input",
                            "clamp_events",
                            "consensus_norm"};

  RunSummary& sm = out.summary;
  sm.scenario = sc.name;
  sm.steps = steps;
  sm.dt = sc.dt;
  sm.t_end = sc.t_end;
  sm.min_margin_xi = sm.min_margin_mu = sm.min_margin_xerr = sm.min_margin_gerr =
      std::numeric_limits<double>::infinity();

  detail_sim::Workspace ws;
  ws.resize(p);
  Eigen::VectorXd y = p.y0;
  StepEval ev;

  auto account = [&](double t, long step_index) {
    evaluate_step(p, t, y, ev, ws);
    if (ev.margin_xi <= 0.0) ++sm.violations_xi;
    if (p.input_observer && ev.margin_mu <= 0.0) ++sm.violations_mu;
    if (ev.margin_xerr <= 0.0) ++sm.violations_xerr;
    if (p.input_observer && ev.margin_gerr <= 0.0) ++sm.violations_gerr;
    sm.clamp_events += ev.clamps;
    sm.min_margin_xi = std::min(sm.min_margin_xi, ev.margin_xi);
    sm.min_margin_xerr = std::min(sm.min_margin_xerr, ev.margin_xerr);
    if (p.input_observer) {
      sm.min_margin_mu = std::min(sm.min_margin_mu, ev.margin_mu);
      sm.min_margin_gerr = std::min(sm.min_margin_gerr, ev.margin_gerr);
    }
    sm.max_residual_state = std::max(sm.max_residual_state, ev.residual_state);
    sm.max_residual_input = std::max(sm.max_residual_input, ev.residual_input);
    out.assertions.rows.push_back({t, ev.margin_xi,
                                   p.input_observer ? ev.margin_mu : 0.0, ev.margin_xerr,
                                   p.input_observer ? ev.margin_gerr : 0.0, ev.residual_state,
                                   ev.residual_input, static_cast<double>(ev.clamps),
                                   ev.consensus_norm});
    if (step_index % sc.output.record_stride == 0 || step_index == steps)
      out.trajectory.rows.push_back(detail_sim::trajectory_row(p, t, y, ev));
  };

  account(0.0, 0);
  sm.consensus_initial = ev.consensus_norm;

  for (long i = 1; i <= steps; ++i) {
    const double t_prev = (i - 1) * sc.dt;
    step(p, sc.method, t_prev, sc.dt, y, ws);
    const double t = i * sc.dt;
    detail_sim::check_finite(p, t, y);
    account(t, i);
  }
  sm.consensus_terminal = ev.consensus_norm;
  sm.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return out;
}

inline RunResult run(const Scenario& sc) {
  Prepared p = prepare(sc);
  return run(p);
}

/// Checks d(xi)/dt against the matrix route M d(x_tilde)/dt along a recorded
/// trajectory: central differences of the recorded xi columns vs. the
/// analytic error derivative reassembled from the vector field at the
/// recorded states. The residual shrinks with the finite-difference step.
struct AuditReport {
  double max_rel_residual = 0.0;
  int rows_checked = 0;
};

inline AuditReport finite_difference_audit(const Prepared& p, const Table& traj) {
  if (traj.rows.size() < 3) throw std::invalid_argument("audit needs at least three rows");
  AuditReport report;
  const size_t ncols = traj.columns.size();

  // rebuild flat state from a row
  std::vector<int> xhat_cols, ghat_cols, xi_cols;
  for (const auto& s : p.slots) {
    for (int l = 0; l < s.dim; ++l) {
      xhat_cols.push_back(traj.col(detail_sim::slot_tag(s) + ".xhat.c" + std::to_string(l + 1)));
      xi_cols.push_back(traj.col(detail_sim::slot_tag(s) + ".xi.c" + std::to_string(l + 1)));
      if (p.input_observer)
        ghat_cols.push_back(traj.col(detail_sim::slot_tag(s) + ".ghat.c" + std::to_string(l + 1)));
    }
  }
  for (int c : xhat_cols)
    if (c < 0) throw config_error("trajectory is missing estimate columns for the audit");

  auto state_of_row = [&](const std::vector<double>& row) {
    Eigen::VectorXd y(p.total_dim);
    for (int c = 0; c < p.plant_dim; ++c) y(c) = row[static_cast<size_t>(1 + c)];
    for (int k = 0; k < p.slot_dim; ++k)
      y(p.xhat_begin() + k) = row[static_cast<size_t>(xhat_cols[static_cast<size_t>(k)])];
    if (p.input_observer)
      for (int k = 0; k < p.slot_dim; ++k)
        y(p.ghat_begin() + k) = row[static_cast<size_t>(ghat_cols[static_cast<size_t>(k)])];
    return y;
  };

  detail_sim::Workspace ws;
  ws.resize(p);
  Eigen::VectorXd dy;
  for (size_t r = 1; r + 1 < traj.rows.size(); ++r) {
    const auto& prev = traj.rows[r - 1];
    const auto& mid = traj.rows[r];
    const auto& next = traj.rows[r + 1];
    if (prev.size() != ncols || next.size() != ncols) continue;
    const double h2 = next[0] - prev[0];
    Eigen::VectorXd y = state_of_row(mid);
    eval_rhs(p, mid[0], y, dy, ws);
    for (const auto& tinfo : p.targets) {
      const int dim = p.scenario.agents[static_cast<size_t>(tinfo.agent - 1)].dim;
      const int eta = tinfo.nbhd.eta();
      for (int l = 0; l < dim; ++l) {
        Eigen::VectorXd fd(eta), analytic_err(eta);
        for (int j = 0; j < eta; ++j) {
          const auto& s =
              p.slots[static_cast<size_t>(tinfo.slot_ids[static_cast<size_t>(j)])];
          int col = xi_cols[static_cast<size_t>(s.offset + l)];
          fd(j) = (next[static_cast<size_t>(col)] - prev[static_cast<size_t>(col)]) / h2;
          analytic_err(j) =
              dy(p.xhat_begin() + s.offset + l) - dy(p.x_offset(tinfo.agent) + l);
        }
        Eigen::VectorXd analytic = tinfo.dmat.m * analytic_err;
        double rel = (fd - analytic).cwiseAbs().maxCoeff() /
                     std::max(1.0, analytic.cwiseAbs().maxCoeff());
        report.max_rel_residual = std::max(report.max_rel_residual, rel);
      }
    }
    ++report.rows_checked;
  }
  return report;
}

inline void write_table_csv(const Table& table, std::ostream& out) {
  for (size_t c = 0; c < table.columns.size(); ++c) {
    if (c) out << ',';
    out << table.columns[c];
  }
  out << '\n';
  char buf[32];
  for (const auto& row : table.rows) {
    for (size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", row[c]);
      out << buf;
    }
    out << '\n';
  }
}

inline void write_summary(const RunSummary& sm, std::ostream& out) {
  out << "scenario: " << sm.scenario << "\n"
      << "steps: " << sm.steps << " (dt=" << sm.dt << ", t_end=" << sm.t_end << ")\n"
      << "violations: xi=" << sm.violations_xi << " mu=" << sm.violations_mu
      << " xerr=" << sm.violations_xerr << " gerr=" << sm.violations_gerr << "\n"
      << "clamp_events: " << sm.clamp_events << "\n"
      << "min_margins: xi=" << sm.min_margin_xi << " mu=" << sm.min_margin_mu
      << " xerr=" << sm.min_margin_xerr << " gerr=" << sm.min_margin_gerr << "\n"
      << "max_stacked_residuals: state=" << sm.max_residual_state
      << " input=" << sm.max_residual_input << "\n"
      << "consensus_norm: initial=" << sm.consensus_initial
      << " terminal=" << sm.consensus_terminal << "\n"
      << "certified: " << (sm.certified() ? "yes" : "no") << "\n"
      << "wall_seconds: " << sm.wall_seconds << "\n";
}

}  // namespace khop
