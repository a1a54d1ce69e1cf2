// Acceptance suite: one pass/fail line per criterion, exit 0 only if all
// criteria hold. Bound tolerances are fixed here, not tuned at runtime.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "helpers.hpp"
#include "khop/cli.hpp"
#include "khop/sim.hpp"

using namespace khop;

namespace {

const std::string kRepo = KHOP_SOURCE_DIR;
int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  if (!pass) ++g_failures;
}

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

json bundled(const std::string& name) {
  return read_config_file(kRepo + "/scenarios/" + name + ".json");
}

Scenario resolve(const json& doc) {
  return scenario_from_json(doc, kRepo + "/scenarios");
}

std::string trajectory_bytes(const RunResult& r) {
  std::ostringstream out;
  write_table_csv(r.trajectory, out);
  return out.str();
}

}  // namespace

// 1. paper8 with the reported funnel parameters, desk profile: every
//    componentwise bound holds at every step, nothing ever grazes a funnel.
static RunResult criterion_1() {
  Scenario sc = resolve(bundled("paper8"));
  bool params_ok =
      sc.funnels.delta.rho0 == 14.077 && sc.funnels.delta.rho_inf == 0.117 &&
      sc.funnels.delta.decay == 5.0 && sc.funnels.theta->rho0 == 231.39 &&
      sc.funnels.theta->rho_inf == 1.39 &&
      sc.funnels.rho.for_agent(4)->rho0 == 2.82 && sc.funnels.rho.for_agent(4)->rho_inf == 0.02 &&
      sc.funnels.omega.for_agent(4)->rho0 == 39.303 &&
      sc.funnels.omega.for_agent(4)->rho_inf == 0.033 && sc.method == IntegratorMethod::rk4 &&
      sc.dt == 1e-4 && sc.t_end == 3.0;
  RunResult r = run(sc);
  bool pass = params_ok && r.summary.total_violations() == 0 && r.summary.clamp_events == 0 &&
              r.summary.wall_seconds < 60.0;
  report(1, pass,
         fmt("paper8 funnel satisfaction: violations=%ld clamps=%ld min margins "
             "xi=%.4f mu=%.4f xerr=%.4f gerr=%.4f (%.1fs, params %s)",
             r.summary.total_violations(), r.summary.clamp_events, r.summary.min_margin_xi,
             r.summary.min_margin_mu, r.summary.min_margin_xerr, r.summary.min_margin_gerr,
             r.summary.wall_seconds, params_ok ? "pinned" : "WRONG"));
  return r;
}

// 2. drift-free observer variant on the bounded plant: same guarantee.
static RunResult criterion_2() {
  Scenario sc = resolve(bundled("nodrift"));
  bool variant_ok = sc.variant == ObserverVariant::no_drift;
  RunResult r = run(sc);
  bool pass = variant_ok && r.summary.total_violations() == 0 && r.summary.clamp_events == 0;
  report(2, pass,
         fmt("nodrift variant: violations=%ld clamps=%ld min margins xi=%.4f xerr=%.4f",
             r.summary.total_violations(), r.summary.clamp_events, r.summary.min_margin_xi,
             r.summary.min_margin_xerr));
  return r;
}

// 3. positive definiteness of every disagreement matrix over random
//    connected graphs, both neighborhood modes.
static void criterion_3() {
  std::mt19937 rng(20240811);
  int graphs = 0, matrices = 0;
  double worst = std::numeric_limits<double>::infinity();
  while (graphs < 200) {
    Graph g = khop::testing::random_connected_graph(rng, 12);
    if (!is_connected(g)) continue;
    ++graphs;
    for (int k : {2, 3})
      for (auto mode : {NeighborhoodMode::standard, NeighborhoodMode::extended})
        for (int i = 1; i <= g.node_count(); ++i) {
          auto nb = khop_neighbors(g, i, k, mode);
          if (nb.eta() == 0) continue;
          auto dm = disagreement_matrix(g, nb);
          worst = std::min(worst, dm.lambda_min);
          ++matrices;
        }
  }
  bool pass = graphs >= 200 && worst > 1e-10;
  report(3, pass,
         fmt("positive definiteness on %d random connected graphs (%d matrices, both modes): "
             "min lambda_min=%.3e",
             graphs, matrices, worst));
}

// 4. the locally accumulated disagreements equal M times the error stack at
//    every step of every bundled scenario, against the matrix-multiply route.
static void criterion_4(const RunResult& paper8, const RunResult& nodrift) {
  Scenario sc = resolve(bundled("minimal"));
  RunResult minimal = run(sc);
  double worst = std::max({paper8.summary.max_residual_state, paper8.summary.max_residual_input,
                           nodrift.summary.max_residual_state, nodrift.summary.max_residual_input,
                           minimal.summary.max_residual_state,
                           minimal.summary.max_residual_input});
  bool pass = worst <= 1e-10;
  report(4, pass,
         fmt("stacked disagreement vs matrix oracle across paper8/nodrift/minimal: "
             "max inf-norm residual=%.3e (<= 1e-10)",
             worst));
}

// 5. every auto-designed funnel bank: the stacked norm is itself a valid
//    performance function and certifies the target bound on a dense grid.
static void criterion_5() {
  bool pass = true;
  double min_slack = std::numeric_limits<double>::infinity();
  int banks = 0;
  for (const char* name : {"paper8", "nodrift", "minimal"}) {
    Scenario sc = resolve(bundled(name));
    Prepared p = prepare(sc);
    std::vector<double> grid;
    for (int i = 0; i < 1000; ++i) grid.push_back(sc.t_end * i / 999.0);
    for (const auto& tinfo : p.targets) {
      auto check_bank = [&](const FunnelBank& bank, bool is_auto) {
        if (!is_auto) return;
        ++banks;
        if (!ppf_norm_is_ppf(bank, grid)) pass = false;
        for (int l = 0; l < bank.dim; ++l)
          for (double t : grid) {
            double slack = bank.certificate_slack(l, t);
            min_slack = std::min(min_slack, slack);
            if (slack < 0.0) pass = false;
          }
      };
      check_bank(tinfo.rho_bank, !sc.funnels.rho.for_agent(tinfo.agent).has_value());
      if (p.input_observer)
        check_bank(tinfo.omega_bank, !sc.funnels.omega.for_agent(tinfo.agent).has_value());
    }
  }
  report(5, pass,
         fmt("norm of every auto-designed bank is a performance function and certifies its "
             "bound: %d banks, min slack=%.4f (>= 0) on 1000-point grids",
             banks, min_slack));
}

// 6. transform calculus: jacobian vs central differences, strict monotonicity.
static void criterion_6() {
  bool pass = true;
  double worst_rel = 0.0;
  for (int i = 0; i <= 1800; ++i) {
    double e = -0.9 + 1.8 * i / 1800.0;
    double h = 1e-7;
    double fd = (transform(e + h) - transform(e - h)) / (2.0 * h);
    double rel = std::abs(transform_jacobian(e) - fd) / std::abs(fd);
    worst_rel = std::max(worst_rel, rel);
    if (rel > 1e-6) pass = false;
  }
  double prev = transform(-0.999);
  for (int i = 1; i < 1000; ++i) {
    double e = -0.999 + 1.998 * i / 999.0;
    double v = transform(e);
    if (!(v > prev)) pass = false;
    prev = v;
  }
  report(6, pass,
         fmt("transform calculus: max |J_T - FD|/|FD| = %.2e (<= 1e-6), strictly increasing on "
             "10^3 grid",
             worst_rel));
}

// 7. measured convergence orders by step halving on a smooth scenario.
static void criterion_7() {
  Scenario sc = resolve(bundled("minimal"));
  sc.funnels.delta = Funnel(12.0, 2.5, 1.0);
  sc.funnels.theta = Funnel(40.0, 8.0, 1.0);
  sc.t_end = 0.5;
  Prepared p = prepare(sc);
  detail_sim::Workspace ws;
  ws.resize(p);
  auto integrate = [&](IntegratorMethod m, double dt) {
    Eigen::VectorXd y = p.y0;
    long steps = std::lround(0.5 / dt);
    for (long i = 0; i < steps; ++i) step(p, m, i * dt, dt, y, ws);
    return y;
  };
  Eigen::VectorXd e1 = integrate(IntegratorMethod::euler, 1.0e-3);
  Eigen::VectorXd e2 = integrate(IntegratorMethod::euler, 0.5e-3);
  Eigen::VectorXd e3 = integrate(IntegratorMethod::euler, 0.25e-3);
  double euler_order = std::log2((e1 - e2).norm() / (e2 - e3).norm());
  Eigen::VectorXd r1 = integrate(IntegratorMethod::rk4, 4.0e-3);
  Eigen::VectorXd r2 = integrate(IntegratorMethod::rk4, 2.0e-3);
  Eigen::VectorXd r3 = integrate(IntegratorMethod::rk4, 1.0e-3);
  double rk4_order = std::log2((r1 - r2).norm() / (r2 - r3).norm());
  bool pass = std::abs(euler_order - 1.0) <= 0.3 && std::abs(rk4_order - 4.0) <= 0.3;
  report(7, pass,
         fmt("integrator orders by step halving: euler=%.3f (1 +- 0.3), rk4=%.3f (4 +- 0.3)",
             euler_order, rk4_order));
}

// 8. estimation-based control tracks the truth-fed baseline once the
//    steady-state estimation bound is tightened tenfold.
static void criterion_8() {
  json truth_doc = bundled("paper8");
  truth_doc["controller"]["mode"] = "truth";
  RunResult truth = run(resolve(truth_doc));

  json shrunk_doc = bundled("paper8");
  shrunk_doc["funnels"]["delta"]["rho_inf"] = 0.0117;
  shrunk_doc["funnels"].erase("rho_overrides");
  shrunk_doc["funnels"].erase("omega_overrides");
  // tighter steady-state funnels stiffen the correction term; integrate at
  // a step small enough for the explicit scheme to stay stable
  shrunk_doc["integrator"]["dt"] = 1e-5;
  shrunk_doc["output"]["record_stride"] = 100;
  RunResult shrunk = run(resolve(shrunk_doc));

  double ratio_truth = truth.summary.consensus_terminal / truth.summary.consensus_initial;
  double ratio_pair = shrunk.summary.consensus_terminal / truth.summary.consensus_terminal;
  bool pass = ratio_truth <= 0.05 && ratio_pair <= 2.0 &&
              shrunk.summary.total_violations() == 0;
  report(8, pass,
         fmt("closed loop: truth-mode terminal ||Pi x||=%.4f (%.2f%% of initial, <= 5%%); "
             "estimated mode with delta_inf/10 terminal=%.4f (%.2fx truth, <= 2x)",
             truth.summary.consensus_terminal, 100.0 * ratio_truth,
             shrunk.summary.consensus_terminal, ratio_pair));
}

// 9. bit-identical trajectory CSVs on rerun for every bundled scenario.
static void criterion_9(const RunResult& paper8_first) {
  bool pass = true;
  std::string detail = "bit-identical trajectory CSVs:";
  {
    RunResult again = run(resolve(bundled("paper8")));
    bool same = trajectory_bytes(again) == trajectory_bytes(paper8_first);
    pass = pass && same;
    detail += std::string(" paper8=") + (same ? "yes" : "NO");
  }
  for (const char* name : {"nodrift", "minimal"}) {
    RunResult a = run(resolve(bundled(name)));
    RunResult b = run(resolve(bundled(name)));
    bool same = trajectory_bytes(a) == trajectory_bytes(b);
    pass = pass && same;
    detail += std::string(" ") + name + "=" + (same ? "yes" : "NO");
  }
  report(9, pass, detail);
}

int main() {
  try {
    RunResult paper8 = criterion_1();
    RunResult nodrift = criterion_2();
    criterion_3();
    criterion_4(paper8, nodrift);
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9(paper8);
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s\n", g_failures == 0 ? "all criteria satisfied" : "criteria failed");
  return g_failures == 0 ? 0 : 1;
}
