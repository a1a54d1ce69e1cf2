#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "khop/sim.hpp"

namespace khop::cli {

inline constexpr int kExitOk = 0;          // run certified: no violations, no clamps
inline constexpr int kExitViolations = 1;  // run finished but some bound was breached
inline constexpr int kExitConfig = 2;      // config/schema/graph problems
inline constexpr int kExitInfeasible = 3;  // initialization gate rejected the scenario
inline constexpr int kExitNumeric = 4;     // non-finite state during integration

inline Table read_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open CSV: " + path);
  Table table;
  std::string line;
  if (!std::getline(in, line)) throw config_error("empty CSV: " + path);
  std::stringstream header(line);
  std::string cell;
  while (std::getline(header, cell, ',')) table.columns.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(table.columns.size());
    std::stringstream ls(line);
    while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (row.size() != table.columns.size())
      throw config_error("CSV row width mismatch in " + path);
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Applies the named integrator profile on top of the loaded document.
/// "desk" is the fast default; "paper" reproduces the original sampling.
inline void apply_profile(json& doc, const std::string& profile) {
  if (profile.empty()) return;
  if (profile == "desk") {
    doc["integrator"]["method"] = "rk4";
    doc["integrator"]["dt"] = 1e-4;
  } else if (profile == "paper") {
    doc["integrator"]["method"] = "euler";
    doc["integrator"]["dt"] = 1e-5;
  } else {
    throw config_error("unknown profile \"" + profile + "\" (expected desk or paper)");
  }
}

inline void absolutize_graph_paths(json& doc, const std::string& base_dir) {
  if (!doc.contains("graphs")) return;
  for (const char* key : {"comm", "task"}) {
    if (!doc["graphs"].contains(key)) continue;
    std::filesystem::path fp(doc["graphs"][key].get<std::string>());
    if (!fp.is_absolute())
      doc["graphs"][key] = std::filesystem::absolute(std::filesystem::path(base_dir) / fp)
                               .lexically_normal()
                               .string();
  }
}

/// run: integrate a scenario, write trajectory/assertions/summary and the
/// resolved config into the output directory.
inline int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides,
                   const std::string& out_dir, const std::string& profile,
                   std::ostream& log = std::cout) {
  RunResult result;
  json doc;
  try {
    doc = read_config_file(config_path);
    apply_profile(doc, profile);
    apply_overrides(doc, overrides);
    const std::string base_dir = std::filesystem::path(config_path).parent_path().string();
    Scenario sc = scenario_from_json(doc, base_dir);
    absolutize_graph_paths(doc, base_dir);
    result = run(sc);
  } catch (const feasibility_error& e) {
    log << "infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const config_error& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const numeric_error& e) {
    log << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  }

  std::filesystem::create_directories(out_dir);
  auto out_path = [&](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  {
    std::ofstream f(out_path("trajectory.csv"));
    write_table_csv(result.trajectory, f);
  }
  {
    std::ofstream f(out_path("assertions.csv"));
    write_table_csv(result.assertions, f);
  }
  {
    std::ofstream f(out_path("summary.txt"));
    write_summary(result.summary, f);
  }
  {
    std::ofstream f(out_path("run_config.json"));
    f << doc.dump(2) << "\n";
  }
  write_summary(result.summary, log);
  log << "outputs in " << out_dir << "\n";
  return result.summary.certified() ? kExitOk : kExitViolations;
}

/// verify-graph: connectivity plus the spectrum of every agent's
/// disagreement matrix, in both neighborhood modes.
inline int cmd_verify_graph(const std::string& graph_path, int k, std::ostream& out = std::cout) {
  Graph g{1, {}};
  try {
    g = Graph::load(graph_path);
  } catch (const std::exception& e) {
    out << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  out << "graph: " << graph_path << " (" << g.node_count() << " nodes, " << g.edges().size()
      << " edges), k=" << k << "\n";
  if (!is_connected(g)) {
    out << "FAIL: graph is not connected; the disagreement matrices are not guaranteed "
           "positive definite\n";
    return 1;
  }
  out << "connected: yes\n";
  for (auto mode : {NeighborhoodMode::standard, NeighborhoodMode::extended}) {
    out << "mode " << to_string(mode) << ":\n";
    for (int i = 1; i <= g.node_count(); ++i) {
      auto nbhd = khop_neighbors(g, i, k, mode);
      if (nbhd.eta() == 0) {
        out << "  agent " << i << ": eta=0 (nothing to estimate)\n";
        continue;
      }
      auto dm = disagreement_matrix(g, nbhd);
      char buf[128];
      std::snprintf(buf, sizeof(buf), "  agent %d: eta=%d lambda_min=%.6g lambda_max=%.6g\n", i,
                    nbhd.eta(), dm.lambda_min, dm.lambda_max);
      out << buf;
    }
  }
  return kExitOk;
}

namespace detail_cli {

struct Series {
  std::string name;
  std::vector<double> values;
};

inline void write_series_csv(const std::string& path, const std::vector<double>& t,
                             const std::vector<Series>& series) {
  std::ofstream f(path);
  f << "t";
  for (const auto& s : series) f << ',' << s.name;
  f << '\n';
  char buf[32];
  for (size_t r = 0; r < t.size(); ++r) {
    std::snprintf(buf, sizeof(buf), "%.17g", t[r]);
    f << buf;
    for (const auto& s : series) {
      std::snprintf(buf, sizeof(buf), "%.17g", s.values[r]);
      f << ',' << buf;
    }
    f << '\n';
  }
}

inline void write_series_svg(const std::string& path, const std::string& title,
                             const std::vector<double>& t, const std::vector<Series>& series) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b"};
  const double w = 860, h = 520, ml = 70, mr = 160, mt = 40, mb = 50;
  double tmin = t.front(), tmax = t.back();
  double vmin = 0.0, vmax = 1e-12;
  for (const auto& s : series)
    for (double v : s.values) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  auto sx = [&](double x) { return ml + (x - tmin) / (tmax - tmin) * (w - ml - mr); };
  auto sy = [&](double v) { return h - mb - (v - vmin) / (vmax - vmin) * (h - mt - mb); };
  std::ofstream f(path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << title
    << "</text>\n"
    << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
    << "\" stroke=\"black\"/>\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">%g</text>",
                ml - 4, h - mb + 16, tmin);
  f << buf << "\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">%g</text>",
                w - mr - 10, h - mb + 16, tmax);
  f << buf << "\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"4\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">%.4g</text>",
                h - mb, vmin);
  f << buf << "\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"4\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">%.4g</text>",
                mt + 10, vmax);
  f << buf << "\n";
  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = palette[si % 6];
    f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.3\" points=\"";
    const size_t stride = std::max<size_t>(1, t.size() / 2000);
    for (size_t r = 0; r < t.size(); r += stride) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx(t[r]), sy(series[si].values[r]));
      f << buf;
    }
    f << "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"13\" "
                  "fill=\"%s\">%s</text>",
                  w - mr + 8, mt + 18.0 * (si + 1), color, series[si].name.c_str());
    f << buf << "\n";
  }
  f << "</svg>\n";
}

inline int require_col(const Table& t, const std::string& name) {
  int c = t.col(name);
  if (c < 0) throw config_error("trajectory is missing column \"" + name + "\"");
  return c;
}

}  // namespace detail_cli

/// plot-data: reduce a trajectory to the per-target series worth plotting:
/// max-abs estimation error and disagreement with their envelopes, plus the
/// consensus trajectories. Envelopes are recomputed from the config so the
/// check stays independent of what the trajectory recorded.
inline int cmd_plot_data(const std::string& traj_path, const std::string& config_path_in,
                         const std::string& selection, const std::string& out_dir, bool svg,
                         std::ostream& log = std::cout) {
  try {
    std::string config_path = config_path_in;
    if (config_path.empty()) {
      config_path =
          (std::filesystem::path(traj_path).parent_path() / "run_config.json").string();
      if (!std::filesystem::exists(config_path))
        throw config_error("no config given and no run_config.json next to the trajectory");
    }
    Table traj = read_table_csv(traj_path);
    json doc = read_config_file(config_path);
    Scenario sc = scenario_from_json(
        doc, std::filesystem::path(config_path).parent_path().string());
    Prepared p = prepare(sc);
    std::filesystem::create_directories(out_dir);

    std::vector<double> t;
    for (const auto& row : traj.rows) t.push_back(row[0]);

    // parse selection: "", "consensus", "agentN.state", "agentN.input"
    std::vector<std::pair<int, bool>> wanted;  // (agent, input side)
    bool want_consensus = selection.empty() || selection == "consensus";
    if (!selection.empty() && selection != "consensus") {
      if (selection.rfind("agent", 0) != 0)
        throw config_error("selection must be \"consensus\" or agentN.state/agentN.input");
      auto dot = selection.find('.');
      if (dot == std::string::npos)
        throw config_error("selection must look like agentN.state or agentN.input");
      int agent = std::stoi(selection.substr(5, dot - 5));
      std::string side = selection.substr(dot + 1);
      if (side != "state" && side != "input")
        throw config_error("selection side must be state or input");
      wanted.emplace_back(agent, side == "input");
    } else if (selection.empty()) {
      for (const auto& tinfo : p.targets) {
        wanted.emplace_back(tinfo.agent, false);
        if (p.input_observer) wanted.emplace_back(tinfo.agent, true);
      }
    }

    using detail_cli::Series;
    for (auto [agent, input_side] : wanted) {
      int ti = p.target_index[static_cast<size_t>(agent - 1)];
      if (ti < 0) throw config_error("agent " + std::to_string(agent) + " is not estimated");
      const TargetInfo& tinfo = p.targets[static_cast<size_t>(ti)];
      if (input_side && !p.input_observer)
        throw config_error("scenario has no input observer; no input series for agent " +
                           std::to_string(agent));
      const int dim = sc.agents[static_cast<size_t>(agent - 1)].dim;
      const char* est_q = input_side ? "ghat" : "xhat";
      const char* dis_q = input_side ? "mu" : "xi";
      const char* truth_q = input_side ? "g" : "x";
      Series err{input_side ? "max_abs_input_error" : "max_abs_state_error", {}};
      Series dis{"max_abs_disagreement", {}};
      Series bound{input_side ? "theta" : "delta", {}};
      Series envelope{input_side ? "omega" : "rho", {}};
      std::vector<int> truth_cols, est_cols, dis_cols;
      for (int l = 1; l <= dim; ++l)
        truth_cols.push_back(detail_cli::require_col(
            traj, "agent" + std::to_string(agent) + "." + truth_q + ".c" + std::to_string(l)));
      for (int sid : tinfo.slot_ids) {
        const auto& s = p.slots[static_cast<size_t>(sid)];
        for (int l = 1; l <= dim; ++l) {
          est_cols.push_back(detail_cli::require_col(
              traj, detail_sim::slot_tag(s) + "." + est_q + ".c" + std::to_string(l)));
          dis_cols.push_back(detail_cli::require_col(
              traj, detail_sim::slot_tag(s) + "." + dis_q + ".c" + std::to_string(l)));
        }
      }
      const FunnelBank& bank = input_side ? tinfo.omega_bank : tinfo.rho_bank;
      const Funnel& target_bound = input_side ? *sc.funnels.theta : sc.funnels.delta;
      for (size_t r = 0; r < traj.rows.size(); ++r) {
        const auto& row = traj.rows[r];
        double werr = 0.0, wdis = 0.0;
        for (int j = 0; j < tinfo.nbhd.eta(); ++j) {
          for (int l = 0; l < dim; ++l) {
            double est = row[static_cast<size_t>(est_cols[static_cast<size_t>(j * dim + l)])];
            double truth = row[static_cast<size_t>(truth_cols[static_cast<size_t>(l)])];
            werr = std::max(werr, std::abs(est - truth));
            wdis = std::max(
                wdis, std::abs(row[static_cast<size_t>(dis_cols[static_cast<size_t>(j * dim + l)])]));
          }
        }
        err.values.push_back(werr);
        dis.values.push_back(wdis);
        bound.values.push_back(target_bound.value(t[r]));
        envelope.values.push_back(bank.at(0, 0).value(t[r]));
      }
      std::string stem = "plot_agent" + std::to_string(agent) +
                         (input_side ? "_input" : "_state");
      std::string csv = (std::filesystem::path(out_dir) / (stem + ".csv")).string();
      detail_cli::write_series_csv(csv, t, {err, dis, bound, envelope});
      log << "wrote " << csv << "\n";
      if (svg)
        detail_cli::write_series_svg(
            (std::filesystem::path(out_dir) / (stem + ".svg")).string(),
            "agent " + std::to_string(agent) + (input_side ? " input estimation" : " state estimation"),
            t, {err, dis, bound, envelope});
    }

    if (want_consensus) {
      std::vector<Series> series;
      const int dim = sc.agents[0].dim;
      bool uniform = true;
      for (const auto& a : sc.agents) uniform = uniform && a.dim == dim;
      if (uniform) {
        std::vector<std::vector<int>> cols(static_cast<size_t>(sc.comm.node_count()));
        for (int i = 1; i <= sc.comm.node_count(); ++i)
          for (int l = 1; l <= dim; ++l)
            cols[static_cast<size_t>(i - 1)].push_back(detail_cli::require_col(
                traj, "agent" + std::to_string(i) + ".x.c" + std::to_string(l)));
        for (int i = 1; i <= sc.comm.node_count(); ++i)
          for (int l = 1; l <= dim; ++l) {
            Series s{"agent" + std::to_string(i) + ".x.c" + std::to_string(l), {}};
            for (const auto& row : traj.rows)
              s.values.push_back(
                  row[static_cast<size_t>(cols[static_cast<size_t>(i - 1)][static_cast<size_t>(l - 1)])]);
            series.push_back(std::move(s));
          }
        Series norm{"consensus_norm", {}};
        Eigen::VectorXd xg(sc.comm.node_count() * dim);
        for (const auto& row : traj.rows) {
          for (int i = 0; i < sc.comm.node_count(); ++i)
            for (int l = 0; l < dim; ++l)
              xg(i * dim + l) =
                  row[static_cast<size_t>(cols[static_cast<size_t>(i)][static_cast<size_t>(l)])];
          norm.values.push_back(consensus_disagreement(xg, dim).second);
        }
        series.push_back(std::move(norm));
        std::string csv = (std::filesystem::path(out_dir) / "plot_consensus.csv").string();
        detail_cli::write_series_csv(csv, t, series);
        log << "wrote " << csv << "\n";
        if (svg)
          detail_cli::write_series_svg(
              (std::filesystem::path(out_dir) / "plot_consensus.svg").string(),
              "agent states and consensus norm", t, series);
      }
    }
    return kExitOk;
  } catch (const config_error& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace khop::cli
