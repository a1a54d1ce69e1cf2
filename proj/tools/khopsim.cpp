// khopsim: decentralized k-hop prescribed-performance observer simulator.
//
// Subcommands:
//   run           integrate a scenario config and write trajectory/report CSVs
//   verify-graph  connectivity and disagreement-matrix spectra of an edge list
//   plot-data     reduce a trajectory to plot-ready series with envelopes

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "khop/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"k-hop prescribed performance observer simulator"};
  app.require_subcommand(1);

  std::string default_out = "out";
  if (const char* env = std::getenv("KHOPSIM_OUT_DIR")) default_out = env;

  auto* run = app.add_subcommand("run", "integrate a scenario and report bound satisfaction");
  std::string config_path, out_dir = default_out, profile;
  std::vector<std::string> sets;
  run->add_option("--config", config_path, "scenario config (JSON)")->required();
  run->add_option("--set", sets, "override a config entry, e.g. --set integrator.dt=1e-5");
  run->add_option("--out", out_dir, "output directory (default $KHOPSIM_OUT_DIR or ./out)");
  run->add_option("--profile", profile, "integrator profile: desk (rk4, dt=1e-4) or paper (euler, dt=1e-5)");

  auto* vg = app.add_subcommand("verify-graph", "check connectivity and M-matrix spectra");
  std::string graph_path;
  int k = 2;
  vg->add_option("--graph", graph_path, "edge-list file")->required();
  vg->add_option("--k", k, "hop bound (default 2)");

  auto* pd = app.add_subcommand("plot-data", "export plot-ready series from a trajectory");
  std::string traj_path, pd_config, selection;
  std::string pd_out = default_out;
  bool svg = false;
  pd->add_option("--traj", traj_path, "trajectory.csv from a run")->required();
  pd->add_option("--config", pd_config, "scenario config (default: run_config.json beside the trajectory)");
  pd->add_option("--select", selection, "\"agentN.state\", \"agentN.input\", \"consensus\" or empty for all");
  pd->add_option("--out", pd_out, "output directory");
  pd->add_flag("--svg", svg, "also render an SVG chart per series file");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return khop::cli::cmd_run(config_path, sets, out_dir, profile);
  if (vg->parsed()) return khop::cli::cmd_verify_graph(graph_path, k);
  return khop::cli::cmd_plot_data(traj_path, pd_config, selection, pd_out, svg);
}
