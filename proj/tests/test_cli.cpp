#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "khop/cli.hpp"

using namespace khop;
namespace fs = std::filesystem;

namespace {

const std::string kRepo = KHOP_SOURCE_DIR;

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "khopsim_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_file(const fs::path& dir, const std::string& name, const std::string& body) {
  fs::path p = dir / name;
  std::ofstream f(p);
  f << body;
  return p.string();
}

json minimal_doc() {
  json doc = read_config_file(kRepo + "/scenarios/minimal.json");
  doc["graphs"]["comm"] = kRepo + "/graphs/path5.txt";
  return doc;
}

}  // namespace

TEST_CASE("config schema") {
  SECTION("bundled scenarios parse") {
    for (const char* name : {"paper8", "nodrift", "minimal"}) {
      Scenario sc = load_scenario(kRepo + "/scenarios/" + std::string(name) + ".json");
      REQUIRE(sc.name == name);
      REQUIRE(sc.comm.node_count() >= 5);
    }
  }
  SECTION("unknown keys are rejected at every level") {
    json doc = minimal_doc();
    doc["surprise"] = 1;
    REQUIRE_THROWS_WITH(scenario_from_json(doc, ""),
                        Catch::Matchers::ContainsSubstring("surprise"));
    doc = minimal_doc();
    doc["integrator"]["step"] = 0.1;
    REQUIRE_THROWS_WITH(scenario_from_json(doc, ""),
                        Catch::Matchers::ContainsSubstring("step"));
    doc = minimal_doc();
    doc["funnels"]["delta"]["slope"] = 2.0;
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);
  }
  SECTION("semantic validation") {
    json doc = minimal_doc();
    doc["khop"]["k"] = 1;
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);

    doc = minimal_doc();
    doc["funnels"]["delta"]["rho_inf"] = 100.0;  // rho0 < rho_inf
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);

    doc = minimal_doc();
    doc["integrator"]["dt"] = 0.0;
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);

    doc = minimal_doc();
    doc.erase("funnels");
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);
  }
  SECTION("disconnected communication graph is rejected") {
    auto dir = fresh_dir("schema");
    std::string gpath = write_file(dir, "two.txt", "2\n");
    json doc = minimal_doc();
    doc["graphs"]["comm"] = gpath;
    doc["initial_states"] = json::array({json::array({0.0, 0.0}), json::array({1.0, 1.0})});
    REQUIRE_THROWS_WITH(scenario_from_json(doc, ""),
                        Catch::Matchers::ContainsSubstring("not connected"));
  }
  SECTION("bounded input map family") {
    json doc = minimal_doc();
    doc["plant"]["input_map"] = "tanh";
    Scenario sc = scenario_from_json(doc, "");
    REQUIRE(sc.agents[0].input_class == InputMapClass::bounded);
    Eigen::VectorXd u(2);
    u << 30.0, -0.5;
    auto g = sc.agents[0].input_map(u);
    REQUIRE(g(0) == Catch::Approx(std::tanh(30.0)));
    REQUIRE(g(1) == Catch::Approx(std::tanh(-0.5)));
    REQUIRE(g.cwiseAbs().maxCoeff() <= 1.0);

    doc["plant"]["input_map"] = "warp";
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);
  }
  SECTION("theta required only when the input observer runs") {
    json doc = minimal_doc();
    doc["funnels"].erase("theta");
    REQUIRE_THROWS_AS(scenario_from_json(doc, ""), config_error);
    doc["observer"]["variant"] = "no_input_observer";
    REQUIRE_NOTHROW(scenario_from_json(doc, ""));
  }
}

TEST_CASE("config overrides") {
  json doc = minimal_doc();
  apply_override(doc, "integrator.dt=0.001");
  REQUIRE(doc["integrator"]["dt"].get<double>() == 0.001);
  apply_override(doc, "controller.mode=truth");
  REQUIRE(doc["controller"]["mode"] == "truth");
  apply_override(doc, "funnels.delta.rho_inf=0.5");
  REQUIRE(doc["funnels"]["delta"]["rho_inf"].get<double>() == 0.5);
  REQUIRE_THROWS_AS(apply_override(doc, "no-equals-sign"), config_error);
}

TEST_CASE("grid and uniform initial state generators") {
  json doc = minimal_doc();
  doc["initial_states"] = {{"kind", "grid"}, {"box", 2.0}};
  Scenario sc = scenario_from_json(doc, "");
  REQUIRE(sc.initial_states.size() == 5);
  for (const auto& x : sc.initial_states) {
    REQUIRE(x.cwiseAbs().maxCoeff() <= 2.0);
  }
  // deterministic
  Scenario sc2 = scenario_from_json(doc, "");
  for (size_t i = 0; i < 5; ++i)
    REQUIRE((sc.initial_states[i] - sc2.initial_states[i]).norm() == 0.0);

  doc["initial_states"] = {{"kind", "uniform"}, {"box", 1.5}, {"seed", 3}};
  Scenario su = scenario_from_json(doc, "");
  for (const auto& x : su.initial_states) REQUIRE(x.cwiseAbs().maxCoeff() <= 1.5);
  Scenario su2 = scenario_from_json(doc, "");
  for (size_t i = 0; i < 5; ++i)
    REQUIRE((su.initial_states[i] - su2.initial_states[i]).norm() == 0.0);
}

TEST_CASE("cmd_run exit codes and outputs") {
  auto dir = fresh_dir("cmd_run");
  std::ostringstream log;

  SECTION("healthy short run exits 0 and writes everything") {
    int rc = cli::cmd_run(kRepo + "/scenarios/minimal.json", {"integrator.t_end=0.2"},
                          (dir / "out").string(), "", log);
    REQUIRE(rc == cli::kExitOk);
    for (const char* f : {"trajectory.csv", "assertions.csv", "summary.txt", "run_config.json"})
      REQUIRE(fs::exists(dir / "out" / f));
    // resolved config must carry absolute graph paths so plot-data works later
    json rc_doc = read_config_file((dir / "out" / "run_config.json").string());
    REQUIRE(fs::path(rc_doc["graphs"]["comm"].get<std::string>()).is_absolute());
  }
  SECTION("infeasible funnel exits 3") {
    std::string cfg = write_file(dir, "bad.json", R"({
      "name": "bad", "graphs": {"comm": ")" + kRepo + R"(/graphs/path5.txt"},
      "khop": {"k": 3}, "observer": {"variant": "full"},
      "funnels": {"delta": {"rho0": 12.0, "rho_inf": 0.4, "decay": 3.0},
                   "theta": {"rho0": 40.0, "rho_inf": 1.0, "decay": 3.0},
                   "rho": {"rho0": 0.001, "rho_inf": 0.0005, "decay": 3.0}},
      "plant": {"dim": 2, "drift": "tanh_sin"},
      "controller": {"type": "consensus_tanh", "gain": 1.5, "mode": "truth"},
      "initial_states": {"kind": "grid", "box": 1.0},
      "integrator": {"method": "rk4", "dt": 1e-4, "t_end": 0.1}
    })");
    REQUIRE(cli::cmd_run(cfg, {}, (dir / "out3").string(), "", log) == cli::kExitInfeasible);
  }
  SECTION("malformed config exits 2") {
    std::string cfg = write_file(dir, "broken.json", "{ not json");
    REQUIRE(cli::cmd_run(cfg, {}, (dir / "out2").string(), "", log) == cli::kExitConfig);
    std::string cfg2 = write_file(dir, "unknown.json", R"({"nope": 1})");
    REQUIRE(cli::cmd_run(cfg2, {}, (dir / "out2").string(), "", log) == cli::kExitConfig);
  }
  SECTION("profiles rewrite the integrator block") {
    json doc = minimal_doc();
    cli::apply_profile(doc, "paper");
    REQUIRE(doc["integrator"]["method"] == "euler");
    REQUIRE(doc["integrator"]["dt"].get<double>() == 1e-5);
    cli::apply_profile(doc, "desk");
    REQUIRE(doc["integrator"]["method"] == "rk4");
    REQUIRE_THROWS_AS(cli::apply_profile(doc, "warp"), config_error);
  }
}

TEST_CASE("cmd_verify_graph") {
  std::ostringstream out;
  SECTION("path graph report includes the hand-computed extreme") {
    int rc = cli::cmd_verify_graph(kRepo + "/graphs/path5.txt", 3, out);
    REQUIRE(rc == 0);
    REQUIRE(out.str().find("connected: yes") != std::string::npos);
    REQUIRE(out.str().find("0.381966") != std::string::npos);  // (3 - sqrt 5)/2
  }
  SECTION("disconnected graph fails with a message") {
    auto dir = fresh_dir("verify");
    std::string gpath = write_file(dir, "disc.txt", "4\n1 2\n3 4\n");
    int rc = cli::cmd_verify_graph(gpath, 2, out);
    REQUIRE(rc != 0);
    REQUIRE(out.str().find("not connected") != std::string::npos);
  }
  SECTION("missing file") {
    REQUIRE(cli::cmd_verify_graph("/nonexistent/g.txt", 2, out) == cli::kExitConfig);
  }
}

TEST_CASE("cmd_plot_data") {
  auto dir = fresh_dir("plot");
  std::ostringstream log;
  REQUIRE(cli::cmd_run(kRepo + "/scenarios/minimal.json", {"integrator.t_end=0.3"},
                       (dir / "run").string(), "", log) == 0);
  std::string traj = (dir / "run" / "trajectory.csv").string();

  SECTION("single selection emits one file with exact envelopes") {
    REQUIRE(cli::cmd_plot_data(traj, "", "agent1.state", (dir / "sel").string(), false, log) == 0);
    REQUIRE(fs::exists(dir / "sel" / "plot_agent1_state.csv"));
    REQUIRE_FALSE(fs::exists(dir / "sel" / "plot_agent2_state.csv"));

    Table plot = cli::read_table_csv((dir / "sel" / "plot_agent1_state.csv").string());
    int tc = plot.col("t");
    int dc = plot.col("delta");
    int rc_ = plot.col("rho");
    REQUIRE(tc == 0);
    REQUIRE(dc >= 0);
    REQUIRE(rc_ >= 0);
    // envelopes recomputed from config match the analytic funnel exactly
    Scenario sc = load_scenario(kRepo + "/scenarios/minimal.json");
    Prepared p = prepare(sc);
    const auto& bank = p.targets[static_cast<size_t>(p.target_index[0])].rho_bank;
    for (const auto& row : plot.rows) {
      double t = row[static_cast<size_t>(tc)];
      REQUIRE(std::abs(row[static_cast<size_t>(dc)] - sc.funnels.delta.value(t)) <= 1e-12);
      REQUIRE(std::abs(row[static_cast<size_t>(rc_)] - bank.at(0, 0).value(t)) <= 1e-12);
    }
    // max-abs series dominate componentwise series by construction
    int ec = plot.col("max_abs_state_error");
    REQUIRE(ec >= 0);
    for (const auto& row : plot.rows)
      REQUIRE(row[static_cast<size_t>(ec)] <= sc.funnels.delta.value(row[0]));
  }
  SECTION("empty selection exports everything incl. consensus") {
    REQUIRE(cli::cmd_plot_data(traj, "", "", (dir / "all").string(), true, log) == 0);
    for (int agent = 1; agent <= 5; ++agent) {
      REQUIRE(fs::exists(dir / "all" /
                         ("plot_agent" + std::to_string(agent) + "_state.csv")));
      REQUIRE(fs::exists(dir / "all" /
                         ("plot_agent" + std::to_string(agent) + "_input.csv")));
    }
    REQUIRE(fs::exists(dir / "all" / "plot_consensus.csv"));
    REQUIRE(fs::exists(dir / "all" / "plot_consensus.svg"));
  }
  SECTION("missing columns are a schema error") {
    // drop the last header column so rows no longer match the header
    Table t = cli::read_table_csv(traj);
    std::ofstream f(dir / "chopped.csv");
    for (size_t c = 0; c + 1 < t.columns.size(); ++c) f << t.columns[c] << (c + 2 < t.columns.size() ? "," : "\n");
    f.close();
    // header now one column short of every row: reader refuses
    REQUIRE(cli::cmd_plot_data((dir / "chopped.csv").string(), "", "agent1.state",
                               (dir / "x").string(), false, log) == cli::kExitConfig);

    // a well-formed table that simply lacks the needed columns
    std::ofstream g(dir / "sparse.csv");
    g << "t,agent1.x.c1\n0,0\n0.1,0\n";
    g.close();
    REQUIRE(cli::cmd_plot_data((dir / "sparse.csv").string(),
                               (dir / "run" / "run_config.json").string(), "agent1.state",
                               (dir / "x").string(), false, log) == cli::kExitConfig);
  }
  SECTION("bad selection strings") {
    REQUIRE(cli::cmd_plot_data(traj, "", "agent1.everything", (dir / "y").string(), false,
                               log) == cli::kExitConfig);
    REQUIRE(cli::cmd_plot_data(traj, "", "nonsense", (dir / "y").string(), false, log) ==
            cli::kExitConfig);
  }
}
