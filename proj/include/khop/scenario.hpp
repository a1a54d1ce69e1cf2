#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "khop/errors.hpp"
#include "khop/funnel.hpp"
#include "khop/graph.hpp"
#include "khop/observer.hpp"
#include "khop/plant.hpp"

namespace khop {

using nlohmann::json;

enum class IntegratorMethod { euler, rk4 };
enum class ControllerType { none, consensus_tanh };
enum class EstimateInit { zero, truth };

/// Either "auto" (designed from the target bound and the disagreement
/// matrix) or an explicit envelope, with optional per-agent overrides.
struct FunnelSelection {
  bool is_auto = true;
  std::optional<Funnel> explicit_funnel;
  std::map<int, Funnel> overrides;  // agent id -> envelope

  std::optional<Funnel> for_agent(int id) const {
    auto it = overrides.find(id);
    if (it != overrides.end()) return it->second;
    if (!is_auto) return explicit_funnel;
    return std::nullopt;
  }
};

struct FunnelSettings {
  Funnel delta{1.0, 1.0, 1.0};
  std::optional<Funnel> theta;
  FunnelSelection rho;
  FunnelSelection omega;
  double safety = 0.95;
};

struct ControllerSettings {
  ControllerType type = ControllerType::none;
  double gain = 2.0;
  ControlMode mode = ControlMode::estimated;
};

struct OutputSettings {
  int record_stride = 10;
};

/// Fully resolved simulation setup. Immutable once built; safe to share.
struct Scenario {
  std::string name;
  unsigned seed = 0;
  Graph comm{1, {}};
  std::optional<Graph> task;
  int k = 2;
  NeighborhoodMode mode = NeighborhoodMode::standard;
  ObserverVariant variant = ObserverVariant::full;
  EstimateInit estimate_init = EstimateInit::zero;
  FunnelSettings funnels;
  std::vector<AgentModel> agents;
  ControllerSettings controller;
  std::vector<Eigen::VectorXd> initial_states;
  IntegratorMethod method = IntegratorMethod::rk4;
  double dt = 1e-4;
  double t_end = 1.0;
  OutputSettings output;

  const Graph& task_graph() const { return task ? *task : comm; }
};

namespace detail {

inline void require_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw config_error(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known) throw config_error(where + ": unknown key \"" + it.key() + "\"");
  }
}

inline double num(const json& j, const std::string& where) {
  if (!j.is_number()) throw config_error(where + ": expected a number");
  return j.get<double>();
}

inline Funnel parse_funnel(const json& j, const std::string& where) {
  require_keys(j, where, {"rho0", "rho_inf", "decay"});
  for (const char* k : {"rho0", "rho_inf", "decay"})
    if (!j.contains(k)) throw config_error(where + ": missing \"" + k + "\"");
  try {
    return Funnel(num(j["rho0"], where), num(j["rho_inf"], where), num(j["decay"], where));
  } catch (const std::invalid_argument& e) {
    throw config_error(where + ": " + e.what());
  }
}

inline FunnelSelection parse_selection(const json& root, const std::string& key,
                                       const std::string& where) {
  FunnelSelection sel;
  if (root.contains(key)) {
    const json& j = root[key];
    if (j.is_string()) {
      if (j.get<std::string>() != "auto")
        throw config_error(where + "." + key + ": expected \"auto\" or a funnel object");
      sel.is_auto = true;
    } else {
      sel.is_auto = false;
      sel.explicit_funnel = parse_funnel(j, where + "." + key);
    }
  }
  std::string okey = key + "_overrides";
  if (root.contains(okey)) {
    if (!root[okey].is_object()) throw config_error(where + "." + okey + ": expected an object");
    for (auto it = root[okey].begin(); it != root[okey].end(); ++it) {
      int id = 0;
      try {
        id = std::stoi(it.key());
      } catch (...) {
        throw config_error(where + "." + okey + ": agent id \"" + it.key() + "\" is not a number");
      }
      sel.overrides.emplace(id, parse_funnel(it.value(), where + "." + okey + "." + it.key()));
    }
  }
  return sel;
}

inline VectorFn make_drift(const std::string& family, int dim, const std::string& where) {
  if (family == "zero")
    return [dim](const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(dim); };
  if (family == "tanh_sin") {
    if (dim != 2) throw config_error(where + ": drift \"tanh_sin\" requires dim = 2");
    return tanh_sin_drift;
  }
  throw config_error(where + ": unknown drift family \"" + family + "\"");
}

inline double drift_lipschitz(const std::string& family) {
  return family == "zero" ? 0.0 : 1.0;
}

inline VectorFn make_input_map(const std::string& family, const std::string& where,
                               InputMapClass* cls) {
  if (family == "identity") {
    *cls = InputMapClass::derivative_bounded;
    return [](const Eigen::VectorXd& u) { return u; };
  }
  if (family == "tanh") {
    *cls = InputMapClass::bounded;
    return [](const Eigen::VectorXd& u) -> Eigen::VectorXd { return u.array().tanh(); };
  }
  throw config_error(where + ": unknown input map \"" + family + "\"");
}

inline DisturbanceSpec parse_disturbance(const json& j, const std::string& where) {
  require_keys(j, where, {"family", "amplitude", "omega", "seed"});
  DisturbanceSpec spec;
  std::string fam = j.value("family", "zero");
  if (fam == "zero") spec.family = DisturbanceSpec::Family::zero;
  else if (fam == "sinusoid") spec.family = DisturbanceSpec::Family::sinusoid;
  else if (fam == "bounded_random") spec.family = DisturbanceSpec::Family::bounded_random;
  else throw config_error(where + ": unknown disturbance family \"" + fam + "\"");
  spec.amplitude = j.value("amplitude", 0.0);
  if (spec.amplitude < 0.0) throw config_error(where + ": amplitude must be >= 0");
  spec.omega = j.value("omega", 1.0);
  spec.seed = j.value("seed", 0u);
  return spec;
}

/// Deterministic spread: component l of agent i walks a linspace over
/// [-box, box] with a per-component index shift.
inline std::vector<Eigen::VectorXd> grid_states(const std::vector<int>& dims, double box) {
  const int n = static_cast<int>(dims.size());
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x(dims[static_cast<size_t>(i)]);
    for (int l = 0; l < dims[static_cast<size_t>(i)]; ++l) {
      int idx = (i + l * (n / 2 + 1)) % n;
      double frac = (n == 1) ? 0.5 : static_cast<double>(idx) / (n - 1);
      x(l) = -box + 2.0 * box * frac;
    }
    out.push_back(std::move(x));
  }
  return out;
}

inline std::vector<Eigen::VectorXd> uniform_states(const std::vector<int>& dims, double box,
                                                   unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-box, box);
  std::vector<Eigen::VectorXd> out;
  for (int d : dims) {
    Eigen::VectorXd x(d);
    for (int l = 0; l < d; ++l) x(l) = u(rng);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace detail

inline json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  try {
    return json::parse(in, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw config_error(std::string("config parse error: ") + e.what());
  }
}

/// Applies one "dotted.path=value" override; the value is parsed as JSON
/// when possible and kept as a string otherwise.
inline void apply_override(json& doc, const std::string& setting) {
  auto eq = setting.find('=');
  if (eq == std::string::npos || eq == 0)
    throw config_error("override must look like key.path=value: " + setting);
  std::string path = setting.substr(0, eq);
  std::string raw = setting.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (...) {
    value = raw;
  }
  json* cur = &doc;
  size_t pos = 0;
  while (true) {
    size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw config_error("empty key in override path: " + path);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key) || !(*cur)[key].is_object()) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

inline void apply_overrides(json& doc, const std::vector<std::string>& settings) {
  for (const auto& s : settings) apply_override(doc, s);
}

/// Parses and resolves a scenario document. Relative graph paths are taken
/// against `base_dir`. Throws config_error on schema or semantic problems.
inline Scenario scenario_from_json(const json& doc, const std::string& base_dir) {
  using namespace detail;
  require_keys(doc, "config",
               {"name", "seed", "graphs", "khop", "observer", "funnels", "plant",
                "controller", "initial_states", "integrator", "output"});

  Scenario sc;
  sc.name = doc.value("name", "scenario");
  sc.seed = doc.value("seed", 0u);

  if (!doc.contains("graphs")) throw config_error("config: missing \"graphs\"");
  require_keys(doc["graphs"], "graphs", {"comm", "task"});
  if (!doc["graphs"].contains("comm")) throw config_error("graphs: missing \"comm\"");
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_absolute() || base_dir.empty()) return p;
    return (std::filesystem::path(base_dir) / fp).string();
  };
  sc.comm = Graph::load(resolve(doc["graphs"]["comm"].get<std::string>()));
  if (doc["graphs"].contains("task"))
    sc.task = Graph::load(resolve(doc["graphs"]["task"].get<std::string>()));
  if (!is_connected(sc.comm)) throw config_error("communication graph is not connected");
  if (sc.task && sc.task->node_count() != sc.comm.node_count())
    throw config_error("task graph node count differs from communication graph");

  const json& kh = doc.contains("khop") ? doc["khop"] : json::object();
  require_keys(kh, "khop", {"k", "mode"});
  sc.k = kh.value("k", 2);
  if (sc.k < 2) throw config_error("khop.k must be >= 2");
  std::string mode = kh.value("mode", "standard");
  if (mode == "standard") sc.mode = NeighborhoodMode::standard;
  else if (mode == "extended") sc.mode = NeighborhoodMode::extended;
  else throw config_error("khop.mode: expected \"standard\" or \"extended\"");

  const json& ob = doc.contains("observer") ? doc["observer"] : json::object();
  require_keys(ob, "observer", {"variant", "estimate_init"});
  std::string var = ob.value("variant", "full");
  if (var == "full") sc.variant = ObserverVariant::full;
  else if (var == "no_input_observer") sc.variant = ObserverVariant::no_input_observer;
  else if (var == "no_drift") sc.variant = ObserverVariant::no_drift;
  else if (var == "no_drift_no_input") sc.variant = ObserverVariant::no_drift_no_input;
  else throw config_error("observer.variant: unknown variant \"" + var + "\"");
  std::string einit = ob.value("estimate_init", "zero");
  if (einit == "zero") sc.estimate_init = EstimateInit::zero;
  else if (einit == "truth") sc.estimate_init = EstimateInit::truth;
  else throw config_error("observer.estimate_init: expected \"zero\" or \"truth\"");

  if (!doc.contains("funnels")) throw config_error("config: missing \"funnels\"");
  const json& fu = doc["funnels"];
  require_keys(fu, "funnels",
               {"delta", "theta", "rho", "omega", "rho_overrides", "omega_overrides",
                "safety_factor"});
  if (!fu.contains("delta")) throw config_error("funnels: missing \"delta\"");
  sc.funnels.delta = parse_funnel(fu["delta"], "funnels.delta");
  if (fu.contains("theta")) sc.funnels.theta = parse_funnel(fu["theta"], "funnels.theta");
  sc.funnels.rho = parse_selection(fu, "rho", "funnels");
  sc.funnels.omega = parse_selection(fu, "omega", "funnels");
  sc.funnels.safety = fu.value("safety_factor", 0.95);
  if (!(sc.funnels.safety > 0.0 && sc.funnels.safety <= 1.0))
    throw config_error("funnels.safety_factor must be in (0, 1]");
  if (variant_has_input_observer(sc.variant) && !sc.funnels.theta)
    throw config_error("funnels: \"theta\" is required when the input observer runs");

  const int n_agents = sc.comm.node_count();
  const json& pl = doc.contains("plant") ? doc["plant"] : json::object();
  require_keys(pl, "plant", {"dim", "drift", "input_map", "disturbance", "agents"});
  int default_dim = pl.value("dim", 1);
  std::string default_drift = pl.value("drift", "zero");
  std::string default_input = pl.value("input_map", "identity");
  DisturbanceSpec default_dist =
      pl.contains("disturbance") ? parse_disturbance(pl["disturbance"], "plant.disturbance")
                                 : DisturbanceSpec{};
  if (default_dist.seed == 0) default_dist.seed = sc.seed + 1;

  struct AgentRaw {
    int dim;
    std::string drift, input;
    DisturbanceSpec dist;
  };
  std::vector<AgentRaw> raw(static_cast<size_t>(n_agents),
                            {default_dim, default_drift, default_input, default_dist});
  if (pl.contains("agents")) {
    if (!pl["agents"].is_array()) throw config_error("plant.agents: expected an array");
    for (const auto& a : pl["agents"]) {
      require_keys(a, "plant.agents[]", {"id", "dim", "drift", "input_map", "disturbance"});
      if (!a.contains("id")) throw config_error("plant.agents[]: missing \"id\"");
      int id = a["id"].get<int>();
      if (id < 1 || id > n_agents) throw config_error("plant.agents[]: id out of range");
      AgentRaw& r = raw[static_cast<size_t>(id - 1)];
      if (a.contains("dim")) r.dim = a["dim"].get<int>();
      if (a.contains("drift")) r.drift = a["drift"].get<std::string>();
      if (a.contains("input_map")) r.input = a["input_map"].get<std::string>();
      if (a.contains("disturbance"))
        r.dist = parse_disturbance(a["disturbance"], "plant.agents[].disturbance");
    }
  }
  for (int i = 0; i < n_agents; ++i) {
    const AgentRaw& r = raw[static_cast<size_t>(i)];
    if (r.dim < 1) throw config_error("plant: agent dimension must be >= 1");
    AgentModel m;
    m.id = i + 1;
    m.dim = r.dim;
    m.drift = make_drift(r.drift, r.dim, "plant");
    m.drift_lipschitz = drift_lipschitz(r.drift);
    m.input_map = make_input_map(r.input, "plant", &m.input_class);
    m.disturbance = make_disturbance(r.dist, m.id, r.dim);
    m.disturbance_bound = r.dist.amplitude;
    sc.agents.push_back(std::move(m));
  }

  const json& ct = doc.contains("controller") ? doc["controller"] : json::object();
  require_keys(ct, "controller", {"type", "gain", "mode"});
  std::string ctype = ct.value("type", "none");
  if (ctype == "none") sc.controller.type = ControllerType::none;
  else if (ctype == "consensus_tanh") sc.controller.type = ControllerType::consensus_tanh;
  else throw config_error("controller.type: unknown type \"" + ctype + "\"");
  sc.controller.gain = ct.value("gain", 2.0);
  std::string cmode = ct.value("mode", "estimated");
  if (cmode == "truth") sc.controller.mode = ControlMode::truth;
  else if (cmode == "estimated") sc.controller.mode = ControlMode::estimated;
  else throw config_error("controller.mode: expected \"truth\" or \"estimated\"");
  if (sc.controller.type == ControllerType::consensus_tanh) {
    for (const auto& a : sc.agents)
      if (a.dim != sc.agents[0].dim)
        throw config_error("consensus controller requires a uniform agent dimension");
  }

  std::vector<int> dims;
  for (const auto& a : sc.agents) dims.push_back(a.dim);
  if (doc.contains("initial_states") && doc["initial_states"].is_array()) {
    const json& init = doc["initial_states"];
    if (static_cast<int>(init.size()) != n_agents)
      throw config_error("initial_states: expected one entry per agent");
    for (int i = 0; i < n_agents; ++i) {
      const auto& row = init[static_cast<size_t>(i)];
      if (!row.is_array() || static_cast<int>(row.size()) != dims[static_cast<size_t>(i)])
        throw config_error("initial_states[" + std::to_string(i) + "]: expected " +
                           std::to_string(dims[static_cast<size_t>(i)]) + " components");
      Eigen::VectorXd x(dims[static_cast<size_t>(i)]);
      for (int l = 0; l < dims[static_cast<size_t>(i)]; ++l)
        x(l) = detail::num(row[static_cast<size_t>(l)], "initial_states");
      sc.initial_states.push_back(std::move(x));
    }
  } else if (doc.contains("initial_states")) {
    const json& init = doc["initial_states"];
    require_keys(init, "initial_states", {"kind", "box", "seed"});
    std::string kind = init.value("kind", "grid");
    double box = init.value("box", 5.0);
    if (kind == "grid") sc.initial_states = detail::grid_states(dims, box);
    else if (kind == "uniform")
      sc.initial_states = detail::uniform_states(dims, box, init.value("seed", sc.seed));
    else throw config_error("initial_states.kind: expected \"grid\" or \"uniform\"");
  } else {
    sc.initial_states = detail::grid_states(dims, 5.0);
  }

  const json& it = doc.contains("integrator") ? doc["integrator"] : json::object();
  require_keys(it, "integrator", {"method", "dt", "t_end"});
  std::string method = it.value("method", "rk4");
  if (method == "euler") sc.method = IntegratorMethod::euler;
  else if (method == "rk4") sc.method = IntegratorMethod::rk4;
  else throw config_error("integrator.method: expected \"euler\" or \"rk4\"");
  sc.dt = it.value("dt", 1e-4);
  sc.t_end = it.value("t_end", 1.0);
  if (!(sc.dt > 0.0)) throw config_error("integrator.dt must be > 0");
  if (!(sc.t_end > 0.0)) throw config_error("integrator.t_end must be > 0");

  const json& out = doc.contains("output") ? doc["output"] : json::object();
  require_keys(out, "output", {"record_stride"});
  sc.output.record_stride = out.value("record_stride", 10);
  if (sc.output.record_stride < 1) throw config_error("output.record_stride must be >= 1");

  return sc;
}

inline Scenario load_scenario(const std::string& path,
                              const std::vector<std::string>& overrides = {}) {
  json doc = read_config_file(path);
  apply_overrides(doc, overrides);
  return scenario_from_json(doc, std::filesystem::path(path).parent_path().string());
}

}  // namespace khop
