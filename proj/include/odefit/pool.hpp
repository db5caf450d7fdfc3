#pragma once

// The benchmark problem pool: twelve ODE parameter estimation problems with
// dimensions, right-hand sides, observation maps, bounds, nominal values,
// measurement grids and shipped mesh sizes. Problems can also be loaded from
// a JSON problem-spec document.

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odefit/expr.hpp"

namespace odefit {

/// One initial state: either fixed to a known value or estimated within bounds.
struct InitialState {
  bool estimated = false;
  double fixed_value = 0.0;        // valid when !estimated
  double lo = 0.0, hi = 0.0;       // valid when estimated
  double nominal = 0.0;            // valid when estimated
};

/// Uniform measurement-grid conventions (the explicit-times case stores taus
/// directly and leaves the convention unused).
enum class GridConvention { ExcludeStart, IncludeEndpoints, Explicit };

struct OdeProblem {
  std::string name;
  int n_s = 0, n_y = 0, n_p = 0;
  double t0 = 0.0, tf = 0.0;
  std::vector<std::string> state_names, param_names;
  SymbolTable symbols;
  ExprDag dag;
  std::vector<ExprDag::Id> rhs;   // n_s
  std::vector<ExprDag::Id> obs;   // n_y
  std::vector<InitialState> x0;   // n_s
  std::vector<double> p_lo, p_hi, p_nominal;
  std::vector<double> taus;       // measurement times, strictly increasing
  GridConvention grid_convention = GridConvention::Explicit;
  std::vector<int> meshes;        // shipped mesh sizes, ascending

  int n_ic() const {
    int c = 0;
    for (const auto& s : x0) c += s.estimated ? 1 : 0;
    return c;
  }
  int n_meas() const { return static_cast<int>(taus.size()); }

  /// Full nominal initial state vector (fixed values + estimated nominals).
  std::vector<double> nominal_x0() const {
    std::vector<double> v;
    v.reserve(x0.size());
    for (const auto& s : x0) v.push_back(s.estimated ? s.nominal : s.fixed_value);
    return v;
  }
};

/// Mesh-node indices m(i) with t_{m(i)} = tau_i exactly; throws on misalignment.
inline std::vector<int> measurement_indices(const OdeProblem& problem, int M) {
  double h = (problem.tf - problem.t0) / M;
  std::vector<int> idx;
  idx.reserve(problem.taus.size());
  for (double tau : problem.taus) {
    long m = std::lround((tau - problem.t0) / h);
    double node_t = problem.t0 + static_cast<double>(m) * h;
    if (m < 0 || m > M || std::abs(node_t - tau) > 1e-9 * std::max(1.0, std::abs(tau))) {
      std::ostringstream os;
      os << "measurement time " << tau << " does not lie on a node of mesh M=" << M;
      throw std::invalid_argument(os.str());
    }
    idx.push_back(static_cast<int>(m));
  }
  return idx;
}

namespace detail {

struct ProblemDraft {
  std::string name;
  double t0, tf;
  std::vector<std::string> states, params;
  std::vector<std::string> odes;          // one per state
  std::vector<std::string> observations;  // one per output
  std::vector<InitialState> x0;
  std::vector<double> p_lo, p_hi, p_nominal;
  int n_meas = 0;
  GridConvention convention = GridConvention::ExcludeStart;
  std::vector<double> explicit_taus;
  std::vector<int> meshes;
};

inline InitialState fixed_ic(double v) { return {false, v, 0, 0, 0}; }
inline InitialState estimated_ic(double lo, double hi, double nominal) {
  return {true, 0, lo, hi, nominal};
}

inline OdeProblem finalize(const ProblemDraft& d) {
  OdeProblem p;
  p.name = d.name;
  p.t0 = d.t0;
  p.tf = d.tf;
  p.state_names = d.states;
  p.param_names = d.params;
  p.n_s = static_cast<int>(d.states.size());
  p.n_y = static_cast<int>(d.observations.size());
  p.n_p = static_cast<int>(d.params.size());
  p.symbols = SymbolTable::for_problem(d.states, d.params);
  for (const auto& src : d.odes) p.rhs.push_back(parse(src, p.dag, p.symbols));
  for (const auto& src : d.observations) p.obs.push_back(parse(src, p.dag, p.symbols));
  p.x0 = d.x0;
  p.p_lo = d.p_lo;
  p.p_hi = d.p_hi;
  p.p_nominal = d.p_nominal;
  p.meshes = d.meshes;
  p.grid_convention = d.convention;
  if (d.convention == GridConvention::Explicit) {
    p.taus = d.explicit_taus;
  } else if (d.convention == GridConvention::ExcludeStart) {
    for (int i = 1; i <= d.n_meas; ++i)
      p.taus.push_back(d.t0 + i * (d.tf - d.t0) / d.n_meas);
  } else {
    for (int i = 0; i < d.n_meas; ++i)
      p.taus.push_back(d.t0 + i * (d.tf - d.t0) / (d.n_meas - 1));
  }

  // Validation shared by built-ins and loaded documents.
  if (static_cast<int>(d.odes.size()) != p.n_s)
    throw std::invalid_argument("ode count does not match state count");
  for (std::size_t i = 0; i + 1 < p.taus.size(); ++i)
    if (!(p.taus[i] < p.taus[i + 1]))
      throw std::invalid_argument("measurement times must be strictly increasing");
  for (double tau : p.taus)
    if (tau < p.t0 || tau > p.tf)
      throw std::invalid_argument("measurement time outside the horizon");
  for (int j = 0; j < p.n_p; ++j) {
    if (p.p_lo[j] > p.p_hi[j]) throw std::invalid_argument("inverted parameter bounds");
    if (p.p_nominal[j] < p.p_lo[j] || p.p_nominal[j] > p.p_hi[j])
      throw std::invalid_argument("nominal parameter outside bounds");
  }
  for (const auto& s : p.x0)
    if (s.estimated && (s.lo > s.hi || s.nominal < s.lo || s.nominal > s.hi))
      throw std::invalid_argument("bad estimated initial-state bounds");
  for (int M : p.meshes) measurement_indices(p, M);  // alignment
  return p;
}

}  // namespace detail

inline OdeProblem build_problem(const std::string& name) {
  using detail::ProblemDraft;
  using detail::estimated_ic;
  using detail::fixed_ic;
  ProblemDraft d;
  d.name = name;

  if (name == "alpha_pinene") {
    d.t0 = 0; d.tf = 36900;
    d.states = {"x1", "x2", "x3", "x4", "x5"};
    d.params = {"p1", "p2", "p3", "p4", "p5"};
    d.odes = {
        "-(p1+p2)*x1",
        "p1*x1",
        "p2*x1-(p3+p4)*x3+p5*x5",
        "p3*x3",
        "-p4*x3+p5*x5",
    };
    d.observations = {"x1", "x2", "x3", "x4", "x5"};
    d.x0 = {fixed_ic(100), fixed_ic(0), fixed_ic(0), fixed_ic(0), fixed_ic(0)};
    d.p_lo.assign(5, 0.0);
    d.p_hi.assign(5, 1.0);
    d.p_nominal = {5.93e-5, 2.96e-5, 2.05e-5, 27.5e-5, 4.00e-5};
    d.convention = GridConvention::Explicit;
    d.explicit_taus = {1230, 3060, 4920, 7800, 10680, 15030, 22620, 36420};
    d.meshes = {1230, 3690};
  } else if (name == "BBG") {
    d.t0 = 0; d.tf = 12;
    d.states = {"Cb", "Cs"};
    d.params = {"mu_max", "Ks", "kd", "yield"};
    d.odes = {
        "mu_max*Cs*Cb/(Ks+Cs)-kd*Cb",
        "-(mu_max/yield)*Cs*Cb/(Ks+Cs)",
    };
    d.observations = {"Cb", "Cs"};
    d.x0 = {fixed_ic(2), fixed_ic(30)};
    d.p_lo.assign(4, 0.0001);
    d.p_hi.assign(4, 100.0);
    d.p_nominal = {0.4, 5.0, 0.05, 0.5};
    d.n_meas = 7;
    d.convention = GridConvention::IncludeEndpoints;
    d.meshes = {120, 1200};
  } else if (name == "FHN") {
    d.t0 = 0; d.tf = 20;
    d.states = {"V", "R"};
    d.params = {"g", "a", "b"};
    d.odes = {
        "g*(V-V^3/3+R)",
        "(1/g)*(a-V-b*R)",
    };
    d.observations = {"V"};
    d.x0 = {fixed_ic(-1), fixed_ic(1)};
    d.p_lo.assign(3, 1e-5);
    d.p_hi.assign(3, 1e5);
    d.p_nominal = {3.0, 0.2, 0.2};
    d.n_meas = 6;
    d.convention = GridConvention::IncludeEndpoints;
    d.meshes = {200, 2000};
  } else if (name == "harmonic") {
    d.t0 = 0; d.tf = 2.3;
    d.states = {"x1", "x2"};
    d.params = {"p1", "p2"};
    d.odes = {
        "-p1*x2",
        "(1/p2)*x1",
    };
    d.observations = {"x1", "x2"};
    d.x0 = {estimated_ic(0, 1.5, 1.0), estimated_ic(0, 1.5, 0.5)};
    d.p_lo.assign(2, 0.0001);
    d.p_hi.assign(2, 10.0);
    d.p_nominal = {1.0, 1.0};
    d.n_meas = 10;
    d.convention = GridConvention::ExcludeStart;
    d.meshes = {230, 2300};
  } else if (name == "lv_f" || name == "lv_p") {
    d.t0 = 0; d.tf = 1;
    d.states = {"r", "w"};
    d.params = {"k1", "k2", "k3"};
    d.odes = {
        "k1*r-k2*r*w",
        "k2*r*w-k3*w",
    };
    d.observations = (name == "lv_f") ? std::vector<std::string>{"r", "w"}
                                      : std::vector<std::string>{"r"};
    d.x0 = {estimated_ic(90, 110, 100.0), estimated_ic(90, 110, 95.0)};
    d.p_lo.assign(3, 0.0001);
    d.p_hi.assign(3, 1.0);
    d.p_nominal = {0.4, 0.005, 0.35};
    d.n_meas = 20;
    d.convention = GridConvention::ExcludeStart;
    d.meshes = {100, 1000};
  } else if (name == "daisy_mamil3_f" || name == "daisy_mamil3_p") {
    d.t0 = 0; d.tf = 1;
    d.states = {"x1", "x2", "x3"};
    d.params = {"a21", "a31", "a01", "a12", "a13"};
    d.odes = {
        "-(a21+a31+a01)*x1+a12*x2+a13*x3",
        "a21*x1-a12*x2",
        "a31*x1-a13*x3",
    };
    d.observations = (name == "daisy_mamil3_f")
                         ? std::vector<std::string>{"x1", "x2", "x3"}
                         : std::vector<std::string>{"x1", "x2"};
    d.x0 = {estimated_ic(-1, 2, 1.0), estimated_ic(-1, 2, 0.5), estimated_ic(-1, 2, 0.25)};
    d.p_lo.assign(5, -1.0);
    d.p_hi.assign(5, 2.0);
    d.p_nominal = {0.62, 0.45, 0.5, 0.3, 0.35};
    d.n_meas = 20;
    d.convention = GridConvention::ExcludeStart;
    d.meshes = {100, 1000};
  } else if (name == "hiv_f" || name == "hiv_p") {
    d.t0 = 0; d.tf = 10;
    d.states = {"x", "y", "v", "w", "z"};
    d.params = {"lambda", "d", "beta", "a", "k", "u", "c", "q", "b", "h"};
    d.odes = {
        "lambda-d*x-beta*x*v",
        "beta*x*v-a*y",
        "k*y-u*v",
        "c*x*y*w-c*q*y*w-b*w",
        "c*q*y*w-h*z",
    };
    d.observations = (name == "hiv_f")
                         ? std::vector<std::string>{"x", "y", "v", "w", "z"}
                         : std::vector<std::string>{"x", "y+v", "w", "z"};
    d.x0 = {estimated_ic(0.001, 2, 1.0), estimated_ic(0.001, 2, 0.02),
            estimated_ic(0.001, 2, 0.5), estimated_ic(0.001, 2, 1.0),
            estimated_ic(0.001, 2, 0.02)};
    d.p_lo.assign(10, 0.0001);
    d.p_hi.assign(10, 1.0);
    d.p_nominal = {0.9, 0.1, 0.5, 0.2, 0.9, 0.5, 0.1, 0.5, 0.01, 0.1};
    d.n_meas = 20;
    d.convention = GridConvention::ExcludeStart;
    d.meshes = {100, 1000};
  } else if (name == "crauste_f" || name == "crauste_p") {
    d.t0 = 0; d.tf = 1;
    d.states = {"N", "E", "S", "M", "P"};
    d.params = {"muN", "deltaNE", "muEE", "deltaEL", "rhoE", "deltaLM", "muLL",
                "muLE", "muM", "rhoP", "muP", "muPE", "muPL"};
    d.odes = {
        "muN*N-deltaNE*N*P",
        "deltaNE*N*P-muEE*E^2-deltaEL*E+rhoE*E*P",
        "deltaEL*S-S*deltaLM-muLL*S^2-muLE*E*S",
        "deltaLM*S-muM*M",
        "rhoP*P^2-muP*P-muPE*E*P-muPL*S*P",
    };
    d.observations = (name == "crauste_f")
                         ? std::vector<std::string>{"N", "E", "S", "M", "P"}
                         : std::vector<std::string>{"N", "E", "S+M", "P"};
    d.x0 = {estimated_ic(-1.1, 1.1, 1.0), estimated_ic(-1.1, 1.1, 0.4),
            estimated_ic(-1.1, 1.1, 0.6), estimated_ic(-1.1, 1.1, 0.3),
            estimated_ic(-1.1, 1.1, 0.8)};
    d.p_lo.assign(13, -2.0);
    d.p_hi.assign(13, 2.0);
    d.p_nominal = {0.75, 0.65, 0.55, 0.4, 0.5, 0.35, 0.45, 0.3, 0.25, 0.6, 0.2, 0.15, 0.1};
    d.n_meas = 20;
    d.convention = GridConvention::ExcludeStart;
    d.meshes = {100, 1000};
  } else {
    throw std::invalid_argument("unknown problem name: " + name);
  }
  return detail::finalize(d);
}

inline const std::vector<std::string>& pool_names() {
  static const std::vector<std::string> names = {
      "alpha_pinene", "BBG",    "FHN",           "harmonic",
      "lv_f",         "lv_p",   "daisy_mamil3_f", "daisy_mamil3_p",
      "hiv_f",        "hiv_p",  "crauste_f",     "crauste_p"};
  return names;
}

// ---------------------------------------------------------------------------
// Problem-spec documents (JSON)

inline OdeProblem load_problem(const nlohmann::json& doc) {
  using nlohmann::json;
  detail::ProblemDraft d;
  try {
    d.name = doc.at("name").get<std::string>();
    d.t0 = doc.at("horizon").at(0).get<double>();
    d.tf = doc.at("horizon").at(1).get<double>();
    for (const json& s : doc.at("states")) {
      d.states.push_back(s.at("name").get<std::string>());
      InitialState ic;
      if (s.contains("x0")) {
        ic = detail::fixed_ic(s.at("x0").get<double>());
      } else {
        ic = detail::estimated_ic(s.at("x0_lo").get<double>(), s.at("x0_hi").get<double>(),
                                  s.at("x0_nominal").get<double>());
      }
      d.x0.push_back(ic);
    }
    for (const json& p : doc.at("parameters")) {
      d.params.push_back(p.at("name").get<std::string>());
      d.p_lo.push_back(p.at("lo").get<double>());
      d.p_hi.push_back(p.at("hi").get<double>());
      d.p_nominal.push_back(p.at("nominal").get<double>());
    }
    for (const auto& name : d.states)
      d.odes.push_back(doc.at("odes").at(name).get<std::string>());
    for (const json& o : doc.at("observations")) d.observations.push_back(o.get<std::string>());
    const json& meas = doc.at("measurements");
    if (meas.contains("times")) {
      d.convention = GridConvention::Explicit;
      for (const json& t : meas.at("times")) d.explicit_taus.push_back(t.get<double>());
    } else {
      d.n_meas = meas.at("count").get<int>();
      std::string conv = meas.at("convention").get<std::string>();
      if (conv == "exclude_start") d.convention = GridConvention::ExcludeStart;
      else if (conv == "include_endpoints") d.convention = GridConvention::IncludeEndpoints;
      else throw std::invalid_argument("unknown measurement convention: " + conv);
    }
    for (const json& m : doc.at("meshes")) d.meshes.push_back(m.get<int>());
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("problem-spec schema violation: ") + e.what());
  }
  return detail::finalize(d);
}

inline OdeProblem load_problem_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open problem-spec file: " + path);
  nlohmann::json doc = nlohmann::json::parse(in);
  return load_problem(doc);
}

/// Serialize a problem back to the problem-spec document format.
inline nlohmann::json problem_to_json(const OdeProblem& p) {
  nlohmann::json doc;
  doc["name"] = p.name;
  doc["horizon"] = {p.t0, p.tf};
  doc["states"] = nlohmann::json::array();
  for (int i = 0; i < p.n_s; ++i) {
    nlohmann::json s;
    s["name"] = p.state_names[static_cast<std::size_t>(i)];
    const InitialState& ic = p.x0[static_cast<std::size_t>(i)];
    if (ic.estimated) {
      s["x0_lo"] = ic.lo;
      s["x0_hi"] = ic.hi;
      s["x0_nominal"] = ic.nominal;
    } else {
      s["x0"] = ic.fixed_value;
    }
    doc["states"].push_back(s);
  }
  doc["parameters"] = nlohmann::json::array();
  for (int j = 0; j < p.n_p; ++j) {
    doc["parameters"].push_back({{"name", p.param_names[static_cast<std::size_t>(j)]},
                                 {"lo", p.p_lo[static_cast<std::size_t>(j)]},
                                 {"hi", p.p_hi[static_cast<std::size_t>(j)]},
                                 {"nominal", p.p_nominal[static_cast<std::size_t>(j)]}});
  }
  for (int i = 0; i < p.n_s; ++i)
    doc["odes"][p.state_names[static_cast<std::size_t>(i)]] =
        render(p.dag, p.rhs[static_cast<std::size_t>(i)], p.symbols);
  doc["observations"] = nlohmann::json::array();
  for (auto o : p.obs) doc["observations"].push_back(render(p.dag, o, p.symbols));
  doc["measurements"]["times"] = p.taus;
  doc["meshes"] = p.meshes;
  return doc;
}

}  // namespace odefit
