#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "odefit/transcribe.hpp"

using namespace odefit;

namespace {

OdeProblem scalar_toy(double t_end, const std::vector<double>& taus,
                      const std::vector<int>& meshes, const std::string& rhs = "p1*x1") {
  nlohmann::json doc = {
      {"name", "toy"},
      {"horizon", {0.0, t_end}},
      {"states", {{{"name", "x1"}, {"x0", 1.0}}}},
      {"parameters", {{{"name", "p1"}, {"lo", -2.0}, {"hi", 2.0}, {"nominal", 0.5}}}},
      {"odes", {{"x1", rhs}}},
      {"observations", {"x1"}},
      {"measurements", {{"times", taus}}},
      {"meshes", meshes}};
  return load_problem(doc);
}

MeasurementSet toy_data(OdeProblem& pr, SchemeTag scheme, int M) {
  return scheme_consistent_measurements(pr, pr.p_nominal, pr.nominal_x0(), scheme, M);
}

}  // namespace

TEST_CASE("euler M=1 produces the single substituted row") {
  OdeProblem pr = scalar_toy(0.1, {0.1}, {1});
  DynamicSystem dyn = discretize(pr, SchemeTag::Euler, 1);
  REQUIRE(dyn.rows.size() == 1);
  // row is x1_next - x1 - 0.1*p*x1 at flat indices; check numerically
  std::vector<double> xi(static_cast<std::size_t>(dyn.layout.total()), 0.0);
  xi[static_cast<std::size_t>(dyn.layout.x(0, 0))] = 2.0;
  xi[static_cast<std::size_t>(dyn.layout.x(1, 0))] = 3.0;
  xi[static_cast<std::size_t>(dyn.layout.p(0))] = 0.5;
  Point pt{0.0, {}, {}, xi};
  CHECK(dyn.dag->eval(dyn.rows[0], pt) == Catch::Approx(3.0 - 2.0 - 0.1 * 0.5 * 2.0).margin(1e-15));
}

TEST_CASE("row counts match the closed-form formulas on FHN") {
  OdeProblem pr = build_problem("FHN");
  const int M = 200;
  CHECK(discretize(pr, SchemeTag::Euler, M).rows.size() == 400);
  CHECK(discretize(pr, SchemeTag::Trapezoid, M).rows.size() == 400);
  CHECK(discretize(pr, SchemeTag::AdamsMoulton3, M).rows.size() == 396 + 4);
  CHECK(discretize(pr, SchemeTag::Simpson, M).rows.size() == 398 + 2);
  CHECK(discretize(pr, SchemeTag::RK4, M).rows.size() == 400 + 1600);
}

TEST_CASE("zero dynamics reduce rows to state differences") {
  OdeProblem pr = scalar_toy(1.0, {1.0}, {4}, "x1-x1");
  for (SchemeTag s : {SchemeTag::Euler, SchemeTag::Trapezoid, SchemeTag::Simpson, SchemeTag::RK4}) {
    DynamicSystem dyn = discretize(pr, s, 4);
    std::vector<double> xi(static_cast<std::size_t>(dyn.layout.total()), 0.0);
    for (int m = 0; m <= 4; ++m) xi[static_cast<std::size_t>(dyn.layout.x(m, 0))] = 5.0;
    Point pt{0.0, {}, {}, xi};
    for (ExprDag::Id row : dyn.rows) CHECK(dyn.dag->eval(row, pt) == 0.0);
  }
}

TEST_CASE("variable layout counts") {
  OdeProblem pr = build_problem("harmonic");
  MeasurementSet data = toy_data(pr, SchemeTag::Trapezoid, 230);
  NlpInstance nlp = formulate(pr, SchemeTag::Trapezoid, 230, Formulation::baseline(), data);
  CHECK(nlp.layout.total() == 231 * (2 + 2) + 2);  // 926
  CHECK(nlp.rows.size() == 230 * 2 + 231 * 2);

  MeasurementSet rk = toy_data(pr, SchemeTag::RK4, 230);
  NlpInstance nlp_rk = formulate(pr, SchemeTag::RK4, 230, Formulation::baseline(), rk);
  CHECK(nlp_rk.layout.total() == 231 * 4 + 2 + 4 * 230 * 2);

  MeasurementSet tz = toy_data(pr, SchemeTag::Trapezoid, 230);
  NlpInstance soft = formulate(pr, SchemeTag::Trapezoid, 230, Formulation::soft_cons(1e3), tz);
  CHECK(soft.layout.n_slack == 460);
  CHECK(soft.layout.total() == 926 + 460);
  // two inequality rows per dynamic row, observation equalities unchanged
  CHECK(soft.rows.size() == 2 * 460 + 231 * 2);
}

TEST_CASE("formulation bounds and relaxations") {
  OdeProblem pr = scalar_toy(1.0, {0.5, 1.0}, {10});
  MeasurementSet data = toy_data(pr, SchemeTag::Euler, 10);

  NlpInstance base = formulate(pr, SchemeTag::Euler, 10, Formulation::baseline(), data);
  for (std::size_t j = 0; j < base.dynamic_rows.size(); ++j) {
    CHECK(base.rows[j].lo == 0.0);
    CHECK(base.rows[j].hi == 0.0);
  }

  NlpInstance et = formulate(pr, SchemeTag::Euler, 10, Formulation::extra_tol(1e-4), data);
  for (std::size_t j = 0; j < et.dynamic_rows.size(); ++j) {
    CHECK(et.rows[j].lo == -1e-4);
    CHECK(et.rows[j].hi == 1e-4);
  }
  // observation rows stay strict equalities
  for (std::size_t j = et.dynamic_rows.size(); j < et.rows.size(); ++j) {
    CHECK(et.rows[j].lo == 0.0);
    CHECK(et.rows[j].hi == 0.0);
  }

  CHECK_THROWS_AS(formulate(pr, SchemeTag::Euler, 10, Formulation::extra_tol(0.0), data),
                  std::invalid_argument);
  CHECK_THROWS_AS(formulate(pr, SchemeTag::Euler, 10, Formulation::extra_tol(-1.0), data),
                  std::invalid_argument);

  // parameter bounds land on the p block
  CHECK(base.lb[static_cast<std::size_t>(base.layout.p(0))] == -2.0);
  CHECK(base.ub[static_cast<std::size_t>(base.layout.p(0))] == 2.0);
  // fixed IC pins x_0
  CHECK(base.lb[static_cast<std::size_t>(base.layout.x(0, 0))] == 1.0);
  CHECK(base.ub[static_cast<std::size_t>(base.layout.x(0, 0))] == 1.0);

  // estimated ICs widen x_0 bounds instead
  OdeProblem harmonic = build_problem("harmonic");
  MeasurementSet hd = toy_data(harmonic, SchemeTag::Euler, 230);
  NlpInstance hb = formulate(harmonic, SchemeTag::Euler, 230, Formulation::baseline(), hd);
  CHECK(hb.lb[static_cast<std::size_t>(hb.layout.x(0, 0))] == 0.0);
  CHECK(hb.ub[static_cast<std::size_t>(hb.layout.x(0, 0))] == 1.5);
}

TEST_CASE("eval_instance on the scheme-consistent point") {
  std::mt19937_64 rng(7);
  for (const std::string& name : {"harmonic", "lv_f", "BBG"}) {
    OdeProblem pr = build_problem(name);
    int M = pr.meshes.front();
    for (SchemeTag s : {SchemeTag::Euler, SchemeTag::Trapezoid, SchemeTag::RK4}) {
      MeasurementSet data = toy_data(pr, s, M);
      NlpInstance nlp = formulate(pr, s, M, Formulation::baseline(), data);
      Trajectory tr = step_scheme(pr, pr.p_nominal, pr.nominal_x0(), s, M);
      std::vector<double> xi = assemble_point(nlp, pr, tr, pr.p_nominal);
      InstanceEval ev = eval_instance(nlp, xi);
      CHECK(ev.objective <= 1e-16);
      CHECK(max_violation(nlp, ev.residuals) <= 1e-10);
    }
  }
}

TEST_CASE("objective responds quadratically to output perturbations") {
  OdeProblem pr = scalar_toy(1.0, {0.5, 1.0}, {10});
  MeasurementSet data = toy_data(pr, SchemeTag::Euler, 10);
  NlpInstance nlp = formulate(pr, SchemeTag::Euler, 10, Formulation::baseline(), data);
  Trajectory tr = step_scheme(pr, pr.p_nominal, pr.nominal_x0(), SchemeTag::Euler, 10);
  std::vector<double> xi = assemble_point(nlp, pr, tr, pr.p_nominal);
  double base = eval_instance(nlp, xi).objective;
  CHECK(base <= 1e-18);
  const double delta = 0.37;
  xi[static_cast<std::size_t>(nlp.layout.y(5, 0))] += delta;  // tau=0.5 is node 5
  CHECK(eval_instance(nlp, xi).objective - base == Catch::Approx(delta * delta).epsilon(1e-12));
}

TEST_CASE("softcons with zero slacks equals the baseline objective") {
  OdeProblem pr = scalar_toy(1.0, {0.5, 1.0}, {10});
  MeasurementSet data = toy_data(pr, SchemeTag::Euler, 10);
  NlpInstance base = formulate(pr, SchemeTag::Euler, 10, Formulation::baseline(), data);
  NlpInstance soft = formulate(pr, SchemeTag::Euler, 10, Formulation::soft_cons(1e3), data);
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> xb(static_cast<std::size_t>(base.layout.total()));
    for (double& v : xb) v = d(rng);
    std::vector<double> xs(static_cast<std::size_t>(soft.layout.total()), 0.0);
    std::copy(xb.begin(), xb.end(), xs.begin());
    double ob = eval_instance(base, xb).objective;
    double os = eval_instance(soft, xs).objective;
    CHECK(std::abs(ob - os) <= 1e-15 * std::max(1.0, std::abs(ob)));
  }
}

TEST_CASE("jacobian matches central finite differences") {
  OdeProblem pr = build_problem("lv_f");
  int M = 20;
  nlohmann::json doc = problem_to_json(pr);
  doc["meshes"] = {20};
  doc["measurements"] = {{"count", 20}, {"convention", "exclude_start"}};
  pr = load_problem(doc);
  MeasurementSet data = toy_data(pr, SchemeTag::Trapezoid, M);
  NlpInstance nlp = formulate(pr, SchemeTag::Trapezoid, M, Formulation::baseline(), data);
  Jacobian jac(nlp);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  std::vector<double> xi(static_cast<std::size_t>(nlp.layout.total()));
  std::vector<double> vals;
  for (int rep = 0; rep < 5; ++rep) {
    for (double& v : xi) v = d(rng);
    for (std::size_t j = 0; j < nlp.rows.size(); j += 7) {
      jac.row_values(j, xi, vals);
      const std::vector<int>& sup = jac.row_support(j);
      for (std::size_t a = 0; a < sup.size(); ++a) {
        const double h = 1e-6;
        std::vector<double> hi = xi, lo = xi;
        hi[static_cast<std::size_t>(sup[a])] += h;
        lo[static_cast<std::size_t>(sup[a])] -= h;
        Point ph{0.0, {}, {}, hi}, pl{0.0, {}, {}, lo};
        double fd = (nlp.dag->eval(nlp.rows[j].expr, ph) - nlp.dag->eval(nlp.rows[j].expr, pl)) /
                    (2 * h);
        CHECK(std::abs(vals[a] - fd) / std::max(1.0, std::abs(fd)) <= 1e-6);
      }
    }
  }
}

TEST_CASE("rk4 stage rows touch only their declared blocks") {
  OdeProblem pr = scalar_toy(1.0, {0.5, 1.0}, {10});
  DynamicSystem dyn = discretize(pr, SchemeTag::RK4, 10);
  // rows come in groups of 5 per step: k1..k4 stage rows then the update
  const VariableLayout& L = dyn.layout;
  std::vector<double> xi(static_cast<std::size_t>(L.total()), 0.0);
  // k1 row for m=0: support is {x_0, p, k1_0}
  ExprDag::Id k1row = dyn.rows[0];
  std::vector<int> sup = detail::flat_support(*dyn.dag, k1row);
  std::vector<int> expect = {L.x(0, 0), L.p(0), L.stage(0, 0, 0)};
  std::sort(expect.begin(), expect.end());
  CHECK(sup == expect);
}

TEST_CASE("mesh preconditions per scheme") {
  OdeProblem pr = scalar_toy(1.0, {1.0}, {1});
  CHECK_NOTHROW(discretize(pr, SchemeTag::Euler, 1));
  CHECK_THROWS_AS(discretize(pr, SchemeTag::AdamsMoulton3, 3), std::invalid_argument);
  CHECK_THROWS_AS(discretize(pr, SchemeTag::Simpson, 1), std::invalid_argument);
}
