#pragma once

// Compiles (problem, scheme, mesh, formulation) into a concrete NLP
// instance: variable layout, bounds, least-squares objective and the
// algebraic constraint system H in residual form, with sparsity and exact
// Jacobians via the expression DAG.

#include <limits>
#include <memory>
#include <unordered_map>
#include <vector>

#include "odefit/integrate.hpp"
#include "odefit/pool.hpp"

namespace odefit {

struct Formulation {
  enum class Kind { Baseline, ExtraTol, SoftCons };
  Kind kind = Kind::Baseline;
  double param = 0.0;  // epsilon for ExtraTol, P for SoftCons

  static Formulation baseline() { return {Kind::Baseline, 0.0}; }
  static Formulation extra_tol(double eps) { return {Kind::ExtraTol, eps}; }
  static Formulation soft_cons(double penalty) { return {Kind::SoftCons, penalty}; }

  std::string label() const {
    switch (kind) {
      case Kind::Baseline: return "baseline";
      case Kind::ExtraTol: return "extratol";
      case Kind::SoftCons: return "softcons";
    }
    return "?";
  }
};

/// Flat layout of xi = (x0, y0, x1, y1, ..., xM, yM, p [, stages] [, slacks]).
struct VariableLayout {
  int M = 0, n_s = 0, n_y = 0, n_p = 0;
  bool has_stages = false;
  int n_slack = 0;

  int x(int m, int i) const { return m * (n_s + n_y) + i; }
  int y(int m, int k) const { return m * (n_s + n_y) + n_s + k; }
  int p(int j) const { return (M + 1) * (n_s + n_y) + j; }
  int stage_base() const { return (M + 1) * (n_s + n_y) + n_p; }
  int stage(int m, int j, int i) const { return stage_base() + (m * 4 + j) * n_s + i; }
  int slack_base() const { return stage_base() + (has_stages ? 4 * M * n_s : 0); }
  int slack(int j) const { return slack_base() + j; }
  int total() const { return slack_base() + n_slack; }
};

struct ConstraintRow {
  ExprDag::Id expr;
  double lo, hi;
  bool dynamic;              // true for rows derived from H
  std::vector<int> support;  // flat variable indices, sorted
};

/// Squared objective term (y_{m(i),k} - ybar_{i,k}).
struct ObjResidual {
  int var;
  double target;
};

struct NlpInstance {
  std::string problem_name;
  SchemeTag scheme = SchemeTag::Euler;
  int M = 0;
  Formulation formulation;
  VariableLayout layout;
  std::shared_ptr<ExprDag> dag;
  std::vector<double> lb, ub;
  ExprDag::Id objective = -1;
  std::vector<ObjResidual> residuals;
  double slack_penalty = 0.0;          // P (SoftCons), 0 otherwise
  std::vector<ConstraintRow> rows;     // dynamic rows first, then observations
  std::vector<ExprDag::Id> dynamic_rows;  // raw H rows (unrelaxed residuals)
};

namespace detail {

/// Copies the subgraph under `src_id` into `dst`, replacing time/state/param
/// references through the supplied expression ids.
struct Substitution {
  ExprDag::Id time_expr;
  std::vector<ExprDag::Id> states;
  std::vector<ExprDag::Id> params;
};

inline ExprDag::Id translate(const ExprDag& src, ExprDag::Id src_id, ExprDag& dst,
                             const Substitution& sub,
                             std::unordered_map<int, int>& memo) {
  if (auto it = memo.find(src_id); it != memo.end()) return it->second;
  const Node& n = src.node(src_id);
  ExprDag::Id out;
  switch (n.kind) {
    case NodeKind::Constant: out = dst.constant(n.value); break;
    case NodeKind::Time: out = sub.time_expr; break;
    case NodeKind::StateRef: out = sub.states[static_cast<std::size_t>(n.index)]; break;
    case NodeKind::ParamRef: out = sub.params[static_cast<std::size_t>(n.index)]; break;
    case NodeKind::VarRef: out = dst.var(n.index); break;
    case NodeKind::Neg: out = dst.neg(translate(src, n.a, dst, sub, memo)); break;
    case NodeKind::Add:
      out = dst.add(translate(src, n.a, dst, sub, memo), translate(src, n.b, dst, sub, memo));
      break;
    case NodeKind::Sub:
      out = dst.sub(translate(src, n.a, dst, sub, memo), translate(src, n.b, dst, sub, memo));
      break;
    case NodeKind::Mul:
      out = dst.mul(translate(src, n.a, dst, sub, memo), translate(src, n.b, dst, sub, memo));
      break;
    case NodeKind::Div:
      out = dst.div(translate(src, n.a, dst, sub, memo), translate(src, n.b, dst, sub, memo));
      break;
    case NodeKind::Pow:
      out = dst.pow(translate(src, n.a, dst, sub, memo), n.index);
      break;
    default: throw std::logic_error("corrupt node kind");
  }
  memo.emplace(src_id, out);
  return out;
}

inline std::vector<int> flat_support(const ExprDag& dag, ExprDag::Id id) {
  std::vector<int> out;
  for (const VarKey& k : dag.support(id)) out.push_back(k.index);  // all VarRef here
  return out;
}

/// Balanced binary sum, keeps expression depth logarithmic.
inline ExprDag::Id balanced_sum(ExprDag& dag, std::vector<ExprDag::Id> terms) {
  if (terms.empty()) return dag.constant(0.0);
  while (terms.size() > 1) {
    std::vector<ExprDag::Id> next;
    for (std::size_t i = 0; i + 1 < terms.size(); i += 2)
      next.push_back(dag.add(terms[i], terms[i + 1]));
    if (terms.size() % 2) next.push_back(terms.back());
    terms.swap(next);
  }
  return terms[0];
}

}  // namespace detail

/// Dynamic constraint rows H for one (problem, scheme, mesh) triple, in the
/// shared instance DAG. Only states, parameters and (for RK4) stages appear.
struct DynamicSystem {
  VariableLayout layout;
  std::shared_ptr<ExprDag> dag;
  std::vector<ExprDag::Id> rows;
};

inline DynamicSystem discretize(const OdeProblem& pr, SchemeTag scheme, int M) {
  if (M < 1) throw std::invalid_argument("mesh too small: M must be >= 1");
  if (scheme == SchemeTag::AdamsMoulton3 && M < 4)
    throw std::invalid_argument("mesh too small for Adams-Moulton: M must be >= 4");
  if (scheme == SchemeTag::Simpson && M < 2)
    throw std::invalid_argument("mesh too small for Simpson: M must be >= 2");
  DynamicSystem out;
  out.layout = {M, pr.n_s, pr.n_y, pr.n_p, scheme == SchemeTag::RK4, 0};
  out.dag = std::make_shared<ExprDag>();
  ExprDag& dag = *out.dag;
  const VariableLayout& L = out.layout;
  const double h = (pr.tf - pr.t0) / M;
  const int n = pr.n_s;

  auto state_vars = [&](int m) {
    std::vector<ExprDag::Id> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = dag.var(L.x(m, i));
    return v;
  };
  auto param_vars = [&]() {
    std::vector<ExprDag::Id> v(static_cast<std::size_t>(pr.n_p));
    for (int j = 0; j < pr.n_p; ++j) v[static_cast<std::size_t>(j)] = dag.var(L.p(j));
    return v;
  };
  const std::vector<ExprDag::Id> params = param_vars();

  // f_i(t_m + dt, x-expr vector, p) translated into the instance DAG.
  auto rhs_at = [&](int i, double t, const std::vector<ExprDag::Id>& xs) {
    detail::Substitution sub{dag.constant(t), xs, params};
    std::unordered_map<int, int> memo;
    return detail::translate(pr.dag, pr.rhs[static_cast<std::size_t>(i)], dag, sub, memo);
  };
  double t0 = pr.t0;
  auto t_at = [&](int m) { return t0 + m * h; };
  ExprDag::Id half_h = dag.constant(h / 2);

  auto trapezoid_row = [&](int m, int i) {
    // x_{m+1} - x_m - h/2 (f(t_m, x_m) + f(t_{m+1}, x_{m+1}))
    auto xm = state_vars(m), xn = state_vars(m + 1);
    ExprDag::Id fs = dag.add(rhs_at(i, t_at(m), xm), rhs_at(i, t_at(m + 1), xn));
    return dag.sub(dag.sub(xn[static_cast<std::size_t>(i)], xm[static_cast<std::size_t>(i)]),
                   dag.mul(half_h, fs));
  };

  switch (scheme) {
    case SchemeTag::Euler:
      for (int m = 0; m < M; ++m) {
        auto xm = state_vars(m), xn = state_vars(m + 1);
        for (int i = 0; i < n; ++i)
          out.rows.push_back(dag.sub(
              dag.sub(xn[static_cast<std::size_t>(i)], xm[static_cast<std::size_t>(i)]),
              dag.mul(dag.constant(h), rhs_at(i, t_at(m), xm))));
      }
      break;
    case SchemeTag::Trapezoid:
      for (int m = 0; m < M; ++m)
        for (int i = 0; i < n; ++i) out.rows.push_back(trapezoid_row(m, i));
      break;
    case SchemeTag::AdamsMoulton3: {
      for (int m = 0; m < 2; ++m)  // Trapezoid bootstrap defines x_1, x_2
        for (int i = 0; i < n; ++i) out.rows.push_back(trapezoid_row(m, i));
      ExprDag::Id h24 = dag.constant(h / 24);
      for (int m = 0; m <= M - 3; ++m) {
        auto x0v = state_vars(m), x1v = state_vars(m + 1), x2v = state_vars(m + 2),
             x3v = state_vars(m + 3);
        for (int i = 0; i < n; ++i) {
          // x_{m+3} - x_{m+2} - h/24 (9 f_{m+3} + 19 f_{m+2} - 5 f_{m+1} + f_m)
          ExprDag::Id combo = dag.add(
              dag.sub(dag.mul(dag.constant(9.0), rhs_at(i, t_at(m + 3), x3v)),
                      dag.mul(dag.constant(5.0), rhs_at(i, t_at(m + 1), x1v))),
              dag.add(dag.mul(dag.constant(19.0), rhs_at(i, t_at(m + 2), x2v)),
                      rhs_at(i, t_at(m), x0v)));
          out.rows.push_back(dag.sub(dag.sub(x3v[static_cast<std::size_t>(i)],
                                             x2v[static_cast<std::size_t>(i)]),
                                     dag.mul(h24, combo)));
        }
      }
      break;
    }
    case SchemeTag::Simpson: {
      for (int i = 0; i < n; ++i) out.rows.push_back(trapezoid_row(0, i));  // bootstrap x_1
      ExprDag::Id h3 = dag.constant(h / 3);
      for (int m = 1; m < M; ++m) {
        auto xp = state_vars(m - 1), xm = state_vars(m), xn = state_vars(m + 1);
        for (int i = 0; i < n; ++i) {
          // x_{m+1} - x_{m-1} - h/3 (f_{m+1} + 4 f_m + f_{m-1})
          ExprDag::Id combo =
              dag.add(rhs_at(i, t_at(m + 1), xn),
                      dag.add(dag.mul(dag.constant(4.0), rhs_at(i, t_at(m), xm)),
                              rhs_at(i, t_at(m - 1), xp)));
          out.rows.push_back(dag.sub(dag.sub(xn[static_cast<std::size_t>(i)],
                                             xp[static_cast<std::size_t>(i)]),
                                     dag.mul(h3, combo)));
        }
      }
      break;
    }
    case SchemeTag::RK4: {
      ExprDag::Id h6 = dag.constant(h / 6), hc = dag.constant(h);
      for (int m = 0; m < M; ++m) {
        auto xm = state_vars(m), xn = state_vars(m + 1);
        std::vector<ExprDag::Id> k1(static_cast<std::size_t>(n)), k2(k1), k3(k1), k4(k1);
        for (int i = 0; i < n; ++i) {
          k1[static_cast<std::size_t>(i)] = dag.var(L.stage(m, 0, i));
          k2[static_cast<std::size_t>(i)] = dag.var(L.stage(m, 1, i));
          k3[static_cast<std::size_t>(i)] = dag.var(L.stage(m, 2, i));
          k4[static_cast<std::size_t>(i)] = dag.var(L.stage(m, 3, i));
        }
        auto shifted = [&](const std::vector<ExprDag::Id>& k, ExprDag::Id step) {
          std::vector<ExprDag::Id> v(static_cast<std::size_t>(n));
          for (int i = 0; i < n; ++i)
            v[static_cast<std::size_t>(i)] =
                dag.add(xm[static_cast<std::size_t>(i)],
                        dag.mul(step, k[static_cast<std::size_t>(i)]));
          return v;
        };
        auto x_k1 = shifted(k1, half_h), x_k2 = shifted(k2, half_h), x_k3 = shifted(k3, hc);
        for (int i = 0; i < n; ++i)
          out.rows.push_back(dag.sub(k1[static_cast<std::size_t>(i)], rhs_at(i, t_at(m), xm)));
        for (int i = 0; i < n; ++i)
          out.rows.push_back(
              dag.sub(k2[static_cast<std::size_t>(i)], rhs_at(i, t_at(m) + h / 2, x_k1)));
        for (int i = 0; i < n; ++i)
          out.rows.push_back(
              dag.sub(k3[static_cast<std::size_t>(i)], rhs_at(i, t_at(m) + h / 2, x_k2)));
        for (int i = 0; i < n; ++i)
          out.rows.push_back(dag.sub(k4[static_cast<std::size_t>(i)], rhs_at(i, t_at(m + 1), x_k3)));
        for (int i = 0; i < n; ++i) {
          // x_{m+1} - x_m - h/6 (k1 + 2 k2 + 2 k3 + k4)
          ExprDag::Id combo = dag.add(
              dag.add(k1[static_cast<std::size_t>(i)], k4[static_cast<std::size_t>(i)]),
              dag.mul(dag.constant(2.0), dag.add(k2[static_cast<std::size_t>(i)],
                                                 k3[static_cast<std::size_t>(i)])));
          out.rows.push_back(dag.sub(dag.sub(xn[static_cast<std::size_t>(i)],
                                             xm[static_cast<std::size_t>(i)]),
                                     dag.mul(h6, combo)));
        }
      }
      break;
    }
  }
  return out;
}

inline NlpInstance formulate(const OdeProblem& pr, SchemeTag scheme, int M,
                             const Formulation& form, const MeasurementSet& data) {
  if (form.kind == Formulation::Kind::ExtraTol && !(form.param > 0))
    throw std::invalid_argument("ExtraTol requires epsilon > 0");
  if (form.kind == Formulation::Kind::SoftCons && form.param < 0)
    throw std::invalid_argument("SoftCons requires P >= 0");
  if (data.n_y != pr.n_y || data.taus != pr.taus)
    throw std::invalid_argument("measurement grid does not match the problem grid");

  DynamicSystem dyn = discretize(pr, scheme, M);
  NlpInstance nlp;
  nlp.problem_name = pr.name;
  nlp.scheme = scheme;
  nlp.M = M;
  nlp.formulation = form;
  nlp.layout = dyn.layout;
  nlp.dag = dyn.dag;
  nlp.dynamic_rows = dyn.rows;
  ExprDag& dag = *nlp.dag;
  VariableLayout& L = nlp.layout;
  const bool soft = form.kind == Formulation::Kind::SoftCons;
  if (soft) {
    L.n_slack = static_cast<int>(dyn.rows.size());
    nlp.slack_penalty = form.param;
  }
  const double inf = std::numeric_limits<double>::infinity();

  // Dynamic rows, relaxed per formulation.
  double lo = 0.0, hi = 0.0;
  if (form.kind == Formulation::Kind::ExtraTol) { lo = -form.param; hi = form.param; }
  for (std::size_t j = 0; j < dyn.rows.size(); ++j) {
    ExprDag::Id row = dyn.rows[j];
    if (soft) {
      ExprDag::Id s = dag.var(L.slack(static_cast<int>(j)));
      ExprDag::Id upper = dag.sub(row, s);  // H_j - s_j <= 0
      ExprDag::Id lower = dag.add(row, s);  // H_j + s_j >= 0
      nlp.rows.push_back({upper, -inf, 0.0, true, detail::flat_support(dag, upper)});
      nlp.rows.push_back({lower, 0.0, inf, true, detail::flat_support(dag, lower)});
    } else {
      nlp.rows.push_back({row, lo, hi, true, detail::flat_support(dag, row)});
    }
  }

  // Observation rows y_m = g(x_m, p): strict equalities in all formulations.
  {
    std::vector<ExprDag::Id> params(static_cast<std::size_t>(pr.n_p));
    for (int j = 0; j < pr.n_p; ++j) params[static_cast<std::size_t>(j)] = dag.var(L.p(j));
    for (int m = 0; m <= M; ++m) {
      std::vector<ExprDag::Id> xs(static_cast<std::size_t>(pr.n_s));
      for (int i = 0; i < pr.n_s; ++i) xs[static_cast<std::size_t>(i)] = dag.var(L.x(m, i));
      detail::Substitution sub{dag.constant(pr.t0 + m * (pr.tf - pr.t0) / M), xs, params};
      for (int k = 0; k < pr.n_y; ++k) {
        std::unordered_map<int, int> memo;
        ExprDag::Id g =
            detail::translate(pr.dag, pr.obs[static_cast<std::size_t>(k)], dag, sub, memo);
        ExprDag::Id row = dag.sub(dag.var(L.y(m, k)), g);
        nlp.rows.push_back({row, 0.0, 0.0, false, detail::flat_support(dag, row)});
      }
    }
  }

  // Bounds.
  nlp.lb.assign(static_cast<std::size_t>(L.total()), -inf);
  nlp.ub.assign(static_cast<std::size_t>(L.total()), inf);
  for (int i = 0; i < pr.n_s; ++i) {
    const InitialState& ic = pr.x0[static_cast<std::size_t>(i)];
    int v = L.x(0, i);
    nlp.lb[static_cast<std::size_t>(v)] = ic.estimated ? ic.lo : ic.fixed_value;
    nlp.ub[static_cast<std::size_t>(v)] = ic.estimated ? ic.hi : ic.fixed_value;
  }
  for (int j = 0; j < pr.n_p; ++j) {
    nlp.lb[static_cast<std::size_t>(L.p(j))] = pr.p_lo[static_cast<std::size_t>(j)];
    nlp.ub[static_cast<std::size_t>(L.p(j))] = pr.p_hi[static_cast<std::size_t>(j)];
  }
  for (int j = 0; j < L.n_slack; ++j) nlp.lb[static_cast<std::size_t>(L.slack(j))] = 0.0;

  // Objective: sum of squared measurement mismatches (+ P * sum of slacks).
  std::vector<int> midx = measurement_indices(pr, M);
  std::vector<ExprDag::Id> terms;
  for (int i = 0; i < data.n(); ++i)
    for (int k = 0; k < pr.n_y; ++k) {
      int v = L.y(midx[static_cast<std::size_t>(i)], k);
      nlp.residuals.push_back({v, data.at(i, k)});
      ExprDag::Id r = dag.sub(dag.var(v), dag.constant(data.at(i, k)));
      terms.push_back(dag.mul(r, r));
    }
  ExprDag::Id obj = detail::balanced_sum(dag, terms);
  if (soft && form.param > 0) {
    std::vector<ExprDag::Id> slacks;
    for (int j = 0; j < L.n_slack; ++j) slacks.push_back(dag.var(L.slack(j)));
    obj = dag.add(obj, dag.mul(dag.constant(form.param), detail::balanced_sum(dag, slacks)));
  }
  nlp.objective = obj;
  return nlp;
}

/// Objective value and raw constraint residual vector at xi.
struct InstanceEval {
  double objective;
  std::vector<double> residuals;
};

inline InstanceEval eval_instance(const NlpInstance& nlp, std::span<const double> xi) {
  if (static_cast<int>(xi.size()) != nlp.layout.total())
    throw std::invalid_argument("point length does not match the variable layout");
  Point pt{0.0, {}, {}, xi};
  InstanceEval out;
  out.objective = nlp.dag->eval(nlp.objective, pt);
  out.residuals.reserve(nlp.rows.size());
  for (const ConstraintRow& row : nlp.rows) out.residuals.push_back(nlp.dag->eval(row.expr, pt));
  return out;
}

/// Largest distance of any constraint value outside its [lo, hi] interval.
inline double max_violation(const NlpInstance& nlp, std::span<const double> residuals) {
  double v = 0.0;
  for (std::size_t j = 0; j < nlp.rows.size(); ++j) {
    double c = residuals[j];
    v = std::max(v, std::max(nlp.rows[j].lo - c, c - nlp.rows[j].hi));
  }
  return std::max(v, 0.0);
}

/// Sparsity pattern (per-row variable supports) and exact Jacobian values.
class Jacobian {
 public:
  explicit Jacobian(NlpInstance& nlp) : nlp_(nlp) {
    entries_.resize(nlp.rows.size());
    for (std::size_t j = 0; j < nlp.rows.size(); ++j)
      for (int v : nlp.rows[j].support)
        entries_[j].push_back({v, nlp.dag->diff(nlp.rows[j].expr, {NodeKind::VarRef, v})});
  }

  const std::vector<int>& row_support(std::size_t j) const { return nlp_.rows[j].support; }
  std::size_t n_rows() const { return entries_.size(); }

  /// Values aligned with row_support(j).
  void row_values(std::size_t j, std::span<const double> xi, std::vector<double>& out) const {
    Point pt{0.0, {}, {}, xi};
    out.clear();
    for (const auto& [v, d] : entries_[j]) out.push_back(nlp_.dag->eval(d, pt));
  }

 private:
  const NlpInstance& nlp_;
  std::vector<std::vector<std::pair<int, ExprDag::Id>>> entries_;
};

/// Builds a full xi from a scheme-consistent trajectory: states from the
/// trajectory, outputs from g, given parameters, RK4 stages from the stage
/// formulas, slacks at zero.
inline std::vector<double> assemble_point(const NlpInstance& nlp, const OdeProblem& pr,
                                          const Trajectory& tr, std::span<const double> p) {
  const VariableLayout& L = nlp.layout;
  std::vector<double> xi(static_cast<std::size_t>(L.total()), 0.0);
  std::vector<double> yv(static_cast<std::size_t>(pr.n_y));
  for (int m = 0; m <= L.M; ++m) {
    for (int i = 0; i < pr.n_s; ++i) xi[static_cast<std::size_t>(L.x(m, i))] = tr.at(m, i);
    eval_obs(pr, tr.row(m), p, yv.data());
    for (int k = 0; k < pr.n_y; ++k) xi[static_cast<std::size_t>(L.y(m, k))] = yv[static_cast<std::size_t>(k)];
  }
  for (int j = 0; j < pr.n_p; ++j) xi[static_cast<std::size_t>(L.p(j))] = p[static_cast<std::size_t>(j)];
  if (L.has_stages) {
    const int n = pr.n_s;
    const double h = tr.h;
    std::vector<double> k(static_cast<std::size_t>(n)), tmp(static_cast<std::size_t>(n));
    for (int m = 0; m < L.M; ++m) {
      double t = tr.time(m);
      auto x = tr.row(m);
      detail::eval_rhs(pr, t, x, p, k.data());
      for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(L.stage(m, 0, i))] = k[static_cast<std::size_t>(i)];
      for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + h / 2 * k[static_cast<std::size_t>(i)];
      detail::eval_rhs(pr, t + h / 2, tmp, p, k.data());
      for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(L.stage(m, 1, i))] = k[static_cast<std::size_t>(i)];
      for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + h / 2 * k[static_cast<std::size_t>(i)];
      detail::eval_rhs(pr, t + h / 2, tmp, p, k.data());
      for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(L.stage(m, 2, i))] = k[static_cast<std::size_t>(i)];
      for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + h * k[static_cast<std::size_t>(i)];
      detail::eval_rhs(pr, t + h, tmp, p, k.data());
      for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(L.stage(m, 3, i))] = k[static_cast<std::size_t>(i)];
    }
  }
  return xi;
}

}  // namespace odefit
