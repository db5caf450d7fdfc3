#pragma once

// Built-in bound-constrained local solver for NlpInstances: an augmented
// Lagrangian outer loop over the constraint system with regularized
// Gauss-Newton inner steps and projection onto variable bounds, plus
// deterministic multistart and an AMPL exporter for external solvers.

#include <chrono>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "odefit/transcribe.hpp"

namespace odefit {

struct SolverOptions {
  double time_limit_s = 600.0;
  int max_outer = 40;
  int max_inner = 60;  // per outer iteration
  double mu0 = 10.0, mu_growth = 10.0, mu_max = 1e10;
  double stat_tol = 1e-8;
  double cons_tol = 1e-8;
  std::uint64_t seed = 0;
  std::ostream* iteration_log = nullptr;  // line-oriented records when set
};

enum class SolveStatus { SolvedLocal, IterationLimit, TimeLimit, NumericalFailure };

inline std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::SolvedLocal: return "solved-local";
    case SolveStatus::IterationLimit: return "iteration-limit";
    case SolveStatus::TimeLimit: return "time-limit";
    case SolveStatus::NumericalFailure: return "numerical-failure";
  }
  return "?";
}

struct SolveResult {
  SolveStatus status = SolveStatus::NumericalFailure;
  std::vector<double> xi;
  std::vector<double> p_hat;  // rate parameters, then estimated ICs
  double objective = std::numeric_limits<double>::quiet_NaN();
  double max_violation = std::numeric_limits<double>::quiet_NaN();
  double wall_time_s = 0.0;
  int iterations = 0;
  int starts = 1;
  std::string message;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double interval_dist(double c, double lo, double hi) {
  return std::max(0.0, std::max(lo - c, c - hi));
}

/// Shared evaluation state for one instance, reused across starts.
class AlSolver {
 public:
  explicit AlSolver(NlpInstance& nlp) : nlp_(nlp), jac_(nlp) {
    n_ = nlp.layout.total();
    m_ = static_cast<int>(nlp.rows.size());
  }

  SolveResult solve(std::vector<double> xi, const SolverOptions& opts,
                    Clock::time_point deadline) {
    SolveResult res;
    auto t_start = Clock::now();
    project(xi);

    std::vector<double> lambda(static_cast<std::size_t>(m_), 0.0);
    double mu = opts.mu0;
    std::vector<double> c(static_cast<std::size_t>(m_)), d(static_cast<std::size_t>(m_));
    std::vector<double> grad(static_cast<std::size_t>(n_));
    std::vector<double> jrow;
    double omega = 1e-2;      // inner stationarity target, tightened outer-by-outer
    double pg_last = std::numeric_limits<double>::infinity();
    double eta = 1e-2;        // acceptable violation before increasing mu
    int total_iters = 0;
    bool timed_out = false, failed = false;
    std::string fail_msg;

    auto eval_rows = [&](const std::vector<double>& point, std::vector<double>& out) {
      Point pt{0.0, {}, {}, point};
      for (int j = 0; j < m_; ++j)
        out[static_cast<std::size_t>(j)] = nlp_.dag->eval(nlp_.rows[static_cast<std::size_t>(j)].expr, pt);
    };
    auto objective_of = [&](const std::vector<double>& point) {
      double f = 0.0;
      for (const ObjResidual& r : nlp_.residuals) {
        double e = point[static_cast<std::size_t>(r.var)] - r.target;
        f += e * e;
      }
      if (nlp_.slack_penalty > 0)
        for (int j = 0; j < nlp_.layout.n_slack; ++j)
          f += nlp_.slack_penalty * point[static_cast<std::size_t>(nlp_.layout.slack(j))];
      return f;
    };
    // d_j = (c_j + lambda_j/mu) - proj_[lo,hi](c_j + lambda_j/mu)
    auto shifted_dist = [&](int j, double cj) {
      const ConstraintRow& row = nlp_.rows[static_cast<std::size_t>(j)];
      double z = cj + lambda[static_cast<std::size_t>(j)] / mu;
      double proj = std::min(std::max(z, row.lo), row.hi);
      return z - proj;
    };
    auto merit_of = [&](const std::vector<double>& point, std::vector<double>& rows_out) {
      eval_rows(point, rows_out);
      double phi = objective_of(point);
      for (int j = 0; j < m_; ++j) {
        double dj = shifted_dist(j, rows_out[static_cast<std::size_t>(j)]);
        phi += 0.5 * mu * dj * dj;
      }
      return phi;
    };

    double phi;
    try {
      phi = merit_of(xi, c);
    } catch (const EvalError& e) {
      return failure(res, xi, t_start, total_iters, e.what());
    }
    if (!std::isfinite(phi)) return failure(res, xi, t_start, total_iters, "non-finite start");

    double damp = 1e-6;
    for (int outer = 0; outer < opts.max_outer && !timed_out && !failed; ++outer) {
      // each multiplier/penalty update starts a fresh subproblem
      damp = std::min(damp, 1e-6);
      // --- inner: projected Gauss-Newton on the augmented Lagrangian ---
      for (int inner = 0; inner < opts.max_inner; ++inner) {
        if (Clock::now() > deadline) { timed_out = true; break; }
        ++total_iters;

        std::fill(grad.begin(), grad.end(), 0.0);
        std::vector<Eigen::Triplet<double>> trips;
        for (const ObjResidual& r : nlp_.residuals) {
          grad[static_cast<std::size_t>(r.var)] +=
              2.0 * (xi[static_cast<std::size_t>(r.var)] - r.target);
          trips.emplace_back(r.var, r.var, 2.0);
        }
        if (nlp_.slack_penalty > 0)
          for (int j = 0; j < nlp_.layout.n_slack; ++j)
            grad[static_cast<std::size_t>(nlp_.layout.slack(j))] += nlp_.slack_penalty;
        bool eval_ok = true;
        for (int j = 0; j < m_ && eval_ok; ++j) {
          double dj = shifted_dist(j, c[static_cast<std::size_t>(j)]);
          d[static_cast<std::size_t>(j)] = dj;
          const ConstraintRow& row = nlp_.rows[static_cast<std::size_t>(j)];
          bool active = (row.lo == row.hi) || dj != 0.0;
          if (!active) continue;
          try {
            jac_.row_values(static_cast<std::size_t>(j), xi, jrow);
          } catch (const EvalError& e) {
            fail_msg = e.what();
            eval_ok = false;
            break;
          }
          const auto& sup = jac_.row_support(static_cast<std::size_t>(j));
          for (std::size_t a = 0; a < sup.size(); ++a) {
            grad[static_cast<std::size_t>(sup[a])] += mu * dj * jrow[a];
            for (std::size_t b = 0; b < sup.size(); ++b)
              trips.emplace_back(sup[a], sup[b], mu * jrow[a] * jrow[b]);
          }
        }
        if (!eval_ok) { failed = true; break; }

        pg_last = projected_gradient_norm(xi, grad);
        if (pg_last <= omega) break;

        for (int v = 0; v < n_; ++v) trips.emplace_back(v, v, damp);
        Eigen::SparseMatrix<double> B(n_, n_);
        B.setFromTriplets(trips.begin(), trips.end());
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> chol(B);
        Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(grad.data(), n_);
        Eigen::VectorXd step;
        if (chol.info() == Eigen::Success) step = chol.solve(-g);
        if (chol.info() != Eigen::Success || !step.allFinite()) {
          damp = std::max(damp * 100, 1e-4);
          continue;
        }

        // Projected backtracking line search on the merit.
        std::vector<double> xi_try(static_cast<std::size_t>(n_));
        std::vector<double> c_try(static_cast<std::size_t>(m_));
        double alpha = 1.0;
        bool improved = false;
        for (int ls = 0; ls < 30; ++ls) {
          for (int v = 0; v < n_; ++v)
            xi_try[static_cast<std::size_t>(v)] =
                xi[static_cast<std::size_t>(v)] + alpha * step(v);
          project(xi_try);
          double phi_try;
          try {
            phi_try = merit_of(xi_try, c_try);
          } catch (const EvalError&) {
            alpha *= 0.5;
            continue;
          }
          if (std::isfinite(phi_try) && phi_try <= phi) {
            bool real_progress = phi_try < phi - 1e-16 * (1.0 + std::abs(phi));
            xi.swap(xi_try);
            c.swap(c_try);
            phi = phi_try;
            improved = real_progress;
            break;
          }
          alpha *= 0.5;
        }
        if (improved) {
          damp = std::max(damp / 3.0, 1e-10);
        } else {
          damp *= 10.0;
          if (damp > 1e12) break;  // stalled at numerical precision
        }
      }
      if (timed_out || failed) break;

      double viol = 0.0;
      for (int j = 0; j < m_; ++j) {
        const ConstraintRow& row = nlp_.rows[static_cast<std::size_t>(j)];
        viol = std::max(viol, interval_dist(c[static_cast<std::size_t>(j)], row.lo, row.hi));
      }
      if (opts.iteration_log)
        (*opts.iteration_log) << "iter " << total_iters << " objective " << objective_of(xi)
                              << " max_violation " << viol << " mu " << mu << " step_norm -"
                              << "\n";

      // Stationarity is judged on the Lagrangian with first-order multiplier
      // estimates; the raw AL gradient stays mu-stiff near the solution.
      if (viol <= opts.cons_tol) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (const ObjResidual& r : nlp_.residuals)
          grad[static_cast<std::size_t>(r.var)] +=
              2.0 * (xi[static_cast<std::size_t>(r.var)] - r.target);
        if (nlp_.slack_penalty > 0)
          for (int j = 0; j < nlp_.layout.n_slack; ++j)
            grad[static_cast<std::size_t>(nlp_.layout.slack(j))] += nlp_.slack_penalty;
        bool lag_ok = true;
        for (int j = 0; j < m_ && lag_ok; ++j) {
          double est = mu * shifted_dist(j, c[static_cast<std::size_t>(j)]);
          if (est == 0.0) continue;
          try {
            jac_.row_values(static_cast<std::size_t>(j), xi, jrow);
          } catch (const EvalError&) {
            lag_ok = false;
            break;
          }
          const auto& sup = jac_.row_support(static_cast<std::size_t>(j));
          for (std::size_t a = 0; a < sup.size(); ++a)
            grad[static_cast<std::size_t>(sup[a])] += est * jrow[a];
        }
        double lag_pg = lag_ok ? projected_gradient_norm(xi, grad)
                               : std::numeric_limits<double>::infinity();
        if (opts.iteration_log) (*opts.iteration_log) << "lag_pg " << lag_pg << "\n";
        if (lag_pg <= opts.stat_tol) {
          res.status = SolveStatus::SolvedLocal;
          break;
        }
      }
      if (viol <= std::max(eta, opts.cons_tol)) {
        // lambda_new = mu * dist(c + lambda/mu, [lo,hi]); the shift already
        // carries the old multiplier, so this is an assignment
        for (int j = 0; j < m_; ++j)
          lambda[static_cast<std::size_t>(j)] = mu * shifted_dist(j, c[static_cast<std::size_t>(j)]);
        eta = std::max(eta / 10.0, opts.cons_tol);
        omega = std::max(omega / 10.0, opts.stat_tol);
      } else {
        mu = std::min(mu * opts.mu_growth, opts.mu_max);
      }
      // Recompute merit with the updated multipliers/penalty.
      phi = merit_of(xi, c);
    }

    if (failed) return failure(res, xi, t_start, total_iters, fail_msg);
    if (res.status != SolveStatus::SolvedLocal)
      res.status = timed_out ? SolveStatus::TimeLimit : SolveStatus::IterationLimit;
    finish(res, xi, c);
    res.iterations = total_iters;
    res.wall_time_s = std::chrono::duration<double>(Clock::now() - t_start).count();
    return res;
  }

  void extract_p_hat(SolveResult& res) const {
    const VariableLayout& L = nlp_.layout;
    res.p_hat.clear();
    for (int j = 0; j < L.n_p; ++j)
      res.p_hat.push_back(res.xi[static_cast<std::size_t>(L.p(j))]);
    for (int i = 0; i < L.n_s; ++i) {
      int v = L.x(0, i);
      if (nlp_.lb[static_cast<std::size_t>(v)] < nlp_.ub[static_cast<std::size_t>(v)])
        res.p_hat.push_back(res.xi[static_cast<std::size_t>(v)]);
    }
  }

 private:
  void project(std::vector<double>& xi) const {
    for (int v = 0; v < n_; ++v)
      xi[static_cast<std::size_t>(v)] =
          std::min(std::max(xi[static_cast<std::size_t>(v)], nlp_.lb[static_cast<std::size_t>(v)]),
                   nlp_.ub[static_cast<std::size_t>(v)]);
  }

  double projected_gradient_norm(const std::vector<double>& xi,
                                 const std::vector<double>& grad) const {
    double norm = 0.0;
    for (int v = 0; v < n_; ++v) {
      double moved = std::min(
          std::max(xi[static_cast<std::size_t>(v)] - grad[static_cast<std::size_t>(v)],
                   nlp_.lb[static_cast<std::size_t>(v)]),
          nlp_.ub[static_cast<std::size_t>(v)]);
      norm = std::max(norm, std::abs(moved - xi[static_cast<std::size_t>(v)]));
    }
    return norm;
  }

  void finish(SolveResult& res, std::vector<double>& xi, const std::vector<double>& c) {
    res.xi = std::move(xi);
    double viol = 0.0;
    for (int j = 0; j < m_; ++j) {
      const ConstraintRow& row = nlp_.rows[static_cast<std::size_t>(j)];
      viol = std::max(viol, interval_dist(c[static_cast<std::size_t>(j)], row.lo, row.hi));
    }
    res.max_violation = viol;
    double f = 0.0;
    for (const ObjResidual& r : nlp_.residuals) {
      double e = res.xi[static_cast<std::size_t>(r.var)] - r.target;
      f += e * e;
    }
    if (nlp_.slack_penalty > 0)
      for (int j = 0; j < nlp_.layout.n_slack; ++j)
        f += nlp_.slack_penalty * res.xi[static_cast<std::size_t>(nlp_.layout.slack(j))];
    res.objective = f;
    extract_p_hat(res);
  }

  SolveResult failure(SolveResult& res, std::vector<double>& xi, Clock::time_point t_start,
                      int iters, const std::string& msg) {
    res.status = SolveStatus::NumericalFailure;
    res.xi = std::move(xi);
    extract_p_hat(res);
    res.message = msg;
    res.iterations = iters;
    res.wall_time_s = std::chrono::duration<double>(Clock::now() - t_start).count();
    return res;
  }

  NlpInstance& nlp_;
  Jacobian jac_;
  int n_ = 0, m_ = 0;
};

}  // namespace detail

inline SolveResult solve_local(NlpInstance& nlp, std::vector<double> start,
                               const SolverOptions& opts = {}) {
  detail::AlSolver solver(nlp);
  auto deadline = detail::Clock::now() +
                  std::chrono::duration_cast<detail::Clock::duration>(
                      std::chrono::duration<double>(opts.time_limit_s));
  return solver.solve(std::move(start), opts, deadline);
}

/// A start point: parameters/ICs drawn uniformly within bounds, states from a
/// clamped Euler rollout at the drawn parameters, outputs from g, RK4 stages
/// from the stage formulas and slacks covering the initial violation.
inline std::vector<double> make_start(const NlpInstance& nlp, const OdeProblem& pr,
                                      std::mt19937_64& rng) {
  const VariableLayout& L = nlp.layout;
  std::vector<double> p(static_cast<std::size_t>(pr.n_p));
  for (int j = 0; j < pr.n_p; ++j) {
    std::uniform_real_distribution<double> dist(pr.p_lo[static_cast<std::size_t>(j)],
                                                pr.p_hi[static_cast<std::size_t>(j)]);
    p[static_cast<std::size_t>(j)] = dist(rng);
  }
  std::vector<double> x0(static_cast<std::size_t>(pr.n_s));
  for (int i = 0; i < pr.n_s; ++i) {
    const InitialState& ic = pr.x0[static_cast<std::size_t>(i)];
    if (ic.estimated) {
      std::uniform_real_distribution<double> dist(ic.lo, ic.hi);
      x0[static_cast<std::size_t>(i)] = dist(rng);
    } else {
      x0[static_cast<std::size_t>(i)] = ic.fixed_value;
    }
  }

  // Clamped Euler rollout keeps the start near the dynamics manifold without
  // letting bad parameter draws blow up to non-finite values.
  const int M = L.M;
  const double h = (pr.tf - pr.t0) / M;
  const double cap = 1e6;
  Trajectory tr;
  tr.t0 = pr.t0; tr.h = h; tr.M = M; tr.n_s = pr.n_s; tr.scheme = SchemeTag::Euler;
  tr.states.assign(static_cast<std::size_t>((M + 1) * pr.n_s), 0.0);
  std::copy(x0.begin(), x0.end(), tr.states.begin());
  std::vector<double> f(static_cast<std::size_t>(pr.n_s));
  for (int m = 0; m < M; ++m) {
    bool ok = true;
    try {
      detail::eval_rhs(pr, tr.time(m), tr.row(m), p, f.data());
    } catch (const EvalError&) {
      ok = false;
    }
    for (int i = 0; i < pr.n_s; ++i) {
      double next = tr.at(m, i) + (ok ? h * f[static_cast<std::size_t>(i)] : 0.0);
      if (!std::isfinite(next)) next = tr.at(m, i);
      tr.states[static_cast<std::size_t>((m + 1) * pr.n_s + i)] =
          std::min(std::max(next, -cap), cap);
    }
  }

  std::vector<double> xi = assemble_point(nlp, pr, tr, p);
  if (L.n_slack > 0) {
    Point pt{0.0, {}, {}, xi};
    for (std::size_t j = 0; j < nlp.dynamic_rows.size(); ++j) {
      double hj = 0.0;
      try {
        hj = nlp.dag->eval(nlp.dynamic_rows[j], pt);
      } catch (const EvalError&) {
        hj = 0.0;
      }
      if (!std::isfinite(hj)) hj = 0.0;
      xi[static_cast<std::size_t>(L.slack(static_cast<int>(j)))] = std::abs(hj);
    }
  }
  for (int v = 0; v < L.total(); ++v)
    xi[static_cast<std::size_t>(v)] =
        std::min(std::max(xi[static_cast<std::size_t>(v)], nlp.lb[static_cast<std::size_t>(v)]),
                 nlp.ub[static_cast<std::size_t>(v)]);
  return xi;
}

/// Deterministic best-of-N multistart under a shared wall-clock budget.
inline SolveResult multistart(NlpInstance& nlp, const OdeProblem& pr, int count,
                              const SolverOptions& opts = {}) {
  if (count < 1) throw std::invalid_argument("multistart needs count >= 1");
  std::mt19937_64 rng(opts.seed);
  detail::AlSolver solver(nlp);
  auto deadline = detail::Clock::now() +
                  std::chrono::duration_cast<detail::Clock::duration>(
                      std::chrono::duration<double>(opts.time_limit_s));
  auto t_start = detail::Clock::now();

  std::optional<SolveResult> best_feasible;
  std::optional<SolveResult> best_any;  // smallest violation among non-failures
  std::string last_fail = "all starts failed";
  int attempted = 0;
  for (int s = 0; s < count; ++s) {
    std::vector<double> start = make_start(nlp, pr, rng);
    if (detail::Clock::now() > deadline && attempted > 0) break;
    ++attempted;
    SolveResult r = solver.solve(std::move(start), opts, deadline);
    if (r.status == SolveStatus::NumericalFailure) {
      last_fail = r.message;
      continue;
    }
    if (r.max_violation <= opts.cons_tol) {
      if (!best_feasible || r.objective < best_feasible->objective) best_feasible = r;
    }
    if (!best_any || r.max_violation < best_any->max_violation) best_any = r;
  }
  SolveResult out;
  if (best_feasible) out = *best_feasible;
  else if (best_any) out = *best_any;
  else {
    out.status = SolveStatus::NumericalFailure;
    out.message = last_fail;
  }
  out.starts = attempted;
  out.wall_time_s = std::chrono::duration<double>(detail::Clock::now() - t_start).count();
  return out;
}

/// Convenience overload resolving the pool problem from the instance name.
inline SolveResult multistart(NlpInstance& nlp, int count, const SolverOptions& opts = {}) {
  OdeProblem pr = build_problem(nlp.problem_name);
  return multistart(nlp, pr, count, opts);
}

// ---------------------------------------------------------------------------
// AMPL export

/// Deterministic name for a flat variable index.
inline std::string variable_name(const VariableLayout& L, int v) {
  int node_block = (L.M + 1) * (L.n_s + L.n_y);
  if (v < node_block) {
    int m = v / (L.n_s + L.n_y);
    int r = v % (L.n_s + L.n_y);
    if (r < L.n_s) return "x_" + std::to_string(m) + "_" + std::to_string(r + 1);
    return "y_" + std::to_string(m) + "_" + std::to_string(r - L.n_s + 1);
  }
  if (v < node_block + L.n_p) return "p_" + std::to_string(v - node_block + 1);
  if (L.has_stages && v < L.slack_base()) {
    int off = v - L.stage_base();
    int m = off / (4 * L.n_s);
    int j = (off / L.n_s) % 4;
    int i = off % L.n_s;
    return "k" + std::to_string(j + 1) + "_" + std::to_string(m) + "_" + std::to_string(i + 1);
  }
  return "s_" + std::to_string(v - L.slack_base() + 1);
}

struct AmplExport {
  std::string model;
  std::string data;
};

/// Byte-deterministic AMPL model text. Numeric literals carry 17 significant
/// digits.
inline std::string export_model(const NlpInstance& nlp) {
  const VariableLayout& L = nlp.layout;
  std::string m;
  m += "# odefit model: problem=" + nlp.problem_name + " scheme=" + to_string(nlp.scheme) +
       " M=" + std::to_string(nlp.M) + " formulation=" + nlp.formulation.label();
  if (nlp.formulation.kind != Formulation::Kind::Baseline)
    m += " param=" + detail::format_number(nlp.formulation.param);
  m += "\n";
  for (int v = 0; v < L.total(); ++v) {
    m += "var " + variable_name(L, v);
    double lo = nlp.lb[static_cast<std::size_t>(v)], hi = nlp.ub[static_cast<std::size_t>(v)];
    if (std::isfinite(lo)) m += " >= " + detail::format_number(lo);
    if (std::isfinite(hi)) m += " <= " + detail::format_number(hi);
    m += ";\n";
  }
  SymbolTable empty;
  std::function<std::string(int)> namer = [&](int v) { return variable_name(L, v); };
  m += "minimize obj: " + render(*nlp.dag, nlp.objective, empty, &namer) + ";\n";
  for (std::size_t j = 0; j < nlp.rows.size(); ++j) {
    const ConstraintRow& row = nlp.rows[j];
    std::string body = render(*nlp.dag, row.expr, empty, &namer);
    m += "subject to c_" + std::to_string(j + 1) + ": ";
    if (row.lo == row.hi) {
      m += body + " = " + detail::format_number(row.lo);
    } else if (std::isfinite(row.lo) && std::isfinite(row.hi)) {
      m += detail::format_number(row.lo) + " <= " + body + " <= " + detail::format_number(row.hi);
    } else if (std::isfinite(row.hi)) {
      m += body + " <= " + detail::format_number(row.hi);
    } else {
      m += body + " >= " + detail::format_number(row.lo);
    }
    m += ";\n";
  }
  return m;
}

/// Model plus the measurement table the instance was built from.
inline AmplExport export_ampl(const NlpInstance& nlp, const MeasurementSet& data) {
  return {export_model(nlp), serialize_measurements(data)};
}

struct ExportReport {
  bool ok = true;
  long bad_row = -1;  // -1 objective, row index otherwise; valid when !ok
  std::string message;
};

/// Re-parses the emitted model with the expression grammar and checks that
/// objective and constraint values at xi agree with eval_instance.
inline ExportReport verify_export(const NlpInstance& nlp, const std::string& model_text,
                                  std::span<const double> xi, double rel_tol = 1e-12) {
  SymbolTable empty;
  std::unordered_map<std::string, int> flat;
  int next_var = 0;
  ExprDag dag;
  std::optional<double> obj_parsed;
  std::vector<double> row_parsed;
  std::istringstream in(model_text);
  std::string line;
  Point pt{0.0, {}, {}, xi};
  auto eval_body = [&](const std::string& body) {
    return dag.eval(parse_flat(body, dag, empty, flat), pt);
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("var ", 0) == 0) {
      std::size_t sp = line.find_first_of(" ;", 4);
      flat[line.substr(4, sp - 4)] = next_var++;
    } else if (line.rfind("minimize obj: ", 0) == 0) {
      std::string body = line.substr(14);
      body.pop_back();  // ';'
      obj_parsed = eval_body(body);
    } else if (line.rfind("subject to ", 0) == 0) {
      std::size_t colon = line.find(": ");
      std::string rest = line.substr(colon + 2);
      rest.pop_back();  // ';'
      // strip relational decorations, keeping only the expression body
      std::string body;
      if (std::size_t eq = rest.rfind(" = "); eq != std::string::npos) {
        body = rest.substr(0, eq);
      } else {
        std::size_t first = rest.find(" <= ");
        std::size_t last = rest.rfind(" <= ");
        if (first == std::string::npos) {
          body = rest.substr(0, rest.rfind(" >= "));
        } else if (first != last) {
          body = rest.substr(first + 4, last - first - 4);
        } else {
          // one-sided: "<body> <= hi" or "lo <= <body>"
          std::string head = rest.substr(0, first);
          bool head_is_number = !head.empty() &&
                                head.find_first_not_of("0123456789+-.eE") == std::string::npos;
          body = head_is_number ? rest.substr(first + 4) : head;
        }
      }
      row_parsed.push_back(eval_body(body));
    }
  }
  if (next_var != nlp.layout.total())
    return {false, -1, "variable count mismatch in export"};
  InstanceEval ref = eval_instance(nlp, xi);
  auto close = [&](double a, double b) {
    return std::abs(a - b) <= rel_tol * std::max({1.0, std::abs(a), std::abs(b)});
  };
  if (!obj_parsed || !close(*obj_parsed, ref.objective))
    return {false, -1, "objective disagrees with eval_instance"};
  if (row_parsed.size() != nlp.rows.size())
    return {false, -1, "constraint count mismatch in export"};
  for (std::size_t j = 0; j < row_parsed.size(); ++j)
    if (!close(row_parsed[j], ref.residuals[j]))
      return {false, static_cast<long>(j),
              "constraint c_" + std::to_string(j + 1) + " disagrees with eval_instance"};
  return {};
}

inline ExportReport verify_export(const NlpInstance& nlp, std::span<const double> xi,
                                  double rel_tol = 1e-12) {
  return verify_export(nlp, export_model(nlp), xi, rel_tol);
}

}  // namespace odefit
