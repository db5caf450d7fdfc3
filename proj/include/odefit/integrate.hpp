#pragma once

// Reference forward integration at fixed parameters: classical RK4 for
// synthetic data generation, plus per-scheme time-stepping whose output
// satisfies the transcription's algebraic relations (the constructive
// feasibility bridge). Implicit steps use a damped Newton iteration.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "odefit/pool.hpp"

namespace odefit {

enum class SchemeTag { Euler, Trapezoid, AdamsMoulton3, Simpson, RK4 };

inline std::string to_string(SchemeTag s) {
  switch (s) {
    case SchemeTag::Euler: return "euler";
    case SchemeTag::Trapezoid: return "trapezoid";
    case SchemeTag::AdamsMoulton3: return "adams_moulton3";
    case SchemeTag::Simpson: return "simpson";
    case SchemeTag::RK4: return "rk4";
  }
  return "?";
}

inline SchemeTag scheme_from_string(const std::string& s) {
  if (s == "euler") return SchemeTag::Euler;
  if (s == "trapezoid") return SchemeTag::Trapezoid;
  if (s == "adams_moulton3") return SchemeTag::AdamsMoulton3;
  if (s == "simpson") return SchemeTag::Simpson;
  if (s == "rk4") return SchemeTag::RK4;
  throw std::invalid_argument("unknown scheme: " + s);
}

struct Trajectory {
  double t0 = 0.0, h = 0.0;
  int M = 0, n_s = 0;
  SchemeTag scheme = SchemeTag::RK4;
  std::vector<double> states;  // (M+1) x n_s, row-major

  double at(int m, int i) const { return states[static_cast<std::size_t>(m * n_s + i)]; }
  std::span<const double> row(int m) const {
    return {states.data() + static_cast<std::size_t>(m * n_s), static_cast<std::size_t>(n_s)};
  }
  double time(int m) const { return t0 + m * h; }
};

enum class Provenance { SyntheticRK4, SchemeConsistent, External };

struct MeasurementSet {
  std::vector<double> taus;
  std::vector<double> values;  // n x n_y, row-major
  int n_y = 0;
  Provenance provenance = Provenance::SyntheticRK4;

  int n() const { return static_cast<int>(taus.size()); }
  double at(int i, int k) const { return values[static_cast<std::size_t>(i * n_y + k)]; }
};

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, int step) : std::runtime_error(what), step(step) {}
  int step;
};

namespace detail {

inline void eval_rhs(const OdeProblem& pr, double t, std::span<const double> x,
                     std::span<const double> p, double* out) {
  Point pt{t, x, p, {}};
  for (int i = 0; i < pr.n_s; ++i) out[i] = pr.dag.eval(pr.rhs[static_cast<std::size_t>(i)], pt);
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Ids of d f_i / d x_j in the problem's DAG (built once per problem use).
class RhsJacobian {
 public:
  explicit RhsJacobian(OdeProblem& pr) : pr_(pr) {
    ids_.resize(static_cast<std::size_t>(pr.n_s * pr.n_s));
    for (int i = 0; i < pr.n_s; ++i)
      for (int j = 0; j < pr.n_s; ++j)
        ids_[static_cast<std::size_t>(i * pr.n_s + j)] =
            pr.dag.diff(pr.rhs[static_cast<std::size_t>(i)], {NodeKind::StateRef, j});
  }
  void eval(double t, std::span<const double> x, std::span<const double> p,
            Eigen::MatrixXd& out) const {
    Point pt{t, x, p, {}};
    for (int i = 0; i < pr_.n_s; ++i)
      for (int j = 0; j < pr_.n_s; ++j)
        out(i, j) = pr_.dag.eval(ids_[static_cast<std::size_t>(i * pr_.n_s + j)], pt);
  }

 private:
  const OdeProblem& pr_;
  std::vector<ExprDag::Id> ids_;
};

/// Solves u - coeff*h*f(t_u, u) - rhs_const = 0 for u by damped Newton,
/// warm-started from `u`. Residual tolerance scales with the state magnitude.
inline void implicit_step(const OdeProblem& pr, const RhsJacobian& jac,
                          std::span<const double> p, double t_u, double coeff_h,
                          const Eigen::VectorXd& rhs_const, Eigen::VectorXd& u, int step_index) {
  const int n = pr.n_s;
  Eigen::VectorXd f(n), r(n), u_try(n), r_try(n);
  Eigen::MatrixXd J(n, n), A(n, n);
  double scale = std::max(1.0, u.lpNorm<Eigen::Infinity>());
  const double tol = 1e-13 * scale;
  auto residual = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) {
    eval_rhs(pr, t_u, {v.data(), static_cast<std::size_t>(n)}, p, f.data());
    out = v - coeff_h * f - rhs_const;
  };
  residual(u, r);
  for (int it = 0; it < 50; ++it) {
    if (r.lpNorm<Eigen::Infinity>() <= tol) return;
    jac.eval(t_u, {u.data(), static_cast<std::size_t>(n)}, p, J);
    A = Eigen::MatrixXd::Identity(n, n) - coeff_h * J;
    Eigen::VectorXd du = A.partialPivLu().solve(-r);
    double alpha = 1.0;
    for (int ls = 0; ls < 30; ++ls) {
      u_try = u + alpha * du;
      residual(u_try, r_try);
      if (all_finite({r_try.data(), static_cast<std::size_t>(n)}) &&
          (r_try.norm() < r.norm() || r_try.lpNorm<Eigen::Infinity>() <= tol)) {
        u = u_try;
        r = r_try;
        break;
      }
      alpha *= 0.5;
      if (ls == 29)
        throw IntegrationError("implicit step line search failed", step_index);
    }
  }
  if (r.lpNorm<Eigen::Infinity>() > tol)
    throw IntegrationError("implicit step Newton did not converge", step_index);
}

inline Eigen::VectorXd to_vec(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

/// Classical explicit RK4 time-stepping.
inline Trajectory rk4_integrate(const OdeProblem& pr, std::span<const double> p,
                                std::span<const double> x0, int M) {
  Trajectory tr;
  tr.t0 = pr.t0;
  tr.h = (pr.tf - pr.t0) / M;
  tr.M = M;
  tr.n_s = pr.n_s;
  tr.scheme = SchemeTag::RK4;
  tr.states.assign(static_cast<std::size_t>((M + 1) * pr.n_s), 0.0);
  const int n = pr.n_s;
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  std::copy(x0.begin(), x0.end(), tr.states.begin());
  for (int m = 0; m < M; ++m) {
    double t = tr.time(m), h = tr.h;
    const double* x = tr.states.data() + static_cast<std::size_t>(m * n);
    double* xn = tr.states.data() + static_cast<std::size_t>((m + 1) * n);
    detail::eval_rhs(pr, t, {x, static_cast<std::size_t>(n)}, p, k1.data());
    for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[i] + h / 2 * k1[static_cast<std::size_t>(i)];
    detail::eval_rhs(pr, t + h / 2, tmp, p, k2.data());
    for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[i] + h / 2 * k2[static_cast<std::size_t>(i)];
    detail::eval_rhs(pr, t + h / 2, tmp, p, k3.data());
    for (int i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = x[i] + h * k3[static_cast<std::size_t>(i)];
    detail::eval_rhs(pr, t + h, tmp, p, k4.data());
    for (int i = 0; i < n; ++i)
      xn[i] = x[i] + h / 6 * (k1[static_cast<std::size_t>(i)] + 2 * k2[static_cast<std::size_t>(i)] +
                              2 * k3[static_cast<std::size_t>(i)] + k4[static_cast<std::size_t>(i)]);
    if (!detail::all_finite({xn, static_cast<std::size_t>(n)}))
      throw IntegrationError("non-finite state in RK4 integration", m + 1);
  }
  return tr;
}

/// Steps the given discretization scheme forward so the result satisfies the
/// scheme's algebraic relations. Adams-Moulton bootstraps x1 and x2 with
/// Trapezoid steps; Simpson bootstraps x1 the same way.
inline Trajectory step_scheme(OdeProblem& pr, std::span<const double> p,
                              std::span<const double> x0, SchemeTag scheme, int M) {
  if (scheme == SchemeTag::RK4) {
    Trajectory tr = rk4_integrate(pr, p, x0, M);
    tr.scheme = scheme;
    return tr;
  }
  Trajectory tr;
  tr.t0 = pr.t0;
  tr.h = (pr.tf - pr.t0) / M;
  tr.M = M;
  tr.n_s = pr.n_s;
  tr.scheme = scheme;
  tr.states.assign(static_cast<std::size_t>((M + 1) * pr.n_s), 0.0);
  const int n = pr.n_s;
  const double h = tr.h;
  std::copy(x0.begin(), x0.end(), tr.states.begin());
  detail::RhsJacobian jac(pr);
  std::vector<double> f(n);
  auto state = [&](int m) {
    return std::span<const double>(tr.states.data() + static_cast<std::size_t>(m * n),
                                   static_cast<std::size_t>(n));
  };
  auto set_state = [&](int m, const Eigen::VectorXd& v) {
    for (int i = 0; i < n; ++i) tr.states[static_cast<std::size_t>(m * n + i)] = v(i);
    if (!detail::all_finite(state(m)))
      throw IntegrationError("non-finite state in scheme stepping", m);
  };
  auto trapezoid_step = [&](int m) {
    // x_{m+1} - (h/2) f(t_{m+1}, x_{m+1}) = x_m + (h/2) f(t_m, x_m)
    detail::eval_rhs(pr, tr.time(m), state(m), p, f.data());
    Eigen::VectorXd rhs = detail::to_vec(state(m)) + (h / 2) * detail::to_vec(f);
    Eigen::VectorXd u = detail::to_vec(state(m));
    detail::implicit_step(pr, jac, p, tr.time(m + 1), h / 2, rhs, u, m + 1);
    set_state(m + 1, u);
  };

  switch (scheme) {
    case SchemeTag::Euler:
      for (int m = 0; m < M; ++m) {
        detail::eval_rhs(pr, tr.time(m), state(m), p, f.data());
        Eigen::VectorXd u = detail::to_vec(state(m)) + h * detail::to_vec(f);
        set_state(m + 1, u);
      }
      break;
    case SchemeTag::Trapezoid:
      for (int m = 0; m < M; ++m) trapezoid_step(m);
      break;
    case SchemeTag::AdamsMoulton3: {
      if (M < 4) throw std::invalid_argument("Adams-Moulton needs M >= 4");
      trapezoid_step(0);
      trapezoid_step(1);
      std::vector<double> f1(n), f2(n), f3(n);
      for (int m = 0; m <= M - 3; ++m) {
        // x_{m+3} - (9h/24) f_{m+3} = x_{m+2} + (h/24)(19 f_{m+2} - 5 f_{m+1} + f_m)
        detail::eval_rhs(pr, tr.time(m), state(m), p, f.data());
        detail::eval_rhs(pr, tr.time(m + 1), state(m + 1), p, f1.data());
        detail::eval_rhs(pr, tr.time(m + 2), state(m + 2), p, f2.data());
        Eigen::VectorXd rhs = detail::to_vec(state(m + 2)) +
                              (h / 24) * (19 * detail::to_vec(f2) - 5 * detail::to_vec(f1) +
                                          detail::to_vec(f));
        Eigen::VectorXd u = detail::to_vec(state(m + 2));
        detail::implicit_step(pr, jac, p, tr.time(m + 3), 9 * h / 24, rhs, u, m + 3);
        set_state(m + 3, u);
      }
      break;
    }
    case SchemeTag::Simpson: {
      if (M < 2) throw std::invalid_argument("Simpson needs M >= 2");
      trapezoid_step(0);
      std::vector<double> fm(n);
      for (int m = 1; m < M; ++m) {
        // x_{m+1} - (h/3) f_{m+1} = x_{m-1} + (h/3)(4 f_m + f_{m-1})
        detail::eval_rhs(pr, tr.time(m - 1), state(m - 1), p, f.data());
        detail::eval_rhs(pr, tr.time(m), state(m), p, fm.data());
        Eigen::VectorXd rhs = detail::to_vec(state(m - 1)) +
                              (h / 3) * (4 * detail::to_vec(fm) + detail::to_vec(f));
        Eigen::VectorXd u = detail::to_vec(state(m));
        detail::implicit_step(pr, jac, p, tr.time(m + 1), h / 3, rhs, u, m + 1);
        set_state(m + 1, u);
      }
      break;
    }
    case SchemeTag::RK4:
      break;  // handled above
  }
  return tr;
}

/// Observation map applied to a state row.
inline void eval_obs(const OdeProblem& pr, std::span<const double> x, std::span<const double> p,
                     double* out) {
  Point pt{0.0, x, p, {}};
  for (int k = 0; k < pr.n_y; ++k) out[k] = pr.dag.eval(pr.obs[static_cast<std::size_t>(k)], pt);
}

/// Noiseless synthetic data: RK4 on a mesh `oversample` times finer than the
/// finest shipped mesh, sampled at the exact measurement nodes.
inline MeasurementSet synthesize_measurements(OdeProblem& pr, std::span<const double> p,
                                              std::span<const double> x0, int oversample = 10) {
  if (oversample < 1) throw std::invalid_argument("oversample must be >= 1");
  int finest = pr.meshes.empty() ? 1000 : pr.meshes.back();
  int M = finest * oversample;
  Trajectory tr = rk4_integrate(pr, p, x0, M);
  std::vector<int> idx = measurement_indices(pr, M);
  MeasurementSet ms;
  ms.taus = pr.taus;
  ms.n_y = pr.n_y;
  ms.provenance = Provenance::SyntheticRK4;
  ms.values.resize(static_cast<std::size_t>(ms.n() * pr.n_y));
  for (int i = 0; i < ms.n(); ++i)
    eval_obs(pr, tr.row(idx[static_cast<std::size_t>(i)]), p,
             ms.values.data() + static_cast<std::size_t>(i * pr.n_y));
  return ms;
}

/// Data generated by forward-stepping the same scheme/mesh used in the
/// transcription: makes the generating parameters an exact zero-residual
/// optimum of the discretized problem.
inline MeasurementSet scheme_consistent_measurements(OdeProblem& pr, std::span<const double> p,
                                                     std::span<const double> x0,
                                                     SchemeTag scheme, int M) {
  Trajectory tr = step_scheme(pr, p, x0, scheme, M);
  std::vector<int> idx = measurement_indices(pr, M);
  MeasurementSet ms;
  ms.taus = pr.taus;
  ms.n_y = pr.n_y;
  ms.provenance = Provenance::SchemeConsistent;
  ms.values.resize(static_cast<std::size_t>(ms.n() * pr.n_y));
  for (int i = 0; i < ms.n(); ++i)
    eval_obs(pr, tr.row(idx[static_cast<std::size_t>(i)]), p,
             ms.values.data() + static_cast<std::size_t>(i * pr.n_y));
  return ms;
}

/// Delimited text: header row, then (tau, y1..y_ny) at 17 significant digits.
inline std::string serialize_measurements(const MeasurementSet& ms) {
  std::string out = "tau";
  for (int k = 1; k <= ms.n_y; ++k) out += "\ty" + std::to_string(k);
  out += "\n";
  char buf[64];
  for (int i = 0; i < ms.n(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", ms.taus[static_cast<std::size_t>(i)]);
    out += buf;
    for (int k = 0; k < ms.n_y; ++k) {
      std::snprintf(buf, sizeof buf, "\t%.17g", ms.at(i, k));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace odefit
