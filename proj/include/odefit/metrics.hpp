#pragma once

// Recovery metrics, outcome classification and grouped summaries for
// estimation runs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "odefit/integrate.hpp"

namespace odefit {

/// max_i |(p_i - ref_i) / ref_i|.
inline double max_re(std::span<const double> p, std::span<const double> ref) {
  if (p.size() != ref.size()) throw std::invalid_argument("max_re: size mismatch");
  if (p.empty()) throw std::invalid_argument("max_re: empty vectors");
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (ref[i] == 0.0) throw std::invalid_argument("max_re: zero reference component");
    worst = std::max(worst, std::abs((p[i] - ref[i]) / ref[i]));
  }
  return worst;
}

/// sqrt(sum of squared mismatches / (n_y * n)) normalized by the global range
/// of the measured values.
inline double nrmse(std::span<const double> fit_at_meas, const MeasurementSet& data) {
  std::size_t total = data.values.size();
  if (fit_at_meas.size() != total) throw std::invalid_argument("nrmse: size mismatch");
  if (total == 0) throw std::invalid_argument("nrmse: no measurements");
  double lo = data.values[0], hi = data.values[0], ss = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    lo = std::min(lo, data.values[i]);
    hi = std::max(hi, data.values[i]);
    double e = fit_at_meas[i] - data.values[i];
    ss += e * e;
  }
  if (hi <= lo) throw std::invalid_argument("nrmse: degenerate measurement range");
  return std::sqrt(ss / static_cast<double>(total)) / (hi - lo);
}

enum class Outcome { FoundRef, NearRef, Altern, NotFound, Failed };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::FoundRef: return "found-ref";
    case Outcome::NearRef: return "near-ref";
    case Outcome::Altern: return "altern";
    case Outcome::NotFound: return "not-found";
    case Outcome::Failed: return "failed";
  }
  return "?";
}

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "found-ref") return Outcome::FoundRef;
  if (s == "near-ref") return Outcome::NearRef;
  if (s == "altern") return Outcome::Altern;
  if (s == "not-found") return Outcome::NotFound;
  if (s == "failed") return Outcome::Failed;
  throw std::invalid_argument("unknown outcome: " + s);
}

/// Ordered classification: parameter recovery beats fit quality. An undefined
/// MaxRE (NaN, from a zero reference component) falls through to the NRMSE
/// test.
inline Outcome classify(double max_re_v, double nrmse_v) {
  if (std::isfinite(max_re_v)) {
    if (max_re_v <= 0.1) return Outcome::FoundRef;
    if (max_re_v <= 0.5) return Outcome::NearRef;
  }
  if (std::isfinite(nrmse_v) && nrmse_v < 1e-4) return Outcome::Altern;
  return Outcome::NotFound;
}

/// One solver run of one instance, as written to the records table.
struct RunRecord {
  std::string problem;
  std::string scheme;
  int M = 0;
  std::string formulation;  // label
  double form_param = 0.0;
  std::string solver;
  std::uint64_t seed = 0;
  std::string status;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double max_violation = std::numeric_limits<double>::quiet_NaN();
  double max_re = std::numeric_limits<double>::quiet_NaN();
  double nrmse = std::numeric_limits<double>::quiet_NaN();
  Outcome outcome = Outcome::Failed;
  double time_s = 0.0;
  int iterations = 0;
};

/// All columns are proportions of the group except time_bfr (seconds,
/// NaN when the group has no FoundRef run, rendered blank).
struct SummaryRow {
  std::string group;
  double solved_s = 0.0;
  double found_r = 0.0;
  double near_r = 0.0;
  double altern = 0.0;
  double time_bfr = std::numeric_limits<double>::quiet_NaN();
  double success = 0.0;  // fraction without numerical failure
  int count = 0;
};

enum class GroupField { Problem, Solver, Scheme, FormulationKind };

/// Comma-separated field list; "pairs" is shorthand for problem,scheme.
inline std::vector<GroupField> group_by_from_string(const std::string& spec) {
  if (spec == "pairs") return {GroupField::Problem, GroupField::Scheme};
  std::vector<GroupField> fields;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    std::size_t comma = spec.find(',', pos);
    std::string tok = spec.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (tok == "problem") fields.push_back(GroupField::Problem);
    else if (tok == "solver") fields.push_back(GroupField::Solver);
    else if (tok == "scheme") fields.push_back(GroupField::Scheme);
    else if (tok == "formulation") fields.push_back(GroupField::FormulationKind);
    else throw std::invalid_argument("unknown group-by key: " + tok);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return fields;
}

inline std::string group_key(const RunRecord& r, const std::vector<GroupField>& fields) {
  std::string key;
  for (GroupField f : fields) {
    if (!key.empty()) key += "/";
    switch (f) {
      case GroupField::Problem: key += r.problem; break;
      case GroupField::Solver: key += r.solver; break;
      case GroupField::Scheme: key += r.scheme; break;
      case GroupField::FormulationKind: key += r.formulation; break;
    }
  }
  return key;
}

/// Groups records and ranks rows by found_r descending; ties keep the
/// lexicographic group order so the table is deterministic.
inline std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records,
                                         const std::vector<GroupField>& fields) {
  if (records.empty()) throw std::invalid_argument("summarize: no records");
  if (fields.empty()) throw std::invalid_argument("summarize: no group fields");
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const RunRecord& r : records) groups[group_key(r, fields)].push_back(&r);
  std::vector<SummaryRow> rows;
  for (const auto& [key, members] : groups) {
    SummaryRow row;
    row.group = key;
    row.count = static_cast<int>(members.size());
    int solved = 0, found = 0, near = 0, alt = 0, ok = 0;
    for (const RunRecord* r : members) {
      if (r->status == "solved-local" || r->status == "solved") ++solved;
      if (r->outcome != Outcome::Failed) ++ok;
      switch (r->outcome) {
        case Outcome::FoundRef:
          ++found;
          if (!(r->time_s >= row.time_bfr)) row.time_bfr = r->time_s;
          break;
        case Outcome::NearRef: ++near; break;
        case Outcome::Altern: ++alt; break;
        default: break;
      }
    }
    double n = static_cast<double>(members.size());
    row.solved_s = solved / n;
    row.found_r = found / n;
    row.near_r = near / n;
    row.altern = alt / n;
    row.success = ok / n;
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SummaryRow& a, const SummaryRow& b) { return a.found_r > b.found_r; });
  return rows;
}

struct ScatterPoint {
  double max_re = std::numeric_limits<double>::quiet_NaN();
  double log_nrmse1 = std::numeric_limits<double>::quiet_NaN();  // log(nrmse + 1)
  double time_s = 0.0;
  std::string solver_class;  // "global-certified" or "local"
  std::string solver;
};

inline std::string solver_class_of(const std::string& solver) {
  static const char* global_ids[] = {"baron", "couenne", "scip", "maingo", "octeract"};
  std::string id = solver.rfind("ampl:", 0) == 0 ? solver.substr(5) : solver;
  for (const char* g : global_ids)
    if (id == g) return "global-certified";
  return "local";
}

/// Records with an undefined MaxRE are excluded (no x coordinate).
inline std::vector<ScatterPoint> scatter_data(const std::vector<RunRecord>& records) {
  std::vector<ScatterPoint> pts;
  pts.reserve(records.size());
  for (const RunRecord& r : records) {
    if (!std::isfinite(r.max_re)) continue;
    ScatterPoint p;
    p.max_re = r.max_re;
    p.log_nrmse1 = std::isfinite(r.nrmse) ? std::log(r.nrmse + 1.0)
                                          : std::numeric_limits<double>::quiet_NaN();
    p.time_s = r.time_s;
    p.solver = r.solver;
    p.solver_class = solver_class_of(r.solver);
    pts.push_back(std::move(p));
  }
  return pts;
}

}  // namespace odefit
