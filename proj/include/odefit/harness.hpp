#pragma once

// Batch harness: expands a configuration matrix over the problem pool,
// executes runs on a worker pool with per-run isolation, and writes the
// records, summary, scatter and export artifacts.

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#ifndef _WIN32
#include <unistd.h>
#endif

#include "odefit/metrics.hpp"
#include "odefit/pool.hpp"
#include "odefit/solve.hpp"

namespace odefit {

enum class RunMode { BuiltinLocal, BuiltinMultistart, ExportOnly };

inline RunMode run_mode_from_string(const std::string& s) {
  if (s == "builtin-local") return RunMode::BuiltinLocal;
  if (s == "builtin-multistart") return RunMode::BuiltinMultistart;
  if (s == "export-only") return RunMode::ExportOnly;
  throw std::invalid_argument("unknown mode: " + s);
}

struct RunConfig {
  std::vector<std::string> problems;
  std::vector<SchemeTag> schemes = {SchemeTag::Euler, SchemeTag::Trapezoid,
                                    SchemeTag::AdamsMoulton3, SchemeTag::Simpson,
                                    SchemeTag::RK4};
  std::vector<int> meshes;  // empty: each problem's shipped meshes
  std::vector<std::string> formulation_kinds = {"baseline", "extratol", "softcons"};
  std::vector<double> eps_list = {1e-4, 1e-6};
  std::vector<double> penalty_list = {1e3, 1e5};
  RunMode mode = RunMode::BuiltinLocal;
  int starts = 1;            // multistart count
  std::uint64_t seed = 0;
  double time_limit_s = 600.0;
  int workers = 1;
  int max_outer = 40, max_inner = 60;
  bool max_re_includes_ics = false;
  std::string out_dir = "out";
  std::string group_by = "problem";
};

struct RunSpec {
  std::string problem;
  SchemeTag scheme;
  int M = 0;
  Formulation formulation;
  std::uint64_t seed = 0;
};

/// Deterministic lexicographic expansion over
/// (problem, scheme, mesh, formulation, parameter).
inline std::vector<RunSpec> expand(const RunConfig& cfg) {
  if (cfg.problems.empty()) throw std::invalid_argument("no problems selected");
  if (cfg.schemes.empty()) throw std::invalid_argument("no schemes selected");
  if (cfg.formulation_kinds.empty()) throw std::invalid_argument("no formulations selected");
  if (cfg.workers < 1) throw std::invalid_argument("workers must be >= 1");
  std::vector<Formulation> forms;
  for (const std::string& kind : cfg.formulation_kinds) {
    if (kind == "baseline") {
      forms.push_back(Formulation::baseline());
    } else if (kind == "extratol") {
      if (cfg.eps_list.empty()) throw std::invalid_argument("extratol selected with empty eps list");
      for (double e : cfg.eps_list) forms.push_back(Formulation::extra_tol(e));
    } else if (kind == "softcons") {
      if (cfg.penalty_list.empty())
        throw std::invalid_argument("softcons selected with empty penalty list");
      for (double p : cfg.penalty_list) forms.push_back(Formulation::soft_cons(p));
    } else {
      throw std::invalid_argument("unknown formulation kind: " + kind);
    }
  }
  std::vector<RunSpec> specs;
  for (const std::string& name : cfg.problems) {
    std::vector<int> meshes = cfg.meshes;
    if (meshes.empty()) meshes = build_problem(name).meshes;
    for (SchemeTag scheme : cfg.schemes)
      for (int M : meshes)
        for (const Formulation& f : forms)
          specs.push_back({name, scheme, M, f, cfg.seed});
  }
  return specs;
}

namespace detail {

inline std::string spec_stem(const RunSpec& s) {
  std::string stem = s.problem + "_" + to_string(s.scheme) + "_M" + std::to_string(s.M) + "_" +
                     s.formulation.label();
  if (s.formulation.kind != Formulation::Kind::Baseline) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", s.formulation.param);
    stem += "_";
    stem += buf;
  }
  return stem;
}

inline std::string solver_id(const RunConfig& cfg) {
  switch (cfg.mode) {
    case RunMode::BuiltinLocal: return "builtin-local";
    case RunMode::BuiltinMultistart:
      return "builtin-multistart(" + std::to_string(cfg.starts) + ")";
    case RunMode::ExportOnly: return "export";
  }
  return "?";
}

inline std::string fmt(double v) { return format_number(v); }

inline std::string record_line(const RunRecord& r) {
  std::string line = r.problem;
  line += "\t" + r.scheme;
  line += "\t" + std::to_string(r.M);
  line += "\t" + r.formulation;
  line += "\t" + fmt(r.form_param);
  line += "\t" + r.solver;
  line += "\t" + std::to_string(r.seed);
  line += "\t" + r.status;
  line += "\t" + fmt(r.objective);
  line += "\t" + fmt(r.max_violation);
  line += "\t" + fmt(r.max_re);
  line += "\t" + fmt(r.nrmse);
  line += "\t" + to_string(r.outcome);
  line += "\t" + fmt(r.time_s);
  line += "\t" + std::to_string(r.iterations);
  line += "\n";
  return line;
}

inline const char* kRecordHeader =
    "problem\tscheme\tM\tformulation\tform_param\tsolver\tseed\tstatus\tobjective\t"
    "max_violation\tmax_re\tnrmse\toutcome\ttime_s\titerations\n";

/// Append-only record sink flushed to disk after every line so partial
/// results survive interruption.
class RecordWriter {
 public:
  explicit RecordWriter(const std::string& path) : f_(std::fopen(path.c_str(), "wb")) {
    if (!f_) throw std::runtime_error("cannot open records file: " + path);
    write(kRecordHeader);
  }
  ~RecordWriter() {
    if (f_) std::fclose(f_);
  }
  void write(const std::string& line) {
    std::fwrite(line.data(), 1, line.size(), f_);
    std::fflush(f_);
#ifndef _WIN32
    ::fsync(fileno(f_));
#endif
  }

 private:
  std::FILE* f_;
};

}  // namespace detail

/// Executes one run spec in isolation; every failure mode collapses into a
/// Failed record rather than propagating.
inline RunRecord run_one(const RunSpec& spec, const RunConfig& cfg) {
  RunRecord rec;
  rec.problem = spec.problem;
  rec.scheme = to_string(spec.scheme);
  rec.M = spec.M;
  rec.formulation = spec.formulation.label();
  rec.form_param = spec.formulation.param;
  rec.solver = detail::solver_id(cfg);
  rec.seed = spec.seed;
  auto t0 = detail::Clock::now();
  try {
    OdeProblem pr = build_problem(spec.problem);
    MeasurementSet data =
        scheme_consistent_measurements(pr, pr.p_nominal, pr.nominal_x0(), spec.scheme, spec.M);
    NlpInstance nlp = formulate(pr, spec.scheme, spec.M, spec.formulation, data);

    SolverOptions opts;
    opts.time_limit_s = cfg.time_limit_s;
    opts.seed = cfg.seed;
    opts.max_outer = cfg.max_outer;
    opts.max_inner = cfg.max_inner;
    SolveResult res = cfg.mode == RunMode::BuiltinMultistart
                          ? multistart(nlp, pr, cfg.starts, opts)
                          : multistart(nlp, pr, 1, opts);
    rec.status = to_string(res.status);
    rec.objective = res.objective;
    rec.max_violation = res.max_violation;
    rec.iterations = res.iterations;

    if (res.status == SolveStatus::NumericalFailure) {
      rec.outcome = Outcome::Failed;
    } else {
      std::vector<double> ref(pr.p_nominal);
      std::vector<double> est(res.p_hat.begin(), res.p_hat.begin() + pr.n_p);
      if (cfg.max_re_includes_ics) {
        est.assign(res.p_hat.begin(), res.p_hat.end());
        for (const InitialState& ic : pr.x0)
          if (ic.estimated) ref.push_back(ic.nominal);
      }
      try {
        rec.max_re = max_re(est, ref);
      } catch (const std::invalid_argument&) {
        // zero reference component: MaxRE undefined, classify via NRMSE
      }
      std::vector<int> idx = measurement_indices(pr, spec.M);
      std::vector<double> fit;
      fit.reserve(static_cast<std::size_t>(data.n() * pr.n_y));
      for (int i = 0; i < data.n(); ++i)
        for (int k = 0; k < pr.n_y; ++k)
          fit.push_back(res.xi[static_cast<std::size_t>(
              nlp.layout.y(idx[static_cast<std::size_t>(i)], k))]);
      rec.nrmse = nrmse(fit, data);
      rec.outcome = classify(rec.max_re, rec.nrmse);
    }
  } catch (const std::exception& e) {
    rec.status = "numerical-failure";
    rec.outcome = Outcome::Failed;
  }
  rec.time_s = std::chrono::duration<double>(detail::Clock::now() - t0).count();
  return rec;
}

/// Export a spec's AMPL model/data pair into cfg.out_dir.
inline void export_one(const RunSpec& spec, const RunConfig& cfg) {
  OdeProblem pr = build_problem(spec.problem);
  MeasurementSet data =
      scheme_consistent_measurements(pr, pr.p_nominal, pr.nominal_x0(), spec.scheme, spec.M);
  NlpInstance nlp = formulate(pr, spec.scheme, spec.M, spec.formulation, data);
  AmplExport exp = export_ampl(nlp, data);
  std::string stem = (std::filesystem::path(cfg.out_dir) / detail::spec_stem(spec)).string();
  std::ofstream mod(stem + ".mod", std::ios::binary);
  mod << exp.model;
  std::ofstream dat(stem + ".dat", std::ios::binary);
  dat << exp.data;
  if (!mod || !dat) throw std::runtime_error("cannot write export files for " + stem);
}

inline std::string render_summary(const std::vector<SummaryRow>& rows) {
  std::string out = "group\tsolved_s\tfound_r\tnear_r\taltern\ttime_bfr\tsuccess\n";
  for (const SummaryRow& r : rows) {
    out += r.group;
    out += "\t" + detail::fmt(r.solved_s);
    out += "\t" + detail::fmt(r.found_r);
    out += "\t" + detail::fmt(r.near_r);
    out += "\t" + detail::fmt(r.altern);
    out += "\t" + (std::isfinite(r.time_bfr) ? detail::fmt(r.time_bfr) : std::string());
    out += "\t" + detail::fmt(r.success);
    out += "\n";
  }
  return out;
}

inline std::string render_scatter(const std::vector<ScatterPoint>& pts) {
  std::string out = "max_re\tlog_nrmse1\ttime_s\tsolver_class\tsolver\n";
  for (const ScatterPoint& p : pts) {
    out += detail::fmt(p.max_re);
    out += "\t" + detail::fmt(p.log_nrmse1);
    out += "\t" + detail::fmt(p.time_s);
    out += "\t" + p.solver_class;
    out += "\t" + p.solver;
    out += "\n";
  }
  return out;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace detail

/// Runs the full matrix: one record per spec, written in spec order by a
/// single writer, plus the summary tables and scatter data.
inline std::vector<RunRecord> run(const RunConfig& cfg) {
  std::vector<RunSpec> specs = expand(cfg);
  std::filesystem::create_directories(cfg.out_dir);

  if (cfg.mode == RunMode::ExportOnly) {
    for (const RunSpec& s : specs) export_one(s, cfg);
    return {};
  }

  std::size_t n = specs.size();
  std::vector<RunRecord> records(n);
  std::vector<char> done(n, 0);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  int workers = std::min<int>(cfg.workers, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        RunRecord rec = run_one(specs[i], cfg);
        {
          std::lock_guard<std::mutex> lock(mu);
          records[i] = std::move(rec);
          done[i] = 1;
        }
        cv.notify_one();
      }
    });

  // In-order single writer: later completions wait in their slots so the
  // records file order always matches the spec order.
  {
    detail::RecordWriter writer((std::filesystem::path(cfg.out_dir) / "records.tsv").string());
    std::unique_lock<std::mutex> lock(mu);
    for (std::size_t i = 0; i < n; ++i) {
      cv.wait(lock, [&] { return done[i] == 1; });
      writer.write(detail::record_line(records[i]));
    }
  }
  for (std::thread& t : pool) t.join();

  const std::pair<const char*, const char*> groupings[] = {
      {"problem", "summary_problem.tsv"},
      {"solver", "summary_solver.tsv"},
      {"scheme", "summary_scheme.tsv"},
      {"formulation", "summary_formulation.tsv"},
      {"problem,formulation", "summary_problem_formulation.tsv"},
      {"problem,scheme", "summary_problem_scheme.tsv"},
  };
  for (const auto& [fields, fname] : groupings)
    detail::write_text(std::filesystem::path(cfg.out_dir) / fname,
                       render_summary(summarize(records, group_by_from_string(fields))));
  detail::write_text(std::filesystem::path(cfg.out_dir) / "scatter.tsv",
                     render_scatter(scatter_data(records)));
  return records;
}

/// Parses a records file written by run().
inline std::vector<RunRecord> load_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open records file: " + path);
  std::string line;
  if (!std::getline(f, line) || line != std::string(detail::kRecordHeader).substr(
                                            0, std::string(detail::kRecordHeader).size() - 1))
    throw std::runtime_error("malformed records header in " + path);
  std::vector<RunRecord> records;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t tab = line.find('\t', pos);
      cols.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (cols.size() != 15) throw std::runtime_error("malformed record line in " + path);
    RunRecord r;
    r.problem = cols[0];
    r.scheme = cols[1];
    r.M = std::stoi(cols[2]);
    r.formulation = cols[3];
    r.form_param = std::stod(cols[4]);
    r.solver = cols[5];
    r.seed = std::stoull(cols[6]);
    r.status = cols[7];
    r.objective = std::stod(cols[8]);
    r.max_violation = std::stod(cols[9]);
    r.max_re = std::stod(cols[10]);
    r.nrmse = std::stod(cols[11]);
    r.outcome = outcome_from_string(cols[12]);
    r.time_s = std::stod(cols[13]);
    r.iterations = std::stoi(cols[14]);
    records.push_back(std::move(r));
  }
  return records;
}

/// Plain-text rendering of one grouping of a records file.
inline std::string report(const std::string& records_path, const std::string& group_by) {
  std::vector<RunRecord> records = load_records(records_path);
  std::vector<SummaryRow> rows = summarize(records, group_by_from_string(group_by));
  std::string out = render_summary(rows);
  char buf[64];
  std::snprintf(buf, sizeof buf, "# %zu records, %zu groups\n", records.size(), rows.size());
  return out + buf;
}

}  // namespace odefit
