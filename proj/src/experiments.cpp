#include "multisl/harness/experiments.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>

#include "multisl/multisl.hpp"

namespace multisl::harness {

using json = nlohmann::json;

namespace {

SolverOptions solver_options(const ExperimentConfig& cfg) {
  SolverOptions o;
  o.threads = cfg.run.threads;
  return o;
}

json to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(v(k));
  return out;
}

json to_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

std::string bare_message(const Error& e) {
  const std::string w = e.what();
  const auto prefix = std::string(to_string(e.code())) + ": ";
  return w.rfind(prefix, 0) == 0 ? w.substr(prefix.size()) : w;
}

[[noreturn]] void rethrow_with(const Error& e, const std::string& context) {
  throw Error(e.code(), context + ": " + bare_message(e));
}

// 1-based index of the dominant component.
int channel_tag(const Vector& gamma) {
  Eigen::Index k = 0;
  gamma.cwiseAbs().maxCoeff(&k);
  return static_cast<int>(k) + 1;
}

double relative_error(const Vector& got, const Vector& want) { return (got - want).norm() / want.norm(); }

json base_report(std::string_view command, const ExperimentConfig& cfg) {
  json r;
  r["command"] = command;
  r["status"] = "ok";
  r["seed"] = cfg.seed;
  r["config"] = cfg.source;
  return r;
}

struct Spectra {
  std::vector<EigenvalueSearch<double>> searches;
  SpectraSet<double> set;
};

Spectra compute_spectra(const ForwardSolver<double>& solver, std::size_t count, unsigned threads) {
  const std::size_t lists = solver.problems().perturbation_count() + 1;
  std::vector<EigenvalueSearch<double>> searches(lists);
  detail::parallel_for(lists, threads, [&](std::size_t k) {
    const Which which = k == 0 ? Which::base() : Which::perturbed(k - 1);
    try {
      searches[k] = solver.search_eigenvalues(which, count);
    } catch (const Error& e) {
      rethrow_with(e, "spectrum " + to_string(which));
    }
  });
  std::vector<std::vector<double>> perturbed;
  for (std::size_t k = 1; k < lists; ++k) perturbed.push_back(searches[k].eigenvalues);
  SpectraSet<double> set(searches[0].eigenvalues, std::move(perturbed));
  return {std::move(searches), std::move(set)};
}

std::vector<NormingVector<double>> direct_norming(const ForwardSolver<double>& solver, const std::vector<double>& base,
                                                  std::size_t count, unsigned threads) {
  count = std::min(count, base.size());
  std::vector<NormingVector<double>> out(count);
  detail::parallel_for(count, threads, [&](std::size_t n) {
    try {
      out[n] = solver.direct_norming_vector(Which::base(), base[n]);
    } catch (const Error& e) {
      std::ostringstream os;
      os.precision(17);
      os << "(base, lambda = " << base[n] << ")";
      rethrow_with(e, os.str());
    }
  });
  return out;
}

TailModel<double> tail_for(const ExperimentConfig& cfg, const SpectraSet<double>& spectra) {
  if (!cfg.run.tail) return {};
  return estimate_tail_model(spectra, cfg.problem.a, cfg.problem.channels);
}

[[noreturn]] void explicit_scheme(const std::string& field) {
  throw ConfigError(ConfigErrorCode::UnknownScheme, field,
                    "explicit perturbations have no linearization; use the jacobi or cross scheme");
}

std::vector<RecoveredNorming<double>> recover_with_config(const ExperimentConfig& cfg, const SpectraSet<double>& spectra,
                                                          const TailModel<double>& tail) {
  const auto& pc = cfg.problem.perturbations;
  RecoveryOptions<double> options;
  options.apply_tail = cfg.run.tail;
  if (pc.scheme == "cross") return recover_all(spectra, CrossScheme<double>{pc.cross}, tail, options);
  if (pc.scheme != "jacobi") explicit_scheme("problem.perturbations.scheme");
  if (cfg.problem.fallback) {
    const ForwardSolver<double> fb_solver(build_fallback_problem(cfg), solver_options(cfg));
    auto fb = compute_spectra(fb_solver, spectra.truncation(), cfg.run.threads);
    auto fb_tail = tail_for(cfg, fb.set);
    options.fallback = CrossFallback<double>{CrossScheme<double>{cfg.problem.fallback->cross}, std::move(fb.set),
                                             std::move(fb_tail)};
  }
  return recover_all(spectra, JacobiScheme<double>{pc.jacobi}, tail, options);
}

json spectra_json(const ForwardSolver<double>& solver, const Spectra& sp) {
  json out = json::array();
  for (std::size_t k = 0; k < sp.searches.size(); ++k) {
    const Which which = k == 0 ? Which::base() : Which::perturbed(k - 1);
    const auto& s = sp.searches[k];
    json e;
    e["which"] = to_string(which);
    e["h"] = to_json(solver.problems().left_h(which));
    e["eigenvalues"] = s.eigenvalues;
    e["weyl"] = {{"estimate", s.weyl_estimate},
                 {"count", s.eigenvalues.size()},
                 {"refinements", s.refinements},
                 {"evaluations", s.evaluations},
                 {"lower_bound", solver.spectral_lower_bound(which)}};
    out.push_back(e);
  }
  return out;
}

struct PotentialErrors {
  double sup_inner = 0;
  double sup = 0;
  double l2 = 0;
};

PotentialErrors potential_errors(const PotentialMatrix<double>& got, const PotentialMatrix<double>& truth,
                                 Eigen::Index stride, double inner_fraction) {
  const Grid<double>& grid = got.grid();
  const double a = grid.length();
  const VectorX<double> w = grid.simpson();
  PotentialErrors e;
  double l2 = 0;
  for (Eigen::Index j = 0; j < grid.size(); ++j) {
    const Matrix diff = got[j] - truth[j * stride];
    const double err = diff.cwiseAbs().maxCoeff();
    e.sup = std::max(e.sup, err);
    if (std::abs(grid.x(j) - a / 2) <= inner_fraction * a / 2 + 1e-12 * a) e.sup_inner = std::max(e.sup_inner, err);
    l2 += w(j) * diff.squaredNorm();
  }
  e.l2 = std::sqrt(std::max(0.0, l2));
  return e;
}

CsvTable potential_table(const PotentialMatrix<double>& got, const PotentialMatrix<double>& truth, Eigen::Index stride) {
  const Eigen::Index m = got.channels();
  CsvTable t{"potential", {"x"}, {}};
  for (const char* tag : {"rec", "true"})
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index c = r; c < m; ++c)
        t.header.push_back(std::string(tag) + "_" + std::to_string(r + 1) + std::to_string(c + 1));
  for (Eigen::Index j = 0; j < got.grid().size(); ++j) {
    std::vector<std::string> row{format_number(got.grid().x(j))};
    for (const Matrix* v : {&got[j], &truth[j * stride]})
      for (Eigen::Index r = 0; r < m; ++r)
        for (Eigen::Index c = r; c < m; ++c) row.push_back(format_number((*v)(r, c)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct GLRun {
  Reconstruction<double> result;
  Matrix reference_constant;
  std::vector<NormingVector<double>> reference_entries;
  ProblemSet<double> reference;
};

GLRun run_gl(const ExperimentConfig& cfg, const ProblemSet<double>& ps, std::vector<NormingVector<double>> entries,
             long index_offset) {
  const Eigen::Index m = ps.channels();
  Matrix c = Matrix::Zero(m, m);
  if (cfg.run.gl_reference == "asymptotic")
    c = asymptotic_reference_constant(entries, ps.base(), cfg.problem.a, index_offset);
  auto reference = ProblemSet<double>::single(PotentialMatrix<double>::constant(ps.potential().grid(), c), ps.base());
  SolverOptions so = solver_options(cfg);
  auto ref_entries = reference_spectral_data(reference, entries.size(), so);
  GLOptions go;
  go.stride = cfg.run.gl_stride;
  go.threads = cfg.run.threads;
  SpectralData<double> data{std::move(entries), reference};
  auto result = reconstruct(data, ref_entries, go);
  return {std::move(result), c, std::move(ref_entries), std::move(reference)};
}

json gl_json(const GLRun& gl, const PotentialErrors& e, const Tolerances& tol) {
  const auto& d = gl.result.diagnostics;
  return {{"truncation", d.truncation},
          {"nodes", gl.result.potential.grid().size()},
          {"reference_constant", to_json(gl.reference_constant)},
          {"max_residual", d.max_residual},
          {"max_inverse_rcond", d.max_inverse_rcond},
          {"max_asymmetry", d.max_asymmetry},
          {"sup_error_inner", e.sup_inner},
          {"sup_error", e.sup},
          {"l2_error", e.l2},
          {"inner_fraction", tol.inner_fraction},
          {"tolerance", tol.potential_sup},
          {"pass", e.sup_inner <= tol.potential_sup}};
}

json recovery_json(const std::vector<RecoveredNorming<double>>& rec, const std::vector<NormingVector<double>>& direct,
                   std::size_t check_n, double& max_error, bool& failed, CsvTable& table) {
  const Eigen::Index m = direct.empty() ? 1 : direct.front().gamma.size();
  table = CsvTable{"recovered", {"n", "lambda"}, {}};
  for (Eigen::Index k = 0; k < m; ++k) table.header.push_back("gamma_" + std::to_string(k + 1));
  for (Eigen::Index k = 0; k < m; ++k) table.header.push_back("direct_" + std::to_string(k + 1));
  table.header.push_back("rel_error");

  json rows = json::array();
  max_error = 0;
  failed = false;
  for (const auto& r : rec) {
    json e;
    e["n"] = r.index + 1;
    e["lambda"] = r.value.lambda;
    e["ok"] = r.ok;
    const bool checked = r.index < check_n;
    if (!r.ok) {
      e["error"] = {{"code", to_string(*r.error)}, {"message", r.message}};
      if (checked) failed = true;
      rows.push_back(e);
      continue;
    }
    e["gamma"] = to_json(r.value.gamma);
    e["condition"] = r.condition;
    e["tail_magnitude"] = r.tail_magnitude;
    e["used_fallback"] = r.used_fallback;
    std::vector<std::string> row{std::to_string(r.index + 1), format_number(r.value.lambda)};
    for (Eigen::Index k = 0; k < m; ++k) row.push_back(format_number(r.value.gamma(k)));
    if (r.index < direct.size()) {
      const double err = relative_error(r.value.gamma, direct[r.index].gamma);
      e["direct"] = to_json(direct[r.index].gamma);
      e["rel_error"] = err;
      if (checked) max_error = std::max(max_error, err);
      for (Eigen::Index k = 0; k < m; ++k) row.push_back(format_number(direct[r.index].gamma(k)));
      row.push_back(format_number(err));
    } else {
      for (Eigen::Index k = 0; k <= m; ++k) row.emplace_back("");
    }
    table.rows.push_back(std::move(row));
    rows.push_back(e);
  }
  return rows;
}

}  // namespace

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunOutcome run_forward(const ExperimentConfig& cfg) {
  RunOutcome out;
  out.report = base_report("forward", cfg);
  const ForwardSolver<double> solver(build_problem(cfg), solver_options(cfg));
  const std::size_t n = cfg.run.n_max;
  const auto sp = compute_spectra(solver, n, cfg.run.threads);
  const auto norming = direct_norming(solver, sp.set.base(), n, cfg.run.threads);

  const std::size_t lists = sp.searches.size();
  std::vector<std::vector<double>> residuals(lists, std::vector<double>(n));
  detail::parallel_for(lists * n, cfg.run.threads, [&](std::size_t k) {
    const std::size_t list = k / n, idx = k % n;
    const Which which = list == 0 ? Which::base() : Which::perturbed(list - 1);
    residuals[list][idx] = solver.eigen_residual(which, sp.searches[list].eigenvalues[idx]);
  });

  const Grid<double>& grid = solver.problems().potential().grid();
  out.report["channels"] = cfg.problem.channels;
  out.report["a"] = cfg.problem.a;
  out.report["n_points"] = grid.size();
  out.report["truncation"] = n;
  json spectra = spectra_json(solver, sp);
  for (std::size_t k = 0; k < lists; ++k) {
    spectra[k]["residuals"] = residuals[k];
    spectra[k]["max_residual"] = *std::max_element(residuals[k].begin(), residuals[k].end());
  }
  out.report["spectra"] = spectra;

  const Eigen::Index m = cfg.problem.channels;
  CsvTable spec_table{"spectra", {"n", "i", "lambda", "residual"}, {}};
  for (std::size_t k = 0; k < lists; ++k)
    for (std::size_t idx = 0; idx < n; ++idx)
      spec_table.rows.push_back({std::to_string(idx + 1), std::to_string(k), format_number(sp.searches[k].eigenvalues[idx]),
                                 format_number(residuals[k][idx])});
  CsvTable norm_table{"norming", {"n", "lambda", "channel"}, {}};
  for (Eigen::Index c = 0; c < m; ++c) norm_table.header.push_back("gamma_" + std::to_string(c + 1));

  json nv = json::array();
  for (std::size_t idx = 0; idx < norming.size(); ++idx) {
    const auto& g = norming[idx];
    nv.push_back({{"n", idx + 1},
                  {"lambda", g.lambda},
                  {"gamma", to_json(g.gamma)},
                  {"channel", channel_tag(g.gamma)},
                  {"singular_value", residuals[0][idx]}});
    std::vector<std::string> row{std::to_string(idx + 1), format_number(g.lambda), std::to_string(channel_tag(g.gamma))};
    for (Eigen::Index c = 0; c < m; ++c) row.push_back(format_number(g.gamma(c)));
    norm_table.rows.push_back(std::move(row));
  }
  out.report["norming_vectors"] = nv;
  out.tables = {std::move(spec_table), std::move(norm_table)};
  return out;
}

RunOutcome run_recover(const ExperimentConfig& cfg) {
  RunOutcome out;
  out.report = base_report("recover", cfg);
  const ForwardSolver<double> solver(build_problem(cfg), solver_options(cfg));
  const auto sp = compute_spectra(solver, cfg.run.n_max, cfg.run.threads);
  const auto tail = tail_for(cfg, sp.set);
  const auto rec = recover_with_config(cfg, sp.set, tail);
  const auto direct = direct_norming(solver, sp.set.base(), cfg.run.n_max, cfg.run.threads);

  double max_error = 0;
  bool failed = false;
  CsvTable table;
  out.report["truncation"] = cfg.run.n_max;
  out.report["scheme"] = cfg.problem.perturbations.scheme;
  if (cfg.run.tail) {
    out.report["tail"] = {{"shift_estimates", tail.shift_estimates},
                          {"asymptotic_offset", tail.asymptotic_offset},
                          {"index_offset", tail.index_offset}};
  }
  out.report["recovered"] = recovery_json(rec, direct, cfg.run.check_n, max_error, failed, table);
  out.report["check_n"] = cfg.run.check_n;
  out.report["max_rel_error"] = max_error;
  out.report["tolerance"] = cfg.run.tol.gamma_rel;
  out.tables.push_back(std::move(table));
  if (failed) {
    out.report["status"] = "recovery_failure";
    out.exit_code = kExitSolver;
  } else if (!(max_error <= cfg.run.tol.gamma_rel)) {
    out.report["status"] = "tolerance_failure";
    out.exit_code = kExitTolerance;
  }
  return out;
}

RunOutcome run_reconstruct(const ExperimentConfig& cfg) {
  RunOutcome out;
  out.report = base_report("reconstruct", cfg);
  const ProblemSet<double> ps = build_problem(cfg);
  const ForwardSolver<double> solver(ps, solver_options(cfg));
  const std::size_t n = cfg.run.gl_n;
  const auto base = solver.locate_eigenvalues(Which::base(), n);
  auto entries = direct_norming(solver, base, n, cfg.run.threads);
  const long offset = infer_index_offset(base, cfg.problem.a, cfg.problem.channels);
  const GLRun gl = run_gl(cfg, ps, std::move(entries), offset);
  const auto& tol = cfg.run.tol;
  const auto e = potential_errors(gl.result.potential, ps.potential(), cfg.run.gl_stride, tol.inner_fraction);

  // Reference data against its own reference must give the reference back.
  GLOptions go;
  go.stride = cfg.run.gl_stride;
  go.threads = cfg.run.threads;
  const auto identity = reconstruct(SpectralData<double>{gl.reference_entries, gl.reference}, gl.reference_entries, go);
  const auto ie = potential_errors(identity.potential, gl.reference.potential(), cfg.run.gl_stride, 1.0);

  out.report["gl"] = gl_json(gl, e, tol);
  out.report["identity"] = {{"sup_error", ie.sup}, {"tolerance", 1e-6}, {"pass", ie.sup <= 1e-6}};
  out.tables.push_back(potential_table(gl.result.potential, ps.potential(), cfg.run.gl_stride));
  if (!(e.sup_inner <= tol.potential_sup) || !(ie.sup <= 1e-6)) {
    out.report["status"] = "tolerance_failure";
    out.exit_code = kExitTolerance;
  }
  return out;
}

RunOutcome run_roundtrip(const ExperimentConfig& cfg) {
  RunOutcome out;
  out.report = base_report("roundtrip", cfg);
  const ProblemSet<double> ps = build_problem(cfg);
  const ForwardSolver<double> solver(ps, solver_options(cfg));
  const auto sp = compute_spectra(solver, cfg.run.n_max, cfg.run.threads);
  const auto tail = tail_for(cfg, sp.set);
  const auto rec = recover_with_config(cfg, sp.set, tail);
  const auto direct = direct_norming(solver, sp.set.base(), cfg.run.n_max, cfg.run.threads);
  const auto& tol = cfg.run.tol;

  double max_error = 0;
  bool failed = false;
  CsvTable table;
  json stage;
  stage["recovered"] = recovery_json(rec, direct, cfg.run.check_n, max_error, failed, table);
  stage["check_n"] = cfg.run.check_n;
  stage["max_rel_error"] = max_error;
  stage["tolerance"] = tol.gamma_rel;
  stage["pass"] = !failed && max_error <= tol.gamma_rel;
  out.report["recovery"] = stage;
  out.tables.push_back(std::move(table));

  std::vector<NormingVector<double>> entries;
  for (std::size_t n = 0; n < cfg.run.gl_n && n < rec.size(); ++n) {
    if (!rec[n].ok) {
      out.report["status"] = "stage_failure";
      out.report["failed_stage"] = "recover";
      out.report["error"] = {{"code", to_string(*rec[n].error)}, {"message", rec[n].message}, {"n", n + 1}};
      out.exit_code = kExitSolver;
      return out;
    }
    entries.push_back(rec[n].value);
  }
  const long offset = cfg.run.tail ? tail.index_offset : infer_index_offset(sp.set.base(), cfg.problem.a, cfg.problem.channels);
  const GLRun gl = run_gl(cfg, ps, std::move(entries), offset);
  const auto e = potential_errors(gl.result.potential, ps.potential(), cfg.run.gl_stride, tol.inner_fraction);
  out.report["gl"] = gl_json(gl, e, tol);
  out.tables.push_back(potential_table(gl.result.potential, ps.potential(), cfg.run.gl_stride));

  if (failed) {
    out.report["status"] = "recovery_failure";
    out.exit_code = kExitSolver;
  } else if (!(max_error <= tol.gamma_rel) || !(e.sup_inner <= tol.potential_sup)) {
    out.report["status"] = "tolerance_failure";
    out.exit_code = kExitTolerance;
  }
  return out;
}

RunOutcome run_verify(const ExperimentConfig& cfg) {
  RunOutcome out;
  out.report = base_report("verify", cfg);
  const ForwardSolver<double> solver(build_problem(cfg), solver_options(cfg));
  const auto& tol = cfg.run.tol;
  const unsigned threads = cfg.run.threads;
  const Eigen::Index m = cfg.problem.channels;
  const auto sp = compute_spectra(solver, cfg.run.n_max, threads);
  const auto& base = sp.set.base();
  const std::size_t depth = std::max(cfg.run.check_n, cfg.run.ratio_n);
  const auto direct = direct_norming(solver, base, depth, threads);
  const std::size_t pert = sp.set.perturbation_count();
  bool all_pass = true;

  // Green identity over randomized (v, lambda, n, i); sample 0 uses v = 0.
  {
    struct Sample {
      std::size_t n, i;
      double lambda;
      Vector v;
      GreenIdentityTerms<double> terms;
      std::optional<std::string> error;
    };
    std::mt19937_64 rng(cfg.seed);
    const std::size_t top = std::min(cfg.run.ratio_n, base.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_n(0, top - 1), pick_i(0, pert - 1);
    std::uniform_real_distribution<double> pick_u(0.2, 0.8);
    std::normal_distribution<double> normal;
    std::vector<Sample> samples(cfg.run.green_samples);
    for (std::size_t s = 0; s < samples.size(); ++s) {
      auto& smp = samples[s];
      smp.n = pick_n(rng);
      smp.i = pick_i(rng);
      smp.lambda = base[smp.n] + pick_u(rng) * (base[smp.n + 1] - base[smp.n]);
      smp.v = Vector(m);
      for (Eigen::Index k = 0; k < m; ++k) smp.v(k) = normal(rng);
      if (s == 0) smp.v.setZero();
      else smp.v.normalize();
    }
    detail::parallel_for(samples.size(), threads, [&](std::size_t s) {
      auto& smp = samples[s];
      try {
        smp.terms = solver.green_identity(smp.i, smp.lambda, base[smp.n], smp.v);
      } catch (const Error& e) {
        smp.error = e.what();
      }
    });
    double worst = 0, worst_corrected = 0;
    bool pass = true;
    json rows = json::array();
    CsvTable t{"green", {"sample", "n", "i", "lambda", "lhs", "rhs", "boundary_defect", "residual", "corrected_residual"}, {}};
    for (std::size_t s = 0; s < samples.size(); ++s) {
      const auto& smp = samples[s];
      json e{{"sample", s}, {"n", smp.n + 1}, {"i", smp.i + 1}, {"lambda", smp.lambda}, {"v", to_json(smp.v)}};
      if (smp.error) {
        e["error"] = *smp.error;
        pass = false;
      } else {
        const double res = smp.terms.residual();
        const double corrected = std::abs(smp.terms.lhs + smp.terms.boundary_defect - smp.terms.rhs);
        e["lhs"] = smp.terms.lhs;
        e["rhs"] = smp.terms.rhs;
        e["boundary_defect"] = smp.terms.boundary_defect;
        e["residual"] = res;
        e["corrected_residual"] = corrected;
        worst = std::max(worst, res);
        worst_corrected = std::max(worst_corrected, corrected);
        if (!(res <= tol.green)) pass = false;
        t.rows.push_back({std::to_string(s), std::to_string(smp.n + 1), std::to_string(smp.i + 1), format_number(smp.lambda),
                          format_number(smp.terms.lhs), format_number(smp.terms.rhs),
                          format_number(smp.terms.boundary_defect), format_number(res), format_number(corrected)});
      }
      rows.push_back(e);
    }
    out.report["green"] = {{"pass", pass},
                           {"tolerance", tol.green},
                           {"max_residual", worst},
                           {"max_corrected_residual", worst_corrected},
                           {"samples", rows}};
    out.tables.push_back(std::move(t));
    all_pass = all_pass && pass;
  }

  // Spectral residue against -gamma^T (h_i - h) gamma.
  {
    const std::size_t count = std::min(cfg.run.check_n, direct.size());
    std::vector<double> residue(count * pert), target(count * pert);
    std::vector<std::optional<std::string>> errors(count * pert);
    detail::parallel_for(count * pert, threads, [&](std::size_t k) {
      const std::size_t n = k / pert, i = k % pert;
      target[k] = -quadratic_form(solver.problems().difference(i), direct[n].gamma);
      try {
        residue[k] = solver.spectral_residue(i, base[n]);
      } catch (const Error& e) {
        errors[k] = e.what();
      }
    });
    double worst = 0;
    bool pass = true;
    json rows = json::array();
    for (std::size_t k = 0; k < count * pert; ++k) {
      json e{{"n", k / pert + 1}, {"i", k % pert + 1}, {"target", target[k]}};
      if (errors[k]) {
        e["error"] = *errors[k];
        pass = false;
      } else {
        const double rel = std::abs(residue[k] - target[k]) / std::abs(target[k]);
        e["residue"] = residue[k];
        e["rel_error"] = rel;
        worst = std::max(worst, rel);
        if (!(rel <= tol.residue_rel)) pass = false;
      }
      rows.push_back(e);
    }
    out.report["residue"] = {{"pass", pass}, {"tolerance", tol.residue_rel}, {"max_rel_error", worst}, {"entries", rows}};
    all_pass = all_pass && pass;
  }

  // Consistency ratios of the product formula with direct norming vectors.
  {
    const auto tail = tail_for(cfg, sp.set);
    const std::size_t count = std::min(cfg.run.ratio_n, direct.size());
    std::vector<double> ratio(count * pert);
    std::vector<std::optional<std::string>> errors(count * pert);
    detail::parallel_for(count * pert, threads, [&](std::size_t k) {
      const std::size_t n = k / pert, i = k % pert;
      try {
        double p = truncated_product(n, i, sp.set);
        if (cfg.run.tail) p *= tail_correction(n, i, tail, sp.set);
        const double qf = quadratic_form(solver.problems().difference(i), direct[n].gamma);
        ratio[k] = p * qf / (sp.set.perturbed(i)[n] - base[n]);
      } catch (const Error& e) {
        errors[k] = e.what();
      }
    });
    double worst = 0;
    bool pass = true;
    json rows = json::array();
    CsvTable t{"ratios", {"n", "i", "ratio"}, {}};
    for (std::size_t k = 0; k < count * pert; ++k) {
      json e{{"n", k / pert + 1}, {"i", k % pert + 1}};
      if (errors[k]) {
        e["error"] = *errors[k];
        pass = false;
      } else {
        e["ratio"] = ratio[k];
        worst = std::max(worst, std::abs(ratio[k] - 1));
        if (!(std::abs(ratio[k] - 1) <= tol.ratio)) pass = false;
        t.rows.push_back({std::to_string(k / pert + 1), std::to_string(k % pert + 1), format_number(ratio[k])});
      }
      rows.push_back(e);
    }
    out.report["ratio"] = {{"pass", pass},      {"tolerance", tol.ratio}, {"truncation", sp.set.truncation()},
                           {"tail", cfg.run.tail}, {"max_deviation", worst}, {"entries", rows}};
    out.tables.push_back(std::move(t));
    all_pass = all_pass && pass;
  }

  // Orthonormality of the eigenfunctions y_n = phi(x, lambda_n) gamma_n.
  {
    const std::size_t count = std::min(cfg.run.check_n, direct.size());
    const auto& grid = solver.problems().potential().grid();
    const VectorX<double> w = grid.simpson();
    std::vector<MatrixX<double>> values(count);
    detail::parallel_for(count, threads, [&](std::size_t n) {
      const auto tr = solver.trace(Which::base(), base[n]);
      values[n].resize(m, grid.size());
      for (Eigen::Index k = 0; k < grid.size(); ++k) values[n].col(k) = tr.values[static_cast<std::size_t>(k)] * direct[n].gamma;
    });
    MatrixX<double> gram(count, count);
    for (std::size_t p = 0; p < count; ++p)
      for (std::size_t q = 0; q < count; ++q)
        gram(p, q) = (values[p].cwiseProduct(values[q]).colwise().sum().transpose().array() * w.array()).sum();
    const double dev = count ? (gram - MatrixX<double>::Identity(count, count)).cwiseAbs().maxCoeff() : 0.0;
    const bool pass = dev <= tol.orthonormality;
    out.report["orthonormality"] = {{"pass", pass}, {"tolerance", tol.orthonormality}, {"count", count}, {"max_deviation", dev}};
    all_pass = all_pass && pass;
  }

  out.report["all_pass"] = all_pass;
  if (!all_pass) {
    out.report["status"] = "tolerance_failure";
    out.exit_code = kExitTolerance;
  }
  return out;
}

RunOutcome run_command(std::string_view command, const ExperimentConfig& cfg) {
  try {
    if (command == "forward") return run_forward(cfg);
    if (command == "recover") return run_recover(cfg);
    if (command == "reconstruct") return run_reconstruct(cfg);
    if (command == "roundtrip") return run_roundtrip(cfg);
    if (command == "verify") return run_verify(cfg);
    throw ConfigError(ConfigErrorCode::UnknownOption, "command", "unknown command '" + std::string(command) + "'");
  } catch (const ConfigError& e) {
    RunOutcome out;
    out.exit_code = kExitConfig;
    out.report = base_report(command, cfg);
    out.report["status"] = "config_error";
    out.report["error"] = {{"code", code_name(e.code())}, {"field", e.field()}, {"message", e.what()}};
    return out;
  } catch (const Error& e) {
    RunOutcome out;
    out.exit_code = kExitSolver;
    out.report = base_report(command, cfg);
    out.report["status"] = "solver_error";
    out.report["error"] = {{"code", to_string(e.code())}, {"message", bare_message(e)}};
    return out;
  }
}

void write_outputs(const RunOutcome& outcome, std::string_view command, const std::filesystem::path& dir, bool csv) {
  std::filesystem::create_directories(dir);
  json report = outcome.report;
  report["exit_code"] = outcome.exit_code;
  {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    report["timestamp"] = buf;
  }
  const std::string stem(command);
  {
    std::ofstream f(dir / (stem + ".json"));
    f << report.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / (stem + ".json")).string());
  }
  if (!csv) return;
  for (const auto& t : outcome.tables) {
    std::ofstream f(dir / (stem + "_" + t.name + ".csv"));
    for (std::size_t k = 0; k < t.header.size(); ++k) f << (k ? "," : "") << t.header[k];
    f << '\n';
    for (const auto& row : t.rows) {
      for (std::size_t k = 0; k < row.size(); ++k) f << (k ? "," : "") << row[k];
      f << '\n';
    }
  }
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Multichannel Sturm-Liouville forward, inverse and round-trip experiments"};
  std::string command, config_path, out_dir;
  std::optional<std::size_t> n_max;
  std::optional<std::uint64_t> seed;
  app.add_option("command", command, "forward | recover | reconstruct | roundtrip | verify")
      ->required()
      ->check(CLI::IsMember({"forward", "recover", "reconstruct", "roundtrip", "verify"}));
  app.add_option("--config", config_path, "JSON experiment configuration")->required();
  app.add_option("--out", out_dir, "output directory (overrides run.out)");
  app.add_option("--n-max", n_max, "truncation depth (overrides run.n_max)");
  app.add_option("--seed", seed, "seed for randomized sweeps (overrides seed)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  ExperimentConfig cfg;
  try {
    json doc = load_document(config_path);
    if (doc.is_object()) {
      if ((n_max || !out_dir.empty()) && !doc.contains("run")) doc["run"] = json::object();
      if (n_max) {
        json& run = doc["run"];
        run["n_max"] = *n_max;
        // depths tied to the truncation follow it down
        for (const char* key : {"gl_n", "check_n", "ratio_n"})
          if (run.contains(key) && run[key].is_number_unsigned() && run[key].get<std::size_t>() > *n_max) run[key] = *n_max;
      }
      if (!out_dir.empty()) doc["run"]["out"] = out_dir;
      if (seed) doc["seed"] = *seed;
    }
    cfg = parse_config(doc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    if (!out_dir.empty()) {
      RunOutcome out;
      out.exit_code = kExitConfig;
      out.report = {{"command", command},
                    {"status", "config_error"},
                    {"error", {{"code", code_name(e.code())}, {"field", e.field()}, {"message", e.what()}}}};
      try {
        write_outputs(out, command, out_dir, false);
      } catch (const std::exception&) {
      }
    }
    return kExitConfig;
  }

  const RunOutcome outcome = run_command(command, cfg);
  const std::filesystem::path dir = cfg.run.out_dir;
  try {
    write_outputs(outcome, command, dir, cfg.run.csv);
  } catch (const std::exception& e) {
    std::cerr << "cannot write outputs: " << e.what() << '\n';
    return kExitSolver;
  }
  const std::string status = outcome.report.value("status", "ok");
  std::cout << command << ": " << status << " (exit " << outcome.exit_code << ") -> " << (dir / (command + ".json")).string()
            << '\n';
  if (outcome.report.contains("error")) std::cerr << outcome.report["error"].dump() << '\n';
  return outcome.exit_code;
}

}  // namespace multisl::harness
