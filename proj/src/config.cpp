#include "multisl/harness/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "multisl/forward_solver.hpp"

namespace multisl::harness {

std::string_view code_name(ConfigErrorCode code) {
  switch (code) {
    case ConfigErrorCode::Parse: return "config.parse";
    case ConfigErrorCode::MissingField: return "config.missing_field";
    case ConfigErrorCode::WrongType: return "config.wrong_type";
    case ConfigErrorCode::Channels: return "config.channels";
    case ConfigErrorCode::Grid: return "config.grid";
    case ConfigErrorCode::UnknownPreset: return "config.unknown_preset";
    case ConfigErrorCode::Dimension: return "config.dimension";
    case ConfigErrorCode::NonFinite: return "config.non_finite";
    case ConfigErrorCode::Asymmetric: return "config.asymmetric";
    case ConfigErrorCode::PerturbationCount: return "config.perturbation_count";
    case ConfigErrorCode::RedundantPerturbation: return "config.redundant_perturbation";
    case ConfigErrorCode::Pivot: return "config.pivot";
    case ConfigErrorCode::UnknownScheme: return "config.unknown_scheme";
    case ConfigErrorCode::Truncation: return "config.truncation";
    case ConfigErrorCode::Tolerance: return "config.tolerance";
    case ConfigErrorCode::Lipschitz: return "config.lipschitz";
    case ConfigErrorCode::UnknownOption: return "config.unknown_option";
  }
  return "config.unknown";
}

ConfigError::ConfigError(ConfigErrorCode code, std::string field, const std::string& what)
    : std::runtime_error(std::string(code_name(code)) + " at " + field + ": " + what),
      code_(code),
      field_(std::move(field)) {}

namespace {

using nlohmann::json;

[[noreturn]] void fail(ConfigErrorCode code, const std::string& field, const std::string& what) {
  throw ConfigError(code, field, what);
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items())
    if (!keys.count(k)) fail(ConfigErrorCode::UnknownOption, join(path, k), "unrecognised key");
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.contains(key)) fail(ConfigErrorCode::MissingField, join(path, key), "required field is missing");
  return obj.at(key);
}

const json& object_at(const json& obj, const std::string& key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_object()) fail(ConfigErrorCode::WrongType, join(path, key), "expected an object");
  return v;
}

double number(const json& v, const std::string& field) {
  if (!v.is_number()) fail(ConfigErrorCode::WrongType, field, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(ConfigErrorCode::NonFinite, field, "value is not finite");
  return x;
}

double number_or(const json& obj, const std::string& key, const std::string& path, double fallback) {
  return obj.contains(key) ? number(obj.at(key), join(path, key)) : fallback;
}

long integer(const json& v, const std::string& field) {
  if (!v.is_number_integer()) fail(ConfigErrorCode::WrongType, field, "expected an integer");
  return v.get<long>();
}

long integer_or(const json& obj, const std::string& key, const std::string& path, long fallback) {
  return obj.contains(key) ? integer(obj.at(key), join(path, key)) : fallback;
}

std::string string_or(const json& obj, const std::string& key, const std::string& path, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_string()) fail(ConfigErrorCode::WrongType, join(path, key), "expected a string");
  return obj.at(key).get<std::string>();
}

bool bool_or(const json& obj, const std::string& key, const std::string& path, bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_boolean()) fail(ConfigErrorCode::WrongType, join(path, key), "expected true or false");
  return obj.at(key).get<bool>();
}

std::vector<double> numbers(const json& v, const std::string& field, std::size_t expected) {
  if (!v.is_array()) fail(ConfigErrorCode::WrongType, field, "expected an array of numbers");
  if (v.size() != expected) {
    std::ostringstream os;
    os << "expected " << expected << " entries, got " << v.size();
    fail(ConfigErrorCode::Dimension, field, os.str());
  }
  std::vector<double> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(number(v[k], field + "[" + std::to_string(k) + "]"));
  return out;
}

/// Nested rows or a flat row-major array of m*m numbers.
Matrix matrix(const json& v, const std::string& field, Eigen::Index m, bool symmetric = true) {
  if (!v.is_array()) fail(ConfigErrorCode::WrongType, field, "expected a matrix (nested rows or flat row-major)");
  Matrix out(m, m);
  const auto mm = static_cast<std::size_t>(m);
  if (!v.empty() && v[0].is_array()) {
    if (v.size() != mm) fail(ConfigErrorCode::Dimension, field, "expected " + std::to_string(m) + " rows");
    for (std::size_t r = 0; r < mm; ++r) {
      const auto row = numbers(v[r], field + "[" + std::to_string(r) + "]", mm);
      for (std::size_t c = 0; c < mm; ++c) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
    }
  } else {
    const auto flat = numbers(v, field, mm * mm);
    for (std::size_t r = 0; r < mm; ++r)
      for (std::size_t c = 0; c < mm; ++c)
        out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = flat[r * mm + c];
  }
  if (symmetric) {
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index c = r + 1; c < m; ++c)
        if (std::abs(out(r, c) - out(c, r)) > 1e-12 * (1 + std::abs(out(r, c))))
          fail(ConfigErrorCode::Asymmetric, field, "matrix is not symmetric");
  }
  return out;
}

Matrix matrix_or_zero(const json& obj, const std::string& key, const std::string& path, Eigen::Index m) {
  return obj.contains(key) ? matrix(obj.at(key), join(path, key), m) : Matrix::Zero(m, m);
}

Eigen::Index pivot_of(const json& obj, const std::string& path, Eigen::Index m) {
  const long p = integer_or(obj, "pivot", path, 1);
  if (p < 1 || p > m) fail(ConfigErrorCode::Pivot, join(path, "pivot"), "pivot must be in [1, " + std::to_string(m) + "]");
  return static_cast<Eigen::Index>(p - 1);
}

PerturbationConfig parse_perturbations(const json& obj, const std::string& path, Eigen::Index m) {
  reject_unknown(obj, path, {"scheme", "pivot", "scale", "entries", "rows", "matrices"});
  PerturbationConfig out;
  out.scheme = string_or(obj, "scheme", path, "jacobi");
  const auto mm = static_cast<std::size_t>(m);
  const auto count_check = [&](const json& arr, const std::string& key) {
    if (!arr.is_array()) fail(ConfigErrorCode::WrongType, join(path, key), "expected an array");
    if (arr.size() != mm) {
      std::ostringstream os;
      os << "expected " << m << " perturbations, got " << arr.size();
      fail(ConfigErrorCode::PerturbationCount, join(path, key), os.str());
    }
  };
  if (out.scheme == "jacobi") {
    out.pivot = pivot_of(obj, path, m);
    if (obj.contains("entries")) {
      const json& arr = obj.at("entries");
      count_check(arr, "entries");
      for (std::size_t i = 0; i < mm; ++i) {
        const std::string f = join(path, "entries[" + std::to_string(i) + "]");
        if (!arr[i].is_object()) fail(ConfigErrorCode::WrongType, f, "expected an object");
        reject_unknown(arr[i], f, {"diagonal", "off"});
        PerturbationJacobi<double> p;
        p.pivot = out.pivot;
        p.diagonal = number_or(arr[i], "diagonal", f, 0.0);
        p.off = Vector::Zero(m - 1);
        if (arr[i].contains("off")) {
          const auto off = numbers(arr[i].at("off"), join(f, "off"), mm - 1);
          for (std::size_t k = 0; k + 1 < mm; ++k) p.off(static_cast<Eigen::Index>(k)) = off[k];
        }
        out.jacobi.push_back(p);
      }
    } else {
      const double s = number(require(obj, "scale", path), join(path, "scale"));
      for (Eigen::Index i = 0; i < m; ++i) {
        PerturbationJacobi<double> p{out.pivot, i == 0 ? s : 0.0, Vector::Zero(m - 1)};
        if (i > 0) p.off(i - 1) = s / 2;
        out.jacobi.push_back(p);
      }
    }
    for (const auto& p : out.jacobi) out.differences.push_back(assemble_perturbation(p));
  } else if (out.scheme == "cross") {
    out.pivot = pivot_of(obj, path, m);
    if (obj.contains("rows")) {
      const json& arr = obj.at("rows");
      count_check(arr, "rows");
      for (std::size_t i = 0; i < mm; ++i) {
        const auto row = numbers(arr[i], join(path, "rows[" + std::to_string(i) + "]"), mm);
        PerturbationCross<double> p{out.pivot, Vector(m)};
        for (std::size_t k = 0; k < mm; ++k) p.row(static_cast<Eigen::Index>(k)) = row[k];
        out.cross.push_back(p);
      }
    } else {
      const double s = number(require(obj, "scale", path), join(path, "scale"));
      for (Eigen::Index i = 0; i < m; ++i) {
        PerturbationCross<double> p{out.pivot, Vector::Zero(m)};
        p.row(i) = i == out.pivot ? s : s / 2;
        out.cross.push_back(p);
      }
    }
    for (const auto& p : out.cross) out.differences.push_back(assemble_perturbation(p));
  } else if (out.scheme == "explicit") {
    const json& arr = require(obj, "matrices", path);
    count_check(arr, "matrices");
    for (std::size_t i = 0; i < mm; ++i)
      out.differences.push_back(matrix(arr[i], join(path, "matrices[" + std::to_string(i) + "]"), m));
  } else {
    fail(ConfigErrorCode::UnknownScheme, join(path, "scheme"), "unknown scheme '" + out.scheme + "'");
  }
  return out;
}

void check_redundant(const PerturbationConfig& p, const Matrix& h, const std::string& path) {
  const double scale = 1 + h.cwiseAbs().maxCoeff();
  for (std::size_t i = 0; i < p.differences.size(); ++i)
    if (!(p.differences[i].cwiseAbs().maxCoeff() > 1e-12 * scale))
      fail(ConfigErrorCode::RedundantPerturbation, path + "[" + std::to_string(i) + "]",
           "h_" + std::to_string(i + 1) + " equals h");
}

PotentialConfig parse_potential(const json& obj, const std::string& path, Eigen::Index m) {
  reject_unknown(obj, path, {"preset", "thresholds", "coupling", "width", "center", "samples", "lipschitz_cap"});
  PotentialConfig out;
  out.preset = string_or(obj, "preset", path, "free");
  static const std::set<std::string> presets{"free", "decoupled", "coupled-sine", "coupled-gauss", "table"};
  if (!presets.count(out.preset))
    fail(ConfigErrorCode::UnknownPreset, join(path, "preset"), "unknown preset '" + out.preset + "'");
  if (obj.contains("thresholds")) {
    out.thresholds = numbers(obj.at("thresholds"), join(path, "thresholds"), static_cast<std::size_t>(m));
  } else if (out.preset == "decoupled") {
    fail(ConfigErrorCode::MissingField, join(path, "thresholds"), "the decoupled preset needs thresholds");
  }
  out.coupling = number_or(obj, "coupling", path, out.preset == "coupled-sine" || out.preset == "coupled-gauss" ? 1.0 : 0.0);
  if ((out.preset == "free" || out.preset == "decoupled") && out.coupling != 0)
    fail(ConfigErrorCode::UnknownOption, join(path, "coupling"), "preset '" + out.preset + "' has no coupling");
  out.width = number_or(obj, "width", path, 0.15);
  out.center = number_or(obj, "center", path, 0.5);
  if (!(out.width > 0)) fail(ConfigErrorCode::Tolerance, join(path, "width"), "width must be positive");
  out.lipschitz_cap = number_or(obj, "lipschitz_cap", path, 1e6);
  if (!(out.lipschitz_cap > 0)) fail(ConfigErrorCode::Tolerance, join(path, "lipschitz_cap"), "cap must be positive");
  if (out.preset == "table") {
    const json& arr = require(obj, "samples", path);
    if (!arr.is_array()) fail(ConfigErrorCode::WrongType, join(path, "samples"), "expected an array of matrices");
    for (std::size_t k = 0; k < arr.size(); ++k)
      out.table.push_back(matrix(arr[k], join(path, "samples[" + std::to_string(k) + "]"), m));
  } else if (obj.contains("samples")) {
    fail(ConfigErrorCode::UnknownOption, join(path, "samples"), "samples are only used by the table preset");
  }
  return out;
}

double positive(const json& obj, const std::string& key, const std::string& path, double fallback) {
  const double v = number_or(obj, key, path, fallback);
  if (!(v > 0)) fail(ConfigErrorCode::Tolerance, join(path, key), "must be positive");
  return v;
}

std::size_t count_or(const json& obj, const std::string& key, const std::string& path, std::size_t fallback,
                     std::size_t minimum) {
  const long v = integer_or(obj, key, path, static_cast<long>(fallback));
  if (v < static_cast<long>(minimum))
    fail(ConfigErrorCode::Truncation, join(path, key), "must be at least " + std::to_string(minimum));
  return static_cast<std::size_t>(v);
}

RunConfig parse_run(const json& obj, const std::string& path) {
  reject_unknown(obj, path,
                 {"n_max", "gl_n", "gl_stride", "gl_reference", "tail", "threads", "check_n", "green_samples",
                  "ratio_n", "csv", "out", "tolerances"});
  RunConfig run;
  run.n_max = count_or(obj, "n_max", path, 20, 1);
  run.gl_n = count_or(obj, "gl_n", path, std::min<std::size_t>(run.n_max, 100), 1);
  run.check_n = count_or(obj, "check_n", path, std::min<std::size_t>(run.n_max, 20), 1);
  run.ratio_n = count_or(obj, "ratio_n", path, std::min<std::size_t>(run.n_max, 20), 1);
  run.green_samples = count_or(obj, "green_samples", path, 100, 0);
  for (const auto& [key, value] : {std::pair{"gl_n", run.gl_n}, {"check_n", run.check_n}, {"ratio_n", run.ratio_n}})
    if (value > run.n_max) fail(ConfigErrorCode::Truncation, join(path, key), "exceeds n_max");
  const long stride = integer_or(obj, "gl_stride", path, 1);
  if (stride < 1) fail(ConfigErrorCode::Grid, join(path, "gl_stride"), "stride must be at least 1");
  run.gl_stride = stride;
  run.gl_reference = string_or(obj, "gl_reference", path, "asymptotic");
  if (run.gl_reference != "asymptotic" && run.gl_reference != "zero")
    fail(ConfigErrorCode::UnknownOption, join(path, "gl_reference"), "expected 'asymptotic' or 'zero'");
  run.tail = bool_or(obj, "tail", path, true);
  const long threads = integer_or(obj, "threads", path, 0);
  if (threads < 0) fail(ConfigErrorCode::UnknownOption, join(path, "threads"), "thread count must be non-negative");
  run.threads = static_cast<unsigned>(threads);
  run.csv = bool_or(obj, "csv", path, true);
  run.out_dir = string_or(obj, "out", path, ".");
  if (obj.contains("tolerances")) {
    const std::string tp = join(path, "tolerances");
    const json& t = obj.at("tolerances");
    if (!t.is_object()) fail(ConfigErrorCode::WrongType, tp, "expected an object");
    reject_unknown(t, tp,
                   {"gamma_rel", "potential_sup", "inner_fraction", "green", "ratio", "residue_rel", "orthonormality"});
    Tolerances& tol = run.tol;
    tol.gamma_rel = positive(t, "gamma_rel", tp, tol.gamma_rel);
    tol.potential_sup = positive(t, "potential_sup", tp, tol.potential_sup);
    tol.inner_fraction = positive(t, "inner_fraction", tp, tol.inner_fraction);
    if (tol.inner_fraction > 1) fail(ConfigErrorCode::Tolerance, join(tp, "inner_fraction"), "must lie in (0, 1]");
    tol.green = positive(t, "green", tp, tol.green);
    tol.ratio = positive(t, "ratio", tp, tol.ratio);
    tol.residue_rel = positive(t, "residue_rel", tp, tol.residue_rel);
    tol.orthonormality = positive(t, "orthonormality", tp, tol.orthonormality);
  }
  return run;
}

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  if (!doc.is_object()) fail(ConfigErrorCode::WrongType, "<root>", "expected an object");
  reject_unknown(doc, "", {"problem", "run", "seed"});
  ExperimentConfig cfg;
  cfg.source = doc;
  const json& p = object_at(doc, "problem", "");
  reject_unknown(p, "problem", {"channels", "grid", "potential", "h", "H", "perturbations", "fallback"});

  const long m = integer(require(p, "channels", "problem"), "problem.channels");
  if (m < 1 || m > kMaxChannels)
    fail(ConfigErrorCode::Channels, "problem.channels", "channel count must be in [1, " + std::to_string(kMaxChannels) + "]");
  cfg.problem.channels = m;

  const json& g = object_at(p, "grid", "problem");
  reject_unknown(g, "problem.grid", {"a", "n_points"});
  cfg.problem.a = number(require(g, "a", "problem.grid"), "problem.grid.a");
  if (!(cfg.problem.a > 0)) fail(ConfigErrorCode::Grid, "problem.grid.a", "interval length must be positive");
  if (g.contains("n_points")) {
    const long n = integer(g.at("n_points"), "problem.grid.n_points");
    if (n < 3) fail(ConfigErrorCode::Grid, "problem.grid.n_points", "need at least 3 points");
    cfg.problem.n_points = n;
  }

  cfg.problem.potential =
      p.contains("potential") ? parse_potential(object_at(p, "potential", "problem"), "problem.potential", m) : PotentialConfig{};
  if (cfg.problem.potential.preset == "table") {
    if (cfg.problem.n_points == 0) cfg.problem.n_points = static_cast<Eigen::Index>(cfg.problem.potential.table.size());
    if (static_cast<Eigen::Index>(cfg.problem.potential.table.size()) != cfg.problem.n_points)
      fail(ConfigErrorCode::Dimension, "problem.potential.samples", "sample count must equal grid.n_points");
  }
  cfg.problem.h = matrix_or_zero(p, "h", "problem", m);
  cfg.problem.big_h = matrix_or_zero(p, "H", "problem", m);
  cfg.problem.perturbations = parse_perturbations(object_at(p, "perturbations", "problem"), "problem.perturbations", m);
  check_redundant(cfg.problem.perturbations, cfg.problem.h, "problem.perturbations");
  if (p.contains("fallback")) {
    auto fb = parse_perturbations(object_at(p, "fallback", "problem"), "problem.fallback", m);
    if (fb.scheme != "cross") fail(ConfigErrorCode::UnknownScheme, "problem.fallback.scheme", "fallback must use the cross scheme");
    check_redundant(fb, cfg.problem.h, "problem.fallback");
    cfg.problem.fallback = std::move(fb);
  }

  cfg.run = doc.contains("run") ? parse_run(object_at(doc, "run", ""), "run") : RunConfig{};
  if (doc.contains("seed")) {
    const json& s = doc.at("seed");
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<long long>() < 0))
      fail(ConfigErrorCode::WrongType, "seed", "expected a non-negative integer");
    cfg.seed = s.get<std::uint64_t>();
  }

  const Grid<double> grid = problem_grid(cfg);
  if ((grid.size() - 1) % cfg.run.gl_stride != 0)
    fail(ConfigErrorCode::Grid, "run.gl_stride", "stride must divide n_points - 1");
  if ((grid.size() - 1) / cfg.run.gl_stride < 2)
    fail(ConfigErrorCode::Grid, "run.gl_stride", "stride leaves fewer than 3 GL nodes");
  if (cfg.problem.potential.preset == "table") build_potential(cfg);
  return cfg;
}

json load_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ConfigErrorCode::Parse, path.string(), "cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ConfigErrorCode::Parse, path.string(), e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(load_document(path)); }

Grid<double> problem_grid(const ExperimentConfig& cfg) {
  Eigen::Index n = cfg.problem.n_points;
  if (n == 0) {
    double scale = 0;
    for (double t : cfg.problem.potential.thresholds) scale = std::max(scale, std::abs(t));
    scale += std::abs(cfg.problem.potential.coupling);
    n = recommended_grid_points(cfg.problem.a, cfg.problem.channels, cfg.run.n_max, scale);
    // keep the GL stride compatible with the automatic grid
    while ((n - 1) % cfg.run.gl_stride != 0) n += 2;
  }
  return Grid<double>(cfg.problem.a, n);
}

PotentialMatrix<double> build_potential(const ExperimentConfig& cfg) {
  const auto& pc = cfg.problem.potential;
  const Eigen::Index m = cfg.problem.channels;
  const Grid<double> grid = problem_grid(cfg);
  Vector thresholds = Vector::Zero(m);
  for (std::size_t k = 0; k < pc.thresholds.size(); ++k) thresholds(static_cast<Eigen::Index>(k)) = pc.thresholds[k];
  const double a = cfg.problem.a;
  try {
    if (pc.preset == "table")
      return PotentialMatrix<double>(grid, pc.table, thresholds, pc.lipschitz_cap);
    return PotentialMatrix<double>::sample(
        grid, m,
        [&](double x) {
          Matrix v = Matrix::Zero(m, m);
          double off = 0;
          if (pc.preset == "coupled-sine") {
            off = pc.coupling * std::sin(std::numbers::pi * x / a);
          } else if (pc.preset == "coupled-gauss") {
            const double z = (x - pc.center * a) / (pc.width * a);
            off = pc.coupling * std::exp(-0.5 * z * z);
          }
          for (Eigen::Index k = 0; k + 1 < m; ++k) v(k, k + 1) = v(k + 1, k) = off;
          return v;
        },
        thresholds, pc.lipschitz_cap);
  } catch (const ValidationError& e) {
    fail(ConfigErrorCode::Lipschitz, "problem.potential", e.what());
  }
}

namespace {

ProblemSet<double> assemble(const ExperimentConfig& cfg, const PerturbationConfig& pert) {
  std::vector<Matrix> hs;
  for (const auto& d : pert.differences) hs.push_back(cfg.problem.h + d);
  return ProblemSet<double>(build_potential(cfg), BoundarySpec<double>{cfg.problem.h, cfg.problem.big_h}, hs);
}

}  // namespace

ProblemSet<double> build_problem(const ExperimentConfig& cfg) { return assemble(cfg, cfg.problem.perturbations); }

ProblemSet<double> build_fallback_problem(const ExperimentConfig& cfg) {
  if (!cfg.problem.fallback) fail(ConfigErrorCode::MissingField, "problem.fallback", "no fallback perturbations");
  return assemble(cfg, *cfg.problem.fallback);
}

}  // namespace multisl::harness
