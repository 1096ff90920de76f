// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "multisl/harness/config.hpp"
#include "multisl/harness/experiments.hpp"
#include "support/problems.hpp"

using namespace multisl;
using fixtures::kPi;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, bool pass, const std::string& what) {
  std::printf("C%d %s %s\n", id, pass ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string config_path(const std::string& name) { return std::string(MULTISL_CONFIGS) + "/" + name; }

harness::ExperimentConfig config(const std::string& name, const std::function<void(json&)>& edit = {}) {
  json doc = harness::load_document(config_path(name));
  if (edit) edit(doc);
  return harness::parse_config(doc);
}

// Runs a criterion body, turning an unexpected exception into a FAIL line.
void criterion(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("threw: ") + e.what());
  }
}

void analytic_spectrum() {
  const auto t0 = Clock::now();
  const ForwardSolver<double> solver(fixtures::free_m1());
  const auto ev = solver.locate_eigenvalues(Which::base(), 20);
  double ev_err = 0, gamma_err = 0;
  for (std::size_t n = 0; n < 20; ++n) {
    ev_err = std::max(ev_err, std::abs(ev[n] - double(n * n)));
    const double expected = n == 0 ? 1 / std::sqrt(kPi) : std::sqrt(2 / kPi);
    gamma_err = std::max(gamma_err, std::abs(std::abs(solver.direct_norming_vector(Which::base(), ev[n]).gamma(0)) - expected));
  }
  const double t = seconds_since(t0);
  std::ostringstream os;
  os.precision(3);
  os << "free M=1: max eigenvalue error " << ev_err << " (<= 1e-8), max norming error " << gamma_err
     << " (<= 1e-7), " << t << " s (< 10)";
  report(1, ev_err <= 1e-8 && gamma_err <= 1e-7 && t < 10, os.str());
}

void oracle_equivalence() {
  const auto t0 = Clock::now();
  const auto ps = fixtures::coupled_m2();
  const ForwardSolver<double> solver(ps);
  double worst = 0;
  std::vector<Which> problems{Which::base()};
  for (std::size_t i = 0; i < ps.perturbation_count(); ++i) problems.push_back(Which::perturbed(i));
  for (const Which w : problems) {
    const auto got = solver.locate_eigenvalues(w, 20);
    const auto fd = oracle::eigenvalues(fixtures::oracle_coupled_m2(1.0, 0.3, ps.left_h(w)), 20, 2000);
    for (std::size_t n = 0; n < 20; ++n) worst = std::max(worst, std::abs(got[n] - fd[n]) / std::max(1.0, std::abs(fd[n])));
  }
  const double t = seconds_since(t0);
  std::ostringstream os;
  os.precision(3);
  os << "coupled M=2 vs finite differences (2000/4000/8000 intervals): max relative error " << worst
     << " (<= 1e-5), " << t << " s (< 60)";
  report(2, worst <= 1e-5 && t < 60, os.str());
}

const harness::RunOutcome& coupled_verify() {
  static const harness::RunOutcome out =
      harness::run_verify(config("coupled_m2.json", [](json& d) { d["run"]["green_samples"] = 100; }));
  return out;
}

void green_identity() {
  const auto& g = coupled_verify().report.at("green");
  std::ostringstream os;
  os.precision(3);
  os << "Green identity, " << g.at("samples").size() << " samples on coupled M=2: max residual "
     << g.at("max_residual").get<double>() << " (<= 1e-6); with the boundary term kept, "
     << g.at("max_corrected_residual").get<double>();
  report(3, g.at("pass").get<bool>() && g.at("samples").size() == 100, os.str());
}

void consistency_ratios() {
  const auto free = harness::run_verify(config("free_m1.json"));
  const auto& r1 = free.report.at("ratio");
  const auto& r2 = coupled_verify().report.at("ratio");
  const auto covered = [](const json& r, std::size_t m) { return r.at("entries").size() == 20 * m; };
  std::ostringstream os;
  os.precision(3);
  os << "consistency ratios n <= 20 at N = " << r2.at("truncation").get<std::size_t>() << ": max |ratio - 1| M=1 "
     << r1.at("max_deviation").get<double>() << ", M=2 " << r2.at("max_deviation").get<double>() << " (<= 0.01)";
  report(4, r1.at("pass").get<bool>() && r2.at("pass").get<bool>() && covered(r1, 1) && covered(r2, 2), os.str());
}

void recovery_round_trip() {
  const auto depth = [](std::size_t n) {
    return [n](json& d) {
      d["run"]["n_max"] = n;
      d["run"]["gl_n"] = std::min<std::size_t>(n, 100);
    };
  };
  bool pass = true;
  std::ostringstream os;
  os.precision(8);
  os << "max relative gamma error n <= 20:";
  for (const char* name : {"coupled_m2.json", "coupled_m2_cross.json"}) {
    const auto r200 = harness::run_recover(config(name, depth(200)));
    const auto r50 = harness::run_recover(config(name, depth(50)));
    const double e200 = r200.report.at("max_rel_error").get<double>();
    const double e50 = r50.report.at("max_rel_error").get<double>();
    const std::string scheme = r200.report.at("scheme").get<std::string>();
    os << " " << scheme << " N=200 " << e200 << ", N=50 " << e50 << ";";
    pass = pass && r200.exit_code == harness::kExitOk && e200 <= 0.02 && e200 < e50;
  }
  os << " (<= 0.02 and N=200 strictly below N=50)";
  report(5, pass, os.str());
}

void one_channel() {
  const ForwardSolver<double> solver(fixtures::free_m1());
  const auto s = solver.spectra(200);
  const auto tail = estimate_tail_model(s, kPi, Eigen::Index(1));
  const auto gamma = two_spectra_one_channel(s.base(), s.perturbed(0), 0.0, 1.0, tail);
  double worst = 0;
  for (std::size_t n = 0; n < 20; ++n) {
    const double expected = n == 0 ? 1 / std::sqrt(kPi) : std::sqrt(2 / kPi);
    worst = std::max(worst, std::abs(gamma[n] - expected) / expected);
  }
  std::ostringstream os;
  os.precision(3);
  os << "two-spectra free M=1, n <= 20: max relative error " << worst << " (<= 0.01)";
  report(6, worst <= 0.01, os.str());
}

void gl_round_trip() {
  const auto t0 = Clock::now();
  const auto cfg = config("coupled_m2.json");
  const auto rt = harness::run_roundtrip(cfg);
  const auto rc = harness::run_reconstruct(cfg);
  const double t = seconds_since(t0);
  const auto& gl = rt.report.at("gl");
  const double sup = gl.at("sup_error_inner").get<double>();
  const double identity = rc.report.at("identity").at("sup_error").get<double>();
  std::ostringstream os;
  os.precision(3);
  os << "coupled M=2 from recovered data, N_GL = " << gl.at("truncation").get<std::size_t>()
     << ": inner 90% sup error " << sup << " (<= 5e-2), identity " << identity << " (<= 1e-6), " << t
     << " s (< 300)";
  report(7, rt.exit_code == harness::kExitOk && sup <= 5e-2 && identity <= 1e-6 && t < 300, os.str());
}

void failure_modes() {
  const auto dir = std::filesystem::temp_directory_path() / "multisl_acceptance";
  std::filesystem::remove_all(dir);
  const auto run = [&](const std::string& cmd, const std::string& name, std::string& code) {
    const auto sub = dir / name;
    const std::string line = std::string(MULTISL_CLI) + " " + cmd + " --config " + config_path(name) + " --out " +
                             sub.string() + " >/dev/null 2>&1";
    const int status = std::system(line.c_str());
    code.clear();
    const auto file = sub / (cmd + ".json");
    if (std::filesystem::exists(file)) {
      std::ifstream f(file);
      const json j = json::parse(f);
      if (j.contains("error")) code = j["error"].at("code").get<std::string>();
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  std::string c1, c2, c3;
  const int e1 = run("forward", "degenerate_m2.json", c1);
  const int e2 = run("forward", "invalid_same_h.json", c2);
  const int e3 = run("recover", "singular_scheme.json", c3);
  std::ostringstream os;
  os.precision(3);
  os << "degenerate exit " << e1 << " " << c1 << " (3 DegenerateSpectrum); same h exit " << e2 << " " << c2
     << " (2 config.redundant_perturbation); singular scheme exit " << e3 << " " << c3 << " (3 SingularSystem)";
  report(8, e1 == 3 && c1 == "DegenerateSpectrum" && e2 == 2 && c2 == "config.redundant_perturbation" && e3 == 3 && c3 == "SingularSystem", os.str());
}

}  // namespace

int main() {
  criterion(1, analytic_spectrum);
  criterion(2, oracle_equivalence);
  criterion(3, green_identity);
  criterion(4, consistency_ratios);
  criterion(5, recovery_round_trip);
  criterion(6, one_channel);
  criterion(7, gl_round_trip);
  criterion(8, failure_modes);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
