#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "multisl/harness/config.hpp"
#include "multisl/harness/experiments.hpp"

using namespace multisl::harness;
using nlohmann::json;

namespace {

json small_m2() {
  return json::parse(R"({
    "problem": {
      "channels": 2,
      "grid": {"a": 3.141592653589793, "n_points": 201},
      "potential": {"preset": "coupled-sine", "thresholds": [0, 0.3]},
      "perturbations": {"scheme": "jacobi", "pivot": 1, "scale": 1e-4}
    },
    "run": {"n_max": 6},
    "seed": 5
  })");
}

ConfigErrorCode code_of(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.code();
  }
  FAIL("document was accepted");
  return ConfigErrorCode::Parse;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("multisl_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

int spawn(const std::string& args) {
  const std::string cmd = std::string(MULTISL_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_path(const std::string& name) { return std::string(MULTISL_CONFIGS) + "/" + name; }

}  // namespace

TEST_CASE("every config error code has a trigger") {
  using C = ConfigErrorCode;
  {
    const auto dir = scratch("parse");
    std::ofstream(dir / "bad.json") << "{ \"problem\": ";
    CHECK_THROWS_AS(load_document(dir / "bad.json"), ConfigError);
    try {
      load_config(dir / "missing.json");
      FAIL("missing file was loaded");
    } catch (const ConfigError& e) {
      CHECK(e.code() == C::Parse);
    }
  }
  json d = small_m2();
  d.erase("problem");
  CHECK(code_of(d) == C::MissingField);

  d = small_m2();
  d["problem"]["channels"] = "two";
  CHECK(code_of(d) == C::WrongType);

  d = small_m2();
  d["problem"]["channels"] = 9;
  CHECK(code_of(d) == C::Channels);

  d = small_m2();
  d["problem"]["grid"]["a"] = -1.0;
  CHECK(code_of(d) == C::Grid);

  d = small_m2();
  d["problem"]["grid"]["n_points"] = 2;
  CHECK(code_of(d) == C::Grid);

  d = small_m2();
  d["problem"]["potential"]["preset"] = "banana";
  CHECK(code_of(d) == C::UnknownPreset);

  d = small_m2();
  d["problem"]["h"] = json::parse("[[0, 0]]");
  CHECK(code_of(d) == C::Dimension);

  d = small_m2();
  d["problem"]["grid"]["a"] = std::numeric_limits<double>::infinity();
  CHECK(code_of(d) == C::NonFinite);

  d = small_m2();
  d["problem"]["h"] = json::parse("[[0, 1], [0, 0]]");
  CHECK(code_of(d) == C::Asymmetric);

  d = small_m2();
  d["problem"]["perturbations"] = json::parse(R"({"scheme": "jacobi", "entries": [{"diagonal": 1e-4}]})");
  CHECK(code_of(d) == C::PerturbationCount);

  d = small_m2();
  d["problem"]["perturbations"] = json::parse(R"({"scheme": "explicit", "matrices": [[[0, 0], [0, 0]], [[1, 0], [0, 0]]]})");
  CHECK(code_of(d) == C::RedundantPerturbation);

  d = small_m2();
  d["problem"]["perturbations"]["pivot"] = 3;
  CHECK(code_of(d) == C::Pivot);

  d = small_m2();
  d["problem"]["perturbations"]["scheme"] = "banana";
  CHECK(code_of(d) == C::UnknownScheme);

  d = small_m2();
  d["run"]["gl_n"] = 7;
  CHECK(code_of(d) == C::Truncation);

  d = small_m2();
  d["run"]["tolerances"] = json::parse(R"({"inner_fraction": 1.5})");
  CHECK(code_of(d) == C::Tolerance);

  d = small_m2();
  d["run"]["colour"] = "blue";
  CHECK(code_of(d) == C::UnknownOption);

  d = small_m2();
  d["problem"]["grid"]["n_points"] = 3;
  d["problem"]["potential"] = json::parse(R"({"preset": "table", "lipschitz_cap": 1,
      "samples": [[[0, 0], [0, 0]], [[5, 0], [0, 0]], [[0, 0], [0, 0]]]})");
  CHECK(code_of(d) == C::Lipschitz);
}

TEST_CASE("scale shorthand and 1-based pivot") {
  json d = small_m2();
  d["problem"]["perturbations"]["pivot"] = 2;
  const auto cfg = parse_config(d);
  const auto& p = cfg.problem.perturbations;
  CHECK(p.pivot == 1);
  REQUIRE(p.jacobi.size() == 2);
  CHECK(p.jacobi[0].diagonal == 1e-4);
  CHECK(p.jacobi[1].off(0) == 5e-5);
  CHECK(p.differences[0](1, 1) == 1e-4);
  CHECK(p.differences[1](0, 1) == 5e-5);
  CHECK(p.differences[1](1, 0) == 5e-5);
  CHECK(cfg.seed == 5);
  CHECK(cfg.run.gl_n == 6);
  CHECK(cfg.run.gl_reference == "asymptotic");

  d = small_m2();
  d["problem"]["perturbations"] = json::parse(R"({"scheme": "cross", "pivot": 1, "scale": 2e-4})");
  const auto cross = parse_config(d).problem.perturbations;
  CHECK(cross.cross[0].row(0) == 2e-4);
  CHECK(cross.cross[1].row(1) == 1e-4);
}

TEST_CASE("shipped configs parse") {
  for (const char* name : {"free_m1.json", "decoupled_m2.json", "coupled_m2.json", "coupled_m2_cross.json",
                           "degenerate_m2.json", "singular_scheme.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(build_problem(load_config(config_path(name))));
  }
  CHECK_THROWS_AS(load_config(config_path("invalid_same_h.json")), ConfigError);
}

TEST_CASE("forward runs are deterministic and written in full") {
  const auto cfg = parse_config(small_m2());
  const auto a = run_forward(cfg);
  const auto b = run_forward(cfg);
  CHECK(a.exit_code == kExitOk);
  CHECK(a.report.dump() == b.report.dump());
  CHECK(a.report["spectra"].size() == 3);

  const auto dir = scratch("forward");
  write_outputs(a, "forward", dir, true);
  const json written = read_json(dir / "forward.json");
  CHECK(written["exit_code"] == 0);
  CHECK(written.contains("timestamp"));
  json stripped = written;
  stripped.erase("timestamp");
  stripped.erase("exit_code");
  CHECK(stripped == a.report);
  for (const auto& t : a.tables) CHECK(std::filesystem::exists(dir / ("forward_" + t.name + ".csv")));
}

TEST_CASE("run_command maps failures to exit codes") {
  auto cfg = load_config(config_path("degenerate_m2.json"));
  auto out = run_command("forward", cfg);
  CHECK(out.exit_code == kExitSolver);
  CHECK(out.report["error"]["code"] == "DegenerateSpectrum");

  cfg = load_config(config_path("singular_scheme.json"));
  out = run_command("recover", cfg);
  CHECK(out.exit_code == kExitSolver);
  CHECK(out.report["error"]["code"] == "SingularSystem");

  out = run_command("banana", parse_config(small_m2()));
  CHECK(out.exit_code == kExitConfig);
}

TEST_CASE("format_number round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.9}) CHECK(std::stod(format_number(v)) == v);
}

TEST_CASE("command line entry point") {
  const auto dir = scratch("cli");
  const std::string out = " --out " + dir.string();
  CHECK(spawn("forward --config " + config_path("decoupled_m2.json") + out) == 0);
  CHECK(std::filesystem::exists(dir / "forward.json"));
  CHECK(std::filesystem::exists(dir / "forward_spectra.csv"));
  CHECK(spawn("forward --config " + config_path("invalid_same_h.json") + out) == 2);
  CHECK(spawn("forward --config " + config_path("degenerate_m2.json") + out) == 3);
  CHECK(read_json(dir / "forward.json")["exit_code"] == 3);
  CHECK(spawn("recover --config " + config_path("singular_scheme.json") + out) == 3);
  CHECK(spawn("forward --config " + (dir / "absent.json").string() + out) == 2);
  CHECK(spawn("banana --config " + config_path("free_m1.json") + out) != 0);

  // --n-max caps the dependent depths instead of failing validation.
  CHECK(spawn("forward --n-max 4 --seed 9 --config " + config_path("coupled_m2.json") + out) == 0);
  const json rep = read_json(dir / "forward.json");
  CHECK(rep["spectra"][0]["eigenvalues"].size() == 4);
}
