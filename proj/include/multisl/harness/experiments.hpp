#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "multisl/harness/config.hpp"

namespace multisl::harness {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitSolver = 3,
  kExitTolerance = 4,
};

/// Plot-ready table; cells are already formatted.
struct CsvTable {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

struct RunOutcome {
  int exit_code = kExitOk;
  nlohmann::json report;
  std::vector<CsvTable> tables;
};

RunOutcome run_forward(const ExperimentConfig& cfg);
RunOutcome run_recover(const ExperimentConfig& cfg);
RunOutcome run_reconstruct(const ExperimentConfig& cfg);
RunOutcome run_roundtrip(const ExperimentConfig& cfg);
RunOutcome run_verify(const ExperimentConfig& cfg);

/// Dispatches on the command name; solver errors become exit 3 with a
/// structured report instead of propagating.
RunOutcome run_command(std::string_view command, const ExperimentConfig& cfg);

/// `<dir>/<command>.json` plus `<dir>/<command>_<table>.csv`. The JSON gains a
/// "timestamp" field; everything else is deterministic.
void write_outputs(const RunOutcome& outcome, std::string_view command, const std::filesystem::path& dir, bool csv);

/// %.17g
std::string format_number(double v);

int cli_main(int argc, char** argv);

}  // namespace multisl::harness
