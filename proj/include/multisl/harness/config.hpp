#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "multisl/norming_recovery.hpp"
#include "multisl/spectral_model.hpp"

namespace multisl::harness {

using Matrix = ChannelMatrix<double>;
using Vector = ChannelVector<double>;

/// One code per configuration invariant. The names are printed in reports
/// and listed in the README.
enum class ConfigErrorCode {
  Parse,                  ///< file missing or not valid JSON
  MissingField,           ///< required key absent
  WrongType,              ///< key present with the wrong JSON type
  Channels,               ///< channel count outside [1, 8]
  Grid,                   ///< a <= 0, non-finite, or n_points < 3
  UnknownPreset,          ///< potential preset name not recognised
  Dimension,              ///< matrix or vector of the wrong shape
  NonFinite,              ///< NaN or infinity in numeric input
  Asymmetric,             ///< matrix not symmetric to 1e-12
  PerturbationCount,      ///< number of perturbations differs from M
  RedundantPerturbation,  ///< h_i equals h
  Pivot,                  ///< pivot channel out of range or not shared
  UnknownScheme,          ///< perturbation scheme not recognised
  Truncation,             ///< n_max or related depth invalid
  Tolerance,              ///< non-positive tolerance or fraction outside (0, 1]
  Lipschitz,              ///< table potential violates the Lipschitz cap
  UnknownOption,          ///< unrecognised enumerated option value
};

std::string_view code_name(ConfigErrorCode code);

class ConfigError : public std::runtime_error {
 public:
  ConfigError(ConfigErrorCode code, std::string field, const std::string& what);

  ConfigErrorCode code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }

 private:
  ConfigErrorCode code_;
  std::string field_;
};

struct PotentialConfig {
  std::string preset = "free";
  std::vector<double> thresholds;  ///< empty means all zero
  double coupling = 0;
  double width = 0.15;  ///< coupled-gauss standard deviation, in units of a
  double center = 0.5;  ///< coupled-gauss centre, in units of a
  std::vector<Matrix> table;
  double lipschitz_cap = 1e6;
};

struct PerturbationConfig {
  std::string scheme = "jacobi";  ///< jacobi | cross | explicit
  Eigen::Index pivot = 0;         ///< 0-based; 1-based in the file
  std::vector<PerturbationJacobi<double>> jacobi;
  std::vector<PerturbationCross<double>> cross;
  std::vector<Matrix> differences;  ///< h_i - h for every scheme
};

struct ProblemConfig {
  Eigen::Index channels = 1;
  double a = 0;
  Eigen::Index n_points = 0;  ///< 0 picks a grid from n_max
  PotentialConfig potential;
  Matrix h;
  Matrix big_h;
  PerturbationConfig perturbations;
  std::optional<PerturbationConfig> fallback;
};

struct Tolerances {
  double gamma_rel = 0.02;
  double potential_sup = 0.05;
  double inner_fraction = 0.9;
  double green = 1e-6;
  double ratio = 0.01;
  double residue_rel = 1e-3;
  double orthonormality = 1e-6;
};

struct RunConfig {
  std::size_t n_max = 20;
  std::size_t gl_n = 0;  ///< 0 means min(n_max, 100)
  Eigen::Index gl_stride = 1;
  std::string gl_reference = "asymptotic";  ///< asymptotic | zero
  bool tail = true;
  unsigned threads = 0;
  std::size_t check_n = 20;
  std::size_t green_samples = 100;
  std::size_t ratio_n = 20;
  bool csv = true;
  std::string out_dir = ".";
  Tolerances tol;
};

struct ExperimentConfig {
  ProblemConfig problem;
  RunConfig run;
  std::uint64_t seed = 0;
  nlohmann::json source;
};

ExperimentConfig parse_config(const nlohmann::json& doc);
/// Reads a JSON file; parse failures carry the byte position.
nlohmann::json load_document(const std::filesystem::path& path);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Grid used for the problem (explicit n_points or one sized for n_max).
Grid<double> problem_grid(const ExperimentConfig& cfg);
PotentialMatrix<double> build_potential(const ExperimentConfig& cfg);
ProblemSet<double> build_problem(const ExperimentConfig& cfg);
/// Problem set carrying the fallback cross perturbations instead.
ProblemSet<double> build_fallback_problem(const ExperimentConfig& cfg);

}  // namespace multisl::harness
