#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "slashlab/icl_data.hpp"
#include "slashlab/rope.hpp"
#include "slashlab/slash_analysis.hpp"
#include "slashlab/training.hpp"

namespace slashlab::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfigError = 2,
  kThresholdFailure = 3,
  kDiverged = 4,
};

struct FreqSpec {
  std::string mode = "pulse";  // pulse | classic
  int m = 130;                 // pulse: cone band has m blocks
  int cone_dim = 32;           // classic: d_b
  double base = 10000.0;       // classic base
  std::optional<double> semantic_ceiling;  // default N^-2
  double semantic_base = 10000.0;

  int resolved_cone_dim() const;
  FrequencySequence build(const DataConfig& data) const;
};

struct OodSpec {
  double scale = 3.0;
  std::size_t prompts = 1000;
};

struct Thresholds {
  std::optional<double> min_prev_score;
  std::optional<double> max_loss;
  std::optional<double> max_feature_error;
};

struct ExperimentConfig {
  DataConfig data;
  TrainConfig train;
  FreqSpec freqs;
  SlashConfig slash;
  std::optional<OodSpec> ood;
  Thresholds thresholds;
  std::string out_dir = "out";
  std::vector<std::string> formats{"csv"};
  bool threads_set = false;  // train.threads given explicitly

  /// Parses and validates; errors name the offending field ("train.eta1").
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Every field, resolved defaults included.
  nlohmann::ordered_json to_json() const;
  void validate() const;
};

/// 17 significant digits, as written to CSV.
std::string format_double(double v);

/// Thread count: explicit value, else SLASHLAB_THREADS, else 1.
unsigned resolve_threads(std::optional<unsigned> explicit_threads);

/// Runs the tool; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace slashlab::cli
