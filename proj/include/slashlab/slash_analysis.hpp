#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "slashlab/icl_data.hpp"
#include "slashlab/rope.hpp"
#include "slashlab/shallow_model.hpp"

namespace slashlab {

using Eigen::MatrixXd;

struct SlashConfig {
  std::vector<int> lags{0, 1, 2, 3, 4};
  double kappa = 0.1;
  /// Leading positions whose rows/columns are ignored (4 for LLM dumps with
  /// attention sinks, 0 for the simulator).
  int excluded_prefix = 0;
  /// Multiplier on the rotated Q K^T before softmax.
  double logit_scale = 1.0;

  void validate() const;
};

struct SlashReport {
  std::vector<int> lags;
  std::vector<double> scores;
  std::vector<bool> detected;
  /// Lags in 5 <= lag < 500, where positional and semantic effects mix.
  std::vector<bool> intermediate_regime;
  std::size_t samples = 0;
  double kappa = 0.0;
  int excluded_prefix = 0;
  double logit_scale = 1.0;
  std::vector<double> ood_ratio;  // empty unless an OOD comparison was made
};

/// Causal attention softmax(M(scale * rope(Q) rope(K)^T)), positions 0..N-1.
MatrixXd attention_from_qk(const MatrixXd& q, const MatrixXd& k,
                           const FrequencySequence& freqs, const SlashConfig& config);

/// Mean of S(i, i - lag) over rows i >= lag with both i and i - lag outside
/// the excluded prefix.
double average_slash_score(const MatrixXd& s, int lag, int excluded_prefix = 0);

SlashReport detect_sdh(const std::vector<MatrixXd>& batch, const SlashConfig& config);

/// Block indices (0-based) of the high, medium and low thirds of n frequencies.
struct FrequencyBands {
  std::vector<std::size_t> high;
  std::vector<std::size_t> medium;
  std::vector<std::size_t> low;
};
FrequencyBands frequency_thirds(std::size_t n);

struct AblationReport {
  std::vector<int> lags;
  std::vector<double> baseline;
  std::vector<double> ablated;
  /// ablated / baseline; nullopt where the baseline score is zero.
  std::vector<std::optional<double>> ratio;
  std::vector<std::size_t> removed;
};

/// Recomputes attention with the removed blocks left unrotated.
AblationReport band_ablation(const MatrixXd& q, const MatrixXd& k,
                             const FrequencySequence& freqs,
                             const std::set<std::size_t>& removed,
                             const std::vector<int>& lags, const SlashConfig& config);

struct OodReport {
  double slash_in = 0.0;
  double slash_ood = 0.0;
  double slash_ratio_d1 = 0.0;
  double mae_in = 0.0;
  double mae_ood = 0.0;
  double scale = 1.0;
  std::size_t prompts = 0;
};

/// Layer-1 lag-1 slash scores and prediction MAE on fresh in-distribution
/// prompts versus prompts whose task is scaled by `scale` (scale == 1 draws
/// a second in-distribution set).
OodReport ood_evaluation(const ReducedParams& params, const DataConfig& config,
                         const FrequencySequence& freqs, std::uint64_t seed,
                         double scale, std::size_t prompts = 1000, unsigned threads = 1);

}  // namespace slashlab
