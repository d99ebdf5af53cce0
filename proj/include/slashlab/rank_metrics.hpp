#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Thin SVD X = U diag(sigma) V^T, sigma descending.
struct Svd {
  MatrixXd u;
  VectorXd sigma;
  MatrixXd v;
};

Svd thin_svd(const MatrixXd& x);

/// Tolerance used when comparing cumulative power against a threshold, so
/// that e.g. 19 * 0.05 still reaches 0.95.
inline constexpr double kCumulativeSlack = 1e-12;

/// Smallest count l >= 1 whose prefix sum of `ratios` reaches tau.
int prefix_rank(std::span<const double> ratios, double tau);

struct SpectralReport {
  std::vector<double> singular_values;
  std::vector<double> power_ratios;
  int effective_rank = 0;
  double tau = 0.0;
};

SpectralReport spectral_report(const MatrixXd& x, double tau);

/// Marks the bias slot in AlignmentReport::order.
inline constexpr int kBiasSlot = -1;

/// How a token x spreads its power over the singular directions of W.
/// Directions are scored by (sigma_i v_i^T x)^2 where v_i are the left
/// singular vectors of W (d x d1); a bias slot, when present, is scored by
/// ||b||^2 and pinned to the first position.
struct AlignmentReport {
  std::vector<double> aligned_ratios;  // descending apart from a pinned bias
  int aligned_rank = 0;
  std::vector<int> order;  // direction index (0-based) per position, or kBiasSlot
  bool has_bias = false;
  double tau = 0.0;
};

AlignmentReport aligned_report(const VectorXd& x, const MatrixXd& w,
                               const std::optional<VectorXd>& bias, double tau);
AlignmentReport aligned_report(const VectorXd& x, const Svd& w_svd,
                               const std::optional<VectorXd>& bias, double tau);

inline constexpr double kRmsnEps = 1e-6;

/// x / sqrt(mean(x^2) + eps), no learned gain.
VectorXd rmsn(const VectorXd& x, double eps = kRmsnEps);

/// Left singular vector of W carrying the most RMS-normalized token power,
/// and its 0-based index. Ties go to the smaller index.
std::pair<VectorXd, int> dominant_direction(const MatrixXd& w,
                                            std::span<const VectorXd> tokens);

/// Population std / |mean| of the projections.
double relative_variation(std::span<const double> projections);
/// Same, for projections direction^T rmsn(x) over the token set.
double relative_variation(const VectorXd& direction,
                          std::span<const VectorXd> tokens);

/// Per-direction power of hidden states H (rows are tokens) against W, with
/// an optional leading bias slot: ||sigma_l v_l^T H^T||^2 (bias: ||b||^2 per
/// token), normalized to sum to one.
std::vector<double> direction_power(const MatrixXd& w, const MatrixXd& hidden,
                                    const std::optional<VectorXd>& bias);

struct TruncationResult {
  MatrixXd w;
  int kept_rank = 0;    // weight directions in the kept prefix
  bool truncated = false;
};

/// Low-rank compression of W by averaged direction power.
///
/// Directions are ranked by `avg_power` (descending, bias slot pinned first
/// when `bias_slot` is set, in which case avg_power[0] is the bias). The
/// minimal prefix reaching `thre` gives the kept rank R; W is replaced by its
/// rank-R reconstruction when R < rank_thre, and returned untouched otherwise.
TruncationResult low_rank_truncate(const MatrixXd& w,
                                   std::span<const double> avg_power,
                                   double thre, int rank_thre,
                                   bool bias_slot = false);

}  // namespace slashlab
