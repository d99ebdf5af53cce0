#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Ordered RoPE angular frequencies, one per 2-dim block, high to low.
///
/// The first `cone_band_len` entries form the cone band (they rotate the
/// cone-axis subspace); the rest form the semantic band.
struct FrequencySequence {
  std::vector<double> values;
  std::size_t cone_band_len = 0;

  std::size_t size() const noexcept { return values.size(); }
  /// Vector dimension the sequence acts on.
  std::size_t dim() const noexcept { return 2 * values.size(); }

  FrequencySequence cone_band() const;
  FrequencySequence semantic_band() const;

  /// Same values with the listed block indices (0-based) set to zero, which
  /// leaves those blocks unrotated.
  FrequencySequence with_removed(const std::vector<std::size_t>& blocks) const;

  /// cone ++ semantic, with the cone band length taken from `cone`.
  static FrequencySequence concat(const FrequencySequence& cone,
                                  const FrequencySequence& semantic);

  /// Throws InvalidArgument if any value is negative/non-finite or the band
  /// length exceeds the sequence.
  void validate() const;
};

struct PulseCheckResult {
  double c1 = 0.0;
  double c2 = 0.0;
  double eps_fn = 0.0;
  long horizon = 0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Per-block split of one RoPE logit.
struct InPDecomposition {
  std::vector<double> contributions;
  std::vector<double> amplitudes;
  std::vector<double> phases;  // in (-pi, pi]
  double total = 0.0;
};

/// theta_l = base^(-2l/d), l = 1..d/2. The whole sequence is the cone band.
FrequencySequence classic_frequencies(int d, double base);

/// Dirichlet-kernel cone band theta_s = 2*pi*s/(2m+1), s = 1..m, stored in
/// descending order. Requires 2m+1 > 2*horizon.
FrequencySequence pulse_frequencies(int m, long horizon);

/// `count` low frequencies ceiling * base^(-(s-1)/count), s = 1..count.
/// Used for the semantic band (ceiling = N^-alpha). cone_band_len = 0.
FrequencySequence low_frequencies(std::size_t count, double ceiling,
                                  double base = 10000.0);

/// Rotates each 2-dim block l of v by pos * theta_l.
VectorXd apply_rope(const Eigen::Ref<const VectorXd>& v, long pos,
                    const FrequencySequence& freqs);

/// q^T R_{j-i} k, i.e. <apply_rope(q, i), apply_rope(k, j)>.
double relative_logit(const Eigen::Ref<const VectorXd>& q,
                      const Eigen::Ref<const VectorXd>& k, long i, long j,
                      const FrequencySequence& freqs);

/// Fits sum_s cos(theta_s x) ~ c1 * [x == 0] + c2 over |x| <= horizon using
/// the cone band of `freqs`: c2 is the median over nonzero offsets, c1 is
/// f(0) - c2, eps_fn the worst residual.
PulseCheckResult pulse_check(const FrequencySequence& freqs, long horizon,
                             double tolerance);

InPDecomposition inp_decompose(const Eigen::Ref<const VectorXd>& q,
                               const Eigen::Ref<const VectorXd>& k, long i,
                               long j, const FrequencySequence& freqs);

}  // namespace slashlab
