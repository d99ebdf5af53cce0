#pragma once

#include <vector>

#include <Eigen/Dense>

#include "slashlab/icl_data.hpp"
#include "slashlab/rope.hpp"

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Trainable blocks of the reduced two-layer model: the cone-axis query
/// block of layer 1 (d_b x d_b) and the semantic query block of layer 2
/// ((d_X+2) x (d_X+2)). Key, value and output weights are fixed.
struct ReducedParams {
  MatrixXd w1;
  MatrixXd w2;

  /// w1 = 0, w2 = I.
  static ReducedParams init(const DataConfig& config);
  bool finite() const;
};

/// Fixed layer-1 key image of the cone axis: (1, 0, 1, 0, ...), length d_b.
VectorXd cone_key(int cone_dim);

/// Layer-1 logit for each offset delta = i - j in [0, n): the causal logit
/// matrix is Toeplitz, A(i, i - delta) = logits[delta].
std::vector<double> layer1_offset_logits(const ReducedParams& params,
                                         const DataConfig& config,
                                         const FrequencySequence& freqs, int n);

/// Causal layer-1 logits, N x N. Only the lower triangle (j <= i) is
/// meaningful; entries above the diagonal are masked and stored as 0.
MatrixXd layer1_logits(const ReducedParams& params, const DataConfig& config,
                       const FrequencySequence& freqs);

/// Row-wise softmax over the causal part of `logits` (columns 0..i of row
/// i), max-subtracted. Masked entries of the result are exactly 0.
MatrixXd causal_softmax(const MatrixXd& logits);

/// Layer-2 logits of the question row against every position.
VectorXd layer2_logits(const ReducedParams& params, const MatrixXd& s1,
                       const EmbeddingMatrix& e, const FrequencySequence& freqs);

struct Prediction {
  VectorXd s2;
  double y_hat = 0.0;
};

/// s2 = softmax(u), y_hat = <s2, E^y>.
Prediction predict(const VectorXd& u, const EmbeddingMatrix& e);

/// Aggregated layer-2 score on each feature: sum of s2 over label positions
/// whose example carries that feature.
std::vector<double> feature_scores(const VectorXd& s2, const Prompt& prompt,
                                   int num_features);

struct ForwardTrace {
  MatrixXd a;   // masked above the diagonal
  MatrixXd s1;
  VectorXd u;
  VectorXd s2;
  std::vector<double> s2_by_feature;
  double y_hat = 0.0;
};

ForwardTrace forward(const ReducedParams& params, const DataConfig& config,
                     const FrequencySequence& freqs, const Prompt& prompt,
                     const EmbeddingMatrix& e);

/// Layer-1 queries and keys (N x d) of the reduced model before RoPE. They
/// do not depend on the prompt content.
std::pair<MatrixXd, MatrixXd> layer1_qk(const ReducedParams& params,
                                        const DataConfig& config);

/// Outputs of the literal two-layer disentangled transformer.
struct FullForward {
  MatrixXd output;  // N x d
  MatrixXd s1;      // N x N
  MatrixXd s2;      // N x N
  double y_hat = 0.0;
};

/// Builds the full sparse Q/K/V/O matrices from `params` and runs both
/// layers on hidden states of width d, 2d and 4d, with the frequency list
/// doubled for layer 2. Independent of the reduced closed form above.
FullForward full_disentangled_forward(const EmbeddingMatrix& e,
                                      const FrequencySequence& freqs,
                                      const ReducedParams& params,
                                      const DataConfig& config);

/// Throws InvalidArgument unless the band lengths match d_b/2 and (d_X+2)/2.
void check_bands(const DataConfig& config, const FrequencySequence& freqs);

}  // namespace slashlab
