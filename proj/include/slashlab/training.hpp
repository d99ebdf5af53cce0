#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "slashlab/icl_data.hpp"
#include "slashlab/rope.hpp"
#include "slashlab/shallow_model.hpp"

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct TrainConfig {
  double eta1 = 1.0;
  double eta2 = 1.0;
  long tau1 = 2000;  // Stage I step cap
  long tau2 = 2000;  // Stage II step cap
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  long snapshot_every = 10;
  /// Concentration targets; unset means max(0.1, N^-1/2) and max(0.3, N^-1/4).
  std::optional<double> eps1;
  std::optional<double> eps2;
  /// Stop each stage as soon as its target is met (otherwise run to the cap).
  bool early_stop = true;
  int probes_per_feature = 64;
  int probe_question_feature = 0;
  unsigned threads = 1;

  double resolved_eps1(int prompt_len) const;
  double resolved_eps2(int prompt_len) const;
  void validate(int prompt_len) const;
};

/// Training statistics at one step, measured on a probe set that is
/// regenerated per snapshot from derived seeds.
struct DynamicsSnapshot {
  long t = 0;
  int stage = 1;
  double min_prev_score = 0.0;  // min_i S1(i, i-1)
  double logit_gap = 0.0;       // min_i A(i, i-1) - max_{j != i-1} A(i, j)
  double slash_score_d1 = 0.0;
  double loss_estimate = 0.0;
  /// Mean layer-2 logit at label positions whose example has feature m,
  /// over probes asking for the configured question feature.
  std::vector<double> feature_logit_means;
  /// Mean aggregated score S_k over probes asking for feature k.
  std::vector<double> feature_scores;
  /// Mean (1 - S_k)^2 over the same probes.
  std::vector<double> feature_match_error;
};

/// Mean squared loss (1/2B) sum (y_hat - <w, x_q>)^2 over the batch.
double mc_loss(const ReducedParams& params, const DataConfig& config,
               const FrequencySequence& freqs, const std::vector<Sample>& batch,
               unsigned threads = 1);
/// Same, on a fresh batch of size B drawn from `seed`.
double mc_loss(const ReducedParams& params, std::uint64_t seed, std::size_t batch_size,
               const DataConfig& config, const FrequencySequence& freqs,
               unsigned threads = 1);

struct LossAndGradients {
  double loss = 0.0;
  MatrixXd grad_w1;  // empty unless requested
  MatrixXd grad_w2;  // empty unless requested
};

/// Batch loss plus closed-form gradients of the reduced model.
///
/// For one sample let r = y_hat - <w, x_q> and, for each position j,
/// delta_j = r * s2_j * (E^y_j - y_hat) (the derivative of the loss through
/// the layer-2 softmax). With I(j)_n the layer-2 logit the question would
/// give to row n of E^{x,y} from position j:
///   dL/dA(j, n) = delta_j * S1(j, n) * (I(j)_n - u_j),
///   dA(j, n)/dW1 = c (R_{n-j} c~)^T,
///   du_j/dW2 = E_q^{x,y} (R_{j-N} (S1 E^{x,y})_j)^T.
/// Layer-1 terms are accumulated per offset j - n before the outer product,
/// so the W1 gradient is c times a single vector.
LossAndGradients loss_and_gradients(const ReducedParams& params,
                                    const DataConfig& config,
                                    const FrequencySequence& freqs,
                                    const std::vector<Sample>& batch, bool want_w1,
                                    bool want_w2, unsigned threads = 1);

MatrixXd grad_w1(const ReducedParams& params, const DataConfig& config,
                 const FrequencySequence& freqs, const std::vector<Sample>& batch,
                 unsigned threads = 1);
MatrixXd grad_w2(const ReducedParams& params, const DataConfig& config,
                 const FrequencySequence& freqs, const std::vector<Sample>& batch,
                 unsigned threads = 1);

/// Central differences (f(x + h e_ij) - f(x - h e_ij)) / 2h per entry.
MatrixXd finite_diff_grad(const std::function<double(const MatrixXd&)>& f,
                          const MatrixXd& x, double h);

/// max |a - b| / max(max|a|, max|b|); 0 when both are zero.
double gradient_relative_error(const MatrixXd& analytic, const MatrixXd& numeric);

struct GradCheckConfig {
  int num_examples = 4;  // N_in
  int num_features = 2;  // K
  int cone_dim = 20;     // d_b
  int feature_dim = 4;   // d_X
  std::size_t batch_size = 8;
  int points = 10;
  std::uint64_t seed = 0;
  double h = 1e-5;
  double param_scale = 0.5;

  void validate() const;
};

struct GradCheckReport {
  std::vector<double> errors_w1;  // one per parameter point
  std::vector<double> errors_w2;
  double max_error = 0.0;
};

/// Analytic gradients against central differences at random parameter
/// points, with a random cone axis and a fixed batch.
GradCheckReport gradient_check(const GradCheckConfig& config, unsigned threads = 1);

/// Probe statistics for the current parameters (stage and t left for the caller).
DynamicsSnapshot probe_snapshot(const ReducedParams& params, const DataConfig& config,
                                const FrequencySequence& freqs,
                                const TrainConfig& train, long t);

/// min_i S1(i, i-1), the gap and the mean lag-1 score, from W1 alone.
struct Layer1Summary {
  double min_prev_score = 0.0;
  double logit_gap = 0.0;
  double slash_score_d1 = 0.0;
};
Layer1Summary layer1_summary(const ReducedParams& params, const DataConfig& config,
                             const FrequencySequence& freqs);

struct TrainResult {
  ReducedParams params;
  std::vector<DynamicsSnapshot> snapshots;
  long stage1_steps = 0;
  long stage2_steps = 0;
  double stage2_start_loss = 0.0;  // probe loss at the first Stage II snapshot
  double final_loss = 0.0;         // probe loss at the last snapshot
  std::vector<std::string> warnings;
};

/// Two-stage gradient descent: Stage I trains W1 with W2 held at I, Stage II
/// trains W2 with W1 frozen. Each step draws a fresh batch from
/// derive_seed(seed, "train", t). Throws DivergedError on a non-finite loss
/// or gradient.
TrainResult two_stage_gd(const TrainConfig& train, const DataConfig& data,
                         const FrequencySequence& freqs,
                         const std::function<void(const DynamicsSnapshot&)>& on_snapshot = {});
/// Same, starting from `initial` instead of W1 = 0, W2 = I.
TrainResult two_stage_gd(const TrainConfig& train, const DataConfig& data,
                         const FrequencySequence& freqs, const ReducedParams& initial,
                         const std::function<void(const DynamicsSnapshot&)>& on_snapshot = {});

}  // namespace slashlab
