#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "slashlab/rng.hpp"

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Data model for in-context regression over K orthonormal features.
struct DataConfig {
  int num_features = 4;    // K
  int num_examples = 64;   // N_in; prompt length N = 2 N_in + 1
  int feature_dim = 4;     // d_X
  int cone_dim = 260;      // d_b
  std::vector<double> feature_probs;  // p_k
  VectorXd cone_axis;                 // c, unit, dim d_b
  MatrixXd features;                  // d_X x K, orthonormal columns v_k

  /// Balanced probabilities, c = e_1, v_k = e_k.
  static DataConfig make(int num_features, int num_examples, int feature_dim,
                         int cone_dim);

  int prompt_len() const noexcept { return 2 * num_examples + 1; }
  /// Width of the semantic block E^{x,y}.
  int semantic_dim() const noexcept { return feature_dim + 2; }
  int embed_dim() const noexcept { return cone_dim + feature_dim + 2; }

  /// Throws InvalidArgument naming the offending field.
  void validate() const;
};

struct Task {
  VectorXd w;
  bool out_of_distribution = false;
};

struct Prompt {
  std::vector<int> input_features;  // k with x_i = v_k, one per example
  MatrixXd inputs;                  // N_in x d_X
  VectorXd labels;                  // y_i = <w, x_i>
  int query_feature = 0;
  VectorXd query;                   // x_q
  double target = 0.0;              // <w, x_q>

  /// V_k: 0-based example indices i with x_i = v_k.
  std::vector<std::vector<int>> feature_sets(int num_features) const;
};

/// Token embeddings on a cone: rows [c; x_i; 0; 0], [c; 0; 1; y_i], [c; x_q; 0; 0].
struct EmbeddingMatrix {
  MatrixXd e;  // N x d
  int cone_dim = 0;

  /// E^{x,y}: last d_X + 2 columns.
  auto semantic() const { return e.rightCols(e.cols() - cone_dim); }
  /// E^y: last column.
  auto labels() const { return e.col(e.cols() - 1); }
};

/// Uniform on the sphere of radius sqrt(d_X).
Task sample_task(Rng& rng, const DataConfig& config);

Prompt sample_prompt(Rng& rng, const Task& task, const DataConfig& config);
/// Same, with the question feature fixed.
Prompt sample_prompt(Rng& rng, const Task& task, const DataConfig& config,
                     int query_feature);

EmbeddingMatrix embed(const Prompt& prompt, const DataConfig& config);

/// Task with norm scale * sqrt(d_X), deliberately outside the training family.
Task ood_task(Rng& rng, const DataConfig& config, double scale);

/// One training/evaluation instance.
struct Sample {
  Task task;
  Prompt prompt;
  EmbeddingMatrix embedding;
};

/// B samples; sample b draws from the stream derive_seed(seed, tag, b), so
/// the batch does not depend on evaluation order.
std::vector<Sample> make_batch(std::uint64_t seed, std::string_view tag,
                               std::size_t batch_size, const DataConfig& config);

}  // namespace slashlab
