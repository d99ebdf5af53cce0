#include "slashlab/icl_data.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "slashlab/errors.hpp"

namespace slashlab {

DataConfig DataConfig::make(int num_features, int num_examples, int feature_dim,
                            int cone_dim) {
  DataConfig c;
  c.num_features = num_features;
  c.num_examples = num_examples;
  c.feature_dim = feature_dim;
  c.cone_dim = cone_dim;
  if (num_features > 0) {
    c.feature_probs.assign(static_cast<std::size_t>(num_features),
                           1.0 / num_features);
  }
  if (cone_dim > 0) {
    c.cone_axis = VectorXd::Zero(cone_dim);
    c.cone_axis[0] = 1.0;
  }
  if (feature_dim > 0 && num_features > 0 && num_features <= feature_dim) {
    c.features = MatrixXd::Identity(feature_dim, num_features);
  }
  return c;
}

void DataConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InvalidArgument("data." + field + ": " + why);
  };
  if (num_features < 1) fail("K", "must be >= 1");
  if (num_examples < 1) fail("N_in", "must be >= 1");
  if (feature_dim < num_features) fail("d_X", "must be >= K");
  if (feature_dim % 2 != 0) fail("d_X", "must be even so d_X + 2 is even");
  if (cone_dim < 2 || cone_dim % 2 != 0) fail("d_b", "must be even and >= 2");
  if (feature_probs.size() != static_cast<std::size_t>(num_features)) {
    fail("feature_probs", "length must equal K");
  }
  double total = 0.0;
  for (double p : feature_probs) {
    if (!(p > 0.0 && p < 1.0) && !(num_features == 1 && p == 1.0)) {
      fail("feature_probs", "entries must lie in (0, 1)");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) fail("feature_probs", "must sum to 1");
  if (cone_axis.size() != cone_dim) fail("cone_axis", "dimension must equal d_b");
  if (std::abs(cone_axis.norm() - 1.0) > 1e-12) fail("cone_axis", "must be unit norm");
  if (features.rows() != feature_dim || features.cols() != num_features) {
    fail("features", "must be d_X x K");
  }
  const MatrixXd gram = features.transpose() * features;
  if ((gram - MatrixXd::Identity(num_features, num_features)).cwiseAbs().maxCoeff() >
      1e-12) {
    fail("features", "must be orthonormal");
  }
}

std::vector<std::vector<int>> Prompt::feature_sets(int num_features) const {
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(num_features));
  for (std::size_t i = 0; i < input_features.size(); ++i) {
    sets[static_cast<std::size_t>(input_features[i])].push_back(static_cast<int>(i));
  }
  return sets;
}

Task sample_task(Rng& rng, const DataConfig& config) {
  VectorXd g(config.feature_dim);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = rng.normal();
    norm = g.norm();
  } while (norm == 0.0);
  return {g * (std::sqrt(static_cast<double>(config.feature_dim)) / norm), false};
}

Task ood_task(Rng& rng, const DataConfig& config, double scale) {
  if (!(scale > 1.0)) throw InvalidArgument("ood_task: scale must exceed 1");
  Task t = sample_task(rng, config);
  t.w *= scale;
  t.out_of_distribution = true;
  return t;
}

namespace {

Prompt build_prompt(Rng& rng, const Task& task, const DataConfig& config,
                    int query_feature) {
  Prompt p;
  const int n_in = config.num_examples;
  p.input_features.resize(static_cast<std::size_t>(n_in));
  p.inputs.resize(n_in, config.feature_dim);
  p.labels.resize(n_in);
  for (int i = 0; i < n_in; ++i) {
    const int k = static_cast<int>(rng.categorical(config.feature_probs));
    p.input_features[static_cast<std::size_t>(i)] = k;
    p.inputs.row(i) = config.features.col(k).transpose();
    p.labels[i] = task.w.dot(config.features.col(k));
  }
  if (query_feature < 0) {
    query_feature = static_cast<int>(rng.categorical(config.feature_probs));
  }
  p.query_feature = query_feature;
  p.query = config.features.col(query_feature);
  p.target = task.w.dot(p.query);
  return p;
}

}  // namespace

Prompt sample_prompt(Rng& rng, const Task& task, const DataConfig& config) {
  return build_prompt(rng, task, config, -1);
}

Prompt sample_prompt(Rng& rng, const Task& task, const DataConfig& config,
                     int query_feature) {
  if (query_feature < 0 || query_feature >= config.num_features) {
    throw InvalidArgument("sample_prompt: query feature out of range");
  }
  return build_prompt(rng, task, config, query_feature);
}

EmbeddingMatrix embed(const Prompt& prompt, const DataConfig& config) {
  const int n_in = config.num_examples;
  const int db = config.cone_dim;
  const int dx = config.feature_dim;
  if (prompt.inputs.rows() != n_in || prompt.inputs.cols() != dx ||
      config.cone_axis.size() != db) {
    throw InvalidArgument("embed: prompt does not match data config");
  }
  EmbeddingMatrix out;
  out.cone_dim = db;
  out.e = MatrixXd::Zero(config.prompt_len(), config.embed_dim());
  for (int i = 0; i < n_in; ++i) {
    out.e.block(2 * i, 0, 1, db) = config.cone_axis.transpose();
    out.e.block(2 * i, db, 1, dx) = prompt.inputs.row(i);
    out.e.block(2 * i + 1, 0, 1, db) = config.cone_axis.transpose();
    out.e(2 * i + 1, db + dx) = 1.0;
    out.e(2 * i + 1, db + dx + 1) = prompt.labels[i];
  }
  const int q = 2 * n_in;
  out.e.block(q, 0, 1, db) = config.cone_axis.transpose();
  out.e.block(q, db, 1, dx) = prompt.query.transpose();
  return out;
}

std::vector<Sample> make_batch(std::uint64_t seed, std::string_view tag,
                               std::size_t batch_size, const DataConfig& config) {
  std::vector<Sample> batch;
  batch.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    Rng rng(Rng::derive_seed(seed, tag, b));
    Task task = sample_task(rng, config);
    Prompt prompt = sample_prompt(rng, task, config);
    EmbeddingMatrix e = embed(prompt, config);
    batch.push_back({std::move(task), std::move(prompt), std::move(e)});
  }
  return batch;
}

}  // namespace slashlab
