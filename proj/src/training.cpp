#include "slashlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "slashlab/errors.hpp"
#include "slashlab/parallel.hpp"

namespace slashlab {

double TrainConfig::resolved_eps1(int prompt_len) const {
  return eps1.value_or(std::max(0.1, std::pow(prompt_len, -0.5)));
}

double TrainConfig::resolved_eps2(int prompt_len) const {
  return eps2.value_or(std::max(0.3, std::pow(prompt_len, -0.25)));
}

void TrainConfig::validate(int prompt_len) const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InvalidArgument("train." + field + ": " + why);
  };
  if (!(eta1 >= 0.0) || !std::isfinite(eta1)) fail("eta1", "must be non-negative");
  if (!(eta2 >= 0.0) || !std::isfinite(eta2)) fail("eta2", "must be non-negative");
  if (tau1 < 0) fail("tau1", "must be non-negative");
  if (tau2 < 0) fail("tau2", "must be non-negative");
  if (batch_size < 1) fail("B", "must be >= 1");
  if (snapshot_every < 1) fail("snapshot_every", "must be >= 1");
  if (probes_per_feature < 1) fail("probes_per_feature", "must be >= 1");
  const double e1 = resolved_eps1(prompt_len);
  const double e2 = resolved_eps2(prompt_len);
  if (!(e1 > 0.0 && e1 < 1.0)) fail("eps1", "must lie in (0, 1)");
  if (!(e2 > 0.0 && e2 < 1.0)) fail("eps2", "must lie in (0, 1)");
  if (e1 > e2) fail("eps1", "must not exceed eps2");
}

namespace {

struct SampleTerms {
  double loss = 0.0;
  VectorXd offset_grad;  // dL/dA summed along each causal diagonal
  MatrixXd w2_grad;
};

SampleTerms sample_terms(const ReducedParams& params, const MatrixXd& s1,
                         const FrequencySequence& sem, const Sample& sample,
                         bool want_w1, bool want_w2) {
  const EmbeddingMatrix& e = sample.embedding;
  const Eigen::Index n = e.e.rows();
  const MatrixXd sem_rows = e.semantic();
  const VectorXd labels = e.labels();
  const VectorXd eq = sem_rows.row(n - 1).transpose();
  const MatrixXd z = s1 * sem_rows;
  const VectorXd query = params.w2.transpose() * eq;

  // Row j of qhat is R_{N-j} W2^T E_q, so u_j = <qhat_j, z_j>.
  MatrixXd qhat(n, query.size());
  VectorXd u(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    qhat.row(j) = apply_rope(query, (n - 1) - j, sem).transpose();
    u[j] = qhat.row(j).dot(z.row(j));
  }
  const double mx = u.maxCoeff();
  VectorXd s2 = (u.array() - mx).exp().matrix();
  s2 /= s2.sum();
  const double y_hat = s2.dot(labels);
  const double r = y_hat - sample.prompt.target;
  const VectorXd delta = (r * s2.array() * (labels.array() - y_hat)).matrix();

  SampleTerms out;
  out.loss = 0.5 * r * r;
  if (want_w1) {
    out.offset_grad = VectorXd::Zero(n);
    const MatrixXd inner = qhat * sem_rows.transpose();  // I(j)_m
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index m = 0; m <= j; ++m) {
        out.offset_grad[j - m] += delta[j] * s1(j, m) * (inner(j, m) - u[j]);
      }
    }
  }
  if (want_w2) {
    VectorXd acc = VectorXd::Zero(query.size());
    for (Eigen::Index j = 0; j < n; ++j) {
      acc += delta[j] * apply_rope(z.row(j).transpose(), j - (n - 1), sem);
    }
    out.w2_grad = eq * acc.transpose();
  }
  return out;
}

void check_batch(const std::vector<Sample>& batch) {
  if (batch.empty()) throw InvalidArgument("batch must be non-empty");
}

}  // namespace

LossAndGradients loss_and_gradients(const ReducedParams& params,
                                    const DataConfig& config,
                                    const FrequencySequence& freqs,
                                    const std::vector<Sample>& batch, bool want_w1,
                                    bool want_w2, unsigned threads) {
  check_batch(batch);
  check_bands(config, freqs);
  const MatrixXd s1 = causal_softmax(layer1_logits(params, config, freqs));
  const FrequencySequence sem = freqs.semantic_band();

  std::vector<SampleTerms> terms(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t b) {
    terms[b] = sample_terms(params, s1, sem, batch[b], want_w1, want_w2);
  });
  const SampleTerms total =
      pairwise_sum(std::move(terms), [&](const SampleTerms& a, const SampleTerms& b) {
        SampleTerms s;
        s.loss = a.loss + b.loss;
        if (want_w1) s.offset_grad = a.offset_grad + b.offset_grad;
        if (want_w2) s.w2_grad = a.w2_grad + b.w2_grad;
        return s;
      });

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossAndGradients out;
  out.loss = total.loss * inv_b;
  if (want_w1) {
    const FrequencySequence cone = freqs.cone_band();
    const VectorXd key = cone_key(config.cone_dim);
    VectorXd g = VectorXd::Zero(config.cone_dim);
    for (Eigen::Index delta = 0; delta < total.offset_grad.size(); ++delta) {
      g += total.offset_grad[delta] * apply_rope(key, -delta, cone);
    }
    out.grad_w1 = inv_b * config.cone_axis * g.transpose();
  }
  if (want_w2) out.grad_w2 = inv_b * total.w2_grad;
  return out;
}

double mc_loss(const ReducedParams& params, const DataConfig& config,
               const FrequencySequence& freqs, const std::vector<Sample>& batch,
               unsigned threads) {
  return loss_and_gradients(params, config, freqs, batch, false, false, threads).loss;
}

double mc_loss(const ReducedParams& params, std::uint64_t seed, std::size_t batch_size,
               const DataConfig& config, const FrequencySequence& freqs,
               unsigned threads) {
  return mc_loss(params, config, freqs, make_batch(seed, "loss", batch_size, config),
                 threads);
}

MatrixXd grad_w1(const ReducedParams& params, const DataConfig& config,
                 const FrequencySequence& freqs, const std::vector<Sample>& batch,
                 unsigned threads) {
  return loss_and_gradients(params, config, freqs, batch, true, false, threads).grad_w1;
}

MatrixXd grad_w2(const ReducedParams& params, const DataConfig& config,
                 const FrequencySequence& freqs, const std::vector<Sample>& batch,
                 unsigned threads) {
  return loss_and_gradients(params, config, freqs, batch, false, true, threads).grad_w2;
}

MatrixXd finite_diff_grad(const std::function<double(const MatrixXd&)>& f,
                          const MatrixXd& x, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff_grad: h must be positive");
  MatrixXd g(x.rows(), x.cols());
  MatrixXd probe = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double orig = probe(r, c);
      probe(r, c) = orig + h;
      const double up = f(probe);
      probe(r, c) = orig - h;
      const double down = f(probe);
      probe(r, c) = orig;
      g(r, c) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

double gradient_relative_error(const MatrixXd& analytic, const MatrixXd& numeric) {
  const double scale =
      std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

void GradCheckConfig::validate() const {
  if (num_examples < 1) throw InvalidArgument("gradcheck.n_in must be >= 1");
  if (num_features < 1) throw InvalidArgument("gradcheck.k must be >= 1");
  if (cone_dim < 2 || cone_dim % 2 != 0) throw InvalidArgument("gradcheck.d_b must be even and >= 2");
  if (feature_dim < num_features || feature_dim % 2 != 0) {
    throw InvalidArgument("gradcheck.d_x must be even and >= k");
  }
  if (batch_size < 1) throw InvalidArgument("gradcheck.batch must be >= 1");
  if (points < 1) throw InvalidArgument("gradcheck.points must be >= 1");
  if (!(h > 0.0)) throw InvalidArgument("gradcheck.h must be positive");
  if (!(param_scale >= 0.0)) throw InvalidArgument("gradcheck.param_scale must be >= 0");
}

GradCheckReport gradient_check(const GradCheckConfig& config, unsigned threads) {
  config.validate();
  DataConfig data = DataConfig::make(config.num_features, config.num_examples,
                                     config.feature_dim, config.cone_dim);
  const int n = data.prompt_len();
  const int m = config.cone_dim / 2;
  FrequencySequence cone = 2 * m + 1 > 2 * n ? pulse_frequencies(m, n)
                                             : classic_frequencies(config.cone_dim, 10000.0);
  const FrequencySequence freqs = FrequencySequence::concat(
      cone, low_frequencies(static_cast<std::size_t>(data.semantic_dim() / 2), 1.0, 10000.0));

  GradCheckReport report;
  for (int p = 0; p < config.points; ++p) {
    Rng rng(Rng::derive_seed(config.seed, "gradcheck-point", static_cast<std::uint64_t>(p)));
    VectorXd axis(config.cone_dim);
    for (Eigen::Index i = 0; i < axis.size(); ++i) axis(i) = rng.normal();
    data.cone_axis = axis.normalized();
    ReducedParams params = ReducedParams::init(data);
    for (Eigen::Index i = 0; i < params.w1.size(); ++i) {
      params.w1(i) = config.param_scale * rng.normal();
    }
    for (Eigen::Index i = 0; i < params.w2.size(); ++i) {
      params.w2(i) += config.param_scale * rng.normal();
    }
    const std::vector<Sample> batch =
        make_batch(Rng::derive_seed(config.seed, "gradcheck-batch", static_cast<std::uint64_t>(p)),
                   "gradcheck", config.batch_size, data);
    const LossAndGradients lg = loss_and_gradients(params, data, freqs, batch, true, true, threads);

    const MatrixXd num_w1 = finite_diff_grad(
        [&](const MatrixXd& w) {
          ReducedParams q = params;
          q.w1 = w;
          return mc_loss(q, data, freqs, batch, threads);
        },
        params.w1, config.h);
    const MatrixXd num_w2 = finite_diff_grad(
        [&](const MatrixXd& w) {
          ReducedParams q = params;
          q.w2 = w;
          return mc_loss(q, data, freqs, batch, threads);
        },
        params.w2, config.h);
    report.errors_w1.push_back(gradient_relative_error(lg.grad_w1, num_w1));
    report.errors_w2.push_back(gradient_relative_error(lg.grad_w2, num_w2));
    report.max_error = std::max({report.max_error, report.errors_w1.back(), report.errors_w2.back()});
  }
  return report;
}

Layer1Summary layer1_summary(const ReducedParams& params, const DataConfig& config,
                             const FrequencySequence& freqs) {
  const int n = config.prompt_len();
  const std::vector<double> offsets = layer1_offset_logits(params, config, freqs, n);
  const MatrixXd s1 = causal_softmax(layer1_logits(params, config, freqs));
  Layer1Summary s;
  s.min_prev_score = 1.0;
  double total = 0.0;
  for (int i = 1; i < n; ++i) {
    s.min_prev_score = std::min(s.min_prev_score, s1(i, i - 1));
    total += s1(i, i - 1);
  }
  s.slash_score_d1 = n > 1 ? total / (n - 1) : 0.0;
  // Row i sees offsets 0..i; the worst row is the longest one.
  double rival = offsets[0];
  for (int delta = 2; delta < n; ++delta) rival = std::max(rival, offsets[static_cast<std::size_t>(delta)]);
  s.logit_gap = n > 1 ? offsets[1] - rival : 0.0;
  return s;
}

DynamicsSnapshot probe_snapshot(const ReducedParams& params, const DataConfig& config,
                                const FrequencySequence& freqs,
                                const TrainConfig& train, long t) {
  const int k_count = config.num_features;
  const int per = train.probes_per_feature;
  const std::size_t total = static_cast<std::size_t>(k_count * per);
  const std::uint64_t probe_seed =
      Rng::derive_seed(train.seed, "probe", static_cast<std::uint64_t>(t));

  struct ProbeOut {
    int query_feature = 0;
    double loss = 0.0;
    double match_error = 0.0;
    double score = 0.0;
    std::vector<double> logit_sum;
    std::vector<int> logit_count;
  };
  std::vector<ProbeOut> outs(total);
  parallel_for(total, train.threads, [&](std::size_t idx) {
    const int k = static_cast<int>(idx) / per;
    Rng rng(Rng::derive_seed(probe_seed, "prompt", idx));
    const Task task = sample_task(rng, config);
    const Prompt prompt = sample_prompt(rng, task, config, k);
    const EmbeddingMatrix e = embed(prompt, config);
    const ForwardTrace tr = forward(params, config, freqs, prompt, e);
    ProbeOut& o = outs[idx];
    o.query_feature = k;
    const double r = tr.y_hat - prompt.target;
    o.loss = 0.5 * r * r;
    o.score = tr.s2_by_feature[static_cast<std::size_t>(k)];
    o.match_error = (1.0 - o.score) * (1.0 - o.score);
    o.logit_sum.assign(static_cast<std::size_t>(k_count), 0.0);
    o.logit_count.assign(static_cast<std::size_t>(k_count), 0);
    for (std::size_t i = 0; i < prompt.input_features.size(); ++i) {
      const auto f = static_cast<std::size_t>(prompt.input_features[i]);
      o.logit_sum[f] += tr.u[static_cast<Eigen::Index>(2 * i + 1)];
      o.logit_count[f] += 1;
    }
  });

  DynamicsSnapshot snap;
  snap.t = t;
  const Layer1Summary l1 = layer1_summary(params, config, freqs);
  snap.min_prev_score = l1.min_prev_score;
  snap.logit_gap = l1.logit_gap;
  snap.slash_score_d1 = l1.slash_score_d1;
  snap.feature_scores.assign(static_cast<std::size_t>(k_count), 0.0);
  snap.feature_match_error.assign(static_cast<std::size_t>(k_count), 0.0);
  std::vector<double> logit_sum(static_cast<std::size_t>(k_count), 0.0);
  std::vector<double> logit_count(static_cast<std::size_t>(k_count), 0.0);
  double loss = 0.0;
  for (const ProbeOut& o : outs) {
    loss += o.loss;
    snap.feature_scores[static_cast<std::size_t>(o.query_feature)] += o.score;
    snap.feature_match_error[static_cast<std::size_t>(o.query_feature)] += o.match_error;
    if (o.query_feature == train.probe_question_feature) {
      for (int m = 0; m < k_count; ++m) {
        logit_sum[static_cast<std::size_t>(m)] += o.logit_sum[static_cast<std::size_t>(m)];
        logit_count[static_cast<std::size_t>(m)] += o.logit_count[static_cast<std::size_t>(m)];
      }
    }
  }
  snap.loss_estimate = loss / static_cast<double>(total);
  snap.feature_logit_means.resize(static_cast<std::size_t>(k_count));
  for (int m = 0; m < k_count; ++m) {
    const auto mi = static_cast<std::size_t>(m);
    snap.feature_scores[mi] /= per;
    snap.feature_match_error[mi] /= per;
    snap.feature_logit_means[mi] = logit_count[mi] > 0 ? logit_sum[mi] / logit_count[mi] : 0.0;
  }
  return snap;
}

TrainResult two_stage_gd(const TrainConfig& train, const DataConfig& data,
                         const FrequencySequence& freqs,
                         const std::function<void(const DynamicsSnapshot&)>& on_snapshot) {
  data.validate();
  return two_stage_gd(train, data, freqs, ReducedParams::init(data), on_snapshot);
}

TrainResult two_stage_gd(const TrainConfig& train, const DataConfig& data,
                         const FrequencySequence& freqs, const ReducedParams& initial,
                         const std::function<void(const DynamicsSnapshot&)>& on_snapshot) {
  data.validate();
  const int n = data.prompt_len();
  train.validate(n);
  check_bands(data, freqs);
  freqs.validate();
  if (train.probe_question_feature < 0 || train.probe_question_feature >= data.num_features) {
    throw InvalidArgument("train.probe_question_feature: out of range");
  }

  TrainResult result;
  const PulseCheckResult pulse = pulse_check(freqs, n, 0.0);
  if (!(pulse.eps_fn <= std::abs(pulse.c1) / n)) {
    result.warnings.push_back("cone band does not approximate a pulse over the prompt (eps_fn = " +
                              std::to_string(pulse.eps_fn) + ")");
  }

  const double eps1 = train.resolved_eps1(n);
  const double eps2 = train.resolved_eps2(n);
  if (initial.w1.rows() != data.cone_dim || initial.w1.cols() != data.cone_dim ||
      initial.w2.rows() != data.semantic_dim() || initial.w2.cols() != data.semantic_dim()) {
    throw InvalidArgument("two_stage_gd: initial parameters do not match the data dimensions");
  }
  result.params = initial;
  ReducedParams& p = result.params;

  auto record = [&](long t, int stage) -> const DynamicsSnapshot& {
    DynamicsSnapshot s = probe_snapshot(p, data, freqs, train, t);
    s.stage = stage;
    result.snapshots.push_back(std::move(s));
    if (on_snapshot) on_snapshot(result.snapshots.back());
    return result.snapshots.back();
  };

  long t = 0;
  record(t, 1);

  // Stage I: W1 only.
  long stage1 = 0;
  while (stage1 < train.tau1) {
    if (train.early_stop && layer1_summary(p, data, freqs).min_prev_score >= 1.0 - eps1) break;
    ++t;
    ++stage1;
    const auto batch = make_batch(Rng::derive_seed(train.seed, "step", static_cast<std::uint64_t>(t)),
                                  "train", train.batch_size, data);
    LossAndGradients lg = loss_and_gradients(p, data, freqs, batch, true, false, train.threads);
    if (!std::isfinite(lg.loss) || !lg.grad_w1.allFinite()) {
      throw DivergedError("non-finite Stage I loss or gradient", t);
    }
    p.w1 -= train.eta1 * lg.grad_w1;
    if (!p.w1.allFinite()) throw DivergedError("non-finite W1", t);
    if (t % train.snapshot_every == 0) record(t, 1);
  }
  result.stage1_steps = stage1;
  if (result.snapshots.back().t != t) record(t, 1);
  result.stage2_start_loss = result.snapshots.back().loss_estimate;

  // Stage II: W2 only.
  long stage2 = 0;
  auto stage2_done = [&](const DynamicsSnapshot& s) {
    const double worst =
        *std::max_element(s.feature_match_error.begin(), s.feature_match_error.end());
    return worst <= eps2 && s.loss_estimate <= eps2;
  };
  bool done = train.early_stop && stage2_done(result.snapshots.back());
  while (!done && stage2 < train.tau2) {
    ++t;
    ++stage2;
    const auto batch = make_batch(Rng::derive_seed(train.seed, "step", static_cast<std::uint64_t>(t)),
                                  "train", train.batch_size, data);
    LossAndGradients lg = loss_and_gradients(p, data, freqs, batch, false, true, train.threads);
    if (!std::isfinite(lg.loss) || !lg.grad_w2.allFinite()) {
      throw DivergedError("non-finite Stage II loss or gradient", t);
    }
    p.w2 -= train.eta2 * lg.grad_w2;
    if (!p.w2.allFinite()) throw DivergedError("non-finite W2", t);
    if (t % train.snapshot_every == 0) {
      done = train.early_stop && stage2_done(record(t, 2));
    }
  }
  result.stage2_steps = stage2;
  if (result.snapshots.back().t != t || result.snapshots.back().stage != 2) {
    if (stage2 > 0) record(t, 2);
  }
  result.final_loss = result.snapshots.back().loss_estimate;
  return result;
}

}  // namespace slashlab
