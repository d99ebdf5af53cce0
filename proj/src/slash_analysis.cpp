#include "slashlab/slash_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "slashlab/errors.hpp"
#include "slashlab/parallel.hpp"

namespace slashlab {

void SlashConfig::validate() const {
  if (lags.empty()) throw InvalidArgument("slash.lags must be non-empty");
  if (!std::is_sorted(lags.begin(), lags.end())) {
    throw InvalidArgument("slash.lags must be sorted ascending");
  }
  for (int lag : lags) {
    if (lag < 0) throw InvalidArgument("slash.lags must be non-negative");
  }
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw InvalidArgument("slash.kappa must lie in [0, 1]");
  if (excluded_prefix < 0) throw InvalidArgument("slash.excluded_prefix must be >= 0");
  if (!std::isfinite(logit_scale)) throw InvalidArgument("slash.logit_scale must be finite");
}

MatrixXd attention_from_qk(const MatrixXd& q, const MatrixXd& k,
                           const FrequencySequence& freqs, const SlashConfig& config) {
  if (q.rows() != k.rows() || q.cols() != k.cols() ||
      static_cast<std::size_t>(q.cols()) != freqs.dim()) {
    throw InvalidArgument("attention_from_qk: Q, K and frequency dimensions disagree");
  }
  const Eigen::Index n = q.rows();
  MatrixXd qr(n, q.cols());
  MatrixXd kr(n, k.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    qr.row(i) = apply_rope(q.row(i).transpose(), i, freqs).transpose();
    kr.row(i) = apply_rope(k.row(i).transpose(), i, freqs).transpose();
  }
  MatrixXd logits = config.logit_scale * (qr * kr.transpose());
  return causal_softmax(logits);
}

double average_slash_score(const MatrixXd& s, int lag, int excluded_prefix) {
  const Eigen::Index n = s.rows();
  if (lag < 0 || lag >= n) {
    throw InvalidArgument("average_slash_score: lag " + std::to_string(lag) +
                          " outside [0, " + std::to_string(n) + ")");
  }
  double total = 0.0;
  long count = 0;
  for (Eigen::Index i = lag; i < n; ++i) {
    if (i < excluded_prefix || i - lag < excluded_prefix) continue;
    total += s(i, i - lag);
    ++count;
  }
  if (count == 0) throw InvalidArgument("average_slash_score: no admissible rows");
  return total / static_cast<double>(count);
}

SlashReport detect_sdh(const std::vector<MatrixXd>& batch, const SlashConfig& config) {
  config.validate();
  if (batch.empty()) throw InvalidArgument("detect_sdh: empty batch");
  SlashReport r;
  r.lags = config.lags;
  r.samples = batch.size();
  r.kappa = config.kappa;
  r.excluded_prefix = config.excluded_prefix;
  r.logit_scale = config.logit_scale;
  for (int lag : config.lags) {
    double total = 0.0;
    for (const MatrixXd& s : batch) total += average_slash_score(s, lag, config.excluded_prefix);
    const double score = total / static_cast<double>(batch.size());
    r.scores.push_back(score);
    r.detected.push_back(score >= config.kappa);
    r.intermediate_regime.push_back(lag >= 5 && lag < 500);
  }
  return r;
}

FrequencyBands frequency_thirds(std::size_t n) {
  FrequencyBands b;
  const std::size_t third = n / 3;
  for (std::size_t l = 0; l < n; ++l) {
    if (l < third) {
      b.high.push_back(l);
    } else if (l < 2 * third) {
      b.medium.push_back(l);
    } else {
      b.low.push_back(l);
    }
  }
  return b;
}

AblationReport band_ablation(const MatrixXd& q, const MatrixXd& k,
                             const FrequencySequence& freqs,
                             const std::set<std::size_t>& removed,
                             const std::vector<int>& lags, const SlashConfig& config) {
  AblationReport r;
  r.lags = lags;
  r.removed.assign(removed.begin(), removed.end());
  const MatrixXd base = attention_from_qk(q, k, freqs, config);
  const MatrixXd cut = attention_from_qk(q, k, freqs.with_removed(r.removed), config);
  for (int lag : lags) {
    const double b = average_slash_score(base, lag, config.excluded_prefix);
    const double a = average_slash_score(cut, lag, config.excluded_prefix);
    r.baseline.push_back(b);
    r.ablated.push_back(a);
    r.ratio.push_back(b > 0.0 ? std::optional<double>(a / b) : std::nullopt);
  }
  return r;
}

OodReport ood_evaluation(const ReducedParams& params, const DataConfig& config,
                         const FrequencySequence& freqs, std::uint64_t seed,
                         double scale, std::size_t prompts, unsigned threads) {
  if (prompts == 0) throw InvalidArgument("ood_evaluation: need at least one prompt");
  if (!(scale >= 1.0)) throw InvalidArgument("ood_evaluation: scale must be >= 1");

  struct Eval {
    double abs_err = 0.0;
    double slash = 0.0;
  };
  auto run = [&](std::string_view tag, bool shifted) {
    std::vector<Eval> evals(prompts);
    parallel_for(prompts, threads, [&](std::size_t idx) {
      Rng rng(Rng::derive_seed(seed, tag, idx));
      const Task task = shifted ? ood_task(rng, config, scale) : sample_task(rng, config);
      const Prompt prompt = sample_prompt(rng, task, config);
      const EmbeddingMatrix e = embed(prompt, config);
      const ForwardTrace tr = forward(params, config, freqs, prompt, e);
      evals[idx] = {std::abs(tr.y_hat - prompt.target), average_slash_score(tr.s1, 1, 0)};
    });
    Eval sum;
    for (const Eval& e : evals) {
      sum.abs_err += e.abs_err;
      sum.slash += e.slash;
    }
    sum.abs_err /= static_cast<double>(prompts);
    sum.slash /= static_cast<double>(prompts);
    return sum;
  };

  const Eval in = run("ood-in", false);
  const Eval out = run("ood-shifted", scale > 1.0);
  OodReport r;
  r.scale = scale;
  r.prompts = prompts;
  r.mae_in = in.abs_err;
  r.mae_ood = out.abs_err;
  r.slash_in = in.slash;
  r.slash_ood = out.slash;
  r.slash_ratio_d1 = in.slash > 0.0 ? out.slash / in.slash : 0.0;
  return r;
}

}  // namespace slashlab
