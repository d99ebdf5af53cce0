#include "slashlab/rank_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "slashlab/errors.hpp"

namespace slashlab {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw InvalidArgument("tau must lie in (0, 1], got " + std::to_string(tau));
  }
}

}  // namespace

Svd thin_svd(const MatrixXd& x) {
  Eigen::JacobiSVD<MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

int prefix_rank(std::span<const double> ratios, double tau) {
  double acc = 0.0;
  for (std::size_t l = 0; l < ratios.size(); ++l) {
    acc += ratios[l];
    if (acc >= tau - kCumulativeSlack) return static_cast<int>(l + 1);
  }
  return static_cast<int>(ratios.size());
}

SpectralReport spectral_report(const MatrixXd& x, double tau) {
  check_tau(tau);
  if (x.size() == 0) throw InvalidArgument("spectral_report: empty matrix");
  const VectorXd sigma = thin_svd(x).sigma;
  const double power = sigma.squaredNorm();
  if (!(power > 0.0)) throw DegenerateError("spectral_report: all-zero matrix");

  SpectralReport r;
  r.tau = tau;
  r.singular_values.assign(sigma.data(), sigma.data() + sigma.size());
  r.power_ratios.resize(r.singular_values.size());
  for (std::size_t l = 0; l < r.power_ratios.size(); ++l) {
    r.power_ratios[l] = r.singular_values[l] * r.singular_values[l] / power;
  }
  r.effective_rank = prefix_rank(r.power_ratios, tau);
  return r;
}

AlignmentReport aligned_report(const VectorXd& x, const MatrixXd& w,
                               const std::optional<VectorXd>& bias, double tau) {
  if (x.size() != w.rows()) {
    throw InvalidArgument("aligned_report: token dimension " +
                          std::to_string(x.size()) + " != W rows " +
                          std::to_string(w.rows()));
  }
  if (bias && bias->size() != w.cols()) {
    throw InvalidArgument("aligned_report: bias dimension must equal W columns");
  }
  return aligned_report(x, thin_svd(w), bias, tau);
}

AlignmentReport aligned_report(const VectorXd& x, const Svd& w_svd,
                               const std::optional<VectorXd>& bias, double tau) {
  check_tau(tau);
  const VectorXd proj = w_svd.u.transpose() * x;
  const Eigen::Index n = proj.size();
  std::vector<double> scores(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = w_svd.sigma[i] * proj[i];
    scores[static_cast<std::size_t>(i)] = s * s;
  }
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });

  AlignmentReport r;
  r.tau = tau;
  r.has_bias = bias.has_value();
  std::vector<double> sorted;
  if (bias) {
    sorted.push_back(bias->squaredNorm());
    r.order.push_back(kBiasSlot);
  }
  for (int idx : order) {
    sorted.push_back(scores[static_cast<std::size_t>(idx)]);
    r.order.push_back(idx);
  }
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  if (!(total > 0.0)) throw DegenerateError("aligned_report: token carries no power");
  r.aligned_ratios.resize(sorted.size());
  for (std::size_t l = 0; l < sorted.size(); ++l) r.aligned_ratios[l] = sorted[l] / total;
  r.aligned_rank = prefix_rank(r.aligned_ratios, tau);
  return r;
}

VectorXd rmsn(const VectorXd& x, double eps) {
  if (x.size() == 0) return x;
  const double ms = x.squaredNorm() / static_cast<double>(x.size());
  return x / std::sqrt(ms + eps);
}

std::pair<VectorXd, int> dominant_direction(const MatrixXd& w,
                                            std::span<const VectorXd> tokens) {
  if (tokens.empty()) throw InvalidArgument("dominant_direction: empty token set");
  const Svd svd = thin_svd(w);
  if (!(svd.sigma.size() > 0 && svd.sigma[0] > 0.0)) {
    throw DegenerateError("dominant_direction: zero spectrum");
  }
  VectorXd acc = VectorXd::Zero(svd.sigma.size());
  for (const VectorXd& x : tokens) {
    if (x.size() != w.rows()) throw InvalidArgument("dominant_direction: token dimension");
    const VectorXd p = svd.sigma.cwiseProduct(svd.u.transpose() * rmsn(x));
    acc += p.cwiseAbs2();
  }
  int best = 0;
  for (Eigen::Index l = 1; l < acc.size(); ++l) {
    if (acc[l] > acc[best]) best = static_cast<int>(l);
  }
  return {svd.u.col(best), best};
}

double relative_variation(std::span<const double> projections) {
  if (projections.empty()) throw InvalidArgument("relative_variation: empty set");
  const double n = static_cast<double>(projections.size());
  const double mean = std::accumulate(projections.begin(), projections.end(), 0.0) / n;
  if (std::abs(mean) < 1e-12) {
    throw DegenerateError("relative_variation: mean projection is zero");
  }
  double var = 0.0;
  for (double p : projections) var += (p - mean) * (p - mean);
  var /= n;
  return std::sqrt(var) / std::abs(mean);
}

double relative_variation(const VectorXd& direction,
                          std::span<const VectorXd> tokens) {
  std::vector<double> proj;
  proj.reserve(tokens.size());
  for (const VectorXd& x : tokens) {
    if (x.size() != direction.size()) {
      throw InvalidArgument("relative_variation: token dimension");
    }
    proj.push_back(direction.dot(rmsn(x)));
  }
  return relative_variation(proj);
}

std::vector<double> direction_power(const MatrixXd& w, const MatrixXd& hidden,
                                    const std::optional<VectorXd>& bias) {
  if (hidden.cols() != w.rows()) {
    throw InvalidArgument("direction_power: hidden-state width must equal W rows");
  }
  const Svd svd = thin_svd(w);
  std::vector<double> power;
  if (bias) power.push_back(bias->squaredNorm() * static_cast<double>(hidden.rows()));
  const MatrixXd proj = hidden * svd.u;  // tokens x directions
  for (Eigen::Index l = 0; l < proj.cols(); ++l) {
    power.push_back(svd.sigma[l] * svd.sigma[l] * proj.col(l).squaredNorm());
  }
  const double total = std::accumulate(power.begin(), power.end(), 0.0);
  if (!(total > 0.0)) throw DegenerateError("direction_power: no power");
  for (double& p : power) p /= total;
  return power;
}

TruncationResult low_rank_truncate(const MatrixXd& w,
                                   std::span<const double> avg_power,
                                   double thre, int rank_thre, bool bias_slot) {
  if (!(thre > 0.0 && thre <= 1.0)) throw InvalidArgument("low_rank_truncate: thre");
  if (rank_thre < 1) throw InvalidArgument("low_rank_truncate: rank_thre must be >= 1");
  const Svd svd = thin_svd(w);
  const std::size_t dirs = static_cast<std::size_t>(svd.sigma.size());
  const std::size_t offset = bias_slot ? 1 : 0;
  if (avg_power.size() != dirs + offset) {
    throw InvalidArgument("low_rank_truncate: expected " +
                          std::to_string(dirs + offset) + " power entries, got " +
                          std::to_string(avg_power.size()));
  }
  const double sum = std::accumulate(avg_power.begin(), avg_power.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-6) {
    throw InvalidArgument("low_rank_truncate: average power must sum to 1");
  }

  std::vector<int> order(dirs);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return avg_power[offset + static_cast<std::size_t>(a)] >
           avg_power[offset + static_cast<std::size_t>(b)];
  });

  double acc = bias_slot ? avg_power[0] : 0.0;
  int kept = 0;
  if (!(bias_slot && acc >= thre - kCumulativeSlack)) {
    for (int idx : order) {
      acc += avg_power[offset + static_cast<std::size_t>(idx)];
      ++kept;
      if (acc >= thre - kCumulativeSlack) break;
    }
  }

  TruncationResult r;
  r.kept_rank = kept;
  if (kept >= rank_thre || static_cast<std::size_t>(kept) >= dirs) {
    r.w = w;
    return r;
  }
  r.w = MatrixXd::Zero(w.rows(), w.cols());
  for (int l = 0; l < kept; ++l) {
    const int idx = order[static_cast<std::size_t>(l)];
    r.w += svd.sigma[idx] * svd.u.col(idx) * svd.v.col(idx).transpose();
  }
  r.truncated = true;
  return r;
}

}  // namespace slashlab
