#include "slashlab/rope.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "slashlab/errors.hpp"

namespace slashlab {

namespace {

void check_dim(Eigen::Index n, const FrequencySequence& freqs, const char* what) {
  if (static_cast<std::size_t>(n) != freqs.dim()) {
    throw InvalidArgument(std::string(what) + ": dimension " + std::to_string(n) +
                          " does not match 2 x " + std::to_string(freqs.size()) +
                          " frequencies");
  }
}

// Wraps an angle into (-pi, pi].
double wrap_phase(double phi) {
  constexpr double pi = std::numbers::pi;
  phi = std::remainder(phi, 2.0 * pi);
  if (phi <= -pi) phi += 2.0 * pi;
  return phi;
}

}  // namespace

FrequencySequence FrequencySequence::cone_band() const {
  return {{values.begin(), values.begin() + static_cast<long>(cone_band_len)},
          cone_band_len};
}

FrequencySequence FrequencySequence::semantic_band() const {
  return {{values.begin() + static_cast<long>(cone_band_len), values.end()}, 0};
}

FrequencySequence FrequencySequence::with_removed(
    const std::vector<std::size_t>& blocks) const {
  FrequencySequence out = *this;
  for (std::size_t b : blocks) {
    if (b >= out.values.size()) {
      throw InvalidArgument("removed frequency index " + std::to_string(b) +
                            " out of range");
    }
    out.values[b] = 0.0;
  }
  return out;
}

FrequencySequence FrequencySequence::concat(const FrequencySequence& cone,
                                            const FrequencySequence& semantic) {
  FrequencySequence out;
  out.values = cone.values;
  out.values.insert(out.values.end(), semantic.values.begin(),
                    semantic.values.end());
  out.cone_band_len = cone.values.size();
  return out;
}

void FrequencySequence::validate() const {
  if (cone_band_len > values.size()) {
    throw InvalidArgument("cone band longer than frequency sequence");
  }
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) {
      throw InvalidArgument("frequencies must be finite and non-negative");
    }
  }
}

FrequencySequence classic_frequencies(int d, double base) {
  if (d < 2 || d % 2 != 0) {
    throw InvalidArgument("classic_frequencies: d must be even and >= 2, got " +
                          std::to_string(d));
  }
  if (!(base > 1.0)) {
    throw InvalidArgument("classic_frequencies: base must exceed 1");
  }
  FrequencySequence out;
  out.values.resize(static_cast<std::size_t>(d / 2));
  for (int l = 1; l <= d / 2; ++l) {
    out.values[static_cast<std::size_t>(l - 1)] =
        std::pow(base, -2.0 * l / static_cast<double>(d));
  }
  out.cone_band_len = out.values.size();
  return out;
}

FrequencySequence pulse_frequencies(int m, long horizon) {
  if (m < 1 || horizon < 1) {
    throw InvalidArgument("pulse_frequencies: m and horizon must be positive");
  }
  const long period = 2L * m + 1;
  if (period <= 2 * horizon) {
    throw AliasingError("pulse_frequencies: period 2m+1 = " +
                        std::to_string(period) +
                        " repeats the pulse inside horizon " +
                        std::to_string(horizon));
  }
  FrequencySequence out;
  out.values.reserve(static_cast<std::size_t>(m));
  for (int s = m; s >= 1; --s) {
    out.values.push_back(2.0 * std::numbers::pi * s / static_cast<double>(period));
  }
  out.cone_band_len = out.values.size();
  return out;
}

FrequencySequence low_frequencies(std::size_t count, double ceiling, double base) {
  if (!(ceiling >= 0.0) || !(base > 1.0)) {
    throw InvalidArgument("low_frequencies: need ceiling >= 0 and base > 1");
  }
  FrequencySequence out;
  out.values.resize(count);
  for (std::size_t s = 0; s < count; ++s) {
    out.values[s] = ceiling * std::pow(base, -static_cast<double>(s) /
                                                 static_cast<double>(count));
  }
  out.cone_band_len = 0;
  return out;
}

VectorXd apply_rope(const Eigen::Ref<const VectorXd>& v, long pos,
                    const FrequencySequence& freqs) {
  check_dim(v.size(), freqs, "apply_rope");
  VectorXd out(v.size());
  for (std::size_t l = 0; l < freqs.size(); ++l) {
    const Eigen::Index a = static_cast<Eigen::Index>(2 * l);
    const double angle = static_cast<double>(pos) * freqs.values[l];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    out[a] = c * v[a] - s * v[a + 1];
    out[a + 1] = s * v[a] + c * v[a + 1];
  }
  return out;
}

double relative_logit(const Eigen::Ref<const VectorXd>& q,
                      const Eigen::Ref<const VectorXd>& k, long i, long j,
                      const FrequencySequence& freqs) {
  check_dim(q.size(), freqs, "relative_logit");
  check_dim(k.size(), freqs, "relative_logit");
  const double offset = static_cast<double>(j - i);
  double total = 0.0;
  for (std::size_t l = 0; l < freqs.size(); ++l) {
    const Eigen::Index a = static_cast<Eigen::Index>(2 * l);
    const double angle = offset * freqs.values[l];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    // q_blk^T rho(angle) k_blk
    total += q[a] * (c * k[a] - s * k[a + 1]) + q[a + 1] * (s * k[a] + c * k[a + 1]);
  }
  return total;
}

PulseCheckResult pulse_check(const FrequencySequence& freqs, long horizon,
                             double tolerance) {
  if (horizon < 1) throw InvalidArgument("pulse_check: horizon must be >= 1");
  const FrequencySequence band = freqs.cone_band();
  if (band.values.empty()) throw InvalidArgument("pulse_check: empty cone band");

  auto f = [&](long x) {
    double s = 0.0;
    for (double theta : band.values) s += std::cos(theta * static_cast<double>(x));
    return s;
  };

  std::vector<double> nonzero;
  nonzero.reserve(static_cast<std::size_t>(2 * horizon));
  for (long x = 1; x <= horizon; ++x) {
    nonzero.push_back(f(x));
    nonzero.push_back(f(-x));
  }
  std::sort(nonzero.begin(), nonzero.end());
  const std::size_t n = nonzero.size();
  const double c2 = 0.5 * (nonzero[n / 2 - 1] + nonzero[n / 2]);

  PulseCheckResult r;
  r.c2 = c2;
  r.c1 = f(0) - c2;
  r.horizon = horizon;
  r.tolerance = tolerance;
  double eps = 0.0;
  for (long x = -horizon; x <= horizon; ++x) {
    const double target = (x == 0 ? r.c1 : 0.0) + c2;
    eps = std::max(eps, std::abs(f(x) - target));
  }
  r.eps_fn = eps;
  r.passed = eps <= tolerance;
  return r;
}

InPDecomposition inp_decompose(const Eigen::Ref<const VectorXd>& q,
                               const Eigen::Ref<const VectorXd>& k, long i,
                               long j, const FrequencySequence& freqs) {
  check_dim(q.size(), freqs, "inp_decompose");
  check_dim(k.size(), freqs, "inp_decompose");
  InPDecomposition out;
  const std::size_t n = freqs.size();
  out.contributions.resize(n);
  out.amplitudes.resize(n);
  out.phases.resize(n);
  const double offset = static_cast<double>(j - i);
  for (std::size_t l = 0; l < n; ++l) {
    const Eigen::Index a = static_cast<Eigen::Index>(2 * l);
    const double angle = offset * freqs.values[l];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double contrib =
        q[a] * (c * k[a] - s * k[a + 1]) + q[a + 1] * (s * k[a] + c * k[a + 1]);
    const double qn = std::hypot(q[a], q[a + 1]);
    const double kn = std::hypot(k[a], k[a + 1]);
    out.contributions[l] = contrib;
    out.amplitudes[l] = qn * kn;
    // InP = A cos(theta (i - j) + phi) with phi = arg(q_blk) - arg(k_blk).
    out.phases[l] = out.amplitudes[l] > 0.0
                        ? wrap_phase(std::atan2(q[a + 1], q[a]) -
                                     std::atan2(k[a + 1], k[a]))
                        : 0.0;
  }
  // Fixed left-to-right order; the total is defined as this sum.
  double total = 0.0;
  for (double v : out.contributions) total += v;
  out.total = total;
  return out;
}

}  // namespace slashlab
