#include "slashlab/shallow_model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "slashlab/errors.hpp"

namespace slashlab {

ReducedParams ReducedParams::init(const DataConfig& config) {
  return {MatrixXd::Zero(config.cone_dim, config.cone_dim),
          MatrixXd::Identity(config.semantic_dim(), config.semantic_dim())};
}

bool ReducedParams::finite() const { return w1.allFinite() && w2.allFinite(); }

VectorXd cone_key(int cone_dim) {
  VectorXd k = VectorXd::Zero(cone_dim);
  for (int i = 0; i < cone_dim; i += 2) k[i] = 1.0;
  return k;
}

void check_bands(const DataConfig& config, const FrequencySequence& freqs) {
  const std::size_t cone = static_cast<std::size_t>(config.cone_dim / 2);
  const std::size_t sem = static_cast<std::size_t>(config.semantic_dim() / 2);
  if (freqs.cone_band_len != cone || freqs.size() != cone + sem) {
    throw InvalidArgument("frequency bands (" + std::to_string(freqs.cone_band_len) +
                          " cone, " + std::to_string(freqs.size() - freqs.cone_band_len) +
                          " semantic) do not match d_b/2 = " + std::to_string(cone) +
                          " and (d_x+2)/2 = " + std::to_string(sem));
  }
}

std::vector<double> layer1_offset_logits(const ReducedParams& params,
                                         const DataConfig& config,
                                         const FrequencySequence& freqs, int n) {
  check_bands(config, freqs);
  const FrequencySequence cone = freqs.cone_band();
  const VectorXd query = params.w1.transpose() * config.cone_axis;
  const VectorXd key = cone_key(config.cone_dim);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int delta = 0; delta < n; ++delta) {
    // c^T W1 R_{j-i} c~ with j - i = -delta
    out[static_cast<std::size_t>(delta)] = relative_logit(query, key, delta, 0, cone);
  }
  return out;
}

MatrixXd layer1_logits(const ReducedParams& params, const DataConfig& config,
                       const FrequencySequence& freqs) {
  const int n = config.prompt_len();
  const std::vector<double> offsets = layer1_offset_logits(params, config, freqs, n);
  MatrixXd a = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) a(i, j) = offsets[static_cast<std::size_t>(i - j)];
  }
  return a;
}

MatrixXd causal_softmax(const MatrixXd& logits) {
  const Eigen::Index n = logits.rows();
  MatrixXd s = MatrixXd::Zero(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index width = std::min(i + 1, logits.cols());
    const double mx = logits.row(i).head(width).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j < width; ++j) {
      s(i, j) = std::exp(logits(i, j) - mx);
      total += s(i, j);
    }
    s.row(i).head(width) /= total;
  }
  return s;
}

VectorXd layer2_logits(const ReducedParams& params, const MatrixXd& s1,
                       const EmbeddingMatrix& e, const FrequencySequence& freqs) {
  const FrequencySequence sem = freqs.semantic_band();
  const Eigen::Index n = e.e.rows();
  const Eigen::Index m = e.e.cols() - e.cone_dim;
  if (static_cast<std::size_t>(m) != sem.dim() || params.w2.rows() != m ||
      params.w2.cols() != m || s1.rows() != n || s1.cols() != n) {
    throw InvalidArgument("layer2_logits: dimension mismatch");
  }
  const MatrixXd z = s1 * e.semantic();
  const VectorXd query = params.w2.transpose() * e.semantic().row(n - 1).transpose();
  VectorXd u(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    u[j] = relative_logit(query, z.row(j).transpose(), n - 1, j, sem);
  }
  return u;
}

Prediction predict(const VectorXd& u, const EmbeddingMatrix& e) {
  Prediction p;
  const double mx = u.maxCoeff();
  p.s2 = (u.array() - mx).exp().matrix();
  p.s2 /= p.s2.sum();
  p.y_hat = p.s2.dot(e.labels());
  return p;
}

std::vector<double> feature_scores(const VectorXd& s2, const Prompt& prompt,
                                   int num_features) {
  std::vector<double> out(static_cast<std::size_t>(num_features), 0.0);
  for (std::size_t i = 0; i < prompt.input_features.size(); ++i) {
    // example i (0-based) has its label at row 2i + 1
    out[static_cast<std::size_t>(prompt.input_features[i])] +=
        s2[static_cast<Eigen::Index>(2 * i + 1)];
  }
  return out;
}

ForwardTrace forward(const ReducedParams& params, const DataConfig& config,
                     const FrequencySequence& freqs, const Prompt& prompt,
                     const EmbeddingMatrix& e) {
  ForwardTrace t;
  t.a = layer1_logits(params, config, freqs);
  t.s1 = causal_softmax(t.a);
  t.u = layer2_logits(params, t.s1, e, freqs);
  Prediction p = predict(t.u, e);
  t.s2 = std::move(p.s2);
  t.y_hat = p.y_hat;
  t.s2_by_feature = feature_scores(t.s2, prompt, config.num_features);
  return t;
}

std::pair<MatrixXd, MatrixXd> layer1_qk(const ReducedParams& params,
                                        const DataConfig& config) {
  const int n = config.prompt_len();
  const int d = config.embed_dim();
  MatrixXd q = MatrixXd::Zero(n, d);
  MatrixXd k = MatrixXd::Zero(n, d);
  const VectorXd qrow = params.w1.transpose() * config.cone_axis;
  const VectorXd krow = cone_key(config.cone_dim);
  for (int i = 0; i < n; ++i) {
    q.row(i).head(config.cone_dim) = qrow.transpose();
    k.row(i).head(config.cone_dim) = krow.transpose();
  }
  return {q, k};
}

namespace {

struct CsaResult {
  MatrixXd scores;
  MatrixXd output;
};

// softmax(M(rope(H Wq) rope(H Wk)^T)) H Wv, positions 1..N.
CsaResult csa(const MatrixXd& h, const MatrixXd& wq, const MatrixXd& wk,
              const MatrixXd& wv, const FrequencySequence& freqs) {
  const MatrixXd q = h * wq;
  const MatrixXd k = h * wk;
  const Eigen::Index n = h.rows();
  MatrixXd qr(n, q.cols());
  MatrixXd kr(n, k.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    qr.row(i) = apply_rope(q.row(i).transpose(), i + 1, freqs).transpose();
    kr.row(i) = apply_rope(k.row(i).transpose(), i + 1, freqs).transpose();
  }
  MatrixXd logits = qr * kr.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) logits(i, j) = 0.0;  // masked
  }
  CsaResult r;
  r.scores = causal_softmax(logits);
  r.output = r.scores * h * wv;
  return r;
}

}  // namespace

FullForward full_disentangled_forward(const EmbeddingMatrix& e,
                                      const FrequencySequence& freqs,
                                      const ReducedParams& params,
                                      const DataConfig& config) {
  check_bands(config, freqs);
  const int d = config.embed_dim();
  const int db = config.cone_dim;
  const int m = config.semantic_dim();
  if (e.e.cols() != d || e.e.rows() != config.prompt_len()) {
    throw InvalidArgument("full_disentangled_forward: embedding shape");
  }

  // Layer 1 on width d with the base frequency list.
  MatrixXd wq1 = MatrixXd::Zero(d, d);
  wq1.topLeftCorner(db, db) = params.w1;
  MatrixXd wk1 = MatrixXd::Zero(d, d);
  // Any W_K block with W_K^T c = c~ works; c c~^T is the simplest.
  wk1.topLeftCorner(db, db) = config.cone_axis * cone_key(db).transpose();
  const MatrixXd wv1 = MatrixXd::Identity(d, d);
  const CsaResult l1 = csa(e.e, wq1, wk1, wv1, freqs);

  MatrixXd h1(e.e.rows(), 2 * d);
  h1 << e.e, l1.output;

  // Layer 2 on width 2d with the doubled frequency list.
  FrequencySequence doubled;
  doubled.values = freqs.values;
  doubled.values.insert(doubled.values.end(), freqs.values.begin(), freqs.values.end());
  doubled.cone_band_len = freqs.cone_band_len;

  MatrixXd wq2 = MatrixXd::Zero(2 * d, 2 * d);
  wq2.block(db, db, m, m) = params.w2;
  MatrixXd wk2 = MatrixXd::Zero(2 * d, 2 * d);
  wk2.block(d, 0, d, d) = MatrixXd::Identity(d, d);
  const MatrixXd wv2 = MatrixXd::Identity(2 * d, 2 * d);
  const CsaResult l2 = csa(h1, wq2, wk2, wv2, doubled);

  MatrixXd h2(e.e.rows(), 4 * d);
  h2 << h1, l2.output;
  MatrixXd wo = MatrixXd::Zero(4 * d, d);
  wo.block(2 * d, 0, d, d) = MatrixXd::Identity(d, d);

  FullForward out;
  out.output = h2 * wo;
  out.s1 = l1.scores;
  out.s2 = l2.scores;
  out.y_hat = out.output(out.output.rows() - 1, d - 1);
  return out;
}

}  // namespace slashlab
