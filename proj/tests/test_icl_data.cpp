#include <doctest.h>

#include <cmath>
#include <set>

#include "slashlab/errors.hpp"
#include "slashlab/icl_data.hpp"

using namespace slashlab;

TEST_CASE("config defaults and validation") {
  const DataConfig c = DataConfig::make(4, 64, 4, 260);
  CHECK(c.prompt_len() == 129);
  CHECK(c.semantic_dim() == 6);
  CHECK(c.embed_dim() == 266);
  CHECK_NOTHROW(c.validate());

  DataConfig odd = DataConfig::make(2, 4, 3, 8);
  CHECK_THROWS_WITH_AS(odd.validate(), doctest::Contains("d_X"), InvalidArgument);

  DataConfig probs = DataConfig::make(2, 4, 4, 8);
  probs.feature_probs = {0.3, 0.3};
  CHECK_THROWS_WITH_AS(probs.validate(), doctest::Contains("feature_probs"), InvalidArgument);

  DataConfig axis = DataConfig::make(2, 4, 4, 8);
  axis.cone_axis *= 2.0;
  CHECK_THROWS_AS(axis.validate(), InvalidArgument);
}

TEST_CASE("tasks lie on the sphere of radius sqrt(d_X)") {
  const DataConfig c = DataConfig::make(4, 8, 4, 8);
  Rng r(1);
  const int n = 100000;
  VectorXd s1 = VectorXd::Zero(4), s2 = VectorXd::Zero(4);
  for (int i = 0; i < n; ++i) {
    const Task t = sample_task(r, c);
    REQUIRE(t.w.norm() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK_FALSE(t.out_of_distribution);
    s1 += t.w;
    s2 += t.w.cwiseAbs2();
  }
  for (int k = 0; k < 4; ++k) {
    const double mean = s1(k) / n;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(s2(k) / n - mean * mean - 1.0) < 0.05);
  }
}

TEST_CASE("prompts with a single feature") {
  const DataConfig c = DataConfig::make(1, 16, 2, 4);
  Rng r(2);
  const Task t = sample_task(r, c);
  const Prompt p = sample_prompt(r, t, c);
  for (int i = 0; i < 16; ++i) {
    CHECK(p.input_features[i] == 0);
    CHECK(p.inputs.row(i).transpose() == c.features.col(0));
    CHECK(p.labels(i) == doctest::Approx(t.w.dot(c.features.col(0))));
  }
}

TEST_CASE("feature counts follow the multinomial mean") {
  const DataConfig c = DataConfig::make(4, 64, 4, 8);
  Rng r(3);
  const Task t = sample_task(r, c);
  std::vector<double> total(4, 0.0);
  const int prompts = 10000;
  for (int n = 0; n < prompts; ++n) {
    const Prompt p = sample_prompt(r, t, c);
    const auto sets = p.feature_sets(4);
    for (int k = 0; k < 4; ++k) total[k] += static_cast<double>(sets[k].size());
  }
  for (int k = 0; k < 4; ++k) CHECK(std::abs(total[k] / prompts - 16.0) < 2.0);
}

TEST_CASE("prompt invariants") {
  const DataConfig c = DataConfig::make(3, 20, 4, 6);
  Rng r(4);
  for (int n = 0; n < 50; ++n) {
    const Task t = sample_task(r, c);
    const Prompt p = sample_prompt(r, t, c);
    for (int i = 0; i < 20; ++i) {
      CHECK(std::abs(p.labels(i) - t.w.dot(p.inputs.row(i))) <= 1e-14);
    }
    CHECK(std::abs(p.target - t.w.dot(p.query)) <= 1e-14);
    const auto sets = p.feature_sets(3);
    std::set<int> seen;
    for (const auto& s : sets) {
      for (int i : s) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == 20);
  }
  const Task t = sample_task(r, c);
  const Prompt forced = sample_prompt(r, t, c, 2);
  CHECK(forced.query_feature == 2);
  CHECK(forced.query == c.features.col(2));
}

TEST_CASE("embedding layout") {
  const DataConfig c = DataConfig::make(2, 5, 4, 6);
  Rng r(5);
  const Task t = sample_task(r, c);
  const Prompt p = sample_prompt(r, t, c);
  const EmbeddingMatrix e = embed(p, c);
  const int d = c.embed_dim();
  REQUIRE(e.e.rows() == 11);
  REQUIRE(e.e.cols() == d);
  for (int i = 0; i < 5; ++i) {
    const auto x_row = e.e.row(2 * i);
    const auto y_row = e.e.row(2 * i + 1);
    CHECK(x_row.norm() == doctest::Approx(std::sqrt(2.0)));
    CHECK(x_row.head(6).transpose() == c.cone_axis);
    CHECK(x_row.segment(6, 4).transpose() == p.inputs.row(i).transpose());
    CHECK(x_row(d - 2) == 0.0);
    CHECK(x_row(d - 1) == 0.0);
    CHECK(y_row.segment(6, 4).norm() == 0.0);
    CHECK(y_row(d - 2) == 1.0);
    CHECK(y_row(d - 1) == p.labels(i));
    // Feature index recoverable from the input row.
    const VectorXd scores = c.features.transpose() * x_row.segment(6, 4).transpose();
    Eigen::Index best;
    CHECK(scores.maxCoeff(&best) == doctest::Approx(1.0));
    CHECK(best == p.input_features[i]);
    int hits = 0;
    for (Eigen::Index k = 0; k < scores.size(); ++k) hits += scores(k) > 0.5;
    CHECK(hits == 1);
  }
  CHECK(e.e.row(10).segment(6, 4).transpose() == p.query);
  CHECK(e.labels()(3) == p.labels(1));
  CHECK(e.semantic().cols() == 6);
}

TEST_CASE("ood tasks") {
  const DataConfig c = DataConfig::make(2, 4, 4, 6);
  Rng r(6);
  const Task t = ood_task(r, c, 3.0);
  CHECK(t.w.norm() == doctest::Approx(6.0));
  CHECK(t.out_of_distribution);
  CHECK_THROWS_AS(ood_task(r, c, 1.0), InvalidArgument);
  CHECK_THROWS_AS(ood_task(r, c, 0.5), InvalidArgument);

  // Targets scale linearly for a fixed direction.
  Rng a(9), b(9);
  const Task base = sample_task(a, c);
  const Task big = ood_task(b, c, 3.0);
  CHECK((big.w - 3.0 * base.w).norm() <= 1e-12);
}

TEST_CASE("batches are reproducible and order independent") {
  const DataConfig c = DataConfig::make(2, 6, 4, 6);
  const auto a = make_batch(11, "train", 8, c);
  const auto b = make_batch(11, "train", 8, c);
  const auto other = make_batch(11, "probe", 8, c);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a[i].embedding.e == b[i].embedding.e);
    CHECK(a[i].task.w == b[i].task.w);
  }
  CHECK(a[0].task.w != other[0].task.w);
  const auto longer = make_batch(11, "train", 12, c);
  for (std::size_t i = 0; i < 8; ++i) CHECK(longer[i].embedding.e == a[i].embedding.e);
}
