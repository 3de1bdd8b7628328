// Copyright 2026 The spkdis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <cmath>

#include <gtest/gtest.h>

#include "backend_util.hpp"
#include "spkdis/backend.hpp"
#include "test_util.hpp"

namespace spkdis::backend {
namespace {

using testing::frobenius_rel_error;

struct Labeled {
  EmbeddingArchive archive;
  LabelTable labels;
  std::vector<std::string> ids;
};

Labeled labeled(std::size_t dim) { return {EmbeddingArchive(dim), LabelTable(), {}}; }

void add(Labeled& l, const std::string& id, const std::string& spk, std::vector<double> v) {
  l.archive.add(id, v);
  l.labels.add_row(id, {spk});
  l.ids.push_back(id);
}

Labeled three_classes(std::size_t dim, std::size_t per_class, std::uint64_t seed) {
  Labeled l = labeled(dim);
  Rng rng(seed);
  std::vector<std::vector<double>> centers(3, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& v : c) v = 2.0 * rng.normal();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> v(dim);
      for (std::size_t k = 0; k < dim; ++k) v[k] = centers[c][k] + rng.normal() * (1.0 + static_cast<double>(k));
      add(l, "c" + std::to_string(c) + "-" + std::to_string(i), "c" + std::to_string(c), v);
    }
  return l;
}

Scatter scatter_of(const Labeled& l) { return scatter_matrices(class_stats(l.archive, l.labels, l.ids)); }

TEST(Lda, TwoClassesInTwoDims) {
  Labeled l = labeled(2);
  add(l, "a1", "A", {0, 0});
  add(l, "a2", "A", {0, 1});
  add(l, "b1", "B", {5, 0});
  add(l, "b2", "B", {5, 1});
  const auto m = fit_lda(l.archive, l.labels, l.ids, 1);
  ASSERT_EQ(m.d_out(), 1u);
  const Vector dir = m.projection.row(0).normalized();
  EXPECT_NEAR(std::abs(dir(0)), 1.0, 1e-9);
  EXPECT_NEAR(dir(1), 0.0, 1e-9);
  EXPECT_NEAR(m.mean(0), 2.5, 1e-12);
}

TEST(Lda, RejectsBadDimensions) {
  const auto l = three_classes(4, 5, 1);
  EXPECT_THROW(fit_lda(l.archive, l.labels, l.ids, 3), ConfigError);
  EXPECT_THROW(fit_lda(l.archive, l.labels, l.ids, 0), ConfigError);
  Labeled one = labeled(2);
  add(one, "a", "A", {0, 0});
  add(one, "b", "A", {1, 0});
  EXPECT_THROW(fit_lda(one.archive, one.labels, one.ids, 1), DataError);
}

TEST(Lda, RowsOrderedByDecreasingDiscrimination) {
  const auto l = three_classes(6, 40, 2);
  const auto m = fit_lda(l.archive, l.labels, l.ids, 2);
  const Scatter s = scatter_of(l);
  auto ratio = [&](Eigen::Index r) {
    const Vector p = m.projection.row(r).transpose();
    return p.dot(s.between * p) / p.dot(s.within * p);
  };
  EXPECT_GT(ratio(0), ratio(1));
}

TEST(Lda, RefitOnProjectedDataKeepsFisherObjective) {
  const auto l = three_classes(6, 30, 3);
  const auto m1 = fit_lda(l.archive, l.labels, l.ids, 2);
  const double j1 = fisher_objective(m1.projection, scatter_of(l));
  Labeled p{project_lda(m1, l.archive), l.labels, l.ids};
  const auto m2 = fit_lda(p.archive, p.labels, p.ids, 2);
  const double j2 = fisher_objective(m2.projection, scatter_of(p));
  EXPECT_NEAR(j1, j2, 1e-9 * std::max(1.0, j1));
}

TEST(Lda, BeatsRandomProjections) {
  const auto l = three_classes(5, 30, 4);
  const auto m = fit_lda(l.archive, l.labels, l.ids, 2);
  const Scatter s = scatter_of(l);
  const double best = fisher_objective(m.projection, s);
  Rng rng(5);
  for (int draw = 0; draw < 100; ++draw) {
    Matrix p(2, 5);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal();
    EXPECT_LE(fisher_objective(p, s), best * (1.0 + 1e-9));
  }
}

TEST(Lda, AffineInvariance) {
  const auto l = three_classes(4, 25, 6);
  Rng rng(7);
  Matrix a(4, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  a += 3.0 * Matrix::Identity(4, 4);
  Vector shift(4);
  shift << 1, -2, 3, 0.5;
  Labeled t = labeled(4);
  for (std::size_t i = 0; i < l.archive.size(); ++i) {
    const Vector x = a * l.archive.row(i).transpose() + shift;
    add(t, l.ids[i], l.labels.label(l.ids[i], "speaker"), std::vector<double>(x.data(), x.data() + 4));
  }
  const double j_raw = fisher_objective(fit_lda(l.archive, l.labels, l.ids, 2).projection, scatter_of(l));
  const double j_aff = fisher_objective(fit_lda(t.archive, t.labels, t.ids, 2).projection, scatter_of(t));
  EXPECT_NEAR(j_raw, j_aff, 1e-6 * j_raw);
}

TEST(Lda, ProjectCases) {
  LdaModel m{Vector::Zero(3), Matrix::Identity(3, 3)};
  EmbeddingArchive a(3);
  a.add("x", std::vector<double>{1, 2, 3});
  a.add("y", std::vector<double>{-1, 0, 4});
  EXPECT_TRUE(project_lda(m, a) == a);

  m.mean = Vector::Constant(3, 2.0);
  m.projection = Matrix::Ones(2, 3);
  EmbeddingArchive at_mean(3);
  at_mean.add("m", std::vector<double>{2, 2, 2});
  EXPECT_EQ(project_lda(m, at_mean).row(0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(project_lda(m, EmbeddingArchive(4)), ShapeError);
}

TEST(Lda, NinetySixOfOneTwentyEight) {
  Labeled l = labeled(128);
  Rng rng(8);
  for (int s = 0; s < 100; ++s)
    for (int u = 0; u < 3; ++u) {
      std::vector<double> v(128);
      for (auto& x : v) x = rng.normal();
      add(l, std::to_string(s) + "-" + std::to_string(u), "s" + std::to_string(s), v);
    }
  const auto m = fit_lda(l.archive, l.labels, l.ids, 96);
  const auto p = project_lda(m, l.archive);
  EXPECT_EQ(p.dim(), 96u);
  EXPECT_EQ(p.ids(), l.archive.ids());
}

TEST(Plda, RecoversGeneratorCovariances) {
  for (std::uint64_t seed : {2, 3, 4}) {
    const auto s = testing::recovery_sample(seed);
    PldaConfig cfg;
    cfg.em_iters = 20;
    const auto m = fit_plda(s.archive, s.labels, s.ids, cfg);
    EXPECT_LT(frobenius_rel_error(m.between_cov, s.between), 0.15) << "seed " << seed;
    EXPECT_LT(frobenius_rel_error(m.within_cov, s.within), 0.15) << "seed " << seed;
    EXPECT_LT((m.mu - s.mu).norm(), 0.5);
  }
}

TEST(Plda, LogLikelihoodIsMonotone) {
  for (std::uint64_t seed : {2, 3, 4}) {
    const auto s = testing::recovery_sample(seed, 50, 4);
    PldaConfig cfg;
    cfg.em_iters = 20;
    const auto m = fit_plda(s.archive, s.labels, s.ids, cfg);
    ASSERT_EQ(m.log_likelihood.size(), 21u);
    for (std::size_t i = 1; i < m.log_likelihood.size(); ++i)
      EXPECT_GE(m.log_likelihood[i], m.log_likelihood[i - 1] - 1e-9) << "seed " << seed << " iter " << i;
  }
}

TEST(Plda, ZeroWithinVarianceLetsBetweenDominate) {
  Rng rng(9);
  Vector b(4);
  b << 3, 2, 1, 0.5;
  const auto s = testing::sample_two_cov(Vector::Zero(4), testing::spd_with_spectrum(b, rng), Matrix::Zero(4, 4), 40,
                                         5, 10);
  const auto m = fit_plda(s.archive, s.labels, s.ids);
  EXPECT_GT(m.between_cov.trace(), 10.0 * m.within_cov.trace());
}

TEST(Plda, EmFixedPoint) {
  const auto s = testing::recovery_sample(5, 60, 6);
  PldaConfig cfg;
  cfg.em_iters = 2000;
  const auto m = fit_plda(s.archive, s.labels, s.ids, cfg);
  const auto st = class_stats(s.archive, s.labels, s.ids);
  const auto [b, w] = plda_em_step(st, m.mu, m.between_cov, m.within_cov);
  EXPECT_LT((b - m.between_cov).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((w - m.within_cov).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Plda, RejectsDegenerateData) {
  Labeled l = labeled(2);
  add(l, "a", "A", {1, 1});
  add(l, "b", "A", {1, 1});
  add(l, "c", "B", {1, 1});
  add(l, "d", "B", {1, 1});
  EXPECT_THROW(fit_plda(l.archive, l.labels, l.ids), NumericError);
}

class Scoring : public ::testing::Test {
 protected:
  void SetUp() override {
    sample_ = testing::recovery_sample(11, 100, 5);
    model_ = fit_plda(sample_.archive, sample_.labels, sample_.ids);
  }
  testing::TwoCovSample sample_;
  PldaModel model_;
};

TEST_F(Scoring, SymmetricInEnrollAndTest) {
  const PldaScorer scorer(model_);
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_.archive.row(rng.below(sample_.archive.size()));
    const auto b = sample_.archive.row(rng.below(sample_.archive.size()));
    EXPECT_NEAR(scorer.score(a, b), scorer.score(b, a), 1e-10);
  }
}

TEST_F(Scoring, MatchesJointGaussianOracle) {
  const PldaScorer scorer(model_);
  for (std::size_t i = 0; i + 7 < 60; i += 7) {
    const Vector e = sample_.archive.row(i).transpose();
    const Vector t = sample_.archive.row(i + 7).transpose();
    EXPECT_NEAR(scorer.score(e.transpose(), t.transpose()), testing::joint_gaussian_llr(model_, e, t), 1e-8);
  }
}

TEST_F(Scoring, TargetsOutscoreNontargets) {
  TrialList trials;
  for (std::size_t s = 0; s < 100; ++s) {
    const std::string a = "spk" + std::to_string(s) + "-0";
    trials.push_back({a, "spk" + std::to_string(s) + "-1", true});
    trials.push_back({a, "spk" + std::to_string((s + 1) % 100) + "-1", false});
  }
  const auto scores = score_plda(model_, trials, sample_.archive, sample_.archive);
  ASSERT_EQ(scores.size(), trials.size());
  double tar = 0, non = 0;
  for (const auto& s : scores) (s.is_target ? tar : non) += s.score;
  EXPECT_GT(tar / 100, non / 100);
  EXPECT_THROW(score_plda(model_, {{"nobody", "spk0-0", true}}, sample_.archive, sample_.archive), DataError);
}

TEST(PldaScore, IdenticalPairNearMeanIsPositive) {
  PldaModel m{Vector::Zero(3), 10.0 * Matrix::Identity(3, 3), 0.1 * Matrix::Identity(3, 3), false, {}};
  const PldaScorer scorer(m);
  Eigen::RowVectorXd x(3);
  x << 0.1, -0.05, 0.02;
  EXPECT_GT(scorer.score(x, x), 0.0);
}

TEST(PldaScore, LengthNormFlagIsApplied) {
  const auto s = testing::recovery_sample(13, 40, 5);
  PldaConfig cfg;
  cfg.length_norm = true;
  const auto m = fit_plda(s.archive, s.labels, s.ids, cfg);
  const PldaScorer scorer(m);
  const Eigen::RowVectorXd a = s.archive.row(0), b = s.archive.row(1);
  EXPECT_NEAR(scorer.score(a, b), scorer.score(3.0 * a, 0.5 * b), 1e-9);
}

std::vector<double> vec(std::initializer_list<double> v) { return v; }

TEST(Det, UnitCases) {
  EXPECT_EQ(compute_det(vec({0.9, 0.8}), vec({0.2, 0.1})).eer, 0.0);
  EXPECT_EQ(compute_det(vec({0.2, 0.1}), vec({0.9, 0.8})).eer, 1.0);
  EXPECT_EQ(compute_det(vec({0.8, 0.3}), vec({0.6, 0.1})).eer, 0.5);
  EXPECT_THROW(compute_det(vec({}), vec({0.1})), DataError);
  EXPECT_THROW(compute_det(vec({0.1}), vec({})), DataError);
}

TEST(Det, StaircaseShape) {
  const auto c = compute_det(vec({0.8, 0.3}), vec({0.6, 0.1}));
  const std::vector<DetPoint> expected{{0, 1}, {0, 0.5}, {0.5, 0.5}, {0.5, 0}, {1, 0}};
  EXPECT_EQ(c.points, expected);
  EXPECT_TRUE(is_valid_curve(c));
  DetCurve broken = c;
  std::swap(broken.points[1], broken.points[2]);
  EXPECT_FALSE(is_valid_curve(broken));
}

TEST(Det, TiedScoresCollapse) {
  const auto c = compute_det(vec({0.5, 0.5}), vec({0.5, 0.5}));
  EXPECT_EQ(c.points.size(), 2u);
  EXPECT_DOUBLE_EQ(c.eer, 0.5);
}

// Brute-force: fix the grid threshold whose |fpr - fnr| is smallest.
double brute_force_eer(const std::vector<double>& tar, const std::vector<double>& non) {
  double lo = 1e300, hi = -1e300;
  for (double s : tar) lo = std::min(lo, s), hi = std::max(hi, s);
  for (double s : non) lo = std::min(lo, s), hi = std::max(hi, s);
  double best_gap = 2.0, eer = 0.0;
  const int steps = 20000;
  for (int k = 0; k <= steps + 1; ++k) {
    const double th = lo + (hi - lo) * k / steps;
    double fa = 0, miss = 0;
    for (double s : non) fa += s >= th;
    for (double s : tar) miss += s < th;
    const double fpr = fa / static_cast<double>(non.size()), fnr = miss / static_cast<double>(tar.size());
    if (std::abs(fpr - fnr) < best_gap) {
      best_gap = std::abs(fpr - fnr);
      eer = 0.5 * (fpr + fnr);
    }
  }
  return eer;
}

TEST(DetProperty, InterpolatedEerMatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 50 + rng.below(150);
    std::vector<double> tar(n), non(n);
    for (auto& s : tar) s = rng.normal() + 1.0;
    for (auto& s : non) s = rng.normal();
    const auto c = compute_det(tar, non);
    EXPECT_TRUE(is_valid_curve(c));
    EXPECT_NEAR(c.eer, brute_force_eer(tar, non), 1.0 / (2.0 * static_cast<double>(2 * n))) << "seed " << seed;
  }
}

TEST(Det, PerfectSeparationAlwaysZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<double> tar(30), non(40);
    for (auto& s : tar) s = 10.0 + rng.uniform();
    for (auto& s : non) s = rng.uniform();
    EXPECT_EQ(compute_det(tar, non).eer, 0.0);
  }
}

TEST(Det, EerDelta) {
  DetCurve a, b;
  a.eer = 0.10;
  b.eer = 0.074;
  EXPECT_NEAR(eer_delta(a, b), 0.026, 1e-12);
  EXPECT_EQ(eer_delta(a, b), -eer_delta(b, a));
  EXPECT_EQ(eer_delta(a, a), 0.0);
}

TEST(Backend, NoLdaPathAndLdaPath) {
  const auto l = three_classes(6, 20, 20);
  BackendConfig cfg;
  const auto plain = fit_backend(l.archive, l.labels, l.ids, cfg);
  EXPECT_FALSE(plain.lda.has_value());
  EXPECT_EQ(plain.plda.mu.size(), 6);
  cfg.lda_dim = 2;
  const auto reduced = fit_backend(l.archive, l.labels, l.ids, cfg);
  ASSERT_TRUE(reduced.lda.has_value());
  EXPECT_EQ(reduced.plda.mu.size(), 2);
  const TrialList trials{{l.ids[0], l.ids[1], true}, {l.ids[0], l.ids[25], false}};
  EXPECT_EQ(score_trials(reduced, l.archive, trials).size(), 2u);
}

TEST(Files, ScoresAndDetRoundTrip) {
  testing::TempDir dir;
  const ScoreSet scores{{"a", "b", true, 0.1}, {"a", "c", false, -3.25e-7}, {"b", "c", false, 1.0 / 3.0}};
  save_scores(scores, dir / "s.txt");
  const auto back = load_scores(dir / "s.txt");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].score, scores[i].score);
    EXPECT_EQ(back[i].is_target, scores[i].is_target);
  }
  EXPECT_EQ(testing::read_bytes(dir / "s.txt").substr(0, 15), "a b target 0.1\n");
  const auto c = compute_det(scores);
  save_det_csv(c, dir / "d.csv");
  EXPECT_EQ(testing::read_bytes(dir / "d.csv").substr(0, 8), "fpr,fnr\n");
  EXPECT_EQ(det_summary(c).dump(), R"({"eer":0.5,"n_target":1,"n_nontarget":2})");
  testing::write_file(dir / "bad.txt", "a b target x\n");
  EXPECT_THROW(load_scores(dir / "bad.txt"), DataError);
}

}  // namespace
}  // namespace spkdis::backend
