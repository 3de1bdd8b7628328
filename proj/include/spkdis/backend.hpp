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

// Verification backend: LDA, two-covariance PLDA trained with EM, trial
// scoring and DET/EER evaluation.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "json.hpp"
#include "spkdis/common.hpp"
#include "spkdis/dataio.hpp"

namespace spkdis::backend {

// ---------------------------------------------------------------------------
// Class statistics

struct ClassStats {
  Vector mean;                  // global mean
  std::vector<Vector> means;    // per-class means
  std::vector<std::size_t> counts;
  Matrix within;                // sum over classes of scatter around class mean
  std::size_t total = 0;
};

/// Groups the rows of `archive` named by `ids` by their speaker label.
inline ClassStats class_stats(const EmbeddingArchive& archive, const LabelTable& labels,
                              std::span<const std::string> ids) {
  const auto d = static_cast<Eigen::Index>(archive.dim());
  std::map<std::string, std::vector<std::size_t>> groups;
  for (const auto& id : ids) groups[labels.label(id, "speaker")].push_back(archive.index_of(id));

  ClassStats st;
  st.mean = Vector::Zero(d);
  st.within = Matrix::Zero(d, d);
  for (const auto& [spk, rows] : groups) {
    Vector m = Vector::Zero(d);
    for (auto r : rows) m += archive.row(r).transpose();
    m /= static_cast<double>(rows.size());
    for (auto r : rows) {
      const Vector off = archive.row(r).transpose() - m;
      st.within.noalias() += off * off.transpose();
    }
    st.mean += m * static_cast<double>(rows.size());
    st.means.push_back(std::move(m));
    st.counts.push_back(rows.size());
    st.total += rows.size();
  }
  if (st.total > 0) st.mean /= static_cast<double>(st.total);
  return st;
}

inline void require_speakers(const ClassStats& st) {
  require<DataError>(st.means.size() >= 2, "need at least 2 speakers, found ", st.means.size());
  for (auto n : st.counts) require<DataError>(n >= 2, "every speaker needs at least 2 utterances");
}

// ---------------------------------------------------------------------------
// LDA

struct LdaModel {
  Vector mean;
  Matrix projection;  // d_out x D
  std::size_t d_out() const { return static_cast<std::size_t>(projection.rows()); }
};

struct Scatter {
  Matrix between;
  Matrix within;
};

/// Between- and within-class scatter normalized by the number of samples.
inline Scatter scatter_matrices(const ClassStats& st) {
  const auto d = st.mean.size();
  Scatter s{Matrix::Zero(d, d), st.within / static_cast<double>(st.total)};
  for (std::size_t c = 0; c < st.means.size(); ++c) {
    const Vector dm = st.means[c] - st.mean;
    s.between.noalias() += static_cast<double>(st.counts[c]) * dm * dm.transpose();
  }
  s.between /= static_cast<double>(st.total);
  return s;
}

/// Fisher criterion trace((P Sw P')^-1 (P Sb P')) of a projection.
inline double fisher_objective(const Matrix& projection, const Scatter& s) {
  const Matrix w = projection * s.within * projection.transpose();
  const Matrix b = projection * s.between * projection.transpose();
  return w.ldlt().solve(b).trace();
}

inline LdaModel fit_lda(const EmbeddingArchive& archive, const LabelTable& labels, std::span<const std::string> ids,
                        std::size_t d_out) {
  const ClassStats st = class_stats(archive, labels, ids);
  require_speakers(st);
  const std::size_t dim = archive.dim();
  const std::size_t limit = std::min(dim, st.means.size() - 1);
  require<ConfigError>(d_out >= 1 && d_out <= limit, "LDA dimension ", d_out, " must be in [1, ", limit, "]");

  Scatter s = scatter_matrices(st);
  const double ridge = 1e-6 * s.within.trace() / static_cast<double>(dim);
  s.within.diagonal().array() += ridge;
  Eigen::LLT<Matrix> llt(s.within);
  require<NumericError>(ridge > 0 && llt.info() == Eigen::Success,
                        "within-class scatter is singular after regularization");

  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(s.between, s.within, Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  require<NumericError>(ges.info() == Eigen::Success, "LDA eigenproblem did not converge");
  const auto n = static_cast<Eigen::Index>(dim);
  LdaModel m;
  m.mean = st.mean;
  m.projection.resize(static_cast<Eigen::Index>(d_out), n);
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(d_out); ++k)
    m.projection.row(k) = ges.eigenvectors().col(n - 1 - k).transpose();
  return m;
}

inline EmbeddingArchive project_lda(const LdaModel& model, const EmbeddingArchive& archive) {
  require<ShapeError>(static_cast<Eigen::Index>(archive.dim()) == model.mean.size(), "LDA expects dim ",
                      model.mean.size(), ", archive has ", archive.dim());
  Batch out(static_cast<Eigen::Index>(archive.size()), model.projection.rows());
  for (std::size_t i = 0; i < archive.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = (model.projection * (archive.row(i).transpose() - model.mean)).transpose();
  return EmbeddingArchive::from_rows(archive.ids(), out);
}

// ---------------------------------------------------------------------------
// Two-covariance PLDA: x = mu + s + e, s ~ N(0, B), e ~ N(0, W)

struct PldaModel {
  Vector mu;
  Matrix between_cov;
  Matrix within_cov;
  bool length_norm = false;
  std::vector<double> log_likelihood;  // initial value, then one per EM iteration
};

struct PldaConfig {
  std::size_t em_iters = 10;
  bool length_norm = false;
};

inline Vector length_normalize(const Vector& x) {
  const double n = x.norm();
  require<NumericError>(n > 0, "cannot length-normalize a zero vector");
  return x * (std::sqrt(static_cast<double>(x.size())) / n);
}

inline EmbeddingArchive length_normalize(const EmbeddingArchive& archive) {
  Batch out(static_cast<Eigen::Index>(archive.size()), static_cast<Eigen::Index>(archive.dim()));
  for (std::size_t i = 0; i < archive.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = length_normalize(Vector(archive.row(i).transpose())).transpose();
  return EmbeddingArchive::from_rows(archive.ids(), out);
}

namespace detail {

inline double log_det_spd(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  require<NumericError>(llt.info() == Eigen::Success, what, " is not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline Matrix inverse_spd(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  require<NumericError>(llt.info() == Eigen::Success, what, " is not positive definite");
  return llt.solve(Matrix::Identity(a.rows(), a.cols()));
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Exact marginal log-likelihood of the centered class statistics.
inline double plda_log_likelihood(const ClassStats& st, const Vector& mu, const Matrix& b, const Matrix& w) {
  const double d = static_cast<double>(mu.size());
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const Matrix w_inv = inverse_spd(w, "within-class covariance");
  const double logdet_w = log_det_spd(w, "within-class covariance");
  double ll = -0.5 * (w_inv.cwiseProduct(st.within).sum());
  for (std::size_t c = 0; c < st.means.size(); ++c) {
    const double n = static_cast<double>(st.counts[c]);
    const Matrix cov = b + w / n;
    Eigen::LLT<Matrix> llt(cov);
    require<NumericError>(llt.info() == Eigen::Success, "class-mean covariance is not positive definite");
    const Vector m = st.means[c] - mu;
    ll += -0.5 * (d * log2pi + 2.0 * llt.matrixLLT().diagonal().array().log().sum() + m.dot(llt.solve(m)));
    ll += -0.5 * ((n - 1.0) * (d * log2pi + logdet_w) + d * std::log(n));
  }
  return ll;
}

/// Raises the eigenvalues of a symmetric matrix to at least `floor`.
inline Matrix floor_eigenvalues(const Matrix& a, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a));
  if (es.eigenvalues().minCoeff() >= floor) return symmetrize(a);
  const Vector ev = es.eigenvalues().cwiseMax(floor);
  return symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

}  // namespace detail

/// One EM update of (B, W) from class statistics with fixed mu.
inline std::pair<Matrix, Matrix> plda_em_step(const ClassStats& st, const Vector& mu, const Matrix& b,
                                              const Matrix& w) {
  const auto d = mu.size();
  const Matrix b_inv = detail::inverse_spd(b, "between-class covariance");
  const Matrix w_inv = detail::inverse_spd(w, "within-class covariance");
  Matrix w_acc = st.within;
  Matrix b_acc = Matrix::Zero(d, d);
  for (std::size_t c = 0; c < st.means.size(); ++c) {
    const double n = static_cast<double>(st.counts[c]);
    const Vector m = st.means[c] - mu;
    const Matrix mixed_var = detail::inverse_spd(b_inv + n * w_inv, "posterior precision");
    const Vector s = mixed_var * (n * (w_inv * m));
    const Vector r = m - s;
    w_acc.noalias() += n * (mixed_var + r * r.transpose());
    b_acc.noalias() += mixed_var + s * s.transpose();
  }
  return {detail::symmetrize(b_acc / static_cast<double>(st.means.size())),
          detail::symmetrize(w_acc / static_cast<double>(st.total))};
}

inline PldaModel fit_plda(const EmbeddingArchive& archive, const LabelTable& labels, std::span<const std::string> ids,
                          const PldaConfig& cfg = {}) {
  const EmbeddingArchive data = cfg.length_norm ? length_normalize(archive.subset(ids)) : archive.subset(ids);
  const ClassStats st = class_stats(data, labels, ids);
  require_speakers(st);
  const auto d = static_cast<Eigen::Index>(data.dim());

  PldaModel m;
  m.mu = st.mean;
  m.length_norm = cfg.length_norm;
  Matrix total = st.within;
  Matrix between = Matrix::Zero(d, d);
  for (std::size_t c = 0; c < st.means.size(); ++c) {
    const Vector dm = st.means[c] - st.mean;
    between.noalias() += dm * dm.transpose();
    total.noalias() += static_cast<double>(st.counts[c]) * dm * dm.transpose();
  }
  const double scale = total.trace() / static_cast<double>(st.total * static_cast<std::size_t>(d));
  require<NumericError>(std::isfinite(scale) && scale > 0, "degenerate covariances: data has zero total variance");
  const double floor = 1e-10 * scale;
  m.within_cov = detail::floor_eigenvalues(st.within / static_cast<double>(st.total - st.means.size()), floor);
  m.between_cov = detail::floor_eigenvalues(between / static_cast<double>(st.means.size()), floor);

  m.log_likelihood.push_back(detail::plda_log_likelihood(st, m.mu, m.between_cov, m.within_cov));
  for (std::size_t it = 0; it < cfg.em_iters; ++it) {
    auto [b, w] = plda_em_step(st, m.mu, m.between_cov, m.within_cov);
    m.between_cov = detail::floor_eigenvalues(b, floor);
    m.within_cov = detail::floor_eigenvalues(w, floor);
    const double ll = detail::plda_log_likelihood(st, m.mu, m.between_cov, m.within_cov);
    require<NumericError>(std::isfinite(ll), "degenerate covariances at EM iteration ", it + 1);
    m.log_likelihood.push_back(ll);
  }
  return m;
}

/// Precomputed terms of the closed-form verification log-likelihood ratio.
class PldaScorer {
 public:
  explicit PldaScorer(const PldaModel& model) : mu_(model.mu), length_norm_(model.length_norm) {
    const Matrix sigma = model.between_cov + model.within_cov;
    const Matrix sigma_inv = detail::inverse_spd(sigma, "total covariance");
    const Matrix s = detail::symmetrize(sigma - model.between_cov * sigma_inv * model.between_cov);
    const Matrix s_inv = detail::inverse_spd(s, "conditional covariance");
    q_ = detail::symmetrize(sigma_inv - s_inv);
    p_ = detail::symmetrize(sigma_inv * model.between_cov * s_inv);
    constant_ = 0.5 * detail::log_det_spd(sigma, "total covariance") - 0.5 * detail::log_det_spd(s, "conditional covariance");
  }

  Vector prepare(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    require<ShapeError>(x.size() == mu_.size(), "PLDA expects dim ", mu_.size(), ", got ", x.size());
    Vector v = x.transpose();
    if (length_norm_) v = length_normalize(v);
    return v - mu_;
  }

  /// Score of two prepared (centered) vectors.
  double score_prepared(const Vector& e, const Vector& t) const {
    return 0.5 * (e.dot(q_ * e) + t.dot(q_ * t)) + 0.5 * (e.dot(p_ * t) + t.dot(p_ * e)) + constant_;
  }

  double score(const Eigen::Ref<const Eigen::RowVectorXd>& e, const Eigen::Ref<const Eigen::RowVectorXd>& t) const {
    return score_prepared(prepare(e), prepare(t));
  }

 private:
  Vector mu_;
  bool length_norm_;
  Matrix q_, p_;
  double constant_ = 0.0;
};

// ---------------------------------------------------------------------------
// Scores and DET

struct Score {
  std::string enroll;
  std::string test;
  bool is_target = false;
  double score = 0.0;
};

using ScoreSet = std::vector<Score>;

inline ScoreSet score_plda(const PldaModel& model, const TrialList& trials, const EmbeddingArchive& enroll,
                           const EmbeddingArchive& test) {
  const PldaScorer scorer(model);
  ScoreSet out;
  out.reserve(trials.size());
  for (const auto& t : trials) {
    const auto e = enroll.find(t.enroll);
    const auto x = test.find(t.test);
    require<DataError>(e.has_value(), "enroll id '", t.enroll, "' not found");
    require<DataError>(x.has_value(), "test id '", t.test, "' not found");
    const double s = scorer.score(enroll.row(*e), test.row(*x));
    require<NumericError>(std::isfinite(s), "non-finite score for trial ", t.enroll, " ", t.test);
    out.push_back({t.enroll, t.test, t.is_target, s});
  }
  return out;
}

struct DetPoint {
  double fpr;
  double fnr;
  friend bool operator==(const DetPoint&, const DetPoint&) = default;
};

struct DetCurve {
  std::vector<DetPoint> points;
  double eer = 0.0;
  std::size_t n_target = 0;
  std::size_t n_nontarget = 0;
};

/// Accept-if-score>=threshold sweep over every distinct observed score.
inline DetCurve compute_det(std::span<const double> targets, std::span<const double> nontargets) {
  require<DataError>(!targets.empty() && !nontargets.empty(), "DET needs at least one target and one nontarget score");
  std::vector<std::pair<double, bool>> all;
  all.reserve(targets.size() + nontargets.size());
  for (double s : targets) all.emplace_back(s, true);
  for (double s : nontargets) all.emplace_back(s, false);
  for (const auto& [s, _] : all) require<DataError>(std::isfinite(s), "scores must be finite");
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  const double nt = static_cast<double>(targets.size());
  const double nn = static_cast<double>(nontargets.size());
  DetCurve c;
  c.n_target = targets.size();
  c.n_nontarget = nontargets.size();
  c.points.push_back({0.0, 1.0});
  std::size_t accepted_t = 0, accepted_n = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double th = all[i].first;
    for (; i < all.size() && all[i].first == th; ++i) (all[i].second ? accepted_t : accepted_n) += 1;
    c.points.push_back({static_cast<double>(accepted_n) / nn, 1.0 - static_cast<double>(accepted_t) / nt});
  }
  if (!(c.points.back() == DetPoint{1.0, 0.0})) c.points.push_back({1.0, 0.0});

  c.eer = 1.0;
  for (std::size_t k = 0; k + 1 < c.points.size(); ++k) {
    const auto& a = c.points[k];
    const auto& b = c.points[k + 1];
    const double da = a.fpr - a.fnr;
    const double db = b.fpr - b.fnr;
    if (da <= 0.0 && db >= 0.0) {
      const double t = (db == da) ? 0.0 : -da / (db - da);
      c.eer = a.fpr + t * (b.fpr - a.fpr);
      break;
    }
  }
  return c;
}

inline DetCurve compute_det(const ScoreSet& scores) {
  std::vector<double> tar, non;
  for (const auto& s : scores) (s.is_target ? tar : non).push_back(s.score);
  return compute_det(tar, non);
}

/// True when the points form a staircase from (0,1) to (1,0) inside [0,1]^2.
inline bool is_valid_curve(const DetCurve& c) {
  if (c.points.size() < 2 || !(c.points.front() == DetPoint{0.0, 1.0}) || !(c.points.back() == DetPoint{1.0, 0.0}))
    return false;
  for (std::size_t k = 0; k < c.points.size(); ++k) {
    const auto& p = c.points[k];
    if (!(p.fpr >= 0 && p.fpr <= 1 && p.fnr >= 0 && p.fnr <= 1)) return false;
    if (k > 0 && (p.fpr < c.points[k - 1].fpr || p.fnr > c.points[k - 1].fnr)) return false;
  }
  return c.eer >= 0.0 && c.eer <= 1.0;
}

inline double eer_delta(const DetCurve& a, const DetCurve& b) { return a.eer - b.eer; }

// ---------------------------------------------------------------------------
// Pipeline: optional LDA followed by PLDA

struct BackendConfig {
  std::size_t lda_dim = 0;  // 0 disables LDA
  PldaConfig plda;
};

struct Backend {
  std::optional<LdaModel> lda;
  PldaModel plda;
};

inline Backend fit_backend(const EmbeddingArchive& archive, const LabelTable& labels,
                           std::span<const std::string> train_ids, const BackendConfig& cfg) {
  Backend b;
  if (cfg.lda_dim > 0) {
    b.lda = fit_lda(archive, labels, train_ids, cfg.lda_dim);
    b.plda = fit_plda(project_lda(*b.lda, archive.subset(train_ids)), labels, train_ids, cfg.plda);
  } else {
    b.plda = fit_plda(archive, labels, train_ids, cfg.plda);
  }
  return b;
}

inline ScoreSet score_trials(const Backend& b, const EmbeddingArchive& archive, const TrialList& trials) {
  std::vector<std::string> ids;
  for (const auto& t : trials) {
    ids.push_back(t.enroll);
    ids.push_back(t.test);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (const auto& id : ids) require<DataError>(archive.contains(id), "trial id '", id, "' not found");
  EmbeddingArchive used = archive.subset(ids);
  if (b.lda) used = project_lda(*b.lda, used);
  return score_plda(b.plda, trials, used, used);
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace detail

inline void save_scores(const ScoreSet& scores, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  for (const auto& s : scores)
    out << s.enroll << ' ' << s.test << ' ' << (s.is_target ? "target" : "nontarget") << ' '
        << detail::format_double(s.score) << '\n';
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline ScoreSet load_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  ScoreSet scores;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto f = spkdis::detail::split_ws(line);
    if (f.empty()) continue;
    require<DataError>(f.size() == 4, path.string(), ": line ", lineno, ": expected 4 fields, found ", f.size());
    require<DataError>(f[2] == "target" || f[2] == "nontarget", path.string(), ": line ", lineno,
                       ": third field must be target or nontarget, got '", f[2], "'");
    double v = 0.0;
    auto [end, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), v);
    require<DataError>(ec == std::errc() && end == f[3].data() + f[3].size() && std::isfinite(v), path.string(),
                       ": line ", lineno, ": bad score '", f[3], "'");
    scores.push_back({std::move(f[0]), std::move(f[1]), f[2] == "target", v});
  }
  return scores;
}

inline void save_det_csv(const DetCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  out << "fpr,fnr\n";
  for (const auto& p : curve.points) out << detail::format_double(p.fpr) << ',' << detail::format_double(p.fnr) << '\n';
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline nlohmann::ordered_json det_summary(const DetCurve& curve) {
  return {{"eer", curve.eer}, {"n_target", curve.n_target}, {"n_nontarget", curve.n_nontarget}};
}

}  // namespace spkdis::backend
