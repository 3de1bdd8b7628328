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


#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "spkdis/backend.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/rng.hpp"

namespace spkdis::testing {

struct TwoCovSample {
  EmbeddingArchive archive;
  LabelTable labels;
  std::vector<std::string> ids;
  Vector mu;
  Matrix between;
  Matrix within;
};

inline Matrix random_rotation(Eigen::Index d, Rng& rng) {
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  return Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(d, d);
}

inline Matrix spd_with_spectrum(const Vector& eigenvalues, Rng& rng) {
  const Matrix q = random_rotation(eigenvalues.size(), rng);
  return q * eigenvalues.asDiagonal() * q.transpose();
}

inline Matrix cholesky_factor(const Matrix& a) {
  if (a.isZero(0.0)) return Matrix::Zero(a.rows(), a.cols());
  return a.llt().matrixL();
}

/// x = mu + s + e with s ~ N(0, B) per speaker and e ~ N(0, W) per utterance.
inline TwoCovSample sample_two_cov(const Vector& mu, const Matrix& between, const Matrix& within,
                                   std::size_t speakers, std::size_t per_speaker, std::uint64_t seed) {
  TwoCovSample out{EmbeddingArchive(static_cast<std::size_t>(mu.size())), LabelTable(), {}, mu, between, within};
  const Matrix lb = cholesky_factor(between);
  const Matrix lw = cholesky_factor(within);
  Rng rng(seed);
  auto gaussian = [&] {
    Vector z(mu.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    return z;
  };
  for (std::size_t s = 0; s < speakers; ++s) {
    const Vector center = mu + lb * gaussian();
    for (std::size_t u = 0; u < per_speaker; ++u) {
      const Vector x = center + lw * gaussian();
      std::string id = "spk" + std::to_string(s) + "-" + std::to_string(u);
      out.archive.add(id, x.transpose());
      out.labels.add_row(id, {"spk" + std::to_string(s)});
      out.ids.push_back(std::move(id));
    }
  }
  return out;
}

/// Eight-dimensional generator with a geometric between-class spectrum.
inline TwoCovSample recovery_sample(std::uint64_t seed, std::size_t speakers = 200, std::size_t per_speaker = 10) {
  Rng rng(substream(seed, "covariances"));
  Vector b(8), w(8), mu(8);
  for (int i = 0; i < 8; ++i) {
    b(i) = 4.0 * std::pow(0.25, i);
    w(i) = 1.0 / (1.0 + i);
    mu(i) = rng.normal();
  }
  return sample_two_cov(mu, spd_with_spectrum(b, rng), spd_with_spectrum(w, rng), speakers, per_speaker,
                        substream(seed, "samples"));
}

inline double frobenius_rel_error(const Matrix& estimate, const Matrix& truth) {
  return (estimate - truth).norm() / truth.norm();
}

/// Log-likelihood ratio of [e; t] under the two joint Gaussians, evaluated
/// directly with 2d-dimensional densities.
inline double joint_gaussian_llr(const backend::PldaModel& m, const Vector& e, const Vector& t) {
  const auto d = m.mu.size();
  const Matrix sigma = m.between_cov + m.within_cov;
  Matrix same(2 * d, 2 * d), diff = Matrix::Zero(2 * d, 2 * d);
  same << sigma, m.between_cov, m.between_cov, sigma;
  diff.topLeftCorner(d, d) = sigma;
  diff.bottomRightCorner(d, d) = sigma;
  Vector z(2 * d);
  z << e - m.mu, t - m.mu;
  auto log_density = [&](const Matrix& c) {
    const Eigen::LLT<Matrix> llt(c);
    const Matrix l = llt.matrixL();
    return -0.5 * z.dot(llt.solve(z)) - l.diagonal().array().log().sum();
  };
  return log_density(same) - log_density(diff);
}

}  // namespace spkdis::testing
