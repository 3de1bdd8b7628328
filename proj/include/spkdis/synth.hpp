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

// Synthetic factor-entangled embedding corpora with known ground truth.
//
// An utterance of speaker s with nuisance classes c_f is
//
//   x = speaker_strength * A e_s + sum_f strength_f * B_f e_{c_f} + noise_sigma * eps
//
// where A and the B_f are column blocks of one random matrix with
// orthonormal columns, so the speaker and nuisance subspaces are mutually
// orthogonal whenever dim is at least the total one-hot width. eps is drawn
// from N(0, I / dim), so noise_sigma is the RMS norm of the noise vector.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "spkdis/common.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/rng.hpp"

namespace spkdis::synth {

struct FactorSpec {
  std::string name;
  std::size_t n_classes = 2;
  double strength = 1.0;
  /// Optional class names; defaults to "<name>0", "<name>1", ...
  std::vector<std::string> class_names;

  std::string class_name(std::size_t c) const {
    return class_names.empty() ? name + std::to_string(c) : class_names[c];
  }

  std::size_t class_index(const std::string& label) const {
    for (std::size_t c = 0; c < n_classes; ++c)
      if (class_name(c) == label) return c;
    fail<DataError>("label '", label, "' is not a class of factor '", name, "'");
  }
};

struct GeneratorSpec {
  std::size_t dim = 512;
  std::size_t n_speakers = 50;
  std::size_t utts_per_speaker = 40;
  std::vector<FactorSpec> nuisance_factors{{"noise", 4, 1.0, {}}};
  double speaker_strength = 1.0;
  double noise_sigma = 0.3;
  /// Probability that a nuisance class is tied to the speaker (s mod n)
  /// instead of drawn uniformly; 0 keeps factors independent of speaker.
  double confound = 0.0;
  std::uint64_t seed = 0;

  std::size_t onehot_width() const {
    std::size_t w = n_speakers;
    for (const auto& f : nuisance_factors) w += f.n_classes;
    return w;
  }

  const FactorSpec& factor(const std::string& name) const {
    for (const auto& f : nuisance_factors)
      if (f.name == name) return f;
    fail<ConfigError>("unknown nuisance factor '", name, "'");
  }

  std::size_t factor_position(const std::string& name) const {
    for (std::size_t i = 0; i < nuisance_factors.size(); ++i)
      if (nuisance_factors[i].name == name) return i;
    fail<ConfigError>("unknown nuisance factor '", name, "'");
  }

  void validate() const {
    require<ConfigError>(dim > 0 && n_speakers > 0 && utts_per_speaker > 0,
                         "dim, speakers and utterances per speaker must be positive");
    require<ConfigError>(std::isfinite(speaker_strength) && speaker_strength > 0, "speaker_strength must be positive");
    require<ConfigError>(std::isfinite(noise_sigma) && noise_sigma >= 0, "noise_sigma must be nonnegative");
    require<ConfigError>(confound >= 0.0 && confound <= 1.0, "confound must be in [0, 1]");
    std::set<std::string> names{"speaker"};
    for (const auto& f : nuisance_factors) {
      require<ConfigError>(!f.name.empty() && names.insert(f.name).second, "bad or duplicate factor name '",
                           f.name, "'");
      require<ConfigError>(f.n_classes >= 2, "factor '", f.name, "' needs at least 2 classes");
      require<ConfigError>(std::isfinite(f.strength) && f.strength >= 0, "factor '", f.name,
                           "' strength must be nonnegative");
      require<ConfigError>(f.class_names.empty() || f.class_names.size() == f.n_classes, "factor '", f.name,
                           "' names ", f.class_names.size(), " classes, expected ", f.n_classes);
    }
  }
};

struct AugmentSpec {
  std::size_t copies = 1;
  std::string perturb_factor = "noise";
  double perturb_strength = 1.0;
  std::uint64_t seed = 0;
};

struct MixingMatrices {
  Matrix speaker;                // dim x n_speakers
  std::vector<Matrix> factors;   // dim x n_classes, one per nuisance factor
  bool orthonormal = true;       // false when dim < total one-hot width
};

/// Regenerates the mixing matrices of `spec` (a pure function of the spec).
inline MixingMatrices mixing_matrices(const GeneratorSpec& spec) {
  spec.validate();
  const auto dim = static_cast<Eigen::Index>(spec.dim);
  const auto width = static_cast<Eigen::Index>(spec.onehot_width());
  Rng rng(substream(spec.seed, "mixing"));
  Matrix g(dim, width);
  for (Eigen::Index c = 0; c < width; ++c)
    for (Eigen::Index r = 0; r < dim; ++r) g(r, c) = rng.normal();

  MixingMatrices m;
  Matrix cols;
  if (width <= dim) {
    Eigen::HouseholderQR<Matrix> qr(g);
    cols = qr.householderQ() * Matrix::Identity(dim, width);
    // Fix the sign ambiguity of QR so columns correlate positively with g.
    for (Eigen::Index c = 0; c < width; ++c)
      if (cols.col(c).dot(g.col(c)) < 0) cols.col(c) *= -1.0;
  } else {
    m.orthonormal = false;
    cols = g.colwise().normalized();
  }
  Eigen::Index at = 0;
  m.speaker = cols.middleCols(at, static_cast<Eigen::Index>(spec.n_speakers));
  at += static_cast<Eigen::Index>(spec.n_speakers);
  for (const auto& f : spec.nuisance_factors) {
    m.factors.push_back(cols.middleCols(at, static_cast<Eigen::Index>(f.n_classes)));
    at += static_cast<Eigen::Index>(f.n_classes);
  }
  return m;
}

struct Corpus {
  EmbeddingArchive archive;
  LabelTable labels;
  std::vector<std::string> warnings;
};

inline std::string zero_pad(std::size_t value, std::size_t count) {
  const std::size_t width = std::max<std::size_t>(3, std::to_string(count > 0 ? count - 1 : 0).size());
  std::string s = std::to_string(value);
  return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

inline std::string speaker_name(std::size_t s, const GeneratorSpec& spec) {
  return "spk" + zero_pad(s, spec.n_speakers);
}

inline Corpus generate_corpus(const GeneratorSpec& spec) {
  spec.validate();
  const MixingMatrices mix = mixing_matrices(spec);
  Corpus out;
  if (!mix.orthonormal)
    out.warnings.push_back(detail::concat("dim ", spec.dim, " < one-hot width ", spec.onehot_width(),
                                          "; mixing columns are unit-norm but not orthogonal"));
  std::vector<std::string> factors{"speaker"};
  for (const auto& f : spec.nuisance_factors) factors.push_back(f.name);
  out.labels = LabelTable(factors);
  out.archive = EmbeddingArchive(spec.dim);
  out.archive.reserve(spec.n_speakers * spec.utts_per_speaker);

  Eigen::RowVectorXd x(static_cast<Eigen::Index>(spec.dim));
  for (std::size_t s = 0; s < spec.n_speakers; ++s) {
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      const std::size_t index = s * spec.utts_per_speaker + u;
      Rng rng(substream(spec.seed, "utterance", index));
      x = spec.speaker_strength * mix.speaker.col(static_cast<Eigen::Index>(s)).transpose();
      std::vector<std::string> row{speaker_name(s, spec)};
      for (std::size_t fi = 0; fi < spec.nuisance_factors.size(); ++fi) {
        const auto& f = spec.nuisance_factors[fi];
        std::size_t c;
        if (spec.confound > 0.0 && rng.bernoulli(spec.confound)) c = s % f.n_classes;
        else c = rng.below(f.n_classes);
        x += f.strength * mix.factors[fi].col(static_cast<Eigen::Index>(c)).transpose();
        row.push_back(f.class_name(c));
      }
      if (spec.noise_sigma > 0.0) {
        const double scale = spec.noise_sigma / std::sqrt(static_cast<double>(spec.dim));
        for (Eigen::Index k = 0; k < x.size(); ++k) x(k) += scale * rng.normal();
      }
      std::string id = row[0] + "-utt" + zero_pad(u, spec.utts_per_speaker);
      out.archive.add(id, x);
      out.labels.add_row(std::move(id), std::move(row));
    }
  }
  return out;
}

/// Appends `copies` perturbed duplicates of every entry. Each copy has the
/// class of `perturb_factor` resampled (uniformly among the other classes)
/// and the vector moved by perturb_strength * B_f (e_new - e_old); the
/// speaker component is untouched. Copy ids are suffixed "-augK".
inline Corpus augment_corpus(const EmbeddingArchive& archive, const LabelTable& labels, const AugmentSpec& aug,
                             const GeneratorSpec& generator) {
  require<ConfigError>(aug.copies >= 1, "augmentation needs at least one copy");
  require<ConfigError>(std::isfinite(aug.perturb_strength) && aug.perturb_strength >= 0,
                       "perturb_strength must be nonnegative");
  require<ConfigError>(labels.has_factor(aug.perturb_factor), "unknown perturb factor '", aug.perturb_factor, "'");
  const std::size_t fpos = generator.factor_position(aug.perturb_factor);
  const FactorSpec& factor = generator.nuisance_factors[fpos];
  require<ShapeError>(archive.dim() == generator.dim, "archive dim ", archive.dim(), " does not match generator dim ",
                      generator.dim);
  const MixingMatrices mix = mixing_matrices(generator);
  const Matrix& b = mix.factors[fpos];

  Corpus out;
  out.labels = LabelTable(labels.factors());
  out.archive = EmbeddingArchive(archive.dim());
  out.archive.reserve(archive.size() * (1 + aug.copies));
  for (std::size_t i = 0; i < archive.size(); ++i) {
    out.archive.add(archive.id(i), archive.row(i));
    out.labels.add_row(archive.id(i), labels.row(archive.id(i)));
  }
  const auto& factor_names = labels.factors();
  const auto fcol = static_cast<std::size_t>(
      std::find(factor_names.begin(), factor_names.end(), aug.perturb_factor) - factor_names.begin());
  Eigen::RowVectorXd x(static_cast<Eigen::Index>(archive.dim()));
  for (std::size_t i = 0; i < archive.size(); ++i) {
    const std::string& id = archive.id(i);
    const std::size_t old_class = factor.class_index(labels.label(id, aug.perturb_factor));
    for (std::size_t k = 1; k <= aug.copies; ++k) {
      Rng rng(substream(aug.seed, "augment", i * aug.copies + k));
      std::size_t new_class = rng.below(factor.n_classes - 1);
      if (new_class >= old_class) ++new_class;
      x = archive.row(i);
      std::vector<std::string> row = labels.row(id);
      if (aug.perturb_strength > 0.0) {
        x += aug.perturb_strength *
             (b.col(static_cast<Eigen::Index>(new_class)) - b.col(static_cast<Eigen::Index>(old_class))).transpose();
        row[fcol] = factor.class_name(new_class);
      }
      std::string copy_id = id + "-aug" + std::to_string(k);
      out.archive.add(copy_id, x);
      out.labels.add_row(std::move(copy_id), std::move(row));
    }
  }
  return out;
}

struct TrialCondition {
  std::string factor;
  std::string value;
};

/// Samples target trials (same speaker, distinct utterances) and nontarget
/// trials (different speakers) without replacement from ordered pairs of
/// `ids`. With a condition, the test side carries the given class.
inline TrialList make_trials(const LabelTable& labels, std::span<const std::string> ids, std::size_t n_target,
                             std::size_t n_nontarget, const std::optional<TrialCondition>& condition,
                             std::uint64_t seed) {
  std::vector<std::size_t> test_side;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!condition || labels.label(ids[i], condition->factor) == condition->value) test_side.push_back(i);

  std::vector<std::string> speaker(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) speaker[i] = labels.label(ids[i], "speaker");

  std::vector<std::pair<std::size_t, std::size_t>> targets;
  {
    std::map<std::string, std::vector<std::size_t>> by_speaker;
    for (std::size_t i = 0; i < ids.size(); ++i) by_speaker[speaker[i]].push_back(i);
    for (std::size_t t : test_side)
      for (std::size_t e : by_speaker[speaker[t]])
        if (e != t) targets.emplace_back(e, t);
  }
  require<DataError>(targets.size() >= n_target, "only ", targets.size(), " target pairs available, ", n_target,
                     " requested");
  std::uint64_t nontarget_pool = 0;
  {
    std::map<std::string, std::uint64_t> count;
    for (std::size_t i = 0; i < ids.size(); ++i) ++count[speaker[i]];
    for (std::size_t t : test_side) nontarget_pool += ids.size() - count[speaker[t]];
  }
  require<DataError>(nontarget_pool >= n_nontarget, "only ", nontarget_pool, " nontarget pairs available, ",
                     n_nontarget, " requested");

  Rng rng(substream(seed, "trials"));
  TrialList trials;
  // Partial Fisher-Yates over the enumerated target pairs.
  for (std::size_t k = 0; k < n_target; ++k) {
    const std::size_t j = k + rng.below(targets.size() - k);
    std::swap(targets[k], targets[j]);
    trials.push_back({ids[targets[k].first], ids[targets[k].second], true});
  }
  if (n_nontarget > 0) {
    if (n_nontarget * 2 <= nontarget_pool) {
      std::unordered_set<std::uint64_t> used;
      while (used.size() < n_nontarget) {
        const std::size_t t = test_side[rng.below(test_side.size())];
        const std::size_t e = rng.below(ids.size());
        if (speaker[e] == speaker[t]) continue;
        if (!used.insert(static_cast<std::uint64_t>(e) * ids.size() + t).second) continue;
        trials.push_back({ids[e], ids[t], false});
      }
    } else {
      std::vector<std::pair<std::size_t, std::size_t>> pool;
      for (std::size_t t : test_side)
        for (std::size_t e = 0; e < ids.size(); ++e)
          if (speaker[e] != speaker[t]) pool.emplace_back(e, t);
      for (std::size_t k = 0; k < n_nontarget; ++k) {
        const std::size_t j = k + rng.below(pool.size() - k);
        std::swap(pool[k], pool[j]);
        trials.push_back({ids[pool[k].first], ids[pool[k].second], false});
      }
    }
  }
  return trials;
}

inline nlohmann::json to_json(const GeneratorSpec& s) {
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& f : s.nuisance_factors)
    factors.push_back({{"name", f.name}, {"n_classes", f.n_classes}, {"strength", f.strength},
                       {"class_names", f.class_names}});
  return {{"dim", s.dim},
          {"n_speakers", s.n_speakers},
          {"utts_per_speaker", s.utts_per_speaker},
          {"nuisance_factors", factors},
          {"speaker_strength", s.speaker_strength},
          {"noise_sigma", s.noise_sigma},
          {"confound", s.confound},
          {"seed", s.seed}};
}

inline GeneratorSpec generator_from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  s.dim = j.at("dim").get<std::size_t>();
  s.n_speakers = j.at("n_speakers").get<std::size_t>();
  s.utts_per_speaker = j.at("utts_per_speaker").get<std::size_t>();
  s.nuisance_factors.clear();
  for (const auto& f : j.at("nuisance_factors")) {
    s.nuisance_factors.push_back({f.at("name").get<std::string>(), f.at("n_classes").get<std::size_t>(),
                                  f.at("strength").get<double>(),
                                  f.value("class_names", std::vector<std::string>{})});
  }
  s.speaker_strength = j.at("speaker_strength").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.confound = j.value("confound", 0.0);
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const AugmentSpec& a) {
  return {{"copies", a.copies}, {"perturb_factor", a.perturb_factor}, {"perturb_strength", a.perturb_strength},
          {"seed", a.seed}};
}

}  // namespace spkdis::synth
