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

// Factor probing: train a feedforward classifier on frozen embeddings and
// use its test accuracy as a proxy for how much of the factor the
// embeddings encode. Also the chi-squared independence test on label
// contingency tables.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkdis/common.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/nnet.hpp"
#include "spkdis/rng.hpp"

namespace spkdis::probe {

struct ProbeConfig {
  std::size_t hidden_layers = 4;
  std::size_t hidden_width = 256;
  double l2_coeff = 1e-4;
  double lr = 0.0002;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  /// Standardize inputs per dimension with train-split statistics.
  bool standardize = true;

  void validate() const {
    require<ConfigError>(hidden_width > 0 && batch_size > 0 && max_epochs > 0, "probe counts must be positive");
    require<ConfigError>(lr > 0, "probe learning rate must be positive");
    require<ConfigError>(l2_coeff >= 0, "probe l2_coeff must be nonnegative");
  }
};

struct ProbeReport {
  std::string factor;
  std::vector<std::string> classes;  // output index -> label
  std::size_t n_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  double test_accuracy = 0.0;
  std::size_t epochs_ran = 0;
  bool stopped_early = false;
  double best_val_loss = 0.0;
  /// confusion[true][predicted] over test samples whose class the probe knows.
  std::vector<std::vector<std::size_t>> confusion;
  /// Test samples whose class never appeared in training (always errors).
  std::size_t n_unseen = 0;
};

struct ProbeResult {
  nnet::Network net;  // consumes raw embeddings (standardization folded in)
  ProbeReport report;
  std::vector<double> val_losses;  // per epoch
};

namespace detail {

inline std::vector<int> encode_labels(const LabelTable& labels, const std::string& factor,
                                      std::span<const std::string> ids, const std::vector<std::string>& classes) {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = static_cast<int>(i);
  std::vector<int> y(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = index.find(labels.label(ids[i], factor));
    y[i] = it == index.end() ? -1 : it->second;
  }
  return y;
}

// Mean cross-entropy over samples with a known class.
inline double mean_ce(const nnet::Network& net, const Batch& x, const std::vector<int>& y) {
  std::vector<Eigen::Index> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] >= 0) {
      rows.push_back(static_cast<Eigen::Index>(i));
      labels.push_back(y[i]);
    }
  if (rows.empty()) return 0.0;
  Batch sub(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return nnet::softmax_cross_entropy(nnet::predict(net, sub), labels).loss;
}

// Rewrites the first layer so that net(x) == old_net((x - mean) / scale).
inline void fold_standardization(nnet::Network& net, const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& scale) {
  Matrix& w = net.mutable_weight(0);
  for (Eigen::Index c = 0; c < w.cols(); ++c) w.col(c) /= scale(c);
  net.mutable_bias(0) -= w * mean.transpose();
}

}  // namespace detail

/// Accuracy and confusion of `net` over exactly `ids`.
inline ProbeReport evaluate_probe(const nnet::Network& net, const EmbeddingArchive& embeddings,
                                  const LabelTable& labels, const std::string& factor,
                                  std::span<const std::string> ids, const std::vector<std::string>& classes) {
  require<ShapeError>(net.in_dim() == embeddings.dim(), "probe input dim ", net.in_dim(),
                      " does not match embedding dim ", embeddings.dim());
  require<ShapeError>(net.out_dim() == classes.size(), "probe has ", net.out_dim(), " outputs for ", classes.size(),
                      " classes");
  ProbeReport r;
  r.factor = factor;
  r.classes = classes;
  r.n_classes = classes.size();
  r.n_test = ids.size();
  r.confusion.assign(classes.size(), std::vector<std::size_t>(classes.size(), 0));
  if (ids.empty()) return r;
  const auto y = detail::encode_labels(labels, factor, ids, classes);
  const Batch logits = nnet::predict(net, embeddings.gather(ids));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (y[i] < 0) {
      ++r.n_unseen;
      continue;
    }
    Eigen::Index best;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    ++r.confusion[static_cast<std::size_t>(y[i])][static_cast<std::size_t>(best)];
    if (best == y[i]) ++correct;
  }
  r.test_accuracy = static_cast<double>(correct) / static_cast<double>(ids.size());
  return r;
}

/// Trains a probe for `factor`: hidden_layers dense+ReLU blocks of
/// hidden_width, then a linear head, with softmax cross-entropy + L2 and
/// Adam. Training stops once the validation loss has failed to improve
/// strictly for more than `patience` consecutive epochs, and the
/// parameters with the lowest validation loss are restored.
inline ProbeResult train_probe(const EmbeddingArchive& embeddings, const LabelTable& labels, const std::string& factor,
                               const SplitSpec& split, const ProbeConfig& cfg) {
  cfg.validate();
  require<DataError>(labels.has_factor(factor), "factor '", factor, "' absent from label table");
  require<DataError>(!split.train_ids.empty() && !split.val_ids.empty() && !split.test_ids.empty(),
                     "probe needs nonempty train, validation and test splits");
  const std::vector<std::string> classes = labels.classes(factor, split.train_ids);
  require<DataError>(classes.size() >= 2, "factor '", factor, "' has fewer than 2 classes in the training split");

  Batch x_train = embeddings.gather(split.train_ids);
  Batch x_val = embeddings.gather(split.val_ids);
  const auto y_train = detail::encode_labels(labels, factor, split.train_ids, classes);
  const auto y_val = detail::encode_labels(labels, factor, split.val_ids, classes);

  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(x_train.cols());
  Eigen::RowVectorXd scale = Eigen::RowVectorXd::Ones(x_train.cols());
  if (cfg.standardize) {
    mean = x_train.colwise().mean();
    const Eigen::RowVectorXd var = (x_train.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(x_train.rows());
    for (Eigen::Index c = 0; c < var.size(); ++c) scale(c) = var(c) > 0 ? std::sqrt(var(c)) : 1.0;
    x_train = (x_train.rowwise() - mean).array().rowwise() / scale.array();
    x_val = (x_val.rowwise() - mean).array().rowwise() / scale.array();
  }

  nnet::NetworkSpec spec;
  spec.layer_dims.push_back(embeddings.dim());
  for (std::size_t k = 0; k < cfg.hidden_layers; ++k) spec.layer_dims.push_back(cfg.hidden_width);
  spec.layer_dims.push_back(classes.size());
  spec.hidden_activation = nnet::Activation::kRelu;
  spec.l2_coeff = cfg.l2_coeff;
  nnet::Network net = nnet::Network::init(spec, substream(cfg.seed, "probe.init"));
  auto opt = nnet::AdamState::for_network(net, cfg.lr);

  ProbeResult res;
  nnet::Network best = net;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  const std::size_t n = split.train_ids.size();
  std::vector<std::size_t> order(n);
  Batch xb;
  std::vector<int> yb;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(substream(cfg.seed, "probe.epoch", epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, n - start);
      xb.resize(static_cast<Eigen::Index>(bsz), x_train.cols());
      yb.resize(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = x_train.row(static_cast<Eigen::Index>(order[start + i]));
        yb[i] = y_train[order[start + i]];
      }
      auto lg = nnet::classification_loss(net, xb, yb, cfg.l2_coeff);
      require<NumericError>(std::isfinite(lg.loss), "non-finite probe loss at epoch ", epoch);
      nnet::adam_step(net, lg.grads, opt);
    }
    const double val_loss = detail::mean_ce(net, x_val, y_val);
    res.val_losses.push_back(val_loss);
    res.report.epochs_ran = epoch;
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = net;
      bad_epochs = 0;
    } else if (++bad_epochs > cfg.patience) {
      res.report.stopped_early = true;
      break;
    }
  }
  if (cfg.standardize) detail::fold_standardization(best, mean, scale);

  const std::size_t epochs_ran = res.report.epochs_ran;
  const bool stopped = res.report.stopped_early;
  res.report = evaluate_probe(best, embeddings, labels, factor, split.test_ids, classes);
  res.report.epochs_ran = epochs_ran;
  res.report.stopped_early = stopped;
  res.report.best_val_loss = best_loss;
  res.report.n_train = split.train_ids.size();
  res.report.n_val = split.val_ids.size();
  res.net = std::move(best);
  return res;
}

/// Copy of `labels` with the `factor` column shuffled among `ids`; the
/// null-hypothesis input for probe calibration.
inline LabelTable permute_factor(const LabelTable& labels, const std::string& factor,
                                 std::span<const std::string> ids, std::uint64_t seed) {
  require<ConfigError>(labels.has_factor(factor), "unknown factor '", factor, "'");
  std::vector<std::string> values;
  values.reserve(ids.size());
  for (const auto& id : ids) values.push_back(labels.label(id, factor));
  Rng rng(substream(seed, "permute"));
  rng.shuffle(std::span<std::string>(values));
  std::map<std::string, std::string> assigned;
  for (std::size_t i = 0; i < ids.size(); ++i) assigned[ids[i]] = values[i];

  const auto& names = labels.factors();
  const auto col = static_cast<std::size_t>(std::find(names.begin(), names.end(), factor) - names.begin());
  LabelTable out(names);
  for (const auto& id : labels.ids()) {
    auto row = labels.row(id);
    if (auto it = assigned.find(id); it != assigned.end()) row[col] = it->second;
    out.add_row(id, std::move(row));
  }
  return out;
}

inline nlohmann::json to_json(const ProbeReport& r) {
  return {{"factor", r.factor},
          {"classes", r.classes},
          {"n_classes", r.n_classes},
          {"n_train", r.n_train},
          {"n_val", r.n_val},
          {"n_test", r.n_test},
          {"test_accuracy", r.test_accuracy},
          {"epochs_ran", r.epochs_ran},
          {"stopped_early", r.stopped_early},
          {"best_val_loss", r.best_val_loss},
          {"confusion", r.confusion},
          {"n_unseen", r.n_unseen}};
}

/// `embedding factor n_test accuracy`, tab separated.
inline std::string tsv_row(const std::string& embedding, const ProbeReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << embedding << '\t' << r.factor << '\t' << r.n_test << '\t' << std::fixed << r.test_accuracy;
  return os.str();
}

// ---------------------------------------------------------------------------
// Chi-squared independence test.

/// Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
/// Series for x < a + 1, Lentz continued fraction otherwise.
inline double gamma_q(double a, double x) {
  require<ConfigError>(a > 0 && x >= 0, "gamma_q needs a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  constexpr double kEps = 1e-15;
  constexpr int kMaxIter = 10000;
  const double log_prefactor = a * std::log(x) - x - std::lgamma(a);
  if (x < a + 1.0) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < kMaxIter; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::max(0.0, 1.0 - sum * std::exp(log_prefactor));
  }
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::min(1.0, std::exp(log_prefactor) * h);
}

struct Chi2Result {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
  bool reject = false;
  double alpha = 0.01;
};

using CountTable = std::vector<std::vector<double>>;

/// Pearson chi-squared test of independence; rejects H0 iff p < alpha.
inline Chi2Result chi_squared_independence(const CountTable& table, double alpha = 0.01) {
  const std::size_t rows = table.size();
  require<ConfigError>(rows >= 2, "contingency table needs at least 2 rows");
  const std::size_t cols = table[0].size();
  require<ConfigError>(cols >= 2, "contingency table needs at least 2 columns");
  std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    require<ConfigError>(table[i].size() == cols, "ragged contingency table");
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = table[i][j];
      require<ConfigError>(std::isfinite(v) && v >= 0, "contingency counts must be nonnegative");
      row_sum[i] += v;
      col_sum[j] += v;
      total += v;
    }
  }
  for (std::size_t i = 0; i < rows; ++i) require<DataError>(row_sum[i] > 0, "row ", i, " of contingency table sums to 0");
  for (std::size_t j = 0; j < cols; ++j)
    require<DataError>(col_sum[j] > 0, "column ", j, " of contingency table sums to 0");

  Chi2Result r;
  r.alpha = alpha;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double expected = row_sum[i] * col_sum[j] / total;
      const double diff = table[i][j] - expected;
      r.statistic += diff * diff / expected;
    }
  r.dof = (rows - 1) * (cols - 1);
  r.p_value = gamma_q(0.5 * static_cast<double>(r.dof), 0.5 * r.statistic);
  r.reject = r.p_value < alpha;
  return r;
}

struct Contingency {
  std::vector<std::string> row_classes;  // factor_a, lexicographic
  std::vector<std::string> col_classes;  // factor_b, lexicographic
  CountTable counts;

  /// At least 2 rows and 2 columns.
  bool testable() const { return row_classes.size() >= 2 && col_classes.size() >= 2; }
};

inline Contingency build_contingency(const LabelTable& labels, const std::string& factor_a, const std::string& factor_b,
                                     std::span<const std::string> ids) {
  Contingency c;
  c.row_classes = labels.classes(factor_a, ids);
  c.col_classes = labels.classes(factor_b, ids);
  std::map<std::string, std::size_t> ri, ci;
  for (std::size_t i = 0; i < c.row_classes.size(); ++i) ri[c.row_classes[i]] = i;
  for (std::size_t j = 0; j < c.col_classes.size(); ++j) ci[c.col_classes[j]] = j;
  c.counts.assign(c.row_classes.size(), std::vector<double>(c.col_classes.size(), 0.0));
  for (const auto& id : ids) c.counts[ri.at(labels.label(id, factor_a))][ci.at(labels.label(id, factor_b))] += 1.0;
  return c;
}

inline nlohmann::json to_json(const Chi2Result& r) {
  return {{"statistic", r.statistic}, {"dof", r.dof}, {"p_value", r.p_value}, {"alpha", r.alpha}, {"reject", r.reject}};
}

inline nlohmann::json to_json(const Contingency& c) {
  return {{"rows", c.row_classes}, {"columns", c.col_classes}, {"counts", c.counts}};
}

}  // namespace spkdis::probe
