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

// Feedforward network core: dense layers with ReLU/tanh, dropout noise,
// softmax cross-entropy and MSE losses, Adam, and a finite-difference
// gradient checker.
//
// Batches are row-major with one example per row. Layer k holds a weight
// matrix of shape (dims[k+1] x dims[k]) and a bias of length dims[k+1], so
// the pre-activation of a batch A is A * W^T + 1 b^T.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <utility>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkdis/common.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/rng.hpp"

namespace spkdis::nnet {

enum class Activation { kNone, kRelu, kTanh };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
  }
  return "none";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "none") return Activation::kNone;
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  fail<ConfigError>("unknown activation '", s, "'");
}

struct NetworkSpec {
  std::vector<std::size_t> layer_dims;  // input first, output last
  Activation hidden_activation = Activation::kRelu;
  Activation output_activation = Activation::kNone;
  double l2_coeff = 0.0;

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t in_dim() const { return layer_dims.front(); }
  std::size_t out_dim() const { return layer_dims.back(); }

  void validate() const {
    require<ConfigError>(layer_dims.size() >= 2, "network needs at least an input and an output dim");
    for (auto d : layer_dims) require<ConfigError>(d > 0, "layer dims must be positive");
    require<ConfigError>(l2_coeff >= 0.0 && std::isfinite(l2_coeff), "l2_coeff must be nonnegative");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Parameter-shaped accumulators mirroring a Network.
struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  Gradients& operator+=(const Gradients& o) {
    require<ShapeError>(weights.size() == o.weights.size(), "gradient layer count mismatch");
    for (std::size_t k = 0; k < weights.size(); ++k) {
      weights[k] += o.weights[k];
      biases[k] += o.biases[k];
    }
    return *this;
  }

  Gradients& operator*=(double s) {
    for (auto& w : weights) w *= s;
    for (auto& b : biases) b *= s;
    return *this;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& w : weights) m = std::max(m, w.cwiseAbs().maxCoeff());
    for (const auto& b : biases) m = std::max(m, b.cwiseAbs().maxCoeff());
    return m;
  }
};

class Network {
 public:
  Network() = default;

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  static Network init(NetworkSpec spec, std::uint64_t seed) {
    Network net = zeros(std::move(spec));
    net.seed_ = seed;
    Rng rng(seed);
    for (auto& w : net.weights_) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    }
    return net;
  }

  static Network zeros(NetworkSpec spec) {
    spec.validate();
    Network net;
    for (std::size_t k = 0; k < spec.num_layers(); ++k) {
      const auto out = static_cast<Eigen::Index>(spec.layer_dims[k + 1]);
      const auto in = static_cast<Eigen::Index>(spec.layer_dims[k]);
      net.weights_.push_back(Matrix::Zero(out, in));
      net.biases_.push_back(Vector::Zero(out));
    }
    net.spec_ = std::move(spec);
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return weights_.size(); }
  std::size_t in_dim() const { return spec_.in_dim(); }
  std::size_t out_dim() const { return spec_.out_dim(); }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  const Matrix& weight(std::size_t k) const { return weights_[k]; }
  const Vector& bias(std::size_t k) const { return biases_[k]; }

  /// Mutable access bumps the generation, which invalidates forward caches.
  Matrix& mutable_weight(std::size_t k) {
    ++generation_;
    return weights_[k];
  }
  Vector& mutable_bias(std::size_t k) {
    ++generation_;
    return biases_[k];
  }

  std::uint64_t generation() const { return generation_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k)
      n += static_cast<std::size_t>(weights_[k].size() + biases_[k].size());
    return n;
  }

  Gradients zero_gradients() const {
    Gradients g;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      g.weights.push_back(Matrix::Zero(weights_[k].rows(), weights_[k].cols()));
      g.biases.push_back(Vector::Zero(biases_[k].size()));
    }
    return g;
  }

  bool all_finite() const {
    for (std::size_t k = 0; k < weights_.size(); ++k)
      if (!weights_[k].allFinite() || !biases_[k].allFinite()) return false;
    return true;
  }

  friend bool operator==(const Network& a, const Network& b) {
    if (!(a.spec_ == b.spec_)) return false;
    for (std::size_t k = 0; k < a.weights_.size(); ++k)
      if (a.weights_[k] != b.weights_[k] || a.biases_[k] != b.biases_[k]) return false;
    return true;
  }

 private:
  NetworkSpec spec_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
  std::uint64_t seed_ = 0;
  std::uint64_t generation_ = 0;
};

inline void check_shapes(const Network& net, const Gradients& g) {
  require<ShapeError>(g.weights.size() == net.num_layers() && g.biases.size() == net.num_layers(),
                      "gradient layer count does not match network");
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    require<ShapeError>(g.weights[k].rows() == net.weight(k).rows() &&
                            g.weights[k].cols() == net.weight(k).cols() &&
                            g.biases[k].size() == net.bias(k).size(),
                        "gradient shape mismatch at layer ", k);
  }
}

/// Dropout-style multiplicative noise: keep with probability keep_prob and
/// scale by 1 / keep_prob, else zero.
struct NoiseSpec {
  double keep_prob = 1.0;
};

/// Mask with entries 1/keep_prob (kept) or 0 (dropped), drawn row-major.
inline Batch dropout_mask(Eigen::Index rows, Eigen::Index cols, double keep_prob, Rng& rng) {
  require<ConfigError>(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob must be in (0, 1], got ", keep_prob);
  if (keep_prob == 1.0) return Batch::Ones(rows, cols);
  Batch mask(rows, cols);
  const double scale = 1.0 / keep_prob;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) mask(r, c) = rng.bernoulli(keep_prob) ? scale : 0.0;
  return mask;
}

inline Batch apply_noise(const Batch& h, const NoiseSpec& spec, Rng& rng) {
  require<ConfigError>(spec.keep_prob > 0.0 && spec.keep_prob <= 1.0, "keep_prob must be in (0, 1], got ",
                       spec.keep_prob);
  if (spec.keep_prob == 1.0) return h;
  return h.cwiseProduct(dropout_mask(h.rows(), h.cols(), spec.keep_prob, rng));
}

namespace detail {

inline void activate(Batch& z, Activation a) {
  switch (a) {
    case Activation::kNone: break;
    case Activation::kRelu: z = z.cwiseMax(0.0); break;
    case Activation::kTanh: z = z.array().tanh().matrix(); break;
  }
}

// Multiplies `delta` in place by the activation derivative; `pre` is the
// pre-activation and `post` the activation output.
inline void activate_backward(Batch& delta, const Batch& pre, const Batch& post, Activation a) {
  switch (a) {
    case Activation::kNone: break;
    case Activation::kRelu: delta = (pre.array() > 0.0).select(delta, 0.0); break;
    case Activation::kTanh: delta = delta.cwiseProduct((1.0 - post.array().square()).matrix()); break;
  }
}

}  // namespace detail

/// Everything backward() needs from a forward pass.
struct ForwardCache {
  const Network* net = nullptr;
  std::uint64_t generation = 0;
  std::optional<Batch> input_mask;  // dropout mask applied to the input
  std::vector<Batch> activations;   // activations[0] = (noised) input, [k+1] = layer k output
  std::vector<Batch> pre;           // pre-activation of each layer

  const Batch& output() const { return activations.back(); }
};

inline ForwardCache forward(const Network& net, const Batch& batch, const NoiseSpec* noise = nullptr,
                            Rng* rng = nullptr) {
  require<ShapeError>(static_cast<std::size_t>(batch.cols()) == net.in_dim(), "batch has ", batch.cols(),
                      " columns, network expects ", net.in_dim());
  ForwardCache cache;
  cache.net = &net;
  cache.generation = net.generation();
  cache.activations.reserve(net.num_layers() + 1);
  cache.pre.reserve(net.num_layers());
  if (noise != nullptr && noise->keep_prob < 1.0) {
    require<ConfigError>(rng != nullptr, "noisy forward needs a random stream");
    cache.input_mask = dropout_mask(batch.rows(), batch.cols(), noise->keep_prob, *rng);
    cache.activations.push_back(batch.cwiseProduct(*cache.input_mask));
  } else {
    cache.activations.push_back(batch);
  }
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    Batch z = cache.activations.back() * net.weight(k).transpose();
    z.rowwise() += net.bias(k).transpose();
    cache.pre.push_back(z);
    const bool last = k + 1 == net.num_layers();
    detail::activate(z, last ? net.spec().output_activation : net.spec().hidden_activation);
    cache.activations.push_back(std::move(z));
  }
  return cache;
}

/// Noise-free inference.
inline Batch predict(const Network& net, const Batch& batch) {
  require<ShapeError>(static_cast<std::size_t>(batch.cols()) == net.in_dim(), "batch has ", batch.cols(),
                      " columns, network expects ", net.in_dim());
  Batch a = batch;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    Batch z = a * net.weight(k).transpose();
    z.rowwise() += net.bias(k).transpose();
    const bool last = k + 1 == net.num_layers();
    detail::activate(z, last ? net.spec().output_activation : net.spec().hidden_activation);
    a = std::move(z);
  }
  return a;
}

struct BackwardResult {
  Gradients grads;
  Batch dinput;  // gradient w.r.t. the batch passed to forward (through the noise mask)
};

/// Backpropagates `upstream` (dLoss/dOutput). Gradients are sums over the
/// batch; any per-example averaging belongs to the loss.
inline BackwardResult backward(const Network& net, const ForwardCache& cache, const Batch& upstream) {
  require<Error>(cache.net == &net && cache.generation == net.generation() &&
                     cache.pre.size() == net.num_layers(),
                 "stale or mismatched forward cache");
  const Batch& out = cache.output();
  require<ShapeError>(upstream.rows() == out.rows() && upstream.cols() == out.cols(),
                      "upstream gradient shape does not match network output");
  BackwardResult res;
  res.grads = net.zero_gradients();
  Batch delta = upstream;
  for (std::size_t k = net.num_layers(); k-- > 0;) {
    const bool last = k + 1 == net.num_layers();
    detail::activate_backward(delta, cache.pre[k], cache.activations[k + 1],
                              last ? net.spec().output_activation : net.spec().hidden_activation);
    res.grads.weights[k].noalias() = delta.transpose() * cache.activations[k];
    res.grads.biases[k] = delta.colwise().sum().transpose();
    Batch prev = delta * net.weight(k);
    delta = std::move(prev);
  }
  if (cache.input_mask) delta = delta.cwiseProduct(*cache.input_mask);
  res.dinput = std::move(delta);
  return res;
}

struct LossResult {
  double loss = 0.0;
  Batch grad;
};

/// Mean over the batch of -log softmax(logits)[label].
inline LossResult softmax_cross_entropy(const Batch& logits, std::span<const int> labels) {
  const auto n = logits.rows();
  const auto k = logits.cols();
  require<ConfigError>(k >= 2, "softmax cross-entropy needs at least 2 classes, got ", k);
  require<ShapeError>(static_cast<std::size_t>(n) == labels.size(), "label count ", labels.size(),
                      " does not match batch size ", n);
  LossResult res;
  res.grad.resize(n, k);
  if (n == 0) return res;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require<DataError>(y >= 0 && y < k, "label ", y, " outside [0, ", k, ")");
    const double m = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - m).eval();
    const double log_z = std::log(shifted.exp().sum());
    total += log_z - shifted(y);
    res.grad.row(i) = (shifted - log_z).exp().matrix();
    res.grad(i, y) -= 1.0;
  }
  res.loss = total / static_cast<double>(n);
  res.grad /= static_cast<double>(n);
  return res;
}

/// Mean squared error over all elements.
inline LossResult mse(const Batch& pred, const Batch& target) {
  require<ShapeError>(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse shape mismatch: ",
                      pred.rows(), "x", pred.cols(), " vs ", target.rows(), "x", target.cols());
  LossResult res;
  const auto count = static_cast<double>(pred.size());
  if (pred.size() == 0) {
    res.grad = Batch::Zero(pred.rows(), pred.cols());
    return res;
  }
  Batch diff = pred - target;
  res.loss = diff.squaredNorm() / count;
  res.grad = (2.0 / count) * diff;
  return res;
}

/// coeff * sum of squared weights (biases are not penalized).
inline double l2_penalty(const Network& net, double coeff) {
  if (coeff == 0.0) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < net.num_layers(); ++k) s += net.weight(k).squaredNorm();
  return coeff * s;
}

inline void add_l2_gradient(const Network& net, double coeff, Gradients& grads) {
  if (coeff == 0.0) return;
  for (std::size_t k = 0; k < net.num_layers(); ++k) grads.weights[k] += 2.0 * coeff * net.weight(k);
}

struct AdamState {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  Gradients first_moment;
  Gradients second_moment;

  static AdamState for_network(const Network& net, double lr = 0.0002) {
    require<ConfigError>(lr > 0.0, "learning rate must be positive");
    AdamState s;
    s.lr = lr;
    s.first_moment = net.zero_gradients();
    s.second_moment = net.zero_gradients();
    return s;
  }
};

/// Bias-corrected Adam update of `net` in place.
inline void adam_step(Network& net, const Gradients& grads, AdamState& state) {
  check_shapes(net, grads);
  check_shapes(net, state.first_moment);
  require<NumericError>(grads.all_finite(), "non-finite gradient passed to adam_step");
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    param.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
  };
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    update(net.mutable_weight(k), grads.weights[k], state.first_moment.weights[k],
           state.second_moment.weights[k]);
    update(net.mutable_bias(k), grads.biases[k], state.first_moment.biases[k], state.second_moment.biases[k]);
  }
}

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates checked per weight/bias tensor; 0 checks every coordinate.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
  std::string worst;  // location of the largest error
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares `analytic[i]` (gradient for `*nets[i]`) against central
/// differences of `loss()`, which must evaluate deterministically at the
/// current parameters of every network in `nets`.
template <typename LossFn>
GradCheckReport gradient_check(std::span<Network* const> nets, std::span<const Gradients> analytic,
                               LossFn&& loss, const GradCheckOptions& opts = {}) {
  require<ShapeError>(nets.size() == analytic.size(), "one gradient per network required");
  GradCheckReport report;
  Rng rng(opts.seed);
  auto probe = [&](double& param, double g, const std::string& where) {
    const double saved = param;
    param = saved + opts.step;
    const double up = loss();
    param = saved - opts.step;
    const double down = loss();
    param = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double err = relative_error(g, numeric);
    ++report.checked;
    if (err >= report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = where + spkdis::detail::concat(" analytic=", g, " numeric=", numeric);
    }
  };
  auto pick = [&](Eigen::Index size) {
    std::vector<Eigen::Index> idx;
    if (opts.max_per_tensor == 0 || static_cast<std::size_t>(size) <= opts.max_per_tensor) {
      for (Eigen::Index i = 0; i < size; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opts.max_per_tensor; ++i)
        idx.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(size))));
    }
    return idx;
  };
  for (std::size_t n = 0; n < nets.size(); ++n) {
    Network& net = *nets[n];
    check_shapes(net, analytic[n]);
    for (std::size_t k = 0; k < net.num_layers(); ++k) {
      Matrix& w = net.mutable_weight(k);
      for (auto i : pick(w.size()))
        probe(w.data()[i], analytic[n].weights[k].data()[i], spkdis::detail::concat("net ", n, " W", k, "[", i, "]"));
      Vector& b = net.mutable_bias(k);
      for (auto i : pick(b.size()))
        probe(b.data()[i], analytic[n].biases[k].data()[i], spkdis::detail::concat("net ", n, " b", k, "[", i, "]"));
    }
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Single-network form: `loss_fn(net)` returns the loss and its analytic
/// gradient at the network's current parameters.
template <typename LossFn>
GradCheckReport gradient_check(Network& net, LossFn&& loss_fn, const GradCheckOptions& opts = {}) {
  const LossAndGradients at = loss_fn(std::as_const(net));
  Network* nets[] = {&net};
  const Gradients grads[] = {at.grads};
  return gradient_check(std::span<Network* const>(nets), std::span<const Gradients>(grads),
                        [&] { return loss_fn(std::as_const(net)).loss; }, opts);
}

/// Softmax cross-entropy plus L2 for a classifier on a fixed batch.
inline LossAndGradients classification_loss(const Network& net, const Batch& x, std::span<const int> labels,
                                            double l2_coeff) {
  const auto cache = forward(net, x);
  const auto ce = softmax_cross_entropy(cache.output(), labels);
  auto back = backward(net, cache, ce.grad);
  add_l2_gradient(net, l2_coeff, back.grads);
  return {ce.loss + l2_penalty(net, l2_coeff), std::move(back.grads)};
}

/// MSE regression loss on a fixed batch.
inline LossAndGradients regression_loss(const Network& net, const Batch& x, const Batch& target) {
  const auto cache = forward(net, x);
  const auto r = mse(cache.output(), target);
  auto back = backward(net, cache, r.grad);
  return {r.loss, std::move(back.grads)};
}

// Checkpoint: "NNET v1\n", one JSON header line, then the parameters as
// little-endian float64 (per layer: weight row-major, then bias).

inline nlohmann::json spec_to_json(const NetworkSpec& spec) {
  return {{"layer_dims", spec.layer_dims},
          {"hidden_activation", to_string(spec.hidden_activation)},
          {"output_activation", to_string(spec.output_activation)},
          {"l2_coeff", spec.l2_coeff}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
  spec.hidden_activation = activation_from_string(j.at("hidden_activation").get<std::string>());
  spec.output_activation = activation_from_string(j.value("output_activation", std::string("none")));
  spec.l2_coeff = j.value("l2_coeff", 0.0);
  spec.validate();
  return spec;
}

struct Checkpoint {
  Network net;
  std::uint64_t step_count = 0;
  std::uint64_t seed = 0;
};

inline void save_network(const Network& net, const std::filesystem::path& path, std::uint64_t step_count = 0) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  nlohmann::json header = {{"spec", spec_to_json(net.spec())}, {"step_count", step_count}, {"seed", net.seed()}};
  out << "NNET v1\n" << header.dump() << '\n';
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const Matrix& w = net.weight(k);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) spkdis::detail::put_f64_le(out, w(r, c));
    for (Eigen::Index r = 0; r < net.bias(k).size(); ++r) spkdis::detail::put_f64_le(out, net.bias(k)(r));
  }
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline Checkpoint load_network(const std::filesystem::path& path) {
  const std::string bytes = spkdis::detail::read_file(path);
  const auto nl1 = bytes.find('\n');
  require<DataError>(nl1 != std::string::npos && bytes.substr(0, nl1) == "NNET v1", path.string(),
                     ": not an NNET v1 checkpoint");
  const auto nl2 = bytes.find('\n', nl1 + 1);
  require<DataError>(nl2 != std::string::npos, path.string(), ": missing JSON header");
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
    ck.net = Network::zeros(spec_from_json(header.at("spec")));
    ck.step_count = header.value("step_count", std::uint64_t{0});
    ck.seed = header.value("seed", std::uint64_t{0});
    ck.net.set_seed(ck.seed);
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(path.string(), ": bad checkpoint header: ", e.what());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = nl2 + 1;
  require<DataError>(bytes.size() - pos == 8 * ck.net.parameter_count(), path.string(),
                     ": payload size does not match spec");
  auto next = [&] {
    const double v = std::bit_cast<double>(spkdis::detail::get_le(p + pos, 8));
    pos += 8;
    return v;
  };
  for (std::size_t k = 0; k < ck.net.num_layers(); ++k) {
    Matrix& w = ck.net.mutable_weight(k);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = next();
    Vector& b = ck.net.mutable_bias(k);
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = next();
  }
  require<DataError>(ck.net.all_finite(), path.string(), ": non-finite parameter");
  return ck;
}

}  // namespace spkdis::nnet
