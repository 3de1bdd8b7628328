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
#include <numeric>

#include <gtest/gtest.h>

#include "spkdis/nnet.hpp"
#include "test_util.hpp"

namespace spkdis::nnet {
namespace {

Batch random_batch(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Batch b(rows, cols);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  return b;
}

std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return y;
}

// Row-at-a-time forward pass written with plain loops.
std::vector<double> naive_forward(const Network& net, std::vector<double> a) {
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const Matrix& w = net.weight(k);
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = net.bias(k)(r);
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * a[static_cast<std::size_t>(c)];
      const bool last = k + 1 == net.num_layers();
      const auto act = last ? net.spec().output_activation : net.spec().hidden_activation;
      if (act == Activation::kRelu) s = std::max(s, 0.0);
      if (act == Activation::kTanh) s = std::tanh(s);
      z[static_cast<std::size_t>(r)] = s;
    }
    a = std::move(z);
  }
  return a;
}

TEST(Forward, ZeroNetworkGivesZeros) {
  const auto net = Network::zeros({{10, 5, 3}});
  const Batch out = predict(net, random_batch(4, 10, 1));
  EXPECT_EQ(out.rows(), 4);
  EXPECT_EQ(out.cols(), 3);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, IdentityLayerPassesInputThrough) {
  auto net = Network::zeros({{3, 3}});
  net.mutable_weight(0) = Matrix::Identity(3, 3);
  Batch x(1, 3);
  x << 1, 2, 3;
  EXPECT_EQ(predict(net, x), x);
}

TEST(Forward, MatchesNaiveLoops) {
  for (auto hidden : {Activation::kRelu, Activation::kTanh}) {
    const auto net = Network::init({{7, 11, 6, 4}, hidden, Activation::kTanh}, 3);
    const Batch x = random_batch(9, 7, 4);
    const Batch out = predict(net, x);
    const Batch cached = forward(net, x).output();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::RowVectorXd row = x.row(i);
      const auto ref = naive_forward(net, std::vector<double>(row.data(), row.data() + row.size()));
      for (Eigen::Index j = 0; j < out.cols(); ++j) {
        EXPECT_NEAR(out(i, j), ref[static_cast<std::size_t>(j)], 1e-12);
        EXPECT_NEAR(cached(i, j), ref[static_cast<std::size_t>(j)], 1e-12);
      }
    }
  }
}

TEST(Forward, RejectsWrongWidth) {
  const auto net = Network::zeros({{4, 2}});
  EXPECT_THROW(predict(net, Batch::Zero(1, 5)), ShapeError);
}

TEST(Loss, CrossEntropyOfUniformLogitsIsLogK) {
  const std::vector<int> y{0, 1, 2, 3};
  const auto r = softmax_cross_entropy(Batch::Zero(4, 4), y);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-12);
}

TEST(Loss, CrossEntropyGradientMatchesFiniteDifferences) {
  Batch logits = random_batch(5, 4, 8);
  const auto y = random_labels(5, 4, 9);
  const auto r = softmax_cross_entropy(logits, y);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double saved = logits.data()[i];
    logits.data()[i] = saved + h;
    const double up = softmax_cross_entropy(logits, y).loss;
    logits.data()[i] = saved - h;
    const double down = softmax_cross_entropy(logits, y).loss;
    logits.data()[i] = saved;
    EXPECT_LT(std::abs((up - down) / (2 * h) - r.grad.data()[i]), 1e-6);
  }
}

TEST(Loss, MseGradientMatchesFiniteDifferences) {
  Batch pred = random_batch(3, 6, 10);
  const Batch target = random_batch(3, 6, 11);
  const auto r = mse(pred, target);
  EXPECT_NEAR(r.loss, (pred - target).squaredNorm() / 18.0, 1e-14);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double saved = pred.data()[i];
    pred.data()[i] = saved + h;
    const double up = mse(pred, target).loss;
    pred.data()[i] = saved - h;
    const double down = mse(pred, target).loss;
    pred.data()[i] = saved;
    EXPECT_LT(std::abs((up - down) / (2 * h) - r.grad.data()[i]), 1e-6);
  }
}

TEST(Loss, RejectsBadLabels) {
  const std::vector<int> y{0, 5};
  EXPECT_THROW(softmax_cross_entropy(Batch::Zero(2, 3), y), DataError);
  EXPECT_THROW(softmax_cross_entropy(Batch::Zero(2, 1), std::vector<int>{0, 0}), ConfigError);
  EXPECT_THROW(mse(Batch::Zero(2, 3), Batch::Zero(3, 2)), ShapeError);
}

TEST(Backward, SingleLinearLayerClosedForm) {
  // L = sum(out * U) so dW = U^T X and db = column sums of U.
  const auto net = Network::init({{4, 3}}, 2);
  const Batch x = random_batch(6, 4, 3);
  const Batch u = random_batch(6, 3, 4);
  const auto res = backward(net, forward(net, x), u);
  EXPECT_LT((res.grads.weights[0] - Matrix(u.transpose() * x)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((res.grads.biases[0] - Vector(u.colwise().sum().transpose())).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((res.dinput - u * net.weight(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, StaleCacheIsRejected) {
  auto net = Network::init({{2, 2}}, 1);
  const auto cache = forward(net, Batch::Ones(1, 2));
  net.mutable_bias(0)(0) = 1.0;
  EXPECT_THROW(backward(net, cache, Batch::Ones(1, 2)), Error);
}

TEST(GradCheck, SmallNetworksPass) {
  for (auto hidden : {Activation::kRelu, Activation::kTanh}) {
    auto net = Network::init({{5, 8, 3}, hidden}, 17);
    const Batch x = random_batch(7, 5, 18);
    const auto y = random_labels(7, 3, 19);
    const auto report =
        gradient_check(net, [&](const Network& n) { return classification_loss(n, x, y, 0.01); });
    EXPECT_TRUE(report.passed) << report.worst;
    EXPECT_LT(report.max_rel_error, 1e-4);
    EXPECT_EQ(report.checked, net.parameter_count());
  }
}

TEST(GradCheck, LinearRegressionIsNearlyExact) {
  auto net = Network::init({{6, 2}}, 5);
  const Batch x = random_batch(10, 6, 6);
  const Batch t = random_batch(10, 2, 7);
  const auto report = gradient_check(net, [&](const Network& n) { return regression_loss(n, x, t); });
  EXPECT_LT(report.max_rel_error, 1e-7) << report.worst;
}

TEST(GradCheck, LargeNetworkSampled) {
  auto net = Network::init({{128, 256, 50}, Activation::kRelu}, 21);
  const Batch x = random_batch(4, 128, 22);
  const auto y = random_labels(4, 50, 23);
  GradCheckOptions opts;
  opts.max_per_tensor = 40;
  opts.seed = 1;
  const auto report =
      gradient_check(net, [&](const Network& n) { return classification_loss(n, x, y, 0.0); }, opts);
  EXPECT_TRUE(report.passed) << report.worst;
}

TEST(GradCheck, DetectsCorruptedGradient) {
  auto net = Network::init({{4, 5, 2}, Activation::kTanh}, 31);
  const Batch x = random_batch(6, 4, 32);
  const Batch t = random_batch(6, 2, 33);
  const auto report = gradient_check(net, [&](const Network& n) {
    auto r = regression_loss(n, x, t);
    r.grads.weights[0](1, 2) *= 1.5;
    return r;
  });
  EXPECT_FALSE(report.passed);
  EXPECT_NE(report.worst.find("W0"), std::string::npos);
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  auto net = Network::init({{3, 2}}, 4);
  const auto before = net;
  auto state = AdamState::for_network(net);
  Gradients g = net.zero_gradients();
  g.weights[0] << 0.5, -2.0, 0.05, -0.1, 3.0, 0.25;
  g.biases[0] << -7.0, 0.1;
  adam_step(net, g, state);
  for (Eigen::Index i = 0; i < g.weights[0].size(); ++i) {
    const double gi = g.weights[0].data()[i];
    const double step = net.weight(0).data()[i] - before.weight(0).data()[i];
    EXPECT_NEAR(step, -0.0002 * (gi > 0 ? 1.0 : -1.0), 1e-9);
  }
  EXPECT_NEAR(net.bias(0)(0) - before.bias(0)(0), 0.0002, 1e-9);
  EXPECT_NEAR(net.bias(0)(1) - before.bias(0)(1), -0.0002, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto net = Network::init({{3, 4, 2}}, 4);
  const auto before = net;
  auto state = AdamState::for_network(net);
  for (int i = 0; i < 5; ++i) adam_step(net, net.zero_gradients(), state);
  EXPECT_TRUE(net == before);
  EXPECT_EQ(state.step_count, 5u);
}

TEST(Adam, ConvergesOnQuadratic) {
  // Minimize |b - c|^2 over the bias of a zero-weight layer.
  auto net = Network::zeros({{1, 3}});
  Vector c(3);
  c << 1.0, -2.0, 0.5;
  auto state = AdamState::for_network(net, 0.05);
  for (int it = 0; it < 2000; ++it) {
    Gradients g = net.zero_gradients();
    g.biases[0] = 2.0 * (net.bias(0) - c);
    adam_step(net, g, state);
  }
  EXPECT_LT((net.bias(0) - c).norm(), 1e-3);
}

TEST(Adam, RejectsNonFiniteGradient) {
  auto net = Network::zeros({{2, 2}});
  auto state = AdamState::for_network(net);
  Gradients g = net.zero_gradients();
  g.biases[0](0) = std::nan("");
  EXPECT_THROW(adam_step(net, g, state), NumericError);
}

TEST(Dropout, PreservesMeanAndIdentityAtKeepOne) {
  Rng rng(99);
  const Batch h = Batch::Ones(400, 250);
  const Batch noisy = apply_noise(h, {0.25}, rng);
  EXPECT_NEAR(noisy.mean(), 1.0, 0.01);
  const double zeros = static_cast<double>((noisy.array() == 0.0).count()) / static_cast<double>(noisy.size());
  EXPECT_NEAR(zeros, 0.75, 0.01);
  EXPECT_EQ(apply_noise(h, {1.0}, rng), h);
  EXPECT_THROW(apply_noise(h, {0.0}, rng), ConfigError);
}

TEST(Dropout, BackwardThroughInputMask) {
  auto net = Network::init({{5, 3}}, 8);
  const Batch x = random_batch(4, 5, 9);
  Rng rng(10);
  NoiseSpec noise{0.5};
  const auto cache = forward(net, x, &noise, &rng);
  ASSERT_TRUE(cache.input_mask.has_value());
  const Batch u = random_batch(4, 3, 11);
  const auto res = backward(net, cache, u);
  EXPECT_LT((res.dinput - Batch((u * net.weight(0)).cwiseProduct(*cache.input_mask))).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Checkpoint, RoundTripIsExact) {
  testing::TempDir dir;
  const auto net = Network::init({{6, 9, 4}, Activation::kTanh, Activation::kNone, 0.5}, 77);
  save_network(net, dir / "n.nnet", 123);
  const auto ck = load_network(dir / "n.nnet");
  EXPECT_TRUE(ck.net == net);
  EXPECT_EQ(ck.step_count, 123u);
  EXPECT_EQ(ck.seed, 77u);
  const Batch x = random_batch(3, 6, 1);
  EXPECT_EQ(predict(ck.net, x), predict(net, x));
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  testing::TempDir dir;
  save_network(Network::init({{3, 3}}, 1), dir / "n.nnet");
  std::string bytes = testing::read_bytes(dir / "n.nnet");
  testing::write_file(dir / "n.nnet", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_network(dir / "n.nnet"), DataError);
}

}  // namespace
}  // namespace spkdis::nnet
