#include <gtest/gtest.h>

#include <cmath>
#include <iostream>
#include <sstream>

#include "bicanet/gradcheck.hpp"
#include "bicanet/layers.hpp"
#include "bicanet/log.hpp"

namespace bicanet {
namespace {

template <typename T>
void set_all(const Var<T>& v, T value) {
  Var<T> copy = v;
  copy.mutable_value().fill(value);
}

TEST(ConvLayer, LinearLayerIsPlainConvolution) {
  ParamStore<float> store;
  ConvLayer<float> layer(store, "c", ConvSpec::square(3, 5, 3, 2, Norm::kNone, Activation::kNone));
  init_params(store, 3);
  set_all(layer.bias(), 0.25f);
  Var<float> x(random_tensor<float>(Shape{2, 3, 9, 7}, 4));
  Tape<float> tape(false);
  auto y = layer.forward(tape, x, Mode::kTrain);
  auto ref = ops::conv2d(tape, x, layer.weight(), layer.bias(), ops::Conv2dParams::same(2, 1));
  EXPECT_EQ(y.value().vector(), ref.value().vector());
}

TEST(ConvLayer, ReluOnNegativePreActivationIsZero) {
  ParamStore<float> store;
  ConvLayer<float> layer(store, "c", ConvSpec::square(2, 3, 3, 1, Norm::kNone, Activation::kRelu));
  init_params(store, 1);
  set_all(layer.weight(), -1.0f);
  Var<float> x(Tensor<float>(Shape{1, 2, 5, 5}, 1.0f));
  Tape<float> tape(false);
  const auto y = layer.forward(tape, x, Mode::kEval);
  for (float v : y.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(ConvLayer, TrainModeBatchNormNormalisesMoments) {
  ParamStore<double> store;
  ConvLayer<double> layer(store, "c", ConvSpec::square(3, 4, 3, 1, Norm::kBatch, Activation::kNone));
  init_params(store, 7);
  Var<double> x(random_tensor<double>(Shape{2, 3, 6, 5}, 8, 3.0));
  Tape<double> tape(false);
  const auto y = layer.forward(tape, x, Mode::kTrain);
  const Shape s = y.shape();
  for (int c = 0; c < s.c; ++c) {
    double mean = 0, var = 0;
    const double count = s.n * s.h * s.w;
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) mean += y.value().at(n, c, i, j);
    mean /= count;
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) var += std::pow(y.value().at(n, c, i, j) - mean, 2);
    var /= count;
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(ConvLayer, EvalBeforeUpdateUsesInitialStatisticsAndWarns) {
  ParamStore<double> store;
  ConvLayer<double> layer(store, "fresh", ConvSpec::square(2, 2, 1, 1, Norm::kBatch, Activation::kNone));
  init_params(store, 9);
  Var<double> x(random_tensor<double>(Shape{1, 2, 3, 3}, 10));

  std::ostringstream captured;
  auto* old = std::clog.rdbuf(captured.rdbuf());
  Tape<double> tape(false);
  const auto y = layer.forward(tape, x, Mode::kEval);
  std::clog.rdbuf(old);
  EXPECT_NE(captured.str().find("fresh"), std::string::npos);

  const auto raw = ops::conv2d(tape, x, layer.weight(), Var<double>(), ops::Conv2dParams{});
  for (std::size_t i = 0; i < raw.value().size(); ++i)
    EXPECT_NEAR(y.value()[i], raw.value()[i] / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(ConvLayer, EvalModeIsPure) {
  ParamStore<float> store;
  ConvLayer<float> layer(store, "c", ConvSpec::square(3, 4, 3, 1, Norm::kBatch, Activation::kRelu));
  init_params(store, 11);
  Var<float> x(random_tensor<float>(Shape{2, 3, 5, 5}, 12));
  Tape<float> train(true);
  layer.forward(train, x, Mode::kTrain);  // move running statistics away from init
  const auto mean_before = layer.running_mean().value().vector();
  Tape<float> tape(false);
  const auto a = layer.forward(tape, x, Mode::kEval);
  const auto b = layer.forward(tape, x, Mode::kEval);
  EXPECT_EQ(a.value().vector(), b.value().vector());
  EXPECT_EQ(layer.running_mean().value().vector(), mean_before);
}

TEST(ConvLayer, RunningStatisticsTrackBatchMoments) {
  ParamStore<double> store;
  ConvSpec spec = ConvSpec::square(1, 1, 1, 1, Norm::kBatch, Activation::kNone);
  ConvLayer<double> layer(store, "c", spec, NormOptions{0.5, 1e-5});
  init_params(store, 0);
  set_all(layer.weight(), 1.0);
  Var<double> x(Tensor<double>(Shape{1, 1, 1, 4}, {1, 2, 3, 6}));
  Tape<double> tape(false);
  layer.forward(tape, x, Mode::kTrain);
  // mean 3, unbiased variance 14/3
  EXPECT_NEAR(layer.running_mean().value()[0], 0.5 * 3.0, 1e-12);
  EXPECT_NEAR(layer.running_var().value()[0], 0.5 * 1.0 + 0.5 * 14.0 / 3.0, 1e-12);
}

TEST(ParamStore, InitialisationIsDeterministic) {
  auto build = [](std::uint64_t seed) {
    ParamStore<float> store;
    ConvLayer<float> a(store, "a", ConvSpec::square(3, 8, 3, 1, Norm::kBatch, Activation::kRelu));
    ConvLayer<float> b(store, "b", ConvSpec::square(8, 4, 1, 1, Norm::kNone, Activation::kNone));
    init_params(store, seed);
    std::vector<float> bytes;
    for (const auto& e : store.entries()) bytes.insert(bytes.end(), e.var.value().data().begin(), e.var.value().data().end());
    return bytes;
  };
  EXPECT_EQ(build(42), build(42));
  EXPECT_NE(build(42), build(43));
}

TEST(ParamStore, BiasesZeroAndScalesOne) {
  ParamStore<float> store;
  ConvLayer<float> a(store, "a", ConvSpec::square(3, 8, 3, 1, Norm::kBatch, Activation::kRelu));
  ConvLayer<float> b(store, "b", ConvSpec::square(8, 4, 1, 1, Norm::kNone, Activation::kNone));
  init_params(store, 5);
  for (float v : b.bias().value().data()) EXPECT_EQ(v, 0.0f);
  for (float v : a.beta().value().data()) EXPECT_EQ(v, 0.0f);
  for (float v : a.gamma().value().data()) EXPECT_EQ(v, 1.0f);
  EXPECT_FALSE(a.bias().defined());
  EXPECT_FALSE(store.at("a.bn.running_mean").var.requires_grad());
}

TEST(ParamStore, HeNormalStandardDeviation) {
  ParamStore<float> store;
  ConvLayer<float> layer(store, "w", ConvSpec::square(64, 64, 3, 1, Norm::kNone, Activation::kNone));
  init_params(store, 123);
  double sum = 0, sq = 0;
  const auto data = layer.weight().value().data();
  for (float v : data) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(data.size());
  const double stddev = std::sqrt(sq / n - (sum / n) * (sum / n));
  const double expected = std::sqrt(2.0 / 576.0);
  EXPECT_NEAR(stddev, expected, 0.1 * expected);
}

TEST(ParamStore, DoubleInitialisationAndDuplicatesRejected) {
  ParamStore<float> store;
  ConvLayer<float> layer(store, "x", ConvSpec::square(1, 1, 1, 1, Norm::kNone, Activation::kNone));
  EXPECT_THROW(ConvLayer<float>(store, "x", ConvSpec::square(1, 1, 1, 1, Norm::kNone, Activation::kNone)), ConfigError);
  init_params(store, 1);
  EXPECT_THROW(init_params(store, 1), std::logic_error);
}

TEST(ChannelAttention, SaturatedGateIsIdentity) {
  ParamStore<float> store;
  ChannelAttention<float> att(store, "att", 8, 4);
  init_params(store, 2);
  set_all(att.excite().weight(), 0.0f);
  set_all(att.excite().bias(), 40.0f);  // sigmoid(40) rounds to 1 in float
  Var<float> x(random_tensor<float>(Shape{2, 8, 3, 4}, 3));
  Tape<float> tape(false);
  const auto y = att.forward(tape, x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.value().vector(), x.value().vector());
}

TEST(ChannelAttention, WeightsInOpenUnitInterval) {
  ParamStore<float> store;
  ChannelAttention<float> att(store, "att", 12, 4);
  EXPECT_EQ(att.hidden(), 3);
  init_params(store, 4);
  Var<float> x(random_tensor<float>(Shape{2, 12, 5, 5}, 5, 4.0));
  Tape<float> tape(false);
  const auto s = att.weights(tape, x);
  EXPECT_EQ(s.shape(), (Shape{2, 12, 1, 1}));
  for (float v : s.value().data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_EQ(att.forward(tape, x).shape(), x.shape());
}

TEST(ChannelAttention, GradientMatchesFiniteDifferences) {
  ParamStore<double> store;
  ChannelAttention<double> att(store, "att", 6, 4);
  init_params(store, 6);
  Var<double> x(random_tensor<double>(Shape{2, 6, 4, 4}, 7), true);
  std::vector<Var<double>> leaves{x};
  for (auto& p : store.learnable()) leaves.push_back(p);
  const auto r = check_gradients("channel_attention", leaves,
                                 [&](Tape<double>& t) { return random_projection(t, att.forward(t, x), 8); });
  EXPECT_TRUE(r.passed) << r.relative_error << " over " << r.checked << ", skipped " << r.skipped;
}

TEST(ConvLayer, GradientWithBatchNormMatchesFiniteDifferences) {
  ParamStore<double> store;
  ConvLayer<double> layer(store, "c", ConvSpec::square(3, 4, 3, 2, Norm::kBatch, Activation::kRelu));
  init_params(store, 13);
  Var<double> x(random_tensor<double>(Shape{2, 3, 5, 5}, 14), true);
  std::vector<Var<double>> leaves{x};
  for (auto& p : store.learnable()) leaves.push_back(p);
  const auto r = check_gradients("conv_bn_relu", leaves, [&](Tape<double>& t) {
    return random_projection(t, layer.forward(t, x, Mode::kTrain), 15);
  });
  EXPECT_TRUE(r.passed) << r.relative_error << " over " << r.checked << ", skipped " << r.skipped;
}

}  // namespace
}  // namespace bicanet
