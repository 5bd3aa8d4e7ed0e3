#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bicanet/gradcheck.hpp"
#include "bicanet/network.hpp"

namespace bicanet {
namespace {

ModelConfig tiny_config(int classes = 3) {
  ModelConfig c;
  c.num_classes = classes;
  c.backbone = BackboneConfig{4, {4, 6, 6, 8}, 1};
  c.global_kernel = 32;
  return c;
}

TEST(Network, OutputShapes) {
  ModelConfig cfg;
  cfg.num_classes = 21;
  BiCANet<float> net(cfg);
  init_params(net.params(), 1);
  Var<float> x(random_tensor<float>(Shape{1, 3, 64, 64}, 2));
  Tape<float> tape(false);
  const auto out = net.forward(tape, x, Mode::kTrain);
  EXPECT_EQ(out.logits.shape(), (Shape{1, 21, 64, 64}));
  for (const auto& a : out.aux) EXPECT_EQ(a.shape(), (Shape{1, 21, 64, 64}));
}

TEST(Network, EvalForwardIsDeterministic) {
  BiCANet<float> net(tiny_config());
  init_params(net.params(), 3);
  Var<float> x(random_tensor<float>(Shape{1, 3, 32, 32}, 4));
  Tape<float> train(false);
  net.forward(train, x, Mode::kTrain);
  Tape<float> tape(false);
  const auto a = net.forward(tape, x, Mode::kEval);
  const auto b = net.forward(tape, x, Mode::kEval);
  EXPECT_EQ(a.logits.value().vector(), b.logits.value().vector());
}

TEST(Network, RejectsIndivisibleInput) {
  BiCANet<float> net(tiny_config());
  init_params(net.params(), 3);
  Var<float> x(Tensor<float>(Shape{1, 3, 40, 32}));
  Tape<float> tape(false);
  EXPECT_THROW(net.forward(tape, x, Mode::kEval), std::invalid_argument);
}

TEST(Network, DoubleShadowMatchesFloatModel) {
  BiCANet<float> f(tiny_config());
  init_params(f.params(), 5);
  BiCANet<double> d(tiny_config());
  d.params().copy_values_from(f.params());
  const auto xd = random_tensor<double>(Shape{1, 3, 32, 32}, 6);
  Tape<float> tf(false);
  Tape<double> td(false);
  const auto a = f.forward(tf, Var<float>(xd.cast<float>()), Mode::kTrain);
  const auto b = d.forward(td, Var<double>(xd), Mode::kTrain);
  for (std::size_t i = 0; i < a.logits.value().size(); ++i)
    EXPECT_NEAR(a.logits.value()[i], b.logits.value()[i], 1e-3);
}

TEST(Network, SampledFullModelGradient) {
  BiCANet<float> f(tiny_config());
  init_params(f.params(), 7);
  BiCANet<double> d(tiny_config());
  d.params().copy_values_from(f.params());
  Var<double> x(random_tensor<double>(Shape{1, 3, 32, 32}, 8));
  LabelMap labels(1, 32, 32);
  std::mt19937 rng(9);
  for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % 3);
  GradCheckOptions opt;
  opt.sampled_entries = 20;
  opt.tolerance = 2e-3;
  opt.seed = 10;
  // Every weight feeds thousands of batch-coupled relu units, so many sampled
  // coordinates straddle a kink; replacements are drawn until 20 clean ones are found.
  opt.max_skip_fraction = 0.75;
  OhemConfig no_ohem;
  no_ohem.enabled = false;  // keep the selection fixed under perturbation
  const auto r = check_gradients("bicanet", d.params().learnable(), [&](Tape<double>& t) {
    return compute_loss(t, d.forward(t, x, Mode::kTrain), labels, 0.1, no_ohem).total;
  }, opt);
  EXPECT_TRUE(r.passed) << r.relative_error << " over " << r.checked << ", skipped " << r.skipped;
}

ModelOutput<double> random_output(int n, int L, int h, int w, std::uint64_t seed) {
  ModelOutput<double> out;
  out.logits = Var<double>(random_tensor<double>(Shape{n, L, h, w}, seed, 2.0), true);
  for (int i = 0; i < 4; ++i) out.aux[i] = Var<double>(random_tensor<double>(Shape{n, L, h, w}, seed + 1 + i, 2.0), true);
  return out;
}

LabelMap random_labels(int n, int h, int w, int L, std::uint64_t seed, double ignore_rate = 0.0) {
  LabelMap m(n, h, w);
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& l : m.data) l = u(rng) < ignore_rate ? LabelMap::kIgnore : static_cast<std::uint8_t>(rng() % L);
  return m;
}

TEST(Loss, TotalComposesMasterAndAuxiliary) {
  const auto out = random_output(2, 4, 6, 6, 1);
  const auto labels = random_labels(2, 6, 6, 4, 2, 0.1);
  for (int k = 0; k <= 9; ++k) {
    const double lambda = 0.1 * k;
    Tape<double> tape(false);
    const auto loss = compute_loss(tape, out, labels, lambda, OhemConfig{});
    double aux = 0;
    for (double a : loss.report.aux) aux += a;
    EXPECT_NEAR(loss.report.total, loss.report.master + lambda * aux, 1e-6);
    if (k == 0) {
      EXPECT_EQ(loss.report.total, loss.report.master);
    }
  }
}

TEST(Loss, UniformLogitsGiveLogClassCount) {
  ModelOutput<double> out;
  out.logits = Var<double>(Tensor<double>(Shape{1, 4, 5, 5}, 0.3));
  for (auto& a : out.aux) a = out.logits;
  const auto labels = random_labels(1, 5, 5, 4, 3);
  Tape<double> tape(false);
  const auto loss = compute_loss(tape, out, labels, 0.0, OhemConfig{});
  EXPECT_NEAR(loss.report.master, std::log(4.0), 1e-5);
}

TEST(Loss, RejectsNegativeLambdaAndBadLabels) {
  const auto out = random_output(1, 3, 4, 4, 4);
  Tape<double> tape(false);
  EXPECT_THROW(compute_loss(tape, out, random_labels(1, 4, 4, 3, 5), -0.1, OhemConfig{}), ConfigError);
  LabelMap bad = random_labels(1, 4, 4, 3, 5);
  bad.at(0, 2, 1) = 3;
  try {
    compute_loss(tape, out, bad, 0.1, OhemConfig{});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(bad.index(0, 2, 1))), std::string::npos) << e.what();
  }
}

TEST(Loss, IgnoredPixelsReceiveNoGradient) {
  const auto out = random_output(1, 3, 6, 6, 6);
  const auto labels = random_labels(1, 6, 6, 3, 7, 0.3);
  Tape<double> tape(true);
  const auto loss = compute_loss(tape, out, labels, 0.4, OhemConfig{});
  tape.backward(loss.total);
  const Shape s = out.logits.shape();
  int ignored = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (labels.at(0, y, x) != LabelMap::kIgnore) continue;
      ++ignored;
      for (int c = 0; c < s.c; ++c) {
        EXPECT_EQ(out.logits.grad().at(0, c, y, x), 0.0);
        for (const auto& a : out.aux) EXPECT_EQ(a.grad().at(0, c, y, x), 0.0);
      }
    }
  EXPECT_GT(ignored, 0);

  // Changing logits under ignored pixels leaves the loss untouched.
  auto changed = random_output(1, 3, 6, 6, 6);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      if (labels.at(0, y, x) == LabelMap::kIgnore)
        for (int c = 0; c < s.c; ++c) changed.logits.mutable_value().at(0, c, y, x) = 100.0 * (c + 1);
  Tape<double> t2(false);
  EXPECT_EQ(compute_loss(t2, changed, labels, 0.4, OhemConfig{}).report.total, loss.report.total);
}

TEST(Ohem, SelectionGrowsWithThreshold) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto labels = random_labels(1, 8, 8, 3, trial, 0.2);
    std::vector<double> p(labels.size());
    for (auto& v : p) v = u(rng);
    std::size_t prev = 0;
    for (double th = 0.0; th <= 1.0001; th += 0.05) {
      OhemConfig cfg;
      cfg.threshold = th;
      const auto mask = ohem_select(p, labels, cfg);
      std::size_t kept = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        kept += mask[i];
        if (labels.data[i] == LabelMap::kIgnore) EXPECT_EQ(mask[i], 0);
      }
      EXPECT_GE(kept, prev);
      prev = kept;
    }
  }
}

TEST(Ohem, MinimumKeepTakesHardestPixels) {
  LabelMap labels(1, 2, 5);
  labels.data[9] = LabelMap::kIgnore;
  std::vector<double> p{0.95, 0.91, 0.99, 0.92, 0.98, 0.97, 0.93, 0.96, 0.94, 0.01};
  const auto mask = ohem_select(p, labels, OhemConfig{});
  // 9 valid pixels -> keep ceil(2.25) = 3: probabilities 0.91, 0.92, 0.93
  std::vector<std::uint8_t> expect{0, 1, 0, 1, 0, 0, 1, 0, 0, 0};
  EXPECT_EQ(mask, expect);
}

TEST(Ablation, NestingIsEnforced) {
  EXPECT_THROW(validate(AblationFlags{false, true, false}), ConfigError);
  EXPECT_THROW(validate(AblationFlags{true, false, true}), ConfigError);
  EXPECT_NO_THROW(validate(AblationFlags{true, true, false}));
  EXPECT_THROW(ablation_variant(tiny_config(), AblationFlags{false, false, true}), ConfigError);
  ModelConfig bad = tiny_config();
  bad.ablation = AblationFlags{false, true, true};
  EXPECT_THROW(BiCANet<float>{bad}, ConfigError);
}

TEST(Ablation, VariantsShareShapesAndShrink) {
  const std::vector<AblationFlags> ladder{{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
  std::size_t prev = 0;
  for (const auto& flags : ladder) {
    BiCANet<float> net(ablation_variant(tiny_config(), flags));
    init_params(net.params(), 1);
    const std::size_t count = net.params().learnable_size();
    EXPECT_GT(count, prev);
    prev = count;
    Var<float> x(random_tensor<float>(Shape{1, 3, 32, 32}, 2));
    Tape<float> tape(false);
    EXPECT_EQ(net.forward(tape, x, Mode::kTrain).logits.shape(), (Shape{1, 3, 32, 32}));
  }
}

}  // namespace
}  // namespace bicanet
