#include "bicanet/suite.hpp"

#include <random>
#include <stdexcept>

#include "bicanet/blocks.hpp"
#include "bicanet/network.hpp"
#include "bicanet/ops.hpp"

namespace bicanet {
namespace {

using D = double;
using ops::Conv2dParams;

Var<D> leaf(const Shape& s, std::uint64_t seed, double stddev = 1.0) {
  return Var<D>(random_tensor<D>(s, seed, stddev), true);
}

std::vector<Var<D>> with_params(const ParamStore<D>& store, std::vector<Var<D>> leaves) {
  for (auto& p : store.learnable()) leaves.push_back(p);
  return leaves;
}

constexpr Shape kShape{2, 3, 5, 5};

/// Checks d/dx of a random projection of `op(x)` for one random input.
GradientCase unary(const std::string& name, std::uint64_t seed, Var<D> (*op)(Tape<D>&, const Var<D>&)) {
  return {name, [=] {
            auto x = leaf(kShape, seed);
            return check_gradients(name, {x}, [&](Tape<D>& t) { return random_projection(t, op(t, x), seed + 1); });
          }};
}

GradientCase binary(const std::string& name, std::uint64_t seed, Shape sa, Shape sb,
                    Var<D> (*op)(Tape<D>&, const Var<D>&, const Var<D>&)) {
  return {name, [=] {
            auto a = leaf(sa, seed), b = leaf(sb, seed + 1);
            return check_gradients(name, {a, b},
                                   [&](Tape<D>& t) { return random_projection(t, op(t, a, b), seed + 2); });
          }};
}

}  // namespace

std::vector<GradientCase> gradient_cases() {
  std::vector<GradientCase> cases;

  cases.push_back({"conv2d", [] {
                     auto x = leaf(kShape, 1), w = leaf(Shape{4, 3, 3, 3}, 2), b = leaf(Shape{1, 4, 1, 1}, 3);
                     return check_gradients("conv2d", {x, w, b}, [&](Tape<D>& t) {
                       return random_projection(t, ops::conv2d(t, x, w, b, Conv2dParams::same(2, 1)), 4);
                     });
                   }});
  cases.push_back({"conv2d_1x5", [] {
                     auto x = leaf(kShape, 5), k = leaf(Shape{2, 3, 1, 5}, 6);
                     return check_gradients("conv2d_1x5", {x, k}, [&](Tape<D>& t) {
                       return random_projection(t, ops::conv2d(t, x, k, Var<D>(), Conv2dParams{1, 1, 0, 2}), 7);
                     });
                   }});
  for (int r : {2, 4}) {
    const std::string name = "bilinear_upsample_x" + std::to_string(r);
    cases.push_back({name, [=] {
                       auto x = leaf(kShape, 8);
                       return check_gradients(name, {x}, [&](Tape<D>& t) {
                         return random_projection(t, ops::bilinear_upsample(t, x, r), 9 + r);
                       });
                     }});
  }
  cases.push_back(unary("channel_max_squeeze", 20, &ops::channel_max_squeeze<D>));
  cases.push_back(unary("global_avg_pool", 22, &ops::global_avg_pool<D>));
  cases.push_back(unary("relu", 24, &ops::relu<D>));
  cases.push_back(unary("sigmoid", 26, &ops::sigmoid<D>));
  cases.push_back(unary("softmax_channels", 28, &ops::softmax_channels<D>));
  cases.push_back(binary("add", 30, kShape, kShape, &ops::add<D>));
  cases.push_back(binary("mul", 33, kShape, kShape, &ops::mul<D>));
  cases.push_back(binary("mul_spatial_broadcast", 36, kShape, Shape{2, 1, 5, 5}, &ops::mul<D>));
  cases.push_back(binary("mul_channel_broadcast", 39, Shape{2, 3, 1, 1}, kShape, &ops::mul<D>));
  cases.push_back({"scale", [] {
                     auto x = leaf(kShape, 42);
                     return check_gradients("scale", {x},
                                            [&](Tape<D>& t) { return random_projection(t, ops::scale(t, x, -1.7), 43); });
                   }});
  cases.push_back({"concat_channels", [] {
                     auto a = leaf(kShape, 44), b = leaf(Shape{2, 1, 5, 5}, 45);
                     return check_gradients("concat_channels", {a, b}, [&](Tape<D>& t) {
                       std::vector<Var<D>> parts{a, b, a};
                       return random_projection(t, ops::concat_channels<D>(t, parts), 46);
                     });
                   }});
  cases.push_back({"crop", [] {
                     auto x = leaf(kShape, 47);
                     return check_gradients("crop", {x},
                                            [&](Tape<D>& t) { return random_projection(t, ops::crop(t, x, 4, 3), 48); });
                   }});
  cases.push_back({"sum", [] {
                     auto x = leaf(kShape, 49);
                     return check_gradients("sum", {x}, [&](Tape<D>& t) { return ops::sum(t, ops::mul(t, x, x)); });
                   }});
  for (bool training : {true, false}) {
    const std::string name = training ? "batch_norm_train" : "batch_norm_eval";
    cases.push_back({name, [=] {
                       auto x = leaf(kShape, 50, 2.0), g = leaf(Shape{1, 3, 1, 1}, 51), b = leaf(Shape{1, 3, 1, 1}, 52);
                       Tensor<D> rm(Shape{1, 3, 1, 1}, 0.1), rv(Shape{1, 3, 1, 1}, 1.5);
                       return check_gradients(name, {x, g, b}, [&](Tape<D>& t) {
                         return random_projection(t, ops::batch_norm(t, x, g, b, rm, rv, training, 0.1, 1e-5), 53);
                       });
                     }});
  }
  cases.push_back({"softmax_cross_entropy", [] {
                     auto x = leaf(Shape{2, 4, 5, 5}, 54);
                     LabelMap labels(2, 5, 5);
                     std::mt19937 rng(55);
                     std::vector<std::uint8_t> mask(labels.size());
                     for (std::size_t i = 0; i < labels.size(); ++i) {
                       labels.data[i] = static_cast<std::uint8_t>(rng() % 4);
                       mask[i] = rng() % 3 != 0;
                     }
                     return check_gradients("softmax_cross_entropy", {x}, [&](Tape<D>& t) {
                       return ops::softmax_cross_entropy(t, x, labels, mask);
                     });
                   }});

  cases.push_back({"conv_bn_relu", [] {
                     ParamStore<D> store;
                     ConvLayer<D> layer(store, "c", ConvSpec::square(3, 4, 3, 2, Norm::kBatch, Activation::kRelu));
                     init_params(store, 60);
                     auto x = leaf(kShape, 61);
                     return check_gradients("conv_bn_relu", with_params(store, {x}), [&](Tape<D>& t) {
                       return random_projection(t, layer.forward(t, x, Mode::kTrain), 62);
                     });
                   }});
  cases.push_back({"channel_attention", [] {
                     ParamStore<D> store;
                     ChannelAttention<D> att(store, "att", 6, 4);
                     init_params(store, 63);
                     auto x = leaf(Shape{2, 6, 4, 4}, 64);
                     return check_gradients("channel_attention", with_params(store, {x}),
                                            [&](Tape<D>& t) { return random_projection(t, att.forward(t, x), 65); });
                   }});
  cases.push_back({"ccpb", [] {
                     ParamStore<D> store;
                     CcpbBlock<D> block(store, "ccpb", CcpbConfig{8, 6, 3, 3});
                     init_params(store, 70);
                     auto f = leaf(Shape{1, 8, 6, 6}, 71);
                     return check_gradients("ccpb", with_params(store, {f}), [&](Tape<D>& t) {
                       return random_projection(t, block.forward(t, f, Mode::kTrain), 72);
                     });
                   }});
  cases.push_back({"bcib", [] {
                     ParamStore<D> store;
                     BcibBlock<D> block(store, "bcib", BcibConfig{2});
                     init_params(store, 73);
                     std::array<Var<D>, 4> p;
                     for (int i = 0; i < 4; ++i) p[i] = leaf(Shape{2, 2, 8 >> i, 8 >> i}, 74 + i);
                     return check_gradients("bcib", with_params(store, {p[0], p[1], p[2], p[3]}), [&](Tape<D>& t) {
                       const auto out = block.forward(t, p, Mode::kTrain);
                       Var<D> acc = random_projection(t, out[0], 80);
                       for (int i = 1; i < 4; ++i) acc = ops::add(t, acc, random_projection(t, out[i], 80 + i));
                       return acc;
                     });
                   }});
  cases.push_back({"mcfb", [] {
                     ParamStore<D> store;
                     McfbBlock<D> block(store, "mcfb", McfbConfig{4, 3, 8});
                     init_params(store, 85);
                     auto f = leaf(Shape{2, 4, 8, 8}, 86);
                     return check_gradients("mcfb", with_params(store, {f}), [&](Tape<D>& t) {
                       return random_projection(t, block.forward(t, f, Mode::kTrain), 87);
                     });
                   }});
  cases.push_back({"backbone", [] {
                     ParamStore<D> store;
                     Backbone<D> net(store, "bb", BackboneConfig{4, {4, 6, 6, 8}, 1});
                     init_params(store, 90);
                     auto x = leaf(Shape{1, 3, 32, 32}, 91);
                     GradCheckOptions opt;
                     opt.sampled_entries = 300;
                     opt.seed = 92;
                     return check_gradients("backbone", with_params(store, {x}), [&](Tape<D>& t) {
                       const auto f = net.forward(t, x, Mode::kTrain);
                       Var<D> acc = random_projection(t, f.stages[0], 93);
                       for (int i = 1; i < 4; ++i) acc = ops::add(t, acc, random_projection(t, f.stages[i], 93 + i));
                       return acc;
                     }, opt);
                   }});
  cases.push_back({"bicanet", [] {
                     ModelConfig cfg;
                     cfg.num_classes = 3;
                     cfg.backbone = BackboneConfig{4, {4, 6, 6, 8}, 1};
                     cfg.global_kernel = 32;
                     BiCANet<float> f(cfg);
                     init_params(f.params(), 7);
                     BiCANet<D> d(cfg);
                     d.params().copy_values_from(f.params());
                     Var<D> x(random_tensor<D>(Shape{1, 3, 32, 32}, 8));
                     LabelMap labels(1, 32, 32);
                     std::mt19937 rng(9);
                     for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % 3);
                     GradCheckOptions opt;
                     opt.sampled_entries = 20;
                     opt.tolerance = 2e-3;
                     opt.seed = 10;
                     // Most weights feed thousands of batch-coupled relu units, so many sampled
                     // coordinates straddle a kink and are replaced by fresh draws.
                     opt.max_skip_fraction = 0.75;
                     OhemConfig no_ohem;
                     no_ohem.enabled = false;
                     return check_gradients("bicanet", d.params().learnable(), [&](Tape<D>& t) {
                       return compute_loss(t, d.forward(t, x, Mode::kTrain), labels, 0.1, no_ohem).total;
                     }, opt);
                   }});
  return cases;
}

std::vector<GradCheckResult> run_gradient_suite(const std::string& only) {
  std::vector<GradCheckResult> results;
  for (const auto& c : gradient_cases()) {
    if (only.empty() || c.name == only) results.push_back(c.run());
  }
  if (results.empty()) throw std::invalid_argument("no gradient check named '" + only + "'");
  return results;
}

}  // namespace bicanet
