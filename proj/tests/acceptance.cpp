// Acceptance checks. Each criterion prints exactly one line:
//   PASS|FAIL <name> <seconds>s  <details>
// Run with a criterion name to run just that one; with no arguments all run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bicanet/blocks.hpp"
#include "bicanet/gradcheck.hpp"
#include "bicanet/log.hpp"
#include "bicanet/metrics.hpp"
#include "bicanet/network.hpp"
#include "bicanet/ops.hpp"
#include "bicanet/suite.hpp"
#include "bicanet/train.hpp"
#include "oracles.hpp"

namespace {

using namespace bicanet;

/// Collects failures for one criterion without stopping at the first.
struct Check {
  std::vector<std::string> failures;
  std::ostringstream notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<void(Check&)> body;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// ---- gradient suite ---------------------------------------------------------------

void gradient_suite(Check& c) {
  std::size_t passed = 0;
  double worst = 0.0;
  const auto results = run_gradient_suite();
  for (const auto& r : results) {
    c.expect(r.passed, r.name + " rel_err " + fmt("%.3e", r.relative_error));
    passed += r.passed;
    worst = std::max(worst, r.relative_error);
  }
  c.notes << passed << "/" << results.size() << " checks, worst rel_err " << fmt("%.2e", worst);
}

// ---- oracle suite ---------------------------------------------------------------------

void oracle_suite(Check& c) {
  std::mt19937 rng(7);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  double conv_err = 0.0;
  int conv_cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = pick(1, 2), cin = pick(1, 4), cout = pick(1, 4), h = pick(1, 9), w = pick(1, 9);
    const int kh = pick(1, 5), kw = pick(1, 5), sh = pick(1, 2), sw = pick(1, 2), ph = pick(0, 2), pw = pick(0, 2);
    if (kh > h + 2 * ph || kw > w + 2 * pw) continue;
    const auto x = random_tensor<float>(Shape{n, cin, h, w}, 1000 + trial);
    const auto k = random_tensor<float>(Shape{cout, cin, kh, kw}, 2000 + trial);
    const auto b = random_tensor<float>(Shape{1, cout, 1, 1}, 3000 + trial);
    Tape<float> tape(false);
    const auto y = ops::conv2d(tape, Var<float>(x), Var<float>(k), Var<float>(b), ops::Conv2dParams{sh, sw, ph, pw});
    const Tensor<double> bd = b.cast<double>();
    const auto ref = oracle::naive_conv2d(x.cast<double>(), k.cast<double>(), &bd, sh, sw, ph, pw);
    if (!(y.shape() == ref.shape())) {
      c.expect(false, "conv2d shape " + y.shape().str() + " vs " + ref.shape().str());
      continue;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) conv_err = std::max(conv_err, std::abs(y.value()[i] - ref[i]));
    ++conv_cases;
  }
  c.expect(conv_err <= 1e-5, "conv2d max error " + fmt("%.2e", conv_err));

  double bil_err = 0.0;
  for (int r : {1, 2, 3, 4, 8}) {
    const auto x = random_tensor<float>(Shape{2, 3, 3, 5}, 40 + r);
    Tape<float> tape(false);
    const auto y = ops::bilinear_upsample(tape, Var<float>(x), r);
    const auto xd = x.cast<double>();
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < 3; ++ch)
        for (int yy = 0; yy < 3 * r; ++yy)
          for (int xx = 0; xx < 5 * r; ++xx)
            bil_err = std::max(bil_err, std::abs(y.value().at(n, ch, yy, xx) - oracle::bilinear_at(xd, n, ch, yy, xx, r)));
  }
  c.expect(bil_err <= 1e-6, "bilinear max error " + fmt("%.2e", bil_err));

  int metric_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int L = 2 + trial % 6;
    std::vector<std::uint8_t> pred(144), gt(144);
    for (int i = 0; i < 144; ++i) {
      pred[i] = static_cast<std::uint8_t>(rng() % L);
      gt[i] = rng() % 9 == 0 ? 255 : static_cast<std::uint8_t>(rng() % L);
    }
    LabelMap p(1, 12, 12), g(1, 12, 12);
    p.data = pred;
    g.data = gt;
    ConfusionMatrix cm(L);
    cm.accumulate(p, g);
    const auto counts = oracle::count_confusion(pred, gt, L);
    double trace = 0, total = 0, iou_sum = 0;
    int present = 0;
    for (int k = 0; k < L; ++k) {
      double row = 0, col = 0;
      for (int j = 0; j < L; ++j) {
        row += counts[k * L + j];
        col += counts[j * L + k];
        total += counts[k * L + j];
      }
      trace += counts[k * L + k];
      const double uni = row + col - counts[k * L + k];
      if (uni > 0) {
        iou_sum += counts[k * L + k] / uni;
        ++present;
      }
    }
    if (cm.counts() != counts || cm.pixel_accuracy() != trace / total || cm.miou() != iou_sum / present) {
      ++metric_mismatch;
    }
  }
  c.expect(metric_mismatch == 0, std::to_string(metric_mismatch) + " metric mismatches against loop counts");

  ParamStore<double> store;
  McfbBlock<double> block(store, "mcfb", McfbConfig{4, 5, 16});
  init_params(store, 8);
  for (const auto* layer : {&block.long_vertical(), &block.long_horizontal()}) {
    Var<double> w = layer->weight();
    for (auto& v : w.mutable_value().data()) v = std::abs(v) + 0.01;
  }
  std::set<std::pair<int, int>> vertical, horizontal;
  for (int d = -2; d <= 2; ++d) {
    vertical.insert({d, 0});
    horizontal.insert({0, d});
  }
  const auto footprint = oracle::compose_support(vertical, horizontal);
  int footprint_mismatch = 0;
  for (int iy = 0; iy < 12; iy += 1)
    for (int ix = 0; ix < 12; ix += 5) {
      Tensor<double> x(Shape{1, 4, 12, 12}, 0.0);
      x.at(0, 1, iy, ix) = 1.0;
      Tape<double> tape(false);
      const auto y = block.long_range(tape, Var<double>(x), Mode::kEval);
      std::set<std::pair<int, int>> expect, got;
      for (const auto& [dy, dx] : footprint) {
        const int yy = iy + dy, xx = ix + dx;
        if (yy >= 0 && yy < 12 && xx >= 0 && xx < 12) expect.insert({yy, xx});
      }
      const Shape s = y.shape();
      for (int ch = 0; ch < s.c; ++ch)
        for (int yy = 0; yy < s.h; ++yy)
          for (int xx = 0; xx < s.w; ++xx)
            if (y.value().at(0, ch, yy, xx) != 0.0) got.insert({yy, xx});
      footprint_mismatch += got != expect;
    }
  c.expect(footprint.size() == 25, "composed footprint is not 5x5");
  c.expect(footprint_mismatch == 0, std::to_string(footprint_mismatch) + " impulse footprints differ from 5x5 support");

  c.notes << conv_cases << " conv cases err " << fmt("%.1e", conv_err) << ", bilinear err " << fmt("%.1e", bil_err)
          << ", 100 metric cases, 36 impulse sites";
}

// ---- equation identities -----------------------------------------------------------------

void equation_identities(Check& c) {
  {
    ParamStore<double> store;
    CcpbBlock<double> block(store, "ccpb", CcpbConfig{12, 6, 3, 3});
    init_params(store, 3);
    for (const auto& branch : block.branches())
      for (const auto& layer : branch) {
        Var<double> w = layer.weight();
        w.mutable_value().fill(0.0);
      }
    Tape<double> tape(false);
    const auto t = block.trace(tape, Var<double>(random_tensor<double>(Shape{2, 12, 6, 6}, 4)), Mode::kTrain);
    c.expect(t.condensed.value().vector() == t.reduced.value().vector(), "CCPB zeroed branches do not reduce to identity");
  }
  {
    ParamStore<double> store;
    BcibBlock<double> block(store, "bcib", BcibConfig{3});
    init_params(store, 2);
    for (int from = 0; from < 4; ++from)
      for (int to = from + 1; to < 4; ++to)
        for (const auto& layer : block.down_chain(from, to)) {
          Var<double> w = layer.weight();
          w.mutable_value().fill(0.0);
        }
    for (int keep = 0; keep < 4; ++keep) {
      std::array<Var<double>, 4> p;
      for (int i = 0; i < 4; ++i) {
        p[i] = Var<double>(random_tensor<double>(Shape{1, 3, 16 >> i, 16 >> i}, 10 + i));
        if (i != keep) p[i].mutable_value().fill(0.0);
      }
      Tape<double> tape(false);
      const auto out = block.forward(tape, p, Mode::kTrain);
      c.expect(out[keep].value().vector() == p[keep].value().vector(),
               "BCIB with zeroed resize operators alters path " + std::to_string(keep));
    }
  }
  {
    Var<double> fused(random_tensor<double>(Shape{2, 5, 4, 4}, 3));
    Tape<double> tape(false);
    const auto zero = McfbBlock<double>::combine(tape, fused, Var<double>(Tensor<double>(Shape{2, 1, 4, 4}, 0.0)));
    const auto one = McfbBlock<double>::combine(tape, fused, Var<double>(Tensor<double>(Shape{2, 1, 4, 4}, 1.0)));
    double err = 0.0;
    for (std::size_t i = 0; i < fused.value().size(); ++i) {
      err = std::max(err, std::abs(zero.value()[i] - fused.value()[i]));
      err = std::max(err, std::abs(one.value()[i] - 2.0 * fused.value()[i]));
    }
    c.expect(err <= 1e-6, "MCFB attention endpoints off by " + fmt("%.2e", err));
  }
  {
    ModelOutput<double> out;
    out.logits = Var<double>(random_tensor<double>(Shape{2, 4, 6, 6}, 1, 2.0));
    for (int i = 0; i < 4; ++i) out.aux[i] = Var<double>(random_tensor<double>(Shape{2, 4, 6, 6}, 2 + i, 2.0));
    LabelMap labels(2, 6, 6);
    std::mt19937 rng(9);
    for (auto& l : labels.data) l = rng() % 10 == 0 ? LabelMap::kIgnore : static_cast<std::uint8_t>(rng() % 4);
    double err = 0.0;
    for (int k = 0; k <= 9; ++k) {
      const double lambda = 0.1 * k;
      Tape<double> tape(false);
      const auto loss = compute_loss(tape, out, labels, lambda, OhemConfig{});
      double aux = 0.0;
      for (double a : loss.report.aux) aux += a;
      err = std::max(err, std::abs(loss.report.total - (loss.report.master + lambda * aux)));
    }
    c.expect(err <= 1e-6, "loss composition off by " + fmt("%.2e", err));
  }
  c.notes << "CCPB, BCIB, MCFB endpoints, loss over 10 lambda values";
}

// ---- shape ledger -------------------------------------------------------------------------

void shape_ledger(Check& c) {
  ModelConfig cfg;
  cfg.num_classes = 5;
  BiCANet<float> net(cfg);
  init_params(net.params(), 1);
  const int L = cfg.num_classes;
  Tape<float> tape(false);
  const auto t = net.trace(tape, Var<float>(random_tensor<float>(Shape{2, 3, 64, 64}, 2)), Mode::kTrain);
  for (int i = 0; i < 4; ++i) {
    const int side = 16 >> i;
    c.expect(t.stages[i].shape().h == side && t.stages[i].shape().w == side,
             "stage " + std::to_string(i + 2) + " is " + t.stages[i].shape().str());
    c.expect(t.heads[i].shape() == (Shape{2, L, side, side}), "CCPB " + std::to_string(i) + " is " + t.heads[i].shape().str());
    c.expect(t.paths[i].shape() == t.heads[i].shape(), "BCIB path " + std::to_string(i) + " is " + t.paths[i].shape().str());
  }
  c.expect(t.stacked.shape() == (Shape{2, 4 * L, 16, 16}), "stacked maps are " + t.stacked.shape().str());
  c.expect(t.output.logits.shape() == (Shape{2, L, 64, 64}), "logits are " + t.output.logits.shape().str());
  c.notes << "stages 16,8,4,2; heads and paths L=" << L << "; stacked " << t.stacked.shape().str() << "; logits "
          << t.output.logits.shape().str();
}

// ---- training convergence ---------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void training_convergence(Check& c) {
  TrainConfig cfg;
  cfg.num_classes = 4;
  cfg.synthetic_train = 10;
  cfg.crop = 64;
  cfg.batch = 1;
  cfg.max_iter = 200;
  cfg.augment = false;
  cfg.output_dir.clear();
  Trainer t(cfg);
  t.run();
  const auto batch_stats = t.evaluate_split("train", 0, Mode::kEvalBatchStats);
  const auto running = t.evaluate_split("train", 0, Mode::kEval);
  std::vector<double> first, second;
  for (std::size_t i = 0; i < t.history().size(); ++i) (i < 100 ? first : second).push_back(t.history()[i].total);
  const double m1 = median(first), m2 = median(second);
  c.expect(batch_stats.pixel_accuracy >= 0.95, "training pixel accuracy " + fmt("%.4f", batch_stats.pixel_accuracy));
  c.expect(m2 < m1, "median loss did not decrease");
  c.notes << "train pixacc " << fmt("%.4f", batch_stats.pixel_accuracy) << " (batch-stat BN; running-stat BN "
          << fmt("%.4f", running.pixel_accuracy) << "), median loss " << fmt("%.3f", m1) << " -> " << fmt("%.3f", m2);
}

// ---- ablation direction ----------------------------------------------------------------------

void ablation_direction(Check& c) {
  struct Variant {
    const char* name;
    AblationFlags flags;
  };
  const std::vector<Variant> variants{{"baseline", {false, false, false}},
                                      {"ccpb", {true, false, false}},
                                      {"ccpb+bcib", {true, true, false}},
                                      {"full", {true, true, true}}};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> medians;
  for (const auto& v : variants) {
    std::vector<double> scores;
    for (const auto seed : seeds) {
      TrainConfig cfg;
      cfg.synthetic_train = 200;
      cfg.synthetic_val = 50;
      cfg.max_iter = 2000;
      // 0.99 momentum at batch 1 collapses some variants to all-background.
      cfg.momentum = 0.9;
      cfg.ablation = v.flags;
      cfg.seed = seed;
      cfg.data_seed = seed + 100;
      cfg.output_dir.clear();
      Trainer t(cfg);
      t.run();
      scores.push_back(t.evaluate_split("val", 0).miou);
    }
    medians.push_back(median(scores));
    c.notes << v.name << " " << fmt("%.4f", medians.back()) << " [";
    for (std::size_t i = 0; i < scores.size(); ++i) c.notes << (i ? " " : "") << fmt("%.4f", scores[i]);
    c.notes << "]; ";
  }
  for (std::size_t i = 1; i < medians.size(); ++i) {
    c.expect(medians[i] >= medians[i - 1],
             std::string(variants[i].name) + " median below " + variants[i - 1].name);
  }
  const double gap = 100.0 * (medians.back() - medians.front());
  c.expect(gap >= 2.0, "full - baseline = " + fmt("%.2f", gap) + " mIoU points");
  c.notes << "full - baseline " << fmt("%.2f", gap) << " points";
}

// ---- protocol exactness -----------------------------------------------------------------------

void protocol_exactness(Check& c) {
  const double lr = 1e-2, power = 0.9;
  const std::int64_t max_iter = 1000;
  const std::vector<std::pair<std::int64_t, double>> lr_cases{
      {0, lr}, {max_iter / 2, lr * std::pow(0.5, power)}, {max_iter, 0.0}};
  for (const auto& [iter, expect] : lr_cases) {
    const double got = poly_lr(lr, iter, max_iter, power);
    const double rel = expect == 0.0 ? std::abs(got) : std::abs(got - expect) / expect;
    c.expect(rel <= 1e-9, "poly_lr(" + std::to_string(iter) + ") = " + fmt("%.12g", got));
  }
  c.expect(std::abs(poly_lr(lr, max_iter / 2, max_iter, power) - 5.3589e-3) < 1e-7, "poly_lr half-way value");

  {
    ParamStore<double> store;
    Var<double> w = store.declare("w", Shape{1, 1, 1, 1}, Init::kZeros);
    store.mark_initialized();
    w.mutable_value()[0] = 0.7;
    Sgd<double> sgd(store);
    const double g = 0.3, m = 0.99, wd = 1e-4, step = 0.01;
    double p = 0.7, v = 0.0;
    for (int k = 0; k < 2; ++k) {
      w.node()->grad_buffer()[0] = g;
      sgd.step(store, step, m, wd);
      v = m * v + g + wd * p;
      p -= step * v;
    }
    c.expect(std::abs(w.value()[0] - p) <= 1e-7, "SGD two-step recurrence off by " + fmt("%.2e", std::abs(w.value()[0] - p)));
  }

  TrainConfig cfg;
  cfg.backbone = BackboneConfig{4, {4, 6, 6, 8}, 1};
  cfg.crop = 32;
  cfg.synthetic.width = cfg.synthetic.height = 32;
  cfg.synthetic_train = 4;
  cfg.synthetic_val = 2;
  cfg.epochs = 3;
  const auto root = std::filesystem::temp_directory_path() / "bicanet_acceptance_protocol";
  std::filesystem::remove_all(root);

  std::vector<std::string> csv;
  for (int run = 0; run < 2; ++run) {
    cfg.output_dir = (root / ("run" + std::to_string(run))).string();
    Trainer t(cfg);
    t.run();
    std::ifstream in(std::filesystem::path(cfg.output_dir) / "metrics.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    csv.push_back(ss.str());
    if (run == 0) {
      const auto bytes = encode_checkpoint(t.checkpoint());
      c.expect(encode_checkpoint(decode_checkpoint(bytes)) == bytes, "checkpoint round trip is not bit-identical");
    }
  }
  c.expect(!csv[0].empty() && csv[0] == csv[1], "metrics CSV differs between identical runs");
  std::filesystem::remove_all(root);
  c.notes << "poly_lr at 0, max/2, max; SGD two steps; checkpoint bytes; CSV of " << csv[0].size() << " bytes";
}

void benchmark_scale_note(Check& c) {
  c.notes << "published benchmark mIoU needs pretrained ResNet-101 and full datasets; the property suites stand in";
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::kError);
  const std::vector<Criterion> criteria{
      {"benchmark_scale_results", 1, benchmark_scale_note},
      {"gradient_suite", 60, gradient_suite},
      {"oracle_suite", 30, oracle_suite},
      {"equation_identities", 10, equation_identities},
      {"shape_ledger", 5, shape_ledger},
      {"training_convergence", 600, training_convergence},
      {"ablation_direction", 7200, ablation_direction},
      {"protocol_exactness", 120, protocol_exactness},
  };

  std::vector<std::string> wanted(argv + 1, argv + argc);
  if (!wanted.empty() && wanted[0] == "--list") {
    for (const auto& c : criteria) std::printf("%s\n", c.name.c_str());
    return 0;
  }
  int failed = 0, ran = 0;
  for (const auto& crit : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), crit.name) == wanted.end()) continue;
    ++ran;
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      crit.body(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > crit.budget_seconds) check.failures.push_back("took longer than " + fmt("%.0f", crit.budget_seconds) + "s");
    const bool ok = check.failures.empty();
    failed += !ok;
    std::string detail = check.notes.str();
    for (const auto& f : check.failures) detail += " | " + f;
    std::printf("%s %s %.2fs  %s\n", ok ? "PASS" : "FAIL", crit.name.c_str(), secs, detail.c_str());
    std::fflush(stdout);
  }
  if (ran == 0) {
    std::fprintf(stderr, "unknown criterion\n");
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
