#include "bicanet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "bicanet/ops.hpp"

namespace bicanet {
namespace {

struct Coordinate {
  std::size_t leaf;
  std::size_t index;
};

struct Evaluation {
  double value;
  std::uint64_t branches;
};

Evaluation evaluate(const LossFn& loss) {
  ops::BranchRecorder recorder;
  Tape<double> tape(false);
  const double value = loss(tape).value().item();
  return {value, recorder.signature()};
}

}  // namespace

GradCheckResult check_gradients(const std::string& name, const std::vector<Var<double>>& leaves,
                                const LossFn& loss, const GradCheckOptions& options) {
  for (const auto& leaf : leaves) {
    if (!leaf.requires_grad()) throw std::invalid_argument("gradcheck: leaf without requires_grad in " + name);
    leaf.node()->grad.reset();
  }
  std::uint64_t base_branches = 0;
  {
    ops::BranchRecorder recorder;
    Tape<double> tape;
    auto out = loss(tape);
    base_branches = recorder.signature();
    tape.backward(out);
  }

  std::vector<Coordinate> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l].value().size(); ++i) coords.push_back({l, i});
  const bool sampled = options.sampled_entries > 0 && options.sampled_entries < coords.size();
  if (sampled) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
  }
  const std::size_t wanted = sampled ? options.sampled_entries : coords.size();

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
  std::size_t checked = 0, skipped = 0;
  for (const auto& c : coords) {
    if (checked == wanted) break;
    Var<double> leaf = leaves[c.leaf];
    const double analytic = leaf.has_grad() ? leaf.grad()[c.index] : 0.0;
    double& slot = leaf.mutable_value()[c.index];
    const double saved = slot;
    slot = saved + options.epsilon;
    const Evaluation up = evaluate(loss);
    slot = saved - options.epsilon;
    const Evaluation down = evaluate(loss);
    slot = saved;
    if (up.branches != base_branches || down.branches != base_branches) {
      ++skipped;
      continue;
    }
    ++checked;
    const double numeric = (up.value - down.value) / (2.0 * options.epsilon);
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
    max_abs = std::max(max_abs, std::abs(analytic - numeric));
  }
  for (const auto& leaf : leaves) leaf.node()->grad.reset();

  GradCheckResult result;
  result.name = name;
  result.checked = checked;
  result.skipped = skipped;
  const double denom = std::sqrt(std::max(a2, n2));
  result.relative_error = denom > 1e-12 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
  result.max_abs_error = max_abs;
  const double visited = static_cast<double>(checked + skipped);
  result.passed = checked > 0 && result.relative_error < options.tolerance &&
                  static_cast<double>(skipped) <= options.max_skip_fraction * visited;
  return result;
}

Var<double> random_projection(Tape<double>& tape, const Var<double>& out, std::uint64_t seed) {
  Var<double> r(random_tensor<double>(out.shape(), seed ^ 0x9e3779b97f4a7c15ULL));
  return ops::sum(tape, ops::mul(tape, out, r));
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template Tensor<float> random_tensor(const Shape&, std::uint64_t, double);
template Tensor<double> random_tensor(const Shape&, std::uint64_t, double);

}  // namespace bicanet
