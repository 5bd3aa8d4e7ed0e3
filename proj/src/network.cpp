#include "bicanet/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bicanet {

void validate(const AblationFlags& flags) {
  if (flags.use_bcib && !flags.use_ccpb) throw ConfigError("ablation: BCIB requires CCPB");
  if (flags.use_mcfb && !flags.use_bcib) throw ConfigError("ablation: MCFB requires BCIB");
}

ModelConfig ablation_variant(const ModelConfig& base, const AblationFlags& flags) {
  validate(flags);
  ModelConfig out = base;
  out.ablation = flags;
  return out;
}

template <typename T>
BiCANet<T>::BiCANet(const ModelConfig& config) : config_(config) {
  validate(config.ablation);
  const int L = config.num_classes;
  if (L < 2) throw ConfigError("model: need at least two classes");
  if (L >= LabelMap::kIgnore) throw ConfigError("model: class count must be below 255");
  backbone_ = Backbone<T>(store_, "backbone", config.backbone, config.norm);
  for (int i = 0; i < 4; ++i) {
    const std::string name = "stage" + std::to_string(i + 2);
    const int width = config.backbone.widths[i];
    if (config.ablation.use_ccpb) {
      CcpbConfig c{width, config.ccpb_mid_channels, L, config.cardinality};
      ccpb_[i] = CcpbBlock<T>(store_, "ccpb." + name, c, config.norm);
    } else {
      plain_heads_[i] = ConvLayer<T>(store_, "head." + name,
                                     ConvSpec::square(width, L, 1, 1, Norm::kNone, Activation::kNone));
    }
  }
  if (config.ablation.use_bcib) bcib_ = BcibBlock<T>(store_, "bcib", BcibConfig{L, config.bcib_norm}, config.norm);
  attention_ = ChannelAttention<T>(store_, "attention", 4 * L, config.attention_reduction);
  if (config.ablation.use_mcfb) {
    mcfb_ = McfbBlock<T>(store_, "mcfb", McfbConfig{4 * L, config.long_kernel, config.global_kernel}, config.norm);
  }
  classifier_ = ConvLayer<T>(store_, "classifier", ConvSpec::square(4 * L, L, 1, 1, Norm::kNone, Activation::kNone));
}

template <typename T>
ModelTrace<T> BiCANet<T>::trace(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  require_divisible_by_32(x.shape());
  ModelTrace<T> t;
  t.stages = backbone_.forward(tape, x, mode).stages;

  for (int i = 0; i < 4; ++i) {
    t.heads[i] = config_.ablation.use_ccpb ? ccpb_[i].forward(tape, t.stages[i], mode)
                                           : plain_heads_[i].forward(tape, t.stages[i], mode);
  }
  for (int i = 0; i < 4; ++i) t.output.aux[i] = ops::bilinear_upsample(tape, t.heads[i], 4 << i);

  t.paths = config_.ablation.use_bcib ? bcib_.forward(tape, t.heads, mode) : t.heads;
  std::array<Var<T>, 4> aligned;
  for (int i = 0; i < 4; ++i) aligned[i] = ops::bilinear_upsample(tape, t.paths[i], 1 << i);
  t.stacked = ops::concat_channels<T>(tape, aligned);
  auto weighted = attention_.forward(tape, t.stacked);
  t.fused = ops::bilinear_upsample(tape, weighted, 4);
  if (config_.ablation.use_mcfb) t.fused = mcfb_.forward(tape, t.fused, mode);
  t.output.logits = classifier_.forward(tape, t.fused, mode);
  return t;
}

template <typename T>
ModelOutput<T> BiCANet<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  return trace(tape, x, mode).output;
}

std::vector<std::uint8_t> ohem_select(std::span<const double> target_prob, const LabelMap& labels,
                                      const OhemConfig& config) {
  if (target_prob.size() != labels.size()) throw ShapeError("pixels", "OHEM: probability/label size mismatch");
  std::vector<std::uint8_t> mask(labels.size(), 0);
  std::vector<std::size_t> valid;
  valid.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels.data[i] != LabelMap::kIgnore) valid.push_back(i);
  if (!config.enabled) {
    for (const auto i : valid) mask[i] = 1;
    return mask;
  }
  std::size_t kept = 0;
  for (const auto i : valid) {
    if (target_prob[i] < config.threshold) {
      mask[i] = 1;
      ++kept;
    }
  }
  const auto min_keep =
      static_cast<std::size_t>(std::ceil(config.min_keep_fraction * static_cast<double>(valid.size())));
  if (kept < min_keep) {
    std::stable_sort(valid.begin(), valid.end(),
                     [&](std::size_t a, std::size_t b) { return target_prob[a] < target_prob[b]; });
    for (std::size_t k = 0; k < min_keep; ++k) mask[valid[k]] = 1;
  }
  return mask;
}

template <typename T>
Loss<T> compute_loss(Tape<T>& tape, const ModelOutput<T>& output, const LabelMap& labels, double lambda,
                     const OhemConfig& ohem) {
  if (lambda < 0) throw ConfigError("loss: lambda must be non-negative");
  const int L = output.logits.shape().c;
  check_labels(labels, L);

  std::vector<std::uint8_t> valid(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) valid[i] = labels.data[i] != LabelMap::kIgnore;

  const auto probs = ops::target_probabilities(output.logits.value(), labels);
  const auto selection = ohem_select(probs, labels, ohem);

  Loss<T> loss;
  loss.report.lambda = lambda;
  Var<T> master = ops::softmax_cross_entropy(tape, output.logits, labels, selection);
  loss.report.master = master.value().item();
  Var<T> aux_sum;
  for (int i = 0; i < 4; ++i) {
    Var<T> term = ops::softmax_cross_entropy(tape, output.aux[i], labels, valid);
    loss.report.aux[i] = term.value().item();
    aux_sum = i == 0 ? term : ops::add(tape, aux_sum, term);
  }
  loss.total = ops::add(tape, master, ops::scale(tape, aux_sum, lambda));
  loss.report.total = loss.total.value().item();
  return loss;
}

template class BiCANet<float>;
template class BiCANet<double>;
template Loss<float> compute_loss(Tape<float>&, const ModelOutput<float>&, const LabelMap&, double, const OhemConfig&);
template Loss<double> compute_loss(Tape<double>&, const ModelOutput<double>&, const LabelMap&, double,
                                   const OhemConfig&);

}  // namespace bicanet
