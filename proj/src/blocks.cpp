#include "bicanet/blocks.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace bicanet {

int CcpbConfig::resolved_mid() const {
  if (mid_channels > 0) return mid_channels;
  const int half = std::max(1, in_channels / 2);
  return (half + cardinality - 1) / cardinality * cardinality;
}

template <typename T>
CcpbBlock<T>::CcpbBlock(ParamStore<T>& store, const std::string& prefix, const CcpbConfig& config,
                        NormOptions norm)
    : config_(config) {
  if (config.cardinality < 1) throw ConfigError(prefix + ": cardinality must be >= 1");
  if (config.num_classes < 1) throw ConfigError(prefix + ": class count must be >= 1");
  mid_ = config.resolved_mid();
  if (mid_ % config.cardinality != 0) {
    throw ConfigError(prefix + ": C'=" + std::to_string(mid_) + " is not divisible by D=" +
                      std::to_string(config.cardinality));
  }
  if (mid_ >= config.in_channels) {
    throw ConfigError(prefix + ": C'=" + std::to_string(mid_) + " must be smaller than C=" +
                      std::to_string(config.in_channels));
  }
  const int width = mid_ / config.cardinality;
  reduce_ = ConvLayer<T>(store, prefix + ".reduce",
                         ConvSpec::square(config.in_channels, mid_, 1, 1, Norm::kBatch, Activation::kRelu), norm);
  branches_.resize(config.cardinality);
  for (int i = 0; i < config.cardinality; ++i) {
    const std::string bp = prefix + ".branch" + std::to_string(i);
    branches_[i].emplace_back(store, bp + ".embed",
                              ConvSpec::square(mid_, width, 1, 1, Norm::kBatch, Activation::kRelu), norm);
    for (int k = 0; k < i; ++k) {
      branches_[i].emplace_back(store, bp + ".conv3x3_" + std::to_string(k),
                                ConvSpec::square(width, width, 3, 1, Norm::kBatch, Activation::kRelu), norm);
    }
  }
  project_ = ConvLayer<T>(store, prefix + ".project",
                          ConvSpec::square(mid_, config.num_classes, 1, 1, Norm::kNone, Activation::kNone));
}

template <typename T>
CcpbTrace<T> CcpbBlock<T>::trace(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  if (f.shape().c != config_.in_channels) {
    throw ShapeError("channels", "CCPB expects " + std::to_string(config_.in_channels) + " channels, got " +
                                     std::to_string(f.shape().c));
  }
  CcpbTrace<T> t;
  t.reduced = reduce_.forward(tape, f, mode);
  std::vector<Var<T>> outs;
  outs.reserve(branches_.size());
  for (const auto& branch : branches_) {
    Var<T> h = t.reduced;
    for (const auto& layer : branch) h = layer.forward(tape, h, mode);
    outs.push_back(h);
  }
  t.transformed = ops::concat_channels<T>(tape, outs);
  t.condensed = ops::add(tape, t.reduced, t.transformed);
  t.output = project_.forward(tape, t.condensed, mode);
  return t;
}

template <typename T>
Var<T> CcpbBlock<T>::forward(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  return trace(tape, f, mode).output;
}

template <typename T>
BcibBlock<T>::BcibBlock(ParamStore<T>& store, const std::string& prefix, const BcibConfig& config,
                        NormOptions norm)
    : config_(config) {
  if (config.num_classes < 1) throw ConfigError(prefix + ": class count must be >= 1");
  const int L = config.num_classes;
  for (int from = 0; from < kPaths; ++from) {
    for (int to = from + 1; to < kPaths; ++to) {
      auto& chain = down_[from][to];
      const int steps = to - from;
      for (int k = 0; k < steps; ++k) {
        const bool last = k + 1 == steps;
        ConvSpec s = ConvSpec::square(L, L, 3, 2, config.norm, last ? Activation::kNone : Activation::kRelu);
        s.bias = false;
        chain.emplace_back(store,
                           prefix + ".down" + std::to_string(from + 1) + "to" + std::to_string(to + 1) + "." +
                               std::to_string(k),
                           s, norm);
      }
    }
  }
}

template <typename T>
const std::vector<ConvLayer<T>>& BcibBlock<T>::down_chain(int from, int to) const {
  if (from < 0 || to >= kPaths || from >= to) throw std::out_of_range("BCIB: no chain for that path pair");
  return down_[from][to];
}

template <typename T>
std::array<Var<T>, BcibBlock<T>::kPaths> BcibBlock<T>::forward(Tape<T>& tape,
                                                               const std::array<Var<T>, kPaths>& paths,
                                                               Mode mode) const {
  for (int i = 0; i < kPaths; ++i) {
    const Shape s = paths[i].shape();
    if (s.c != config_.num_classes) {
      throw ShapeError("channels", "BCIB path " + std::to_string(i + 1) + " has " + std::to_string(s.c) +
                                       " channels, expected " + std::to_string(config_.num_classes));
    }
    if (i + 1 < kPaths) {
      const Shape d = paths[i + 1].shape();
      if (s.h != 2 * d.h || s.w != 2 * d.w || s.n != d.n) {
        throw std::invalid_argument("BCIB: paths " + std::to_string(i + 1) + " and " + std::to_string(i + 2) +
                                    " do not form a dyadic ladder (" + s.str() + " vs " + d.str() + ")");
      }
    }
  }
  std::array<Var<T>, kPaths> out;
  for (int i = 0; i < kPaths; ++i) {
    Var<T> acc = paths[i];
    for (int m = i + 1; m < kPaths; ++m) {
      acc = ops::add(tape, acc, ops::bilinear_upsample(tape, paths[m], 1 << (m - i)));
    }
    for (int n = 0; n < i; ++n) {
      Var<T> h = paths[n];
      for (const auto& layer : down_[n][i]) h = layer.forward(tape, h, mode);
      acc = ops::add(tape, acc, h);
    }
    out[i] = acc;
  }
  return out;
}

template <typename T>
McfbBlock<T>::McfbBlock(ParamStore<T>& store, const std::string& prefix, const McfbConfig& config,
                        NormOptions norm)
    : config_(config) {
  const int C = config.channels;
  const int K = config.long_kernel;
  const int M = config.global_kernel;
  if (C < 1) throw ConfigError(prefix + ": channel count must be >= 1");
  if (K < 1 || K % 2 == 0) throw ConfigError(prefix + ": long-range kernel must be odd and >= 1");
  if (M < 1) throw ConfigError(prefix + ": global kernel must be >= 1");

  local_ = ConvLayer<T>(store, prefix + ".local", ConvSpec::square(C, C, 3, 1, Norm::kBatch, Activation::kRelu), norm);

  ConvSpec v;
  v.in_channels = v.out_channels = C;
  v.kernel_h = K;
  v.kernel_w = 1;
  v.pad_h = K / 2;
  v.norm = Norm::kNone;
  v.activation = Activation::kNone;
  v.bias = false;
  long_v_ = ConvLayer<T>(store, prefix + ".long.vertical", v, norm);
  ConvSpec h = v;
  h.kernel_h = 1;
  h.kernel_w = K;
  h.pad_h = 0;
  h.pad_w = K / 2;
  h.norm = Norm::kBatch;
  h.activation = Activation::kRelu;
  h.bias.reset();
  long_h_ = ConvLayer<T>(store, prefix + ".long.horizontal", h, norm);

  ConvSpec gh;
  gh.in_channels = gh.out_channels = 1;
  gh.kernel_h = 1;
  gh.kernel_w = M;
  gh.pad_w = M / 2;
  gh.norm = Norm::kNone;
  gh.activation = Activation::kNone;
  global_h_ = ConvLayer<T>(store, prefix + ".global.horizontal", gh, norm);
  ConvSpec gv = gh;
  gv.kernel_h = M;
  gv.kernel_w = 1;
  gv.pad_h = M / 2;
  gv.pad_w = 0;
  global_v_ = ConvLayer<T>(store, prefix + ".global.vertical", gv, norm);
}

template <typename T>
Var<T> McfbBlock<T>::long_range(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  return long_h_.forward(tape, long_v_.forward(tape, f, mode), mode);
}

template <typename T>
Var<T> McfbBlock<T>::attention(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  const Shape s = f.shape();
  if (std::max(s.h, s.w) > config_.global_kernel) {
    throw ShapeError("spatial", "MCFB global kernel M=" + std::to_string(config_.global_kernel) +
                                    " cannot cover a " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                    " input; rebuild the block with a larger M");
  }
  auto squeezed = ops::channel_max_squeeze(tape, f);
  auto g = global_v_.forward(tape, global_h_.forward(tape, squeezed, mode), mode);
  // Even M yields one extra row and column; keep the first h x w outputs.
  g = ops::crop(tape, g, s.h, s.w);
  return ops::sigmoid(tape, g);
}

template <typename T>
Var<T> McfbBlock<T>::combine(Tape<T>& tape, const Var<T>& fused, const Var<T>& attention) {
  return ops::add(tape, fused, ops::mul(tape, fused, attention));
}

template <typename T>
McfbTrace<T> McfbBlock<T>::trace(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  if (f.shape().c != config_.channels) {
    throw ShapeError("channels", "MCFB expects " + std::to_string(config_.channels) + " channels, got " +
                                     std::to_string(f.shape().c));
  }
  McfbTrace<T> t;
  t.local = local_.forward(tape, f, mode);
  t.long_range = long_range(tape, f, mode);
  t.fused = ops::add(tape, t.local, t.long_range);
  t.attention = attention(tape, f, mode);
  t.output = combine(tape, t.fused, t.attention);
  return t;
}

template <typename T>
Var<T> McfbBlock<T>::forward(Tape<T>& tape, const Var<T>& f, Mode mode) const {
  return trace(tape, f, mode).output;
}

template class CcpbBlock<float>;
template class CcpbBlock<double>;
template class BcibBlock<float>;
template class BcibBlock<double>;
template class McfbBlock<float>;
template class McfbBlock<double>;

}  // namespace bicanet
