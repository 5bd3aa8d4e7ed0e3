#include "bicanet/backbone.hpp"

#include <stdexcept>
#include <string>

namespace bicanet {

void require_divisible_by_32(const Shape& input) {
  if (input.h < 32 || input.h % 32 != 0 || input.w < 32 || input.w % 32 != 0) {
    throw std::invalid_argument("input height and width must be positive multiples of 32, got " +
                                std::to_string(input.h) + "x" + std::to_string(input.w));
  }
}

template <typename T>
BasicBlock<T>::BasicBlock(ParamStore<T>& store, const std::string& prefix, int in_channels,
                          int out_channels, int stride, NormOptions norm) {
  conv1_ = ConvLayer<T>(store, prefix + ".conv1",
                        ConvSpec::square(in_channels, out_channels, 3, stride, Norm::kBatch, Activation::kRelu), norm);
  conv2_ = ConvLayer<T>(store, prefix + ".conv2",
                        ConvSpec::square(out_channels, out_channels, 3, 1, Norm::kBatch, Activation::kNone), norm);
  if (stride != 1 || in_channels != out_channels) {
    has_projection_ = true;
    ConvSpec p = ConvSpec::square(in_channels, out_channels, 1, stride, Norm::kBatch, Activation::kNone);
    projection_ = ConvLayer<T>(store, prefix + ".shortcut", p, norm);
  }
}

template <typename T>
Var<T> BasicBlock<T>::shortcut(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  return has_projection_ ? projection_.forward(tape, x, mode) : x;
}

template <typename T>
Var<T> BasicBlock<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  auto main = conv2_.forward(tape, conv1_.forward(tape, x, mode), mode);
  return ops::relu(tape, ops::add(tape, main, shortcut(tape, x, mode)));
}

template <typename T>
Backbone<T>::Backbone(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& config,
                      NormOptions norm)
    : config_(config) {
  if (config.stem_width < 1 || config.blocks_per_stage < 1) {
    throw ConfigError("backbone: stem width and blocks per stage must be >= 1");
  }
  for (int i = 0; i < 4; ++i) {
    if (config.widths[i] < 1) throw ConfigError("backbone: stage widths must be >= 1");
    if (i > 0 && config.widths[i] < config.widths[i - 1]) {
      throw ConfigError("backbone: stage widths must be non-decreasing from stage2 to stage5");
    }
  }
  stem_ = ConvLayer<T>(store, prefix + ".stem",
                       ConvSpec::square(3, config.stem_width, 3, 2, Norm::kBatch, Activation::kRelu), norm);
  int in = config.stem_width;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      const std::string name = prefix + ".stage" + std::to_string(s + 2) + ".block" + std::to_string(b);
      stages_[s].emplace_back(store, name, in, config.widths[s], b == 0 ? 2 : 1, norm);
      in = config.widths[s];
    }
  }
}

template <typename T>
StageFeatures<T> Backbone<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  if (x.shape().c != 3) {
    throw ShapeError("channels", "backbone expects 3 input channels, got " + std::to_string(x.shape().c));
  }
  require_divisible_by_32(x.shape());
  StageFeatures<T> out;
  Var<T> h = stem_.forward(tape, x, mode);
  for (int s = 0; s < 4; ++s) {
    for (const auto& block : stages_[s]) h = block.forward(tape, h, mode);
    out.stages[s] = h;
  }
  return out;
}

template class BasicBlock<float>;
template class BasicBlock<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace bicanet
