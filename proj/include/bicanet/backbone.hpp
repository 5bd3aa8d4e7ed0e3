#pragma once

#include <array>
#include <vector>

#include "bicanet/layers.hpp"

namespace bicanet {

struct BackboneConfig {
  int stem_width = 16;
  /// Channel widths of stages 2..5; must be non-decreasing.
  std::array<int, 4> widths{16, 32, 64, 128};
  int blocks_per_stage = 2;
};

/// Outputs of stages 2..5 at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
template <typename T>
struct StageFeatures {
  std::array<Var<T>, 4> stages;

  const Var<T>& s2() const { return stages[0]; }
  const Var<T>& s3() const { return stages[1]; }
  const Var<T>& s4() const { return stages[2]; }
  const Var<T>& s5() const { return stages[3]; }
};

/// Two 3x3 convolutions with a residual shortcut; 1x1 projection when the
/// stride or width changes.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(ParamStore<T>& store, const std::string& prefix, int in_channels, int out_channels,
             int stride, NormOptions norm);

  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;
  /// The shortcut path alone (identity or projection).
  Var<T> shortcut(Tape<T>& tape, const Var<T>& x, Mode mode) const;

  const ConvLayer<T>& conv1() const noexcept { return conv1_; }
  const ConvLayer<T>& conv2() const noexcept { return conv2_; }
  bool has_projection() const noexcept { return has_projection_; }

 private:
  ConvLayer<T> conv1_;
  ConvLayer<T> conv2_;
  ConvLayer<T> projection_;
  bool has_projection_ = false;
};

/// Stride-2 stem followed by four residual stages, each halving the resolution.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore<T>& store, const std::string& prefix, const BackboneConfig& config,
           NormOptions norm = {});

  StageFeatures<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;

  const BackboneConfig& config() const noexcept { return config_; }
  const std::vector<BasicBlock<T>>& stage(int index) const { return stages_.at(index); }

 private:
  BackboneConfig config_;
  ConvLayer<T> stem_;
  std::array<std::vector<BasicBlock<T>>, 4> stages_;
};

/// Throws std::invalid_argument unless h and w are positive multiples of 32.
void require_divisible_by_32(const Shape& input);

extern template class BasicBlock<float>;
extern template class BasicBlock<double>;
extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace bicanet
