#pragma once

#include <array>
#include <vector>

#include "bicanet/layers.hpp"

namespace bicanet {

// ---------------------------------------------------------------------------
// Contextual condensed projection block.
//
// A 1x1 reduction to C' channels is split across D branches of increasing
// depth (branch i: 1x1 then i 3x3 convolutions), the concatenated branch
// outputs are added back onto the reduction, and a linear 1x1 projects the
// result to one channel per class.
// ---------------------------------------------------------------------------

struct CcpbConfig {
  int in_channels = 0;
  /// C'. Zero selects C/2 rounded up to a multiple of the cardinality.
  int mid_channels = 0;
  int num_classes = 0;
  int cardinality = 3;

  /// The C' that will actually be used.
  int resolved_mid() const;
};

template <typename T>
struct CcpbTrace {
  Var<T> reduced;      ///< F'
  Var<T> transformed;  ///< concatenated branch outputs
  Var<T> condensed;    ///< F' + transformed
  Var<T> output;       ///< projection to L channels
};

template <typename T>
class CcpbBlock {
 public:
  CcpbBlock() = default;
  CcpbBlock(ParamStore<T>& store, const std::string& prefix, const CcpbConfig& config,
            NormOptions norm = {});

  Var<T> forward(Tape<T>& tape, const Var<T>& f, Mode mode) const;
  CcpbTrace<T> trace(Tape<T>& tape, const Var<T>& f, Mode mode) const;

  const CcpbConfig& config() const noexcept { return config_; }
  int mid_channels() const noexcept { return mid_; }
  const std::vector<std::vector<ConvLayer<T>>>& branches() const noexcept { return branches_; }

 private:
  CcpbConfig config_;
  int mid_ = 0;
  ConvLayer<T> reduce_;
  std::vector<std::vector<ConvLayer<T>>> branches_;
  ConvLayer<T> project_;
};

// ---------------------------------------------------------------------------
// Bi-directional context interaction block.
//
// Four class-channel paths ordered shallow to deep, each at half the
// resolution of the previous. Every output path is its input plus all deeper
// paths bilinearly upsampled plus all shallower paths reduced by chains of
// stride-2 3x3 convolutions.
// ---------------------------------------------------------------------------

struct BcibConfig {
  int num_classes = 0;
  /// Normalisation in the downsampling chains. Norm::kNone makes the block
  /// positively homogeneous in its inputs.
  Norm norm = Norm::kBatch;
};

template <typename T>
class BcibBlock {
 public:
  static constexpr int kPaths = 4;

  BcibBlock() = default;
  BcibBlock(ParamStore<T>& store, const std::string& prefix, const BcibConfig& config,
            NormOptions norm = {});

  std::array<Var<T>, kPaths> forward(Tape<T>& tape, const std::array<Var<T>, kPaths>& paths,
                                     Mode mode) const;

  /// The chain of stride-2 convolutions taking path `from` down to path `to` (from < to).
  const std::vector<ConvLayer<T>>& down_chain(int from, int to) const;

 private:
  BcibConfig config_;
  // down_[from][to] for from < to
  std::array<std::array<std::vector<ConvLayer<T>>, kPaths>, kPaths> down_;
};

// ---------------------------------------------------------------------------
// Multi-scale contextual fusion block.
//
//   f_sl = local3x3(f) + long(f)             long: Kx1 then 1xK
//   g    = sigmoid(global(maxpool_c(f)))     global: 1xM then Mx1 on one channel
//   out  = f_sl + g * f_sl
// ---------------------------------------------------------------------------

struct McfbConfig {
  int channels = 0;  ///< 4L
  int long_kernel = 5;
  /// M. Fixed at construction; inputs may not exceed it in either extent.
  int global_kernel = 64;
};

template <typename T>
struct McfbTrace {
  Var<T> local;
  Var<T> long_range;
  Var<T> fused;      ///< f_sl
  Var<T> attention;  ///< (n, 1, h, w) in (0, 1)
  Var<T> output;
};

template <typename T>
class McfbBlock {
 public:
  McfbBlock() = default;
  McfbBlock(ParamStore<T>& store, const std::string& prefix, const McfbConfig& config,
            NormOptions norm = {});

  Var<T> forward(Tape<T>& tape, const Var<T>& f, Mode mode) const;
  McfbTrace<T> trace(Tape<T>& tape, const Var<T>& f, Mode mode) const;

  /// The factorised long-range branch alone.
  Var<T> long_range(Tape<T>& tape, const Var<T>& f, Mode mode) const;
  /// The global attention map alone.
  Var<T> attention(Tape<T>& tape, const Var<T>& f, Mode mode) const;

  /// f_sl + attention * f_sl, broadcasting a one-channel attention map.
  static Var<T> combine(Tape<T>& tape, const Var<T>& fused, const Var<T>& attention);

  const McfbConfig& config() const noexcept { return config_; }
  const ConvLayer<T>& local_conv() const noexcept { return local_; }
  const ConvLayer<T>& long_vertical() const noexcept { return long_v_; }
  const ConvLayer<T>& long_horizontal() const noexcept { return long_h_; }

 private:
  McfbConfig config_;
  ConvLayer<T> local_;
  ConvLayer<T> long_v_;
  ConvLayer<T> long_h_;
  ConvLayer<T> global_h_;
  ConvLayer<T> global_v_;
};

extern template class CcpbBlock<float>;
extern template class CcpbBlock<double>;
extern template class BcibBlock<float>;
extern template class BcibBlock<double>;
extern template class McfbBlock<float>;
extern template class McfbBlock<double>;

}  // namespace bicanet
