#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bicanet/autodiff.hpp"

namespace bicanet::ops {

struct Conv2dParams {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;

  static Conv2dParams same(int stride, int pad) { return {stride, stride, pad, pad}; }
};

/// Output extent of a strided, zero-padded window; throws on an empty result.
int conv_out_extent(int in, int kernel, int stride, int pad, const char* dimension);

/// While alive, folds the branch taken at every non-smooth point (relu
/// threshold, channel-max winner) on this thread into a running hash. Two
/// evaluations with equal signatures lie on the same smooth piece.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  std::uint64_t signature() const noexcept { return hash_; }
  /// No-op unless a recorder is active on the calling thread.
  static void note(std::uint64_t value) noexcept;

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  BranchRecorder* previous_ = nullptr;
};

/// Cross-correlation (no kernel flip) with zero padding. `bias` may be undefined.
/// Accumulates in double regardless of T.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias,
              Conv2dParams params);

/// Half-pixel-center bilinear upsampling by an integer ratio. Source coordinates
/// are (dst + 0.5) / ratio - 0.5 clamped to [0, extent - 1].
template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& input, int ratio);

/// Max over channels -> (n, 1, h, w). Gradient goes to the lowest-index argmax.
template <typename T>
Var<T> channel_max_squeeze(Tape<T>& tape, const Var<T>& input);

/// Spatial mean per channel -> (n, c, 1, 1).
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& input);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Elementwise product. Either operand may be (n,1,h,w) or (n,c,1,1) and is then
/// broadcast against the other's (n,c,h,w).
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double alpha);

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts);

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x);

/// Softmax across the channel axis at every (n, h, w) site.
template <typename T>
Var<T> softmax_channels(Tape<T>& tape, const Var<T>& x);

/// Sum of all elements -> 1x1x1x1.
template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

/// Keeps the top-left (h, w) window.
template <typename T>
Var<T> crop(Tape<T>& tape, const Var<T>& x, int h, int w);

/// Batch normalisation over (n, h, w) per channel. In training mode the batch
/// statistics normalise and the running buffers are updated in place with the
/// given momentum (unbiased variance); in eval mode the running buffers are used.
template <typename T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                  double momentum, double eps);

/// Mean of -log softmax(logits)[label] over pixels with mask != 0.
/// Pixels whose label is ignored must be masked out by the caller.
/// Returns 0 with zero gradient when the mask selects nothing.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, const LabelMap& labels,
                             std::span<const std::uint8_t> mask);

/// Target-class softmax probability per pixel (no gradient). Ignored pixels get 1.
template <typename T>
std::vector<double> target_probabilities(const Tensor<T>& logits, const LabelMap& labels);

/// Channel argmax per pixel, first index on ties.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits);

}  // namespace bicanet::ops
