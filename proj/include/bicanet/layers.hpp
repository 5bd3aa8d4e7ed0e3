#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bicanet/autodiff.hpp"
#include "bicanet/ops.hpp"

namespace bicanet {

/// kTrain normalises with batch statistics and updates the running buffers.
/// kEval normalises with the running buffers. kEvalBatchStats normalises with
/// the statistics of the batch being evaluated and leaves the buffers alone.
enum class Mode { kTrain, kEval, kEvalBatchStats };

enum class Init { kHeNormal, kZeros, kOnes };

enum class ParamKind {
  kLearnable,
  kBuffer,  ///< running statistics and counters; checkpointed but never optimised
};

template <typename T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  ParamKind kind = ParamKind::kLearnable;
  Init init = Init::kZeros;
  int fan_in = 1;
  bool weight_decay = true;
};

/// Ordered registry of every named tensor a model owns.
///
/// Layers declare their tensors at construction time; values are assigned once
/// by init_params(). Iteration order is declaration order.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Var<T> declare(const std::string& name, const Shape& shape, Init init, int fan_in = 1,
                 ParamKind kind = ParamKind::kLearnable, bool weight_decay = true);

  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }
  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ParamEntry<T>& at(const std::string& name) const;

  std::vector<Var<T>> learnable() const;
  /// Total scalar count across learnable tensors.
  std::size_t learnable_size() const;

  bool initialized() const noexcept { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  void zero_grad();

  /// Copies every value from `other` by name, converting precision.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other);

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
  bool initialized_ = false;
};

/// He-normal weights with std sqrt(2 / fan_in), zero biases and shifts, unit
/// batch-norm scales and running variances. Fully determined by `seed`.
/// Throws std::logic_error if the store was already initialised.
template <typename T>
void init_params(ParamStore<T>& store, std::uint64_t seed);

enum class Norm { kNone, kBatch };
enum class Activation { kNone, kRelu };

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  Norm norm = Norm::kBatch;
  Activation activation = Activation::kRelu;
  /// Defaults to "on" only when there is no batch-norm to absorb it.
  std::optional<bool> bias;

  static ConvSpec square(int in, int out, int kernel, int stride, Norm norm, Activation act) {
    ConvSpec s;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel_h = s.kernel_w = kernel;
    s.stride_h = s.stride_w = stride;
    s.pad_h = s.pad_w = kernel / 2;
    s.norm = norm;
    s.activation = act;
    return s;
  }
};

struct NormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// conv -> optional batch-norm -> optional relu.
template <typename T>
class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec,
            NormOptions norm_options = {});

  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;

  const ConvSpec& spec() const noexcept { return spec_; }
  const Var<T>& weight() const noexcept { return weight_; }
  const Var<T>& bias() const noexcept { return bias_; }
  const Var<T>& gamma() const noexcept { return gamma_; }
  const Var<T>& beta() const noexcept { return beta_; }
  const Var<T>& running_mean() const noexcept { return running_mean_; }
  const Var<T>& running_var() const noexcept { return running_var_; }

 private:
  ConvSpec spec_;
  NormOptions norm_options_;
  std::string name_;
  Var<T> weight_;
  Var<T> bias_;
  Var<T> gamma_;
  Var<T> beta_;
  Var<T> running_mean_;
  Var<T> running_var_;
  Var<T> updates_;  // number of running-statistics updates, 1x1x1x1
  mutable bool warned_ = false;
};

/// Squeeze-and-excitation gate: x * sigmoid(W2 relu(W1 avgpool(x))).
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(ParamStore<T>& store, const std::string& prefix, int channels, int reduction);

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
  /// The (n, c, 1, 1) gate alone.
  Var<T> weights(Tape<T>& tape, const Var<T>& x) const;

  int hidden() const noexcept { return hidden_; }
  const ConvLayer<T>& squeeze() const noexcept { return squeeze_; }
  const ConvLayer<T>& excite() const noexcept { return excite_; }

 private:
  int channels_ = 0;
  int hidden_ = 0;
  ConvLayer<T> squeeze_;
  ConvLayer<T> excite_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ConvLayer<float>;
extern template class ConvLayer<double>;
extern template class ChannelAttention<float>;
extern template class ChannelAttention<double>;

}  // namespace bicanet
