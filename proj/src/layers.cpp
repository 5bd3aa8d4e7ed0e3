#include "bicanet/layers.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "bicanet/log.hpp"

namespace bicanet {

template <typename T>
Var<T> ParamStore<T>::declare(const std::string& name, const Shape& shape, Init init, int fan_in,
                              ParamKind kind, bool weight_decay) {
  if (initialized_) throw std::logic_error("cannot declare '" + name + "' after initialisation");
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Var<T> var(Tensor<T>(shape), kind == ParamKind::kLearnable);
  index_.emplace(name, entries_.size());
  entries_.push_back(ParamEntry<T>{name, var, kind, init, fan_in, weight_decay});
  return var;
}

template <typename T>
const ParamEntry<T>& ParamStore<T>::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[it->second];
}

template <typename T>
std::vector<Var<T>> ParamStore<T>::learnable() const {
  std::vector<Var<T>> out;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::kLearnable) out.push_back(e.var);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::learnable_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::kLearnable) n += e.var.value().size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
template <typename U>
void ParamStore<T>::copy_values_from(const ParamStore<U>& other) {
  for (auto& e : entries_) {
    const auto& src = other.at(e.name).var.value();
    if (!(src.shape() == e.var.shape())) {
      throw ShapeError(e.name, src.shape().str() + " vs " + e.var.shape().str());
    }
    auto dst = e.var.mutable_value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
  initialized_ = true;
}

template <typename T>
void init_params(ParamStore<T>& store, std::uint64_t seed) {
  if (store.initialized()) throw std::logic_error("parameter store is already initialised");
  std::mt19937_64 rng(seed);
  for (auto& e : store.entries()) {
    auto data = e.var.mutable_value().data();
    switch (e.init) {
      case Init::kZeros:
        std::fill(data.begin(), data.end(), T(0));
        break;
      case Init::kOnes:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case Init::kHeNormal: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / e.fan_in));
        for (auto& v : data) v = static_cast<T>(dist(rng));
        break;
      }
    }
  }
  store.mark_initialized();
}

template <typename T>
ConvLayer<T>::ConvLayer(ParamStore<T>& store, const std::string& prefix, const ConvSpec& spec,
                        NormOptions norm_options)
    : spec_(spec), norm_options_(norm_options), name_(prefix) {
  if (spec.in_channels < 1 || spec.out_channels < 1 || spec.kernel_h < 1 || spec.kernel_w < 1) {
    throw ConfigError(prefix + ": channel and kernel extents must be >= 1");
  }
  if (spec.stride_h < 1 || spec.stride_w < 1) throw ConfigError(prefix + ": stride must be >= 1");
  const int fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
  weight_ = store.declare(prefix + ".weight",
                          Shape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w},
                          Init::kHeNormal, fan_in);
  const bool with_bias = spec.bias.value_or(spec.norm == Norm::kNone);
  const Shape per_channel{1, spec.out_channels, 1, 1};
  if (with_bias) bias_ = store.declare(prefix + ".bias", per_channel, Init::kZeros, fan_in);
  if (spec.norm == Norm::kBatch) {
    gamma_ = store.declare(prefix + ".bn.gamma", per_channel, Init::kOnes, 1, ParamKind::kLearnable, false);
    beta_ = store.declare(prefix + ".bn.beta", per_channel, Init::kZeros, 1, ParamKind::kLearnable, false);
    running_mean_ = store.declare(prefix + ".bn.running_mean", per_channel, Init::kZeros, 1, ParamKind::kBuffer);
    running_var_ = store.declare(prefix + ".bn.running_var", per_channel, Init::kOnes, 1, ParamKind::kBuffer);
    updates_ = store.declare(prefix + ".bn.updates", Shape{}, Init::kZeros, 1, ParamKind::kBuffer);
  }
}

template <typename T>
Var<T> ConvLayer<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) const {
  Var<T> y = ops::conv2d(tape, x, weight_, bias_,
                         ops::Conv2dParams{spec_.stride_h, spec_.stride_w, spec_.pad_h, spec_.pad_w});
  if (spec_.norm == Norm::kBatch) {
    Var<T> rm = running_mean_;
    Var<T> rv = running_var_;
    Var<T> updates = updates_;
    const bool training = mode == Mode::kTrain;
    if (mode == Mode::kEval && updates.value()[0] == T(0) && !warned_) {
      warned_ = true;
      log::warn(name_ + ": eval-mode batch-norm before any running-statistics update; using mean 0, var 1");
    }
    if (mode == Mode::kEvalBatchStats) {
      Tensor<T> scratch_mean = rm.value(), scratch_var = rv.value();
      y = ops::batch_norm(tape, y, gamma_, beta_, scratch_mean, scratch_var, true, norm_options_.momentum,
                          norm_options_.eps);
    } else {
      y = ops::batch_norm(tape, y, gamma_, beta_, rm.mutable_value(), rv.mutable_value(), training,
                          norm_options_.momentum, norm_options_.eps);
    }
    if (training) updates.mutable_value()[0] += T(1);
  }
  if (spec_.activation == Activation::kRelu) y = ops::relu(tape, y);
  return y;
}

template <typename T>
ChannelAttention<T>::ChannelAttention(ParamStore<T>& store, const std::string& prefix, int channels,
                                      int reduction)
    : channels_(channels) {
  if (reduction < 1) throw ConfigError(prefix + ": reduction ratio must be >= 1");
  hidden_ = std::max(1, channels / reduction);
  // The gate works on a 1x1 map, so batch statistics would be degenerate: no norm here.
  ConvSpec s = ConvSpec::square(channels, hidden_, 1, 1, Norm::kNone, Activation::kRelu);
  squeeze_ = ConvLayer<T>(store, prefix + ".squeeze", s);
  ConvSpec e = ConvSpec::square(hidden_, channels, 1, 1, Norm::kNone, Activation::kNone);
  excite_ = ConvLayer<T>(store, prefix + ".excite", e);
}

template <typename T>
Var<T> ChannelAttention<T>::weights(Tape<T>& tape, const Var<T>& x) const {
  if (x.shape().c != channels_) {
    throw ShapeError("channels", "channel attention expects " + std::to_string(channels_) + ", got " +
                                     std::to_string(x.shape().c));
  }
  auto pooled = ops::global_avg_pool(tape, x);
  auto hidden = squeeze_.forward(tape, pooled, Mode::kEval);
  return ops::sigmoid(tape, excite_.forward(tape, hidden, Mode::kEval));
}

template <typename T>
Var<T> ChannelAttention<T>::forward(Tape<T>& tape, const Var<T>& x) const {
  return ops::mul(tape, x, weights(tape, x));
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ParamStore<float>::copy_values_from(const ParamStore<float>&);
template void ParamStore<float>::copy_values_from(const ParamStore<double>&);
template void ParamStore<double>::copy_values_from(const ParamStore<float>&);
template void ParamStore<double>::copy_values_from(const ParamStore<double>&);
template void init_params(ParamStore<float>&, std::uint64_t);
template void init_params(ParamStore<double>&, std::uint64_t);
template class ConvLayer<float>;
template class ConvLayer<double>;
template class ChannelAttention<float>;
template class ChannelAttention<double>;

}  // namespace bicanet
