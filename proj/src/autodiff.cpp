#include "bicanet/autodiff.hpp"

#include <stdexcept>

namespace bicanet {

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  if (!node_->grad) throw std::logic_error("gradient requested on a node without one");
  return *node_->grad;
}

template <typename T>
Var<T> Tape<T>::record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  return record(std::move(op), std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  Var<T> out(std::move(value), record_ && needs_grad);
  if (out.requires_grad()) {
    Entry entry{std::move(op), {}, out.node(), std::move(backward)};
    entry.inputs.reserve(inputs.size());
    for (const auto& in : inputs) entry.inputs.push_back(in.node());
    entries_.push_back(std::move(entry));
  }
  return out;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                loss.shape().str());
  }
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad) continue;
    it->backward(*it->output->grad);
  }
  // Interior gradients are dropped with the entries; leaves keep theirs.
  for (auto& entry : entries_) entry.output->grad.reset();
  entries_.clear();
}

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& node, const Tensor<T>& g) {
  if (!node->requires_grad) return;
  auto& buf = node->grad_buffer();
  if (!(buf.shape() == g.shape())) {
    throw ShapeError("gradient", "expected " + buf.shape().str() + ", got " + g.shape().str());
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;
template void accumulate(const std::shared_ptr<Node<float>>&, const Tensor<float>&);
template void accumulate(const std::shared_ptr<Node<double>>&, const Tensor<double>&);

}  // namespace bicanet
