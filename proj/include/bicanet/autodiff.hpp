#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bicanet/tensor.hpp"

namespace bicanet {

/// Value plus gradient slot. Leaves are created directly; interior nodes come from a Tape.
template <typename T>
struct Node {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;
  bool requires_grad = false;

  /// Gradient buffer, zero-allocated on first use.
  Tensor<T>& grad_buffer() {
    if (!grad) grad.emplace(value.shape(), T(0));
    return *grad;
  }
};

/// Shared handle to a Node. Copies alias the same value.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), std::nullopt, requires_grad})) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->grad.has_value(); }
  const Tensor<T>& grad() const;
  void zero_grad() { node_->grad.reset(); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of primitive applications, replayed in reverse by backward().
///
/// A tape constructed with record=false evaluates ops without recording, which is
/// what inference paths use.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::shared_ptr<Node<T>> output;
    BackwardFn backward;
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  /// Wraps an op result. The backward closure is stored only when recording and
  /// at least one input requires a gradient.
  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);
  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  /// Seeds d loss / d loss = 1 and replays the tape in reverse, then clears it.
  void backward(const Var<T>& loss);

  void clear() { entries_.clear(); }

 private:
  bool record_;
  std::vector<Entry> entries_;
};

/// Adds `g` into the gradient slot of `node` when it tracks gradients.
template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& node, const Tensor<T>& g);

extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bicanet
