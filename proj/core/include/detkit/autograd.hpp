#pragma once

#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "detkit/tensor.hpp"

namespace detkit {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_ref() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
};

}  // namespace detail

// A value in the reverse-mode tape. Copies share the underlying node.
class Var {
 public:
  Var();
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Gradient accumulated by backward(); zeros of the value's shape if none.
  Tensor grad() const;
  bool has_grad() const { return node_->grad.numel() == node_->value.numel() && node_->value.numel() > 0; }
  void zero_grad() { node_->grad = Tensor(); }
  Tensor& mutable_grad() { return node_->grad_ref(); }

  // Seeds d(self)/d(self) = 1 (self must be a scalar) and propagates.
  void backward() const;
  // Propagates an explicit upstream gradient of the value's shape.
  void backward(const Tensor& upstream) const;

  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Receives one callback per executed tensor op with the op kind and the
// number of multiply-accumulates it performed. Used by the FLOP counter.
class OpObserver {
 public:
  virtual ~OpObserver() = default;
  virtual void on_op(std::string_view kind, double macs) = 0;
};

class ScopedOpObserver {
 public:
  explicit ScopedOpObserver(OpObserver* observer);
  ~ScopedOpObserver();
  ScopedOpObserver(const ScopedOpObserver&) = delete;
  ScopedOpObserver& operator=(const ScopedOpObserver&) = delete;

 private:
  OpObserver* prev_;
};

namespace detail {
void notify_op(std::string_view kind, double macs);
// Builds a graph node when grad mode is on and any input requires grad;
// otherwise returns a constant.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);
}  // namespace detail

}  // namespace detkit
