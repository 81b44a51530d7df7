#include "detkit/autograd.hpp"

#include <unordered_set>

#include "detkit/errors.hpp"

namespace detkit {

namespace {
thread_local bool t_grad_enabled = true;
thread_local OpObserver* t_observer = nullptr;
}  // namespace

Var::Var() : node_(std::make_shared<detail::Node>()) {}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<detail::Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

Tensor Var::grad() const {
  if (has_grad()) return node_->grad;
  return Tensor(node_->value.shape());
}

void Var::backward() const {
  if (numel() != 1) throw ShapeMismatch("backward() without upstream needs a scalar, got " + shape_str(shape()));
  backward(Tensor(shape(), 1.0));
}

void Var::backward(const Tensor& upstream) const {
  if (upstream.numel() != numel()) throw ShapeMismatch("upstream gradient shape mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_ref().add_(upstream);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
  }
  // Intermediate gradients are not retained; leaves keep theirs.
  for (detail::Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

ScopedOpObserver::ScopedOpObserver(OpObserver* observer) : prev_(t_observer) { t_observer = observer; }
ScopedOpObserver::~ScopedOpObserver() { t_observer = prev_; }

namespace detail {

void notify_op(std::string_view kind, double macs) {
  if (t_observer) t_observer->on_op(kind, macs);
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (!needs) return Var(std::move(value), false);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  return Var::from_node(std::move(node));
}

}  // namespace detail

}  // namespace detkit
