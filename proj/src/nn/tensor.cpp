#include "sat3d/nn/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace sat3d::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const Var& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root, float seed) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward(seed) needs a scalar root");
  backward(root, Matrix::Constant(1, 1, seed));
}

void backward(const Var& root, const Matrix& seed) {
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order of interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !p->parents.empty() && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.get()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node* n : order)
    if (!n->parents.empty()) n->grad.resize(0, 0);
}

}  // namespace sat3d::nn
