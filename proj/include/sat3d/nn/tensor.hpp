#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

namespace sat3d::nn {

// Activations are row-major (tokens x channels) float matrices. Spatial
// structure (H, W, D) is tracked by the layer code, not by the tensor.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Adds `g` into grad, allocating it on first use.
  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  Matrix& grad_buffer() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

// Handle to a node of the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  float item() const { return node_->value(0, 0); }
  Node* get() const { return node_.get(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default; NoGradGuard disables it for its scope.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates the output node of an op. Parents are recorded only when recording
// is enabled and at least one parent requires a gradient.
Var make_result(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward);

// Reverse pass from a scalar (1x1) root, seeding d(root) = seed.
void backward(const Var& root, float seed = 1.0f);
void backward(const Var& root, const Matrix& seed);

}  // namespace sat3d::nn
