#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "storydiff/tensor.hpp"

namespace storydiff {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Zero-filled on first use.
  Tensor& grad_buffer();
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When enabled every op checks its output for NaN/Inf and throws.
void set_finite_checks(bool enabled);
bool finite_checks();

// Elementwise ops require identical shapes; the only broadcast is a
// trailing-dimension vector in add_bias / layernorm.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var add_bias(const Var& x, const Var& bias);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var softmax(const Var& x, int axis = -1);
Var layernorm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f);
Var gelu(const Var& x);
Var silu(const Var& x);
Var reshape(const Var& x, Shape shape);
Var sum(const Var& x);
Var mean(const Var& x);
Var mse_loss(const Var& prediction, const Tensor& target);

/// Row gather over the matrix view; backward scatter-adds.
Var gather_rows(const Var& x, std::vector<int> rows);
Var concat_rows(std::span<const Var> parts);

/// Multi-head softmax(QK^T / sqrt(d)) V over already-projected rows.
/// Rows of q are split into consecutive groups of q_lengths[g] rows, each
/// attending only to the matching group of kv_lengths[g] rows of k and v.
Var multihead_attention(const Var& q, const Var& k, const Var& v, std::span<const int> q_lengths,
                        std::span<const int> kv_lengths, int heads);

/// out[targets[j]] = mean of every source row j (over all parts, in order)
/// that targets it. Accumulates in double. Rows with no source are zero.
Var average_into_rows(std::span<const Var> parts, std::span<const int> targets, int out_rows);

/// Populates grad on every requires_grad node reachable from a scalar loss,
/// then releases the recorded graph.
void backward(const Var& loss);

struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Tensor init, bool trainable = true);

  const Tensor& value() const { return var.value(); }
  void freeze();
};

using ParameterRefs = std::vector<Parameter*>;

class Adam {
 public:
  struct Options {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
  };

  explicit Adam(Options options) : options_(options) {}

  /// One bias-corrected update for every trainable parameter, then clears
  /// gradients. The parameter list must be the same across calls.
  void step(const ParameterRefs& params);

  long steps() const { return t_; }
  const Options& options() const { return options_; }

 private:
  Options options_;
  long t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

void zero_grads(const ParameterRefs& params);

}  // namespace storydiff
