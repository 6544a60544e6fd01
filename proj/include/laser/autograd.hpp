#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// Every op computes its value eagerly. When gradient recording is enabled and at
// least one input requires a gradient, the op also records a backward closure;
// otherwise the result is a detached constant, so inference does not retain a graph.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace laser::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Seeds d(loss)/d(loss) = 1 and propagates to every reachable parameter.
// `loss` must be 1x1.
void backward(const Tensor& loss);

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1xN over rows
Tensor scale(const Tensor& a, double s);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor gather_rows(const Tensor& table, std::span<const int> index);
Tensor concat_cols(std::span<const Tensor> parts);
// Columns [begin, begin + count).
Tensor slice_cols(const Tensor& x, Eigen::Index begin, Eigen::Index count);

// Multi-head causal self attention over one sequence. q, k, v are T x d.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

// Single-head attention of one query per row over a padded group of keys.
// query: B x d, keys: (B*L) x d, values: (B*L) x dv, mask: B x L with 1 for valid
// slots. Fully padded rows produce a zero output. If `weights_out` is non-null it
// receives the B x L attention weights.
Tensor target_attention(const Tensor& query, const Tensor& keys, const Tensor& values,
                        const Matrix& mask, Matrix* weights_out = nullptr);

// Per-row mean over the valid slots of a padded group: values (B*L) x d -> B x d.
Tensor masked_group_mean(const Tensor& values, const Matrix& mask);

// Row-wise convex combination: out[b] = sum_j alpha[b, j] * experts[j][b].
Tensor mixture(const Tensor& alpha, std::span<const Tensor> experts);

// Mean softmax cross entropy over rows; targets[i] indexes a column of logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Mean binary cross entropy on raw logits (B x 1).
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

Tensor sum_all(const Tensor& x);

// ---- optimizers -------------------------------------------------------------

class Sgd {
 public:
  explicit Sgd(double learning_rate) : lr_(learning_rate) {}
  void step(std::span<Tensor> params) const;

 private:
  double lr_;
};

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::span<Tensor> params);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

void zero_grads(std::span<Tensor> params);

// Draws a rows x cols matrix from N(0, stddev^2) with a caller-owned engine.
template <class Engine>
Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Engine& rng);

}  // namespace laser::ad

#include <random>

namespace laser::ad {

template <class Engine>
Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Engine& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace laser::ad
