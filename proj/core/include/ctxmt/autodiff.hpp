#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxmt/errors.hpp"

// Reverse-mode automatic differentiation over dense double matrices.
//
// The graph is built eagerly: every operation returns a Var holding a
// shared node. Nodes keep their parents alive, so releasing the root
// releases the whole graph. backward() runs the recorded closures in
// reverse creation order, which is a valid topological order because
// inputs always predate their consumers.
//
// In inference mode (all leaves created with requires_grad=false) nodes
// drop their parent links, so intermediates are freed as soon as the
// last Var referencing them goes out of scope.

namespace ctxmt::ad {

using Matrix = Eigen::MatrixXd;

// Tracks bytes held by graph node values. Peak readings give the
// operation memory of an inference or training pass on top of the
// parameters themselves.
class MemProbe {
 public:
  static void reset_peak();
  static std::int64_t live_bytes();
  static std::int64_t peak_bytes();

 private:
  friend struct Node;
  static void add(std::int64_t n);
  static void sub(std::int64_t n);
};

struct Node {
  Matrix value;
  Matrix grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into the parents' grads.
  std::function<void(Node&)> backprop;

  explicit Node(Matrix v);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void accumulate(const Matrix& g);
};

// A trainable tensor living outside any graph. Leaf Vars made from a
// Parameter add their gradient into `grad` during backward().
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

class Var {
 public:
  Var() = default;

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }

  static Var constant(Matrix value);
  static Var leaf(Parameter& p, bool requires_grad);

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;

  friend Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backprop);
  friend void backward(const Var& root);
  friend const std::shared_ptr<Node>& node_of(const Var& v);
};

// Runs backprop from a scalar (1x1) root. Grads accumulate into
// Parameter::grad for every parameter leaf in the graph.
void backward(const Var& root);

// --- elementwise and scalar ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// Adds a 1 x cols row vector to every row.
Var add_rowvec(const Var& a, const Var& v);
// Multiplies row i by column vector entry v(i, 0).
Var mul_colvec(const Var& a, const Var& v);

// --- shape ---
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

// --- reductions ---
Var sum_all(const Var& a);              // 1x1
Var mean_rows(const Var& a);            // 1 x cols, column means
Var sum_rows_weighted(const Var& a, const Var& w);  // w: rows x 1 -> 1 x cols

// Euclidean projection of a row onto the probability simplex.
Eigen::RowVectorXd simplex_project(const Eigen::RowVectorXd& z);

// --- row-wise nonlinearities ---
// Softmax per row. `mask`, when non-empty, has the same shape with 1 for
// allowed entries and 0 for masked ones; masked outputs are exactly 0.
Var softmax_rows(const Var& a, const Matrix& mask = Matrix());
Var log_softmax_rows(const Var& a);
// Euclidean projection of each row onto the probability simplex.
Var sparsemax_rows(const Var& a);
// Per-row normalization to mean 0 / variance 1, then affine by gamma, beta (1 x cols).
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-6);

// --- pooling over row groups of size k (remainder group may be shorter) ---
Var mean_pool_rows(const Var& a, Eigen::Index k);
Var max_pool_rows(const Var& a, Eigen::Index k);

// --- table lookups ---
// out.row(i) = table.row(ids[i]); backward scatter-adds.
Var gather_rows(const Var& table, const std::vector<int>& ids);

// --- graph control ---
Var detach(const Var& a);
// Inverted dropout; identity when training is false or rate == 0.
Var dropout(const Var& a, double rate, bool training, std::mt19937_64& rng);

}  // namespace ctxmt::ad
