#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stylediff/tensor.hpp"

namespace stylediff {

// Reverse-mode automatic differentiation on a flat tape.
//
// Forward passes append nodes; backward() walks the tape in reverse creation
// order (which is a valid topological order, since an op can only consume
// previously created nodes) and accumulates gradients into each node.  The
// tape owns all intermediate values, so a tape instance corresponds to one
// forward pass and at most one backward pass.
//
// Only the handful of ops the models actually need are implemented, each with
// a hand-derived backward that is finite-difference checked in the unit
// tests.  Values are rank-2 (or rank-1, treated as a single row) tensors of
// doubles.

class Tape;

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- node creation -------------------------------------------------
  Var constant(Tensor value);                    // no gradient tracked
  Var leaf(Tensor value);                        // gradient tracked, unnamed
  Var param(const std::string& name, const Tensor& value);  // named leaf;
  // repeated calls with one name return the same node, so gradients from
  // multiple uses accumulate in one place.

  const Tensor& val(Var v) const;
  const Tensor& grad(Var v) const;  // valid after backward()
  bool requires_grad(Var v) const;

  // --- arithmetic -----------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);            // elementwise
  Var scale(Var x, double c);
  Var add_const(Var x, Tensor c);
  Var mul_const(Var x, Tensor c);   // elementwise by a constant tensor
  Var add_rowvec(Var x, Var row);   // broadcast a 1 x d row over all rows
  Var mul_scalar(Var x, Var s);     // s is 1 x 1
  Var scale_shift(Var x, Var s, Var b);  // x * (1 + s) + b, s/b are 1 x d

  // --- linear algebra ---------------------------------------------------
  Var matmul(Var a, Var b);
  Var linear(Var x, Var w, Var b);  // x[n,din] . w[din,dout] + b[1,dout]
  Var transpose(Var x);
  Var reshape(Var x, std::vector<int> shape);

  // --- nonlinearities ---------------------------------------------------
  Var exp_op(Var x);
  Var sigmoid(Var x);
  Var gelu(Var x);
  Var row_softmax(Var x);           // softmax along each row
  Var layer_norm(Var x, Var gain, Var bias);  // normalize along each row

  // --- reductions / reshuffles -----------------------------------------
  Var sum_all(Var x);               // -> 1 x 1
  Var mean_all(Var x);              // -> 1 x 1
  Var mse(Var a, Var b);            // mean squared difference -> 1 x 1
  Var mean_cols(Var x);             // row means -> n x 1
  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  Var concat_rows(const std::vector<Var>& xs);
  Var concat_cols(const std::vector<Var>& xs);
  // out[j] = x[index_map[j]]; duplicated indices accumulate in backward.
  Var replicate_rows(Var x, std::vector<int> index_map);
  // Weighted row pooling: out row g = sum_i w_gi * x[row_gi].
  using PoolGroups = std::vector<std::vector<std::pair<int, double>>>;
  Var pool_rows(Var x, PoolGroups groups);

  // --- model-specific ops -----------------------------------------------
  // Squared pairwise distances of row vectors: out[i][j] = |x_i - x_j|^2.
  Var pairwise_sqdist(Var x);
  // Kronecker product: out[(i*rb + m), (j*cb + n)] = a[i,j] * b[m,n].
  Var kron(Var a, Var b);
  // Row renormalization y_ij = x_ij / (sum_k x_ik + eps); used to turn a
  // masked elementwise product of attention terms back into row-stochastic
  // weights.
  Var renorm_rows(Var x, double eps = 1e-30);
  // value = -kappa * dist + add, with dist/add constant and kappa a 1 x 1
  // variable; the additive part carries validity penalties.
  Var distance_bias(Var kappa, Tensor dist, Tensor add);

  // --- backward ---------------------------------------------------------
  void backward(Var scalar_root);                 // seed 1.0, root is 1 x 1
  void backward_seed(Var root, const Tensor& seed);
  // All named-parameter gradients accumulated by the backward pass.
  std::map<std::string, Tensor> param_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
    std::string param_name;  // empty unless a named parameter
  };

  Var push_(Tensor value, bool requires_grad,
            std::function<void(Tape&)> backward = nullptr);
  Tensor& grad_ref_(Var v) { return nodes_[static_cast<std::size_t>(v.idx)].grad; }
  void accum_(Var v, const Tensor& g);
  void check_(Var v) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_index_;
  bool ran_backward_ = false;
};

// Ordered collection of named trainable tensors.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t count() const { return order_.size(); }
  std::size_t total_scalars() const;
  bool all_finite() const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> items_;
};

// Adam with global gradient-norm clipping.
class AdamOptimizer {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
  };

  AdamOptimizer() : opt_() {}
  explicit AdamOptimizer(Options opt) : opt_(opt) {}

  const Options& options() const { return opt_; }
  int steps_taken() const { return t_; }
  // Applies one update; returns the pre-clip global gradient norm.
  double step(ParamStore& params, const std::map<std::string, Tensor>& grads);

 private:
  Options opt_;
  int t_ = 0;
  std::unordered_map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace stylediff
