#pragma once

#include <functional>
#include <map>
#include <vector>

#include "stx/common.hpp"

namespace stx::nn {
class ParamStore;
}

namespace stx::ad {

using stx::Col;
using stx::Mat;
using stx::Row;

class Tape;

// Lightweight handle into a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& val() const;
  int rows() const { return int(val().rows()); }
  int cols() const { return int(val().cols()); }
};

struct Node {
  Mat value;
  Mat grad;  // empty until touched during backward
  bool needs_grad = false;
  const nn::ParamStore* store = nullptr;  // set for parameter leaves
  int param_id = -1;
  std::function<void(Tape&, const Mat&)> back;  // empty for leaves
};

// Dynamic reverse-mode tape over Eigen matrices. Nodes are appended in
// construction order, which is a valid topological order for backward.
// Parameter leaves are memoized per (store, id), so repeated uses of a
// weight share one node and its gradient accumulates there.
class Tape {
 public:
  Tape() { nodes_.reserve(4096); }

  Var constant(Mat v) { return push(std::move(v), false); }
  Var leaf(Mat v) { return push(std::move(v), true); }

  // Parameter leaf: copies the current value; gradients accumulated here can
  // be exported per (store, param_id) after backward.
  Var param(const nn::ParamStore& store, int pid);

  // Treat a parameter as a constant (no gradient flows into it). Used when a
  // frozen model participates in someone else's loss.
  Var param_const(const nn::ParamStore& store, int pid);

  void backward(Var loss);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of a node (empty matrix if never reached).
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  // Sums gradients of all parameter leaves belonging to `store` into `grads`
  // (indexed by param id; missing entries stay untouched).
  void add_param_grads_to(const nn::ParamStore& store, std::vector<Mat>& grads) const;

  void accum(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  size_t size() const { return nodes_.size(); }

  Var push(Mat v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

 private:
  std::vector<Node> nodes_;
  std::map<std::pair<const void*, int>, int> param_nodes_;
  std::map<std::pair<const void*, int>, int> const_param_nodes_;
};

inline const Mat& Var::val() const { return tape->value(*this); }

// ---- primitive ops ----------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var matmul(Var a, Var b);
Var matmul_tn(Var a, Var b);  // a^T * b
// W*x + b with b broadcast over columns (fused linear layer).
Var affine(Var w, Var x, Var b);
// (W ⊙ mask) * x with a fixed 0/1 mask; used by MADE conditioners.
Var matmul_masked(Var w, const Mat& mask, Var x);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// A + b broadcast over columns (b is a column vector).
Var add_colvec(Var a, Var b);
// A ⊙ m with constant m broadcast over rows (m is 1 x cols).
Var mul_rowvec(Var a, const Row& m);
// A ⊙ W for a constant weight matrix W (same shape).
Var mul_const(Var a, const Mat& w);

Var sigmoid(Var a);
Var tanh_(Var a);
Var softplus(Var a);
Var exp_(Var a);
Var log_(Var a);
Var log_sigmoid(Var a);
Var leaky_relu(Var a, double slope = 0.1);
Var square(Var a);

// Clamp of a probability to [eps, 1-eps]; gradient is passed through inside
// the interval and zero outside (exact clamp semantics).
Var clamp_prob(Var a, double eps);
// Symmetric value clamp to [-limit, limit], same gradient rule.
Var clamp_sym(Var a, double limit);

Var sum(Var a);                            // -> 1x1
Var weighted_sum(Var a, const Mat& w);     // sum(a ⊙ w) -> 1x1
Var col_sums(Var a);                       // -> 1 x cols
Var row_sums(Var a);                       // -> rows x 1
Var mean_all(Var a);

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, int r0, int n);
// Horizontal concat of equally-sized blocks -> (rows, nblocks*cols).
Var hstack(const std::vector<Var>& blocks);
Var slice_cols(Var a, int c0, int n);
// Select columns of a parameter matrix by index (embedding lookup).
Var gather_cols(Var a, const std::vector<int>& ids);
// Per-column L2 normalization.
Var l2_normalize_cols(Var a, double eps = 1e-12);
// out = a ⊙ m + b ⊙ (1 - m) with constant row mask m (per-column blend).
Var lerp_mask(Var a, Var b, const Row& m);
// Value copy that blocks gradient flow.
Var detach(Var a);

// ---- fused recurrent / structured ops ----------------------------------

// GRU cell, batched over columns.
//   u = [x; h],  [z; r] = sigmoid(Wzr u + bzr),
//   c = tanh(Wc [x; r ⊙ h] + bc),  h' = z ⊙ h + (1 - z) ⊙ c
// When `mask` is given (1 x B of 0/1), masked-out columns keep the previous
// state: h' = mask ⊙ h_new + (1 - mask) ⊙ h.
Var gru_cell(Var x, Var h, Var wzr, Var bzr, Var wc, Var bc, const Row* mask = nullptr);

// Projected LSTM cell. Returns [p'; c'] stacked (slice to use). Masked
// columns keep both previous states.
//   gates = W [x; p] + b,  i,f,o = sigmoid, g = tanh
//   c' = f ⊙ c + i ⊙ g,  p' = Wp (o ⊙ tanh(c'))
Var lstmp_cell(Var x, Var p, Var c, Var w, Var b, Var wp, const Row* mask = nullptr);

// Additive (content-based) attention over L memory blocks, batched over B
// columns. keys/memory have column layout j*B + b. mask is (L x B), 1 for
// valid token positions. Returns the context (d_mem x B); `weights_out`, if
// given, receives the (L x B) attention values.
Var attend(Var query, Var keys, Var memory, Var v, const Mat& mask, Mat* weights_out = nullptr);

// 2-D convolution on a single utterance, 3x3 kernel, same-padding, square
// stride. Input layout: (c_in, H*W), element (c, y*W + x). Weight layout:
// (c_out, c_in*9). Output: (c_out, H'*W') with H' = ceil(H/stride).
Var conv2d(Var input, int h, int w, Var weight, Var bias, int stride, int* out_h = nullptr, int* out_w = nullptr);

// Gathers one utterance's frames out of a batched frame sequence (each
// element F x B) into conv layout (1, len*F): time is the H axis, the frame
// dimension the W axis.
Var gather_frames(const std::vector<Var>& frames, int col, int len);

// Negative Gaussian log-likelihood per column (constants dropped):
//   out(0, b) = 1/2 * sum_t mask_t(b) * |hat_t(:,b) - target_t(:,b)|^2
Var gauss_nll_cols(Tape& tape, const std::vector<Var>& frames_hat, const std::vector<Mat>& targets,
                   const std::vector<Row>& masks);

// Weighted stop-token BCE per column from logits; targets/weights are
// (1 x B) rows per step, weight 0 masks a step out.
Var stop_bce_cols(Tape& tape, const std::vector<Var>& stop_logits, const std::vector<Row>& targets,
                  const std::vector<Row>& weights);

}  // namespace stx::ad
