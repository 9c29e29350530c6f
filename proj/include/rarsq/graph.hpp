#pragma once
// Tape-based reverse-mode differentiation over dense double tensors. A graph
// is built per batch and discarded; no graph reuse across steps.
//
// refresh() recomputes every node in build order with the graph treated as
// frozen: detach nodes keep their captured values and frozen_affine nodes
// reuse their stored maps. Central differences taken through refresh()
// therefore probe exactly the function whose gradient backward() computes.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rarsq/rotation.hpp"
#include "rarsq/tensor.hpp"

namespace rarsq::ad {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
  leaf,
  input,
  detach,
  reshape,
  add,
  sub,
  mul,
  scale,
  add_bias,
  matmul,
  bmm,
  bmm_nt,
  split_heads,
  merge_heads,
  gather_rows,
  concat_rows,
  concat_cols,
  relu,
  gelu,
  layernorm,
  softmax,
  frozen_affine,
  sum_sq,
  mse,
  cross_entropy,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::input;
  NodeId p0 = -1, p1 = -1, p2 = -1;
  std::vector<std::int64_t> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated during backward
  bool needs_grad = false;
  Tensor* param = nullptr;       // leaf only
  double c0 = 0.0;               // scale / sum_sq factor / layernorm eps
  std::vector<int> ints;         // gather indices, softmax valid, ce labels,
                                 // head dims
  std::vector<double> aux;       // layernorm mean|rstd, ce probs
  std::shared_ptr<const rot::BatchRotation> frozen;  // frozen_affine only
};

class Graph {
 public:
  // Parameter entry point; gradients accumulate into t.g after backward().
  NodeId leaf(Tensor& t);
  NodeId input(std::vector<std::int64_t> shape, const double* data);
  NodeId input(std::vector<std::int64_t> shape, std::vector<double> data);

  // Captures the parent's current value and blocks gradient flow. The value
  // is kept as-is by refresh().
  NodeId detach(NodeId x);

  // Same elements under a new shape (row-major relabeling); numel must match.
  NodeId reshape(NodeId x, std::vector<std::int64_t> shape);

  NodeId add(NodeId a, NodeId b);  // same shape
  NodeId sub(NodeId a, NodeId b);  // same shape
  NodeId mul(NodeId a, NodeId b);  // elementwise, same shape
  NodeId scale(NodeId a, double c);
  NodeId add_bias(NodeId x, NodeId bias);  // x[r,c] + bias[c]

  NodeId matmul(NodeId a, NodeId b);  // [m,k]x[k,n]
  // Batched over leading dim: a[g,m,k] x b[g,k,n]
  NodeId bmm(NodeId a, NodeId b);
  // a[g,m,k] x b[g,n,k]^T
  NodeId bmm_nt(NodeId a, NodeId b);

  // [b*s, h*dh] -> [b*h, s, dh] and back.
  NodeId split_heads(NodeId x, int batch, int seq, int heads);
  NodeId merge_heads(NodeId x, int batch, int seq, int heads);

  // out[i,:] = x[idx[i],:]; backward scatter-adds (duplicates allowed).
  // Doubles as embedding lookup when x is a table leaf.
  NodeId gather_rows(NodeId x, std::vector<int> idx);

  NodeId concat_rows(NodeId a, NodeId b);
  NodeId concat_cols(NodeId a, NodeId b);

  NodeId relu(NodeId x);
  NodeId gelu(NodeId x);
  NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);

  // Row softmax; valid[r] (optional) masks row r to its first valid[r]
  // columns.
  NodeId softmax(NodeId x, std::vector<int> valid = {});

  // y = y0 + A (v - v0) per row with A held constant; backward applies A^T.
  NodeId frozen_affine(NodeId x, std::shared_ptr<const rot::BatchRotation> map);

  NodeId sum_sq(NodeId x, double factor);        // scalar: factor * sum(x^2)
  NodeId mse(NodeId pred, NodeId target);        // mean over all elements
  NodeId cross_entropy(NodeId logits, std::vector<int> labels);  // mean/batch

  const std::vector<double>& val(NodeId id) const { return at(id).val; }
  const std::vector<double>& grad_of(NodeId id) const { return at(id).grad; }
  const std::vector<std::int64_t>& shape(NodeId id) const {
    return at(id).shape;
  }
  double scalar(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Gradients land in each leaf's Tensor.g
  // (accumulated). Throws on a non-scalar loss and on non-finite gradients,
  // naming the op that produced them.
  void backward(NodeId loss);

  // Frozen re-forward in build order (see file comment).
  void refresh();

 private:
  Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
  NodeId push(Node n);
  void forward_one(Node& n);

  std::vector<Node> nodes_;
};

// Max over parameter coordinates of
// |analytic - central| / (|analytic| + |central| + 1e-6), where central
// differences are taken through g.refresh(). Runs backward() itself.
// Evaluates the loss twice at the base point first and throws if the two
// values differ bitwise.
double finite_diff_check(Graph& g, NodeId loss,
                         std::span<Tensor* const> params, double eps);

// Same contract for an arbitrary scalar function of the parameters, with
// analytic gradients supplied by the caller (one vector per parameter).
double finite_diff_check(const std::function<double()>& f,
                         std::span<Tensor* const> params,
                         const std::vector<std::vector<double>>& analytic,
                         double eps);

}  // namespace rarsq::ad
