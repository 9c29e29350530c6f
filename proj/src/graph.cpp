#include "rarsq/graph.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "rarsq/kernels.hpp"

namespace rarsq::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::input: return "input";
    case Op::detach: return "detach";
    case Op::reshape: return "reshape";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_bias: return "add_bias";
    case Op::matmul: return "matmul";
    case Op::bmm: return "bmm";
    case Op::bmm_nt: return "bmm_nt";
    case Op::split_heads: return "split_heads";
    case Op::merge_heads: return "merge_heads";
    case Op::gather_rows: return "gather_rows";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::layernorm: return "layernorm";
    case Op::softmax: return "softmax";
    case Op::frozen_affine: return "frozen_affine";
    case Op::sum_sq: return "sum_sq";
    case Op::mse: return "mse";
    case Op::cross_entropy: return "cross_entropy";
  }
  return "?";
}

namespace {

std::int64_t numel_of(const std::vector<std::int64_t>& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// rows = leading dim, cols = rest.
void rc(const Node& n, int& r, int& c) {
  r = static_cast<int>(n.shape.empty() ? 1 : n.shape[0]);
  c = static_cast<int>(r == 0 ? 0 : numel_of(n.shape) / r);
}

// cols = trailing dim, rows = rest; softmax normalizes the last axis so a
// stack of score matrices works unchanged.
void last_rc(const Node& n, int& r, int& c) {
  c = static_cast<int>(n.shape.empty() ? 1 : n.shape.back());
  r = static_cast<int>(c == 0 ? 0 : numel_of(n.shape) / c);
}

[[noreturn]] void bad(const std::string& msg) {
  throw std::invalid_argument("graph: " + msg);
}

}  // namespace

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor& t) {
  Node n;
  n.op = Op::leaf;
  n.shape = t.shape;
  n.val = t.v;
  n.needs_grad = true;
  n.param = &t;
  return push(std::move(n));
}

NodeId Graph::input(std::vector<std::int64_t> shape, const double* data) {
  Node n;
  n.op = Op::input;
  n.val.assign(data, data + numel_of(shape));
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::input(std::vector<std::int64_t> shape,
                    std::vector<double> data) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
    bad("input: data size does not match shape");
  Node n;
  n.op = Op::input;
  n.shape = std::move(shape);
  n.val = std::move(data);
  return push(std::move(n));
}

NodeId Graph::detach(NodeId x) {
  Node n;
  n.op = Op::detach;
  n.p0 = x;
  n.shape = at(x).shape;
  n.val = at(x).val;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, std::vector<std::int64_t> shape) {
  if (numel_of(shape) != numel_of(at(x).shape))
    bad("reshape: element count mismatch");
  Node n;
  n.op = Op::reshape;
  n.p0 = x;
  n.shape = std::move(shape);
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

namespace {
void check_same_shape(const Node& a, const Node& b, const char* what) {
  if (a.shape != b.shape) bad(std::string(what) + ": shape mismatch");
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  check_same_shape(at(a), at(b), "add");
  Node n;
  n.op = Op::add;
  n.p0 = a;
  n.p1 = b;
  n.shape = at(a).shape;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check_same_shape(at(a), at(b), "sub");
  Node n;
  n.op = Op::sub;
  n.p0 = a;
  n.p1 = b;
  n.shape = at(a).shape;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_same_shape(at(a), at(b), "mul");
  Node n;
  n.op = Op::mul;
  n.p0 = a;
  n.p1 = b;
  n.shape = at(a).shape;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
  Node n;
  n.op = Op::scale;
  n.p0 = a;
  n.c0 = c;
  n.shape = at(a).shape;
  n.needs_grad = at(a).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::add_bias(NodeId x, NodeId bias) {
  int r, c, br, bc;
  rc(at(x), r, c);
  rc(at(bias), br, bc);
  if (static_cast<std::int64_t>(br) * bc != c) bad("add_bias: width mismatch");
  Node n;
  n.op = Op::add_bias;
  n.p0 = x;
  n.p1 = bias;
  n.shape = at(x).shape;
  n.needs_grad = at(x).needs_grad || at(bias).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.shape.size() != 2 || nb.shape.size() != 2)
    bad("matmul: operands must be 2-d");
  if (na.shape[1] != nb.shape[0]) bad("matmul: inner dim mismatch");
  Node n;
  n.op = Op::matmul;
  n.p0 = a;
  n.p1 = b;
  n.shape = {na.shape[0], nb.shape[1]};
  n.needs_grad = na.needs_grad || nb.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::bmm(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.shape.size() != 3 || nb.shape.size() != 3) bad("bmm: need 3-d");
  if (na.shape[0] != nb.shape[0] || na.shape[2] != nb.shape[1])
    bad("bmm: dim mismatch");
  Node n;
  n.op = Op::bmm;
  n.p0 = a;
  n.p1 = b;
  n.shape = {na.shape[0], na.shape[1], nb.shape[2]};
  n.needs_grad = na.needs_grad || nb.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::bmm_nt(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.shape.size() != 3 || nb.shape.size() != 3) bad("bmm_nt: need 3-d");
  if (na.shape[0] != nb.shape[0] || na.shape[2] != nb.shape[2])
    bad("bmm_nt: dim mismatch");
  Node n;
  n.op = Op::bmm_nt;
  n.p0 = a;
  n.p1 = b;
  n.shape = {na.shape[0], na.shape[1], nb.shape[1]};
  n.needs_grad = na.needs_grad || nb.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::split_heads(NodeId x, int batch, int seq, int heads) {
  const Node& nx = at(x);
  int r, c;
  rc(nx, r, c);
  if (r != batch * seq || c % heads != 0) bad("split_heads: bad dims");
  Node n;
  n.op = Op::split_heads;
  n.p0 = x;
  n.ints = {batch, seq, heads};
  n.shape = {static_cast<std::int64_t>(batch) * heads, seq, c / heads};
  n.needs_grad = nx.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::merge_heads(NodeId x, int batch, int seq, int heads) {
  const Node& nx = at(x);
  if (nx.shape.size() != 3 || nx.shape[0] != static_cast<std::int64_t>(batch) * heads ||
      nx.shape[1] != seq)
    bad("merge_heads: bad dims");
  Node n;
  n.op = Op::merge_heads;
  n.p0 = x;
  n.ints = {batch, seq, heads};
  n.shape = {static_cast<std::int64_t>(batch) * seq, heads * nx.shape[2]};
  n.needs_grad = nx.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId x, std::vector<int> idx) {
  const Node& nx = at(x);
  int r, c;
  rc(nx, r, c);
  for (int i : idx)
    if (i < 0 || i >= r) bad("gather_rows: index out of range");
  Node n;
  n.op = Op::gather_rows;
  n.p0 = x;
  n.shape = {static_cast<std::int64_t>(idx.size()), c};
  n.ints = std::move(idx);
  n.needs_grad = nx.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
  int ra, ca, rb, cb;
  rc(at(a), ra, ca);
  rc(at(b), rb, cb);
  if (ca != cb) bad("concat_rows: width mismatch");
  Node n;
  n.op = Op::concat_rows;
  n.p0 = a;
  n.p1 = b;
  n.shape = {static_cast<std::int64_t>(ra) + rb, ca};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
  int ra, ca, rb, cb;
  rc(at(a), ra, ca);
  rc(at(b), rb, cb);
  if (ra != rb) bad("concat_cols: height mismatch");
  Node n;
  n.op = Op::concat_cols;
  n.p0 = a;
  n.p1 = b;
  n.shape = {static_cast<std::int64_t>(ra), ca + cb};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  Node n;
  n.op = Op::relu;
  n.p0 = x;
  n.shape = at(x).shape;
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId x) {
  Node n;
  n.op = Op::gelu;
  n.p0 = x;
  n.shape = at(x).shape;
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::layernorm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  int r, c, gr, gc;
  rc(at(x), r, c);
  rc(at(gamma), gr, gc);
  if (static_cast<std::int64_t>(gr) * gc != c ||
      Tensor::numel_of(at(beta).shape) != c)
    bad("layernorm: affine width mismatch");
  Node n;
  n.op = Op::layernorm;
  n.p0 = x;
  n.p1 = gamma;
  n.p2 = beta;
  n.c0 = eps;
  n.shape = at(x).shape;
  n.needs_grad =
      at(x).needs_grad || at(gamma).needs_grad || at(beta).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x, std::vector<int> valid) {
  int r, c;
  last_rc(at(x), r, c);
  if (!valid.empty() && static_cast<int>(valid.size()) != r)
    bad("softmax: valid size mismatch");
  for (int v : valid)
    if (v < 1 || v > c) bad("softmax: valid entry out of range");
  Node n;
  n.op = Op::softmax;
  n.p0 = x;
  n.shape = at(x).shape;
  n.ints = std::move(valid);
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::frozen_affine(NodeId x,
                            std::shared_ptr<const rot::BatchRotation> map) {
  int r, c;
  rc(at(x), r, c);
  if (!map || map->rows != r || map->dim != c)
    bad("frozen_affine: map shape mismatch");
  Node n;
  n.op = Op::frozen_affine;
  n.p0 = x;
  n.shape = at(x).shape;
  n.frozen = std::move(map);
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::sum_sq(NodeId x, double factor) {
  Node n;
  n.op = Op::sum_sq;
  n.p0 = x;
  n.c0 = factor;
  n.shape = {1};
  n.needs_grad = at(x).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::mse(NodeId pred, NodeId target) {
  if (at(pred).val.size() != at(target).val.size())
    bad("mse: size mismatch");
  Node n;
  n.op = Op::mse;
  n.p0 = pred;
  n.p1 = target;
  n.shape = {1};
  n.needs_grad = at(pred).needs_grad || at(target).needs_grad;
  forward_one(n);
  return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, std::vector<int> labels) {
  const Node& nl = at(logits);
  if (nl.shape.size() != 2) bad("cross_entropy: logits must be 2-d");
  int b = static_cast<int>(nl.shape[0]);
  int k = static_cast<int>(nl.shape[1]);
  if (static_cast<int>(labels.size()) != b)
    bad("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) bad("cross_entropy: label out of range");
  Node n;
  n.op = Op::cross_entropy;
  n.p0 = logits;
  n.shape = {1};
  n.ints = std::move(labels);
  n.needs_grad = nl.needs_grad;
  forward_one(n);
  return push(std::move(n));
}

double Graph::scalar(NodeId id) const {
  const Node& n = at(id);
  if (n.val.size() != 1) bad("scalar: node is not scalar");
  return n.val[0];
}

// ---------------------------------------------------------------------------

void Graph::forward_one(Node& n) {
  n.val.resize(static_cast<size_t>(numel_of(n.shape)));
  const double* a = n.p0 >= 0 ? at(n.p0).val.data() : nullptr;
  const double* b = n.p1 >= 0 ? at(n.p1).val.data() : nullptr;
  double* y = n.val.data();
  const std::int64_t sz = static_cast<std::int64_t>(n.val.size());
  switch (n.op) {
    case Op::leaf:
      n.val = n.param->v;
      if (static_cast<std::int64_t>(n.val.size()) != numel_of(n.shape))
        bad("leaf: parameter storage does not match its shape");
      break;
    case Op::input:
    case Op::detach:
      break;  // values are captured, not recomputed
    case Op::reshape:
      std::memcpy(y, a, sizeof(double) * static_cast<size_t>(sz));
      break;
    case Op::add:
      for (std::int64_t i = 0; i < sz; ++i) y[i] = a[i] + b[i];
      break;
    case Op::sub:
      for (std::int64_t i = 0; i < sz; ++i) y[i] = a[i] - b[i];
      break;
    case Op::mul:
      for (std::int64_t i = 0; i < sz; ++i) y[i] = a[i] * b[i];
      break;
    case Op::scale:
      for (std::int64_t i = 0; i < sz; ++i) y[i] = n.c0 * a[i];
      break;
    case Op::add_bias: {
      int r, c;
      rc(n, r, c);
      std::memcpy(y, a, sizeof(double) * static_cast<size_t>(sz));
      kern::add_bias_rows(y, b, r, c);
      break;
    }
    case Op::matmul: {
      const Node& na = at(n.p0);
      kern::matmul(a, b, y, static_cast<int>(na.shape[0]),
                   static_cast<int>(na.shape[1]),
                   static_cast<int>(n.shape[1]));
      break;
    }
    case Op::bmm: {
      const Node& na = at(n.p0);
      kern::bmm(a, b, y, static_cast<int>(na.shape[0]),
                static_cast<int>(na.shape[1]), static_cast<int>(na.shape[2]),
                static_cast<int>(n.shape[2]));
      break;
    }
    case Op::bmm_nt: {
      const Node& na = at(n.p0);
      kern::bmm_nt(a, b, y, static_cast<int>(na.shape[0]),
                   static_cast<int>(na.shape[1]),
                   static_cast<int>(na.shape[2]),
                   static_cast<int>(n.shape[2]));
      break;
    }
    case Op::split_heads: {
      int B = n.ints[0], S = n.ints[1], H = n.ints[2];
      int dh = static_cast<int>(n.shape[2]);
      for (int bb = 0; bb < B; ++bb)
        for (int h = 0; h < H; ++h)
          for (int s = 0; s < S; ++s)
            std::memcpy(
                y + ((static_cast<std::int64_t>(bb) * H + h) * S + s) * dh,
                a + (static_cast<std::int64_t>(bb) * S + s) * (H * dh) +
                    static_cast<std::int64_t>(h) * dh,
                sizeof(double) * static_cast<size_t>(dh));
      break;
    }
    case Op::merge_heads: {
      int B = n.ints[0], S = n.ints[1], H = n.ints[2];
      int dh = static_cast<int>(at(n.p0).shape[2]);
      for (int bb = 0; bb < B; ++bb)
        for (int h = 0; h < H; ++h)
          for (int s = 0; s < S; ++s)
            std::memcpy(
                y + (static_cast<std::int64_t>(bb) * S + s) * (H * dh) +
                    static_cast<std::int64_t>(h) * dh,
                a + ((static_cast<std::int64_t>(bb) * H + h) * S + s) * dh,
                sizeof(double) * static_cast<size_t>(dh));
      break;
    }
    case Op::gather_rows: {
      int c = static_cast<int>(n.shape[1]);
      for (size_t i = 0; i < n.ints.size(); ++i)
        std::memcpy(y + i * c,
                    a + static_cast<std::int64_t>(n.ints[i]) * c,
                    sizeof(double) * static_cast<size_t>(c));
      break;
    }
    case Op::concat_rows: {
      size_t na = at(n.p0).val.size();
      std::memcpy(y, a, sizeof(double) * na);
      std::memcpy(y + na, b, sizeof(double) * at(n.p1).val.size());
      break;
    }
    case Op::concat_cols: {
      int r, c;
      rc(n, r, c);
      int ca = static_cast<int>(at(n.p0).val.size() / r);
      int cb = c - ca;
      for (int i = 0; i < r; ++i) {
        std::memcpy(y + static_cast<std::int64_t>(i) * c,
                    a + static_cast<std::int64_t>(i) * ca,
                    sizeof(double) * static_cast<size_t>(ca));
        std::memcpy(y + static_cast<std::int64_t>(i) * c + ca,
                    b + static_cast<std::int64_t>(i) * cb,
                    sizeof(double) * static_cast<size_t>(cb));
      }
      break;
    }
    case Op::relu:
      kern::relu(a, y, sz);
      break;
    case Op::gelu:
      kern::gelu(a, y, sz);
      break;
    case Op::layernorm: {
      int r, c;
      rc(n, r, c);
      n.aux.resize(static_cast<size_t>(2) * r);
      kern::layernorm_rows(a, b, at(n.p2).val.data(), y, n.aux.data(),
                           n.aux.data() + r, r, c, n.c0);
      break;
    }
    case Op::softmax: {
      int r, c;
      last_rc(n, r, c);
      kern::softmax_rows(a, y, r, c, n.ints.empty() ? nullptr : n.ints.data());
      break;
    }
    case Op::frozen_affine:
      n.frozen->apply(a, y);
      break;
    case Op::sum_sq: {
      double s = 0.0;
      const std::int64_t pn = static_cast<std::int64_t>(at(n.p0).val.size());
      for (std::int64_t i = 0; i < pn; ++i) s += a[i] * a[i];
      y[0] = n.c0 * s;
      break;
    }
    case Op::mse: {
      double s = 0.0;
      const std::int64_t pn = static_cast<std::int64_t>(at(n.p0).val.size());
      for (std::int64_t i = 0; i < pn; ++i) {
        double d = a[i] - b[i];
        s += d * d;
      }
      y[0] = s / static_cast<double>(pn);
      break;
    }
    case Op::cross_entropy: {
      const Node& nl = at(n.p0);
      int bsz = static_cast<int>(nl.shape[0]);
      int k = static_cast<int>(nl.shape[1]);
      n.aux.resize(static_cast<size_t>(bsz) * k);
      kern::softmax_rows(a, n.aux.data(), bsz, k);
      double s = 0.0;
      for (int i = 0; i < bsz; ++i) {
        double p = n.aux[static_cast<size_t>(i) * k + n.ints[i]];
        s -= std::log(p > 1e-300 ? p : 1e-300);
      }
      y[0] = s / bsz;
      break;
    }
  }
}

void Graph::refresh() {
  for (auto& n : nodes_) forward_one(n);
}

void Graph::backward(NodeId loss) {
  Node& L = at(loss);
  if (L.val.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
  L.grad[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (!n.needs_grad && n.op != Op::leaf) continue;
    for (double x : n.grad)
      if (!std::isfinite(x))
        throw std::runtime_error(
            std::string("backward: non-finite gradient at op ") +
            op_name(n.op));
    const double* g = n.grad.data();
    const std::int64_t sz = static_cast<std::int64_t>(n.grad.size());
    auto pg = [&](NodeId p) { return at(p).grad.data(); };
    switch (n.op) {
      case Op::leaf:
      case Op::input:
      case Op::detach:
        break;
      case Op::reshape:
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p0)[i] += g[i];
        break;
      case Op::add:
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p0)[i] += g[i];
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p1)[i] += g[i];
        break;
      case Op::sub:
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p0)[i] += g[i];
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p1)[i] -= g[i];
        break;
      case Op::mul: {
        const double* av = at(n.p0).val.data();
        const double* bv = at(n.p1).val.data();
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p0)[i] += g[i] * bv[i];
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p1)[i] += g[i] * av[i];
        break;
      }
      case Op::scale:
        for (std::int64_t i = 0; i < sz; ++i) pg(n.p0)[i] += n.c0 * g[i];
        break;
      case Op::add_bias: {
        int r, c;
        rc(n, r, c);
        double* gx = pg(n.p0);
        for (std::int64_t i = 0; i < sz; ++i) gx[i] += g[i];
        kern::col_sum_accum(g, pg(n.p1), r, c);
        break;
      }
      case Op::matmul: {
        const Node& na = at(n.p0);
        const Node& nb = at(n.p1);
        int m = static_cast<int>(na.shape[0]);
        int k = static_cast<int>(na.shape[1]);
        int nn = static_cast<int>(nb.shape[1]);
        kern::matmul_nt(g, nb.val.data(), pg(n.p0), m, nn, k, true);
        kern::matmul_tn(na.val.data(), g, pg(n.p1), k, m, nn, true);
        break;
      }
      case Op::bmm: {
        const Node& na = at(n.p0);
        const Node& nb = at(n.p1);
        int gb = static_cast<int>(na.shape[0]);
        int m = static_cast<int>(na.shape[1]);
        int k = static_cast<int>(na.shape[2]);
        int nn = static_cast<int>(nb.shape[2]);
        kern::bmm_nt(g, nb.val.data(), pg(n.p0), gb, m, nn, k, true);
        kern::bmm_tn(na.val.data(), g, pg(n.p1), gb, k, m, nn, true);
        break;
      }
      case Op::bmm_nt: {
        const Node& na = at(n.p0);
        const Node& nb = at(n.p1);
        int gb = static_cast<int>(na.shape[0]);
        int m = static_cast<int>(na.shape[1]);
        int k = static_cast<int>(na.shape[2]);
        int nn = static_cast<int>(nb.shape[1]);
        kern::bmm(g, nb.val.data(), pg(n.p0), gb, m, nn, k, true);
        kern::bmm_tn(g, na.val.data(), pg(n.p1), gb, nn, m, k, true);
        break;
      }
      case Op::split_heads: {
        int B = n.ints[0], S = n.ints[1], H = n.ints[2];
        int dh = static_cast<int>(n.shape[2]);
        double* gx = pg(n.p0);
        for (int bb = 0; bb < B; ++bb)
          for (int h = 0; h < H; ++h)
            for (int s = 0; s < S; ++s) {
              const double* src =
                  g + ((static_cast<std::int64_t>(bb) * H + h) * S + s) * dh;
              double* dst = gx +
                            (static_cast<std::int64_t>(bb) * S + s) * (H * dh) +
                            static_cast<std::int64_t>(h) * dh;
              for (int j = 0; j < dh; ++j) dst[j] += src[j];
            }
        break;
      }
      case Op::merge_heads: {
        int B = n.ints[0], S = n.ints[1], H = n.ints[2];
        int dh = static_cast<int>(at(n.p0).shape[2]);
        double* gx = pg(n.p0);
        for (int bb = 0; bb < B; ++bb)
          for (int h = 0; h < H; ++h)
            for (int s = 0; s < S; ++s) {
              const double* src =
                  g + (static_cast<std::int64_t>(bb) * S + s) * (H * dh) +
                  static_cast<std::int64_t>(h) * dh;
              double* dst =
                  gx + ((static_cast<std::int64_t>(bb) * H + h) * S + s) * dh;
              for (int j = 0; j < dh; ++j) dst[j] += src[j];
            }
        break;
      }
      case Op::gather_rows: {
        int c = static_cast<int>(n.shape[1]);
        double* gx = pg(n.p0);
        // Serial scatter: duplicate indices accumulate in a fixed order.
        for (size_t i = 0; i < n.ints.size(); ++i) {
          const double* src = g + i * c;
          double* dst = gx + static_cast<std::int64_t>(n.ints[i]) * c;
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::concat_rows: {
        size_t na = at(n.p0).grad.size();
        double* ga = pg(n.p0);
        double* gb2 = pg(n.p1);
        for (size_t i = 0; i < na; ++i) ga[i] += g[i];
        size_t nb = at(n.p1).grad.size();
        for (size_t i = 0; i < nb; ++i) gb2[i] += g[na + i];
        break;
      }
      case Op::concat_cols: {
        int r, c;
        rc(n, r, c);
        int ca = static_cast<int>(at(n.p0).val.size() / r);
        int cb = c - ca;
        double* ga = pg(n.p0);
        double* gb2 = pg(n.p1);
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < ca; ++j)
            ga[static_cast<std::int64_t>(i) * ca + j] +=
                g[static_cast<std::int64_t>(i) * c + j];
          for (int j = 0; j < cb; ++j)
            gb2[static_cast<std::int64_t>(i) * cb + j] +=
                g[static_cast<std::int64_t>(i) * c + ca + j];
        }
        break;
      }
      case Op::relu:
        kern::relu_backward(at(n.p0).val.data(), g, pg(n.p0), sz);
        break;
      case Op::gelu:
        kern::gelu_backward(at(n.p0).val.data(), g, pg(n.p0), sz);
        break;
      case Op::layernorm: {
        int r, c;
        rc(n, r, c);
        kern::layernorm_rows_backward(at(n.p0).val.data(),
                                      at(n.p1).val.data(), n.aux.data(),
                                      n.aux.data() + r, g, pg(n.p0), pg(n.p1),
                                      pg(n.p2), r, c);
        break;
      }
      case Op::softmax: {
        int r, c;
        last_rc(n, r, c);
        kern::softmax_rows_backward(n.val.data(), g, pg(n.p0), r, c,
                                    n.ints.empty() ? nullptr : n.ints.data());
        break;
      }
      case Op::frozen_affine:
        n.frozen->apply_transpose_accum(g, pg(n.p0));
        break;
      case Op::sum_sq: {
        const double* xv = at(n.p0).val.data();
        double* gx = pg(n.p0);
        double f = 2.0 * n.c0 * g[0];
        const std::int64_t pn = static_cast<std::int64_t>(at(n.p0).val.size());
        for (std::int64_t i = 0; i < pn; ++i) gx[i] += f * xv[i];
        break;
      }
      case Op::mse: {
        const double* pv = at(n.p0).val.data();
        const double* tv = at(n.p1).val.data();
        const std::int64_t pn = static_cast<std::int64_t>(at(n.p0).val.size());
        double f = 2.0 * g[0] / static_cast<double>(pn);
        double* gp = pg(n.p0);
        double* gt = pg(n.p1);
        for (std::int64_t i = 0; i < pn; ++i) {
          double d = f * (pv[i] - tv[i]);
          gp[i] += d;
          gt[i] -= d;
        }
        break;
      }
      case Op::cross_entropy: {
        const Node& nl = at(n.p0);
        int bsz = static_cast<int>(nl.shape[0]);
        int k = static_cast<int>(nl.shape[1]);
        double f = g[0] / bsz;
        double* gl = pg(n.p0);
        for (int i = 0; i < bsz; ++i)
          for (int j = 0; j < k; ++j)
            gl[static_cast<std::int64_t>(i) * k + j] +=
                f * (n.aux[static_cast<size_t>(i) * k + j] -
                     (j == n.ints[i] ? 1.0 : 0.0));
        break;
      }
    }
  }
  for (auto& n : nodes_)
    if (n.op == Op::leaf) {
      n.param->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) n.param->g[i] += n.grad[i];
    }
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<double()>& f,
                         std::span<Tensor* const> params,
                         const std::vector<std::vector<double>>& analytic,
                         double eps) {
  if (analytic.size() != params.size())
    throw std::invalid_argument("finite_diff_check: analytic size mismatch");
  double b1 = f();
  double b2 = f();
  if (std::memcmp(&b1, &b2, sizeof(double)) != 0)
    throw std::runtime_error(
        "finite_diff_check: function is not deterministic at the base point");
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    if (analytic[p].size() != t.v.size())
      throw std::invalid_argument("finite_diff_check: gradient size mismatch");
    for (size_t i = 0; i < t.v.size(); ++i) {
      double keep = t.v[i];
      t.v[i] = keep + eps;
      double fp = f();
      t.v[i] = keep - eps;
      double fm = f();
      t.v[i] = keep;
      double fd = (fp - fm) / (2.0 * eps);
      double an = analytic[p][i];
      // The 1e-6 floor keeps coordinates whose true gradient sits at the
      // central-difference noise floor from dominating the report.
      double rel = std::fabs(an - fd) / (std::fabs(an) + std::fabs(fd) + 1e-6);
      worst = std::max(worst, rel);
    }
  }
  f();  // leave state evaluated at the base point
  return worst;
}

double finite_diff_check(Graph& g, NodeId loss,
                         std::span<Tensor* const> params, double eps) {
  for (Tensor* t : params) {
    t->ensure_grad();
    t->zero_grad();
  }
  g.refresh();
  g.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* t : params) analytic.push_back(t->g);
  auto f = [&]() {
    g.refresh();
    return g.scalar(loss);
  };
  return finite_diff_check(f, params, analytic, eps);
}

}  // namespace rarsq::ad
