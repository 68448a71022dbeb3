#include "fectek/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "fectek/error.hpp"

namespace fectek::ag {

using detail::Node;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

thread_local bool tls_grad_enabled = true;
thread_local BranchRecorder* tls_recorder = nullptr;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data,
                               bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds an op result. The pullback is attached only when some input
// participates in differentiation and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> pullback) {
  bool needs_grad = false;
  if (tls_grad_enabled) {
    for (const Tensor* in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  auto node = new_node(std::move(shape), std::move(data), needs_grad);
  node->op = op;
  if (needs_grad) {
    for (const Tensor* in : inputs) node->parents.push_back(in->node());
    node->pullback = std::move(pullback);
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> pullback) {
  bool needs_grad = false;
  if (tls_grad_enabled) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  auto node = new_node(std::move(shape), std::move(data), needs_grad);
  node->op = op;
  if (needs_grad) {
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    node->pullback = std::move(pullback);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
}

// ---- broadcasting ----------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;  // per output axis; 0 where broadcast
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ai = i + a.size() >= rank ? i + a.size() - rank : SIZE_MAX;
    const std::size_t bi = i + b.size() >= rank ? i + b.size() - rank : SIZE_MAX;
    const std::size_t da = ai == SIZE_MAX ? 1 : a[ai];
    const std::size_t db = bi == SIZE_MAX ? 1 : b[bi];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                           shape_str(b) + " are not broadcast-compatible");
    }
    bc.out[i] = std::max(da, db);
    if (ai != SIZE_MAX && da != 1) bc.stride_a[i] = sa[ai];
    if (bi != SIZE_MAX && db != 1) bc.stride_b[i] = sb[bi];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t total = numel(bc.out);
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      ia += bc.stride_a[axis];
      ib += bc.stride_b[axis];
      if (counter[axis] < bc.out[axis]) break;
      ia -= bc.stride_a[axis] * counter[axis];
      ib -= bc.stride_b[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  auto bc = std::make_shared<Broadcast>(broadcast_shapes(a.shape(), b.shape(), op));
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(numel(bc->out));
  for_each_broadcast(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::kAdd: out[o] = da[ia] + db[ib]; break;
      case BinaryKind::kSub: out[o] = da[ia] - db[ib]; break;
      case BinaryKind::kMul: out[o] = da[ia] * db[ib]; break;
    }
  });
  return make_result(bc->out, std::move(out), op, {&a, &b}, [bc, kind](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    double* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    for_each_broadcast(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += g[o];
          break;
        case BinaryKind::kSub:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] -= g[o];
          break;
        case BinaryKind::kMul:
          if (ga) ga[ia] += g[o] * pb.data[ib];
          if (gb) gb[ib] += g[o] * pa.data[ia];
          break;
      }
    });
  });
}

// Elementwise unary op with derivative expressed from (input, output).
template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, const char* op, Forward f, Derivative df) {
  require_defined(a, op);
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i]);
  return make_result(a.shape(), std::move(out), op, {&a}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += self.grad[i] * df(p.data[i], self.data[i]);
    }
  });
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// da[m x k] += dc[m x n] * b[k x n]^T
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// db[k x n] += a[m x k]^T * dc[m x n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
    }
  }
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(ag::numel(shape), value);
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::detach() const {
  return Tensor(new_node(shape(), node_->data, false));
}

std::vector<Node*> tape_order(const Tensor& root) {
  std::vector<Node*> post;
  if (!root.defined() || !root.requires_grad()) return post;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw DimensionError("backward() requires a scalar loss, got shape " +
                         shape_str(shape()));
  }
  if (!requires_grad()) return;
  node_->ensure_grad()[0] += 1.0;
  for (Node* node : tape_order(*this)) {
    if (node->pullback && !node->grad.empty()) node->pullback(*node);
  }
}

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

BranchRecorder::BranchRecorder() : previous_(tls_recorder) { tls_recorder = this; }
BranchRecorder::~BranchRecorder() { tls_recorder = previous_; }

void record_branch(std::uint64_t decision) {
  if (tls_recorder) tls_recorder->decisions_.push_back(decision);
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                         shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Broadcast bc;
  try {
    bc = broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(sa) + " and " +
                         shape_str(sb) + " are not broadcast-compatible");
  }
  // Batch offsets, in matrices.
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>();
  pairs->reserve(numel(bc.out));
  for_each_broadcast(bc, [&](std::size_t, std::size_t ia, std::size_t ib) {
    pairs->emplace_back(ia, ib);
  });
  Shape out_shape = bc.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(numel(out_shape), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < pairs->size(); ++t) {
    gemm_nn(pa + (*pairs)[t].first * m * k, pb + (*pairs)[t].second * k * n,
            out.data() + t * m * n, m, k, n);
  }
  return make_result(std::move(out_shape), std::move(out), "matmul", {&a, &b},
                     [pairs, m, k, n](Node& self) {
                       Node& na = *self.parents[0];
                       Node& nb = *self.parents[1];
                       for (std::size_t t = 0; t < pairs->size(); ++t) {
                         const double* g = self.grad.data() + t * m * n;
                         const auto [ia, ib] = (*pairs)[t];
                         if (na.requires_grad) {
                           gemm_nt(g, nb.data.data() + ib * k * n,
                                   na.ensure_grad().data() + ia * m * k, m, k, n);
                         }
                         if (nb.requires_grad) {
                           gemm_tn(na.data.data() + ia * m * k, g,
                                   nb.ensure_grad().data() + ib * k * n, m, k, n);
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& a) {
  const bool recording = tls_recorder != nullptr;
  return unary(
      a, "relu",
      [recording](double x) {
        if (recording) record_branch(x > 0.0);
        return x > 0.0 ? x : 0.0;
      },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log1p(const Tensor& a) {
  return unary(
      a, "log1p", [](double x) { return std::log1p(x); },
      [](double x, double) { return 1.0 / (1.0 + x); });
}

Tensor transpose_last2(const Tensor& a) {
  require_defined(a, "transpose_last2");
  const Shape& s = a.shape();
  if (s.size() < 2) {
    throw DimensionError("transpose_last2: rank < 2 for shape " + shape_str(s));
  }
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s[s.size() - 1];
  const std::size_t batches = numel(s) / std::max<std::size_t>(r * c, 1);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t t = 0; t < batches; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = da[t * r * c + i * c + j];
    }
  }
  return make_result(std::move(out_shape), std::move(out), "transpose", {&a},
                     [batches, r, c](Node& self) {
                       auto& gp = self.parents[0]->ensure_grad();
                       for (std::size_t t = 0; t < batches; ++t) {
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             gp[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
                           }
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {&a}, [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor reduce_mean(const Tensor& a, std::size_t axis) {
  require_defined(a, "reduce_mean");
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw DimensionError("reduce_mean: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  const std::size_t n = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  if (n == 0) throw DimensionError("reduce_mean: empty axis in " + shape_str(s));
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  const auto da = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* row = da.data() + (o * n + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += row[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= inv;
  return make_result(std::move(out_shape), std::move(out), "reduce_mean", {&a},
                     [outer, n, inner, inv](Node& self) {
                       auto& gp = self.parents[0]->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < n; ++j) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             gp[(o * n + j) * inner + i] += self.grad[o * inner + i] * inv;
                           }
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({}, {total}, "sum", {&a}, [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (double& g : gp) g += self.grad[0];
  });
}

Tensor softmax_last(const Tensor& a, const std::vector<bool>& key_mask) {
  require_defined(a, "softmax_last");
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("softmax_last: scalar input");
  const std::size_t n = s.back();
  if (!key_mask.empty() && key_mask.size() != n) {
    throw DimensionError("softmax_last: mask length " + std::to_string(key_mask.size()) +
                         " does not match last axis of " + shape_str(s));
  }
  const std::size_t rows = n ? a.numel() / n : 0;
  const auto da = a.data();
  std::vector<double> out(da.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = da.data() + r * n;
    double* y = out.data() + r * n;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (key_mask.empty() || key_mask[j]) hi = std::max(hi, x[j]);
    }
    if (!std::isfinite(hi)) continue;  // fully masked row stays zero
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (key_mask.empty() || key_mask[j]) {
        y[j] = std::exp(x[j] - hi);
        z += y[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_result(s, std::move(out), "softmax", {&a}, [rows, n](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor softmax_nll(const Tensor& scores, std::size_t target) {
  require_defined(scores, "softmax_nll");
  if (scores.rank() != 1) {
    throw DimensionError("softmax_nll: expected 1-D scores, got " +
                         shape_str(scores.shape()));
  }
  const auto s = scores.data();
  if (s.empty()) throw DimensionError("softmax_nll: empty score vector");
  if (target >= s.size()) {
    throw DimensionError("softmax_nll: target " + std::to_string(target) +
                         " out of range for " + std::to_string(s.size()) + " scores");
  }
  const auto top = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
  const double hi = s[top];
  // logsumexp = hi + log1p(sum of the non-maximal terms), accurate when the
  // maximum dominates.
  double rest = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != top) rest += std::exp(s[i] - hi);
  }
  const double log_z = std::log1p(rest);
  auto probs = std::make_shared<std::vector<double>>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) (*probs)[i] = std::exp(s[i] - hi - log_z);
  const double loss = std::max(0.0, (hi - s[target]) + log_z);
  return make_result({}, {loss}, "softmax_nll", {&scores}, [probs, target](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += g * ((*probs)[i] - (i == target ? 1.0 : 0.0));
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(a, "layer_norm");
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = s.back();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias shapes " + shape_str(gain.shape()) +
                         ", " + shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(s));
  }
  const std::size_t rows = n ? a.numel() / n : 0;
  const auto x = a.data();
  const auto gm = gain.data();
  const auto bs = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gm[j] * h + bs[j];
    }
  }
  return make_result(s, std::move(out), "layer_norm", {&a, &gain, &bias},
                     [xhat, rstd, rows, n](Node& self) {
                       Node& na = *self.parents[0];
                       Node& ng = *self.parents[1];
                       Node& nb = *self.parents[2];
                       const auto& g = self.grad;
                       if (ng.requires_grad || nb.requires_grad) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < n; ++j) {
                             if (ng.requires_grad) {
                               ng.ensure_grad()[j] += g[r * n + j] * (*xhat)[r * n + j];
                             }
                             if (nb.requires_grad) nb.ensure_grad()[j] += g[r * n + j];
                           }
                         }
                       }
                       if (!na.requires_grad) return;
                       auto& ga = na.ensure_grad();
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_d = 0.0;
                         double mean_dx = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           const double d = g[r * n + j] * ng.data[j];
                           mean_d += d;
                           mean_dx += d * (*xhat)[r * n + j];
                         }
                         mean_d *= inv_n;
                         mean_dx *= inv_n;
                         for (std::size_t j = 0; j < n; ++j) {
                           const double d = g[r * n + j] * ng.data[j];
                           ga[r * n + j] +=
                               (*rstd)[r] * (d - mean_d - (*xhat)[r * n + j] * mean_dx);
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) {
    throw DimensionError("gather_rows: expected 2-D table, got " +
                         shape_str(table.shape()));
  }
  const std::size_t height = table.dim(0);
  const std::size_t width = table.dim(1);
  auto index = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  const auto src = table.data();
  std::vector<double> out(index->size() * width);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t r = (*index)[i];
    if (r >= height) {
      throw DimensionError("gather_rows: row " + std::to_string(r) +
                           " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(src.begin() + r * width, width, out.begin() + i * width);
  }
  return make_result({index->size(), width}, std::move(out), "gather_rows", {&table},
                     [index, width](Node& self) {
                       auto& gp = self.parents[0]->ensure_grad();
                       for (std::size_t i = 0; i < index->size(); ++i) {
                         double* dst = gp.data() + (*index)[i] * width;
                         const double* g = self.grad.data() + i * width;
                         for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length) {
  require_defined(a, "slice_last");
  const Shape& s = a.shape();
  if (s.empty() || start + length > s.back()) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for " +
                         shape_str(s));
  }
  const std::size_t n = s.back();
  const std::size_t rows = n ? a.numel() / n : 0;
  Shape out_shape = s;
  out_shape.back() = length;
  const auto da = a.data();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(da.begin() + r * n + start, length, out.begin() + r * length);
  }
  return make_result(std::move(out_shape), std::move(out), "slice_last", {&a},
                     [rows, n, start, length](Node& self) {
                       auto& gp = self.parents[0]->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < length; ++j) {
                           gp[r * n + start + j] += self.grad[r * length + j];
                         }
                       }
                     });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.empty()) throw DimensionError("concat_last: scalar input");
  const Shape lead(s0.begin(), s0.end() - 1);
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw DimensionError("concat_last: shape " + shape_str(s) +
                           " incompatible with " + shape_str(s0));
    }
    widths->push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto dp = parts[k].data();
    const std::size_t w = (*widths)[k];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(dp.begin() + r * w, w, out.begin() + r * total + offset);
    }
    offset += w;
  }
  return make_result(std::move(out_shape), std::move(out), "concat_last", parts,
                     [widths, rows, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths->size(); ++k) {
                         Node& p = *self.parents[k];
                         const std::size_t w = (*widths)[k];
                         if (p.requires_grad) {
                           auto& gp = p.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < w; ++j) {
                               gp[r * w + j] += self.grad[r * total + off + j];
                             }
                           }
                         }
                         off += w;
                       }
                     });
}

Tensor stack(const std::vector<Tensor>& scalars) {
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const Tensor& t : scalars) out.push_back(t.item());
  return make_result({scalars.size()}, std::move(out), "stack", scalars, [](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) p.ensure_grad()[0] += self.grad[i];
    }
  });
}

Tensor segment_reduce(const Tensor& a, const std::vector<std::vector<std::size_t>>& groups,
                      SegmentReduce mode) {
  require_defined(a, "segment_reduce");
  if (a.rank() != 1) {
    throw DimensionError("segment_reduce: expected 1-D input, got " +
                         shape_str(a.shape()));
  }
  const auto da = a.data();
  // For max, each group routes its gradient to a single chosen position.
  auto routes = std::make_shared<std::vector<std::vector<std::size_t>>>();
  routes->reserve(groups.size());
  std::vector<double> out(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& members = groups[g];
    if (members.empty()) throw DimensionError("segment_reduce: empty group");
    for (std::size_t i : members) {
      if (i >= da.size()) {
        throw DimensionError("segment_reduce: index " + std::to_string(i) +
                             " out of range for length " + std::to_string(da.size()));
      }
    }
    if (mode == SegmentReduce::kMax) {
      std::size_t best = members[0];
      for (std::size_t i : members) {
        if (da[i] > da[best]) best = i;
      }
      if (members.size() > 1) record_branch(best);
      out[g] = da[best];
      routes->push_back({best});
    } else {
      double total = 0.0;
      for (std::size_t i : members) total += da[i];
      out[g] = total;
      routes->push_back(members);
    }
  }
  return make_result({groups.size()}, std::move(out), "segment_reduce", {&a},
                     [routes](Node& self) {
                       auto& gp = self.parents[0]->ensure_grad();
                       for (std::size_t g = 0; g < routes->size(); ++g) {
                         for (std::size_t i : (*routes)[g]) gp[i] += self.grad[g];
                       }
                     });
}

Tensor binary_cross_entropy(const Tensor& probs, const std::vector<double>& labels,
                            const std::vector<bool>& mask, double clamp) {
  require_defined(probs, "binary_cross_entropy");
  const auto p = probs.data();
  if (probs.rank() != 1 || labels.size() != p.size() || mask.size() != p.size()) {
    throw DimensionError("binary_cross_entropy: probs " + shape_str(probs.shape()) +
                         " with " + std::to_string(labels.size()) + " labels and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) return Tensor::scalar(0.0);
  const double lo = clamp;
  const double hi = 1.0 - clamp;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!mask[i]) continue;
    const double q = std::clamp(p[i], lo, hi);
    if (q != p[i]) record_branch(i);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  const double inv = 1.0 / static_cast<double>(count);
  auto saved_labels = std::make_shared<std::vector<double>>(labels);
  auto saved_mask = std::make_shared<std::vector<bool>>(mask);
  return make_result({}, {total * inv}, "bce", {&probs},
                     [saved_labels, saved_mask, inv, lo, hi](Node& self) {
                       Node& np = *self.parents[0];
                       auto& gp = np.ensure_grad();
                       for (std::size_t i = 0; i < gp.size(); ++i) {
                         const double q = np.data[i];
                         if (!(*saved_mask)[i] || q < lo || q > hi) continue;
                         const double y = (*saved_labels)[i];
                         gp[i] += self.grad[0] * inv * (-(y / q) + (1.0 - y) / (1.0 - q));
                       }
                     });
}

}  // namespace fectek::ag
