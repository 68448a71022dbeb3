#pragma once

// Minimal define-by-run reverse-mode automatic differentiation over dense
// row-major f64 tensors. Every op records its inputs and a pullback closure
// on the result node; backward() replays the recorded graph in reverse
// topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fectek::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> pullback;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access is for parameter initialization and optimizer
  // updates; it must not be used on tensors that are inputs of a live graph.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const char* op_name() const;

  // Fresh leaf sharing no graph history.
  Tensor detach() const;

  void backward() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Graph recording is on by default. Inference paths that share frozen
// parameters across threads disable it with NoGradGuard (thread-local).
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

// Observes every piecewise-linear branch decision taken during forward
// passes on this thread (relu sign, max selection, clamp). The gradient
// checker uses it to detect finite-difference probes that straddle a kink.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  const std::vector<std::uint64_t>& decisions() const { return decisions_; }

 private:
  friend void record_branch(std::uint64_t);
  std::vector<std::uint64_t> decisions_;
  BranchRecorder* previous_;
};

void record_branch(std::uint64_t decision);

// ---- ops -------------------------------------------------------------------

// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);  // relu'(0) = 0
Tensor sigmoid(const Tensor& a);
Tensor log1p(const Tensor& a);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor reduce_mean(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);  // over all elements -> scalar

// Row-wise softmax over the last axis. When key_mask is non-empty it has the
// length of the last axis and masked-out (false) columns receive probability 0.
Tensor softmax_last(const Tensor& a, const std::vector<bool>& key_mask = {});

// -scores[target] + logsumexp(scores) for a 1-D score vector.
Tensor softmax_nll(const Tensor& scores, std::size_t target);

// Normalizes over the last axis, then applies gain * x + bias.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Rows of a 2-D table selected by index; gradients scatter-add back.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length);
Tensor concat_last(const std::vector<Tensor>& parts);

// Packs scalar tensors into a 1-D vector.
Tensor stack(const std::vector<Tensor>& scalars);

enum class SegmentReduce { kMax, kSum };

// For a 1-D tensor, out[g] = reduce(a[i] for i in groups[g]). Max routes the
// gradient to the first maximal element. Every group must be non-empty.
Tensor segment_reduce(const Tensor& a,
                      const std::vector<std::vector<std::size_t>>& groups,
                      SegmentReduce mode);

// Mean binary cross-entropy over positions where mask is true; probabilities
// are clamped to [clamp, 1 - clamp]. Returns 0 when no position is selected.
Tensor binary_cross_entropy(const Tensor& probs, const std::vector<double>& labels,
                            const std::vector<bool>& mask, double clamp = 1e-7);

// Reverse topological order of the graph rooted at `root`; each node appears
// once.
std::vector<detail::Node*> tape_order(const Tensor& root);

}  // namespace fectek::ag
