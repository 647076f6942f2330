#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense value node. Values are single precision; scalar reductions keep a
// double-precision mirror in scalar_f64 so loss values can be read without
// the f32 quantization (finite-difference oracles depend on this).
struct TensorNode {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool produced = false;  // output of a recorded operation
  double scalar_f64 = std::numeric_limits<double>::quiet_NaN();
};

// Shared handle with value semantics; copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value);
  // Normal(0, stddev) entries drawn one by one from rng.
  static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->values.size()); }
  bool is_scalar() const { return numel() == 1 && n_->shape.size() <= 1; }
  bool is_matrix() const { return n_->shape.size() == 2; }
  bool is_vector() const { return n_->shape.size() == 1; }
  int64_t rows() const;
  int64_t cols() const;

  // Tensors are shared handles, so mutating accessors are const: they change
  // the referenced node, not the handle.
  std::span<const float> values() const { return n_->values; }
  std::span<float> values_mut() const { return n_->values; }
  float at(int64_t r, int64_t c) const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) const { n_->requires_grad = v; }
  bool produced() const { return n_->produced; }
  void mark_produced() const { n_->produced = true; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const float> grad() const { return n_->grad; }
  // Allocates a zeroed gradient buffer on first use.
  std::span<float> grad_mut() const;
  void zero_grad() const;
  void drop_grad() const { n_->grad.clear(); }

  float item() const;
  // Double mirror for scalars when a reduction provided one.
  double item_f64() const;
  void set_scalar_f64(double v) const { n_->scalar_f64 = v; }

  // Deep copy of values/shape; grad and trace state are not copied.
  Tensor clone() const;

  TensorNode* node() const { return n_.get(); }
  bool same_node(const Tensor& other) const { return n_.get() == other.n_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
  std::shared_ptr<TensorNode> n_;
};

// One recorded operation: inputs, output, gradient rule, and a forward
// closure that recomputes output values from input values in place.
struct TapeNode {
  const char* op = "";
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
  std::function<void()> forward;
};

// Topologically ordered operation trace for one forward pass. Nodes are
// appended in creation order, so every node's inputs precede it.
class Tape {
 public:
  void record(TapeNode node);

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // node reached from the root; repeated calls keep accumulating.
  void backward(const Tensor& root);

  // Re-runs every recorded forward closure in order. With unchanged leaf
  // values this reproduces all outputs bit-exactly.
  void replay();

  size_t size() const { return nodes_.size(); }
  int64_t count_op(std::string_view op) const;
  bool has_op(std::string_view op) const { return count_op(op) > 0; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

// Makes a tape the recording target for operations on this thread.
// Operations run without recording when no scope is active.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Accumulates g into t's gradient unless t is a leaf that does not require
// grad. Shared by all backward rules.
void accumulate_grad(const Tensor& t, std::span<const float> g);

}  // namespace moelab
