#include "moelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moelab {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.n_->values.begin(), t.n_->values.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw DimensionError("data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& v : t.n_->values) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

int64_t Tensor::rows() const {
  if (!is_matrix()) throw DimensionError("rows() on non-matrix shape " + shape_str(n_->shape));
  return n_->shape[0];
}

int64_t Tensor::cols() const {
  if (!is_matrix()) throw DimensionError("cols() on non-matrix shape " + shape_str(n_->shape));
  return n_->shape[1];
}

float Tensor::at(int64_t r, int64_t c) const {
  if (r < 0 || r >= rows() || c < 0 || c >= cols()) {
    throw IndexError("element (" + std::to_string(r) + ", " + std::to_string(c) +
                     ") outside shape " + shape_str(n_->shape));
  }
  return n_->values[static_cast<size_t>(r * cols() + c)];
}

std::span<float> Tensor::grad_mut() const {
  if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0f);
  return n_->grad;
}

void Tensor::zero_grad() const {
  std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on shape " + shape_str(n_->shape));
  return n_->values[0];
}

double Tensor::item_f64() const {
  if (numel() != 1) throw DimensionError("item_f64() on shape " + shape_str(n_->shape));
  if (!std::isnan(n_->scalar_f64)) return n_->scalar_f64;
  return static_cast<double>(n_->values[0]);
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = n_->shape;
  n->values = n_->values;
  return Tensor(std::move(n));
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward root must be a defined scalar");
  }
  if (!root.produced()) {
    throw ContractError("backward root was not produced by a recorded operation");
  }
  // Each sweep starts clean on this tape's intermediates; only leaf
  // gradients accumulate across calls.
  for (auto& node : nodes_) node.output.zero_grad();
  root.grad_mut()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad() && it->backward) it->backward();
  }
}

void Tape::replay() {
  for (auto& node : nodes_) {
    if (node.forward) node.forward();
  }
}

int64_t Tape::count_op(std::string_view op) const {
  int64_t c = 0;
  for (const auto& node : nodes_) {
    if (op == node.op) ++c;
  }
  return c;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void accumulate_grad(const Tensor& t, std::span<const float> g) {
  if (!t.requires_grad() && !t.produced()) return;
  auto dst = t.grad_mut();
  if (dst.size() != g.size()) {
    throw ContractError("gradient size mismatch: " + std::to_string(dst.size()) +
                        " vs " + std::to_string(g.size()));
  }
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace moelab
