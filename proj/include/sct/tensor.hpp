#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sct/errors.hpp"

namespace sct {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major f64 tensor. Copies share the underlying node, so a Tensor
// behaves like a handle into the computation graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view for leaves (parameters, inputs). Mutating an interior node
  // after it has been consumed invalidates the recorded graph.
  std::span<double> mutable_data();
  std::span<const double> grad() const;
  bool has_grad() const;
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  void zero_grad();

  // Reverse sweep from this scalar. Leaf gradients accumulate across calls;
  // interior gradients are reset at the start of each sweep.
  void backward() const;

  // Same values, no graph history.
  Tensor detach() const;

  std::uint64_t id() const;
  const char* op_name() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of every differentiable operation reachable from a root.
// Operations are stored in creation order, which is a topological order
// because an op can only consume tensors that already exist.
class ComputationTape {
 public:
  struct Record {
    std::uint64_t id;
    std::string op;
    std::vector<std::uint64_t> input_ids;
  };

  explicit ComputationTape(const Tensor& root);

  std::vector<Record> records() const;
  std::size_t size() const { return nodes_.size(); }

  // Visits each recorded operation exactly once, last to first.
  void sweep();

 private:
  Tensor root_;
  std::vector<detail::Node*> nodes_;
};

void backward(const Tensor& loss);

// ---- differentiable operations --------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// y = scale * x + shift, elementwise.
Tensor affine(const Tensor& x, double scale, double shift = 0.0);
// x[..., n] + bias[n] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[m, k] * w[k, n] + bias[n].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_normalize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// Per-sample normalization of x[n, c, ...] over every non-leading axis, then a
// per-channel affine with gain[c], bias[c].
Tensor feature_map_normalize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Cross-correlation. input [n, c_in, h, w] or [c_in, h, w]; kernels
// [c_out, c_in, kh, kw]; bias [c_out] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Conv2dOptions options = {});
// [n, c, h, w] -> [n, c]
Tensor global_average_pool(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Leading-axis slice [begin, begin + count).
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
// Column slice of a 2-D tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [m, n] -> [n]
Tensor sum_rows(const Tensor& x);
// Σ weights[i] * x[i] with constant weights; masked terms contribute exact zeros.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);
Tensor max_all(const Tensor& x);
Tensor prod_all(const Tensor& x);

// Inverted dropout: kept activations are scaled by 1 / (1 - p).
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace sct
