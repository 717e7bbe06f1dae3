#include "sct/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sct {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

const NodePtr& checked(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

// Creates the output node of an op. The backward closure is only kept when
// some input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   const char* op, std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  for (const Tensor* in : inputs) {
    if (in->defined() && in->requires_grad()) needs = true;
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) {
      if (in->defined()) node->inputs.push_back(in->node());
    }
    node->backward = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_multi(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                         const char* op, std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  node->is_leaf = false;
  bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

// Returns the gradient buffer of an input if it needs one, else nullptr.
double* grad_of(Node* n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return from_node(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  auto node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return from_node(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this, "numel")->data.size(); }

std::span<const double> Tensor::data() const { return checked(*this, "data")->data; }

std::span<double> Tensor::mutable_data() { return checked(*this, "mutable_data")->data; }

std::span<const double> Tensor::grad() const { return checked(*this, "grad")->grad; }

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->is_leaf; }

void Tensor::zero_grad() {
  if (defined()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const { sct::backward(*this); }

Tensor Tensor::detach() const { return from_data(shape(), std::vector<double>(data().begin(), data().end())); }

std::uint64_t Tensor::id() const { return checked(*this, "id")->id; }

const char* Tensor::op_name() const { return checked(*this, "op_name")->op; }

// ---- tape ------------------------------------------------------------------

ComputationTape::ComputationTape(const Tensor& root) : root_(root) {
  if (!root.defined()) throw ContractError("backward: undefined loss");
  std::vector<Node*> stack{root.node().get()};
  std::unordered_set<Node*> visited;
  std::vector<Node*> seen;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !visited.insert(n).second) continue;
    seen.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  // Creation ids are monotone, so sorting by id recovers the execution order.
  std::sort(seen.begin(), seen.end(), [](const Node* a, const Node* b) { return a->id < b->id; });
  nodes_ = std::move(seen);
}

std::vector<ComputationTape::Record> ComputationTape::records() const {
  std::vector<Record> out;
  for (const Node* n : nodes_) {
    Record r{n->id, n->op, {}};
    for (const auto& in : n->inputs) r.input_ids.push_back(in->id);
    out.push_back(std::move(r));
  }
  return out;
}

void ComputationTape::sweep() {
  Node* root = root_.node().get();
  for (Node* n : nodes_) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  }
  if (!root->requires_grad) return;
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
  }
  ComputationTape tape(loss);
  tape.sweep();
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  checked(a, "matmul");
  checked(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result({m, n}, std::move(out), {&a, &b}, "matmul", [an, bn, m, n, k](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(an)) gemm_nt(m, k, n, g, bn->data.data(), ga);
    if (double* gb = grad_of(bn)) gemm_tn(k, n, m, an->data.data(), g, gb);
  });
}

Tensor transpose(const Tensor& a) {
  checked(a, "transpose");
  if (a.rank() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  Node* an = a.node().get();
  return make_result({n, m}, std::move(out), {&a}, "transpose", [an, m, n](Node& self) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    }
  });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result(a.shape(), std::move(out), {&a, &b}, "add", [an, bn](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (double* gb = grad_of(bn))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result(a.shape(), std::move(out), {&a, &b}, "sub", [an, bn](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (double* gb = grad_of(bn))
      for (std::size_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result(a.shape(), std::move(out), {&a, &b}, "mul", [an, bn](Node& self) {
    const std::size_t n = self.grad.size();
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn->data[i];
    if (double* gb = grad_of(bn))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an->data[i];
  });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  checked(x, "affine");
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * v[i] + shift;
  Node* xn = x.node().get();
  return make_result(x.shape(), std::move(out), {&x}, "affine", [xn, scale](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += scale * self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  checked(x, "add_bias");
  checked(bias, "add_bias");
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                         shape_to_string(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  const auto v = x.data(), b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = v[r * n + j] + b[j];
  Node* xn = x.node().get();
  Node* bn = bias.node().get();
  return make_result(x.shape(), std::move(out), {&x, &bias}, "add_bias", [xn, bn, rows, n](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < rows * n; ++i) gx[i] += self.grad[i];
    if (double* gb = grad_of(bn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

namespace {

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* op, F forward, D derivative) {
  checked(x, op);
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(v[i]);
  Node* xn = x.node().get();
  return make_result(x.shape(), std::move(out), {&x}, op, [xn, derivative](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gx[i] += self.grad[i] * derivative(xn->data[i], self.data[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double inner = kGeluC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(inner);
        const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v < lo || v > hi) ? 0.0 : 1.0; });
}

// ---- normalization -------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  checked(x, "softmax");
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = v[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, v[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(v[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  Node* xn = x.node().get();
  return make_result(s, std::move(out), {&x}, "softmax", [xn, outer, inner, len](Node& self) {
    double* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += self.grad[base + l * inner] * self.data[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t i = base + l * inner;
          gx[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

namespace {

// Shared kernel for row-wise normalization: `rows` groups of `width` values,
// with the affine parameter index given by channel_of(col).
template <typename ChannelOf>
Tensor normalize_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps, std::size_t rows,
                      std::size_t width, const char* op, ChannelOf channel_of) {
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto v = x.data(), g = gain.data(), b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t i = r * width + j;
      const std::size_t c = channel_of(j);
      xhat[i] = (row[j] - mu) * is;
      out[i] = xhat[i] * g[c] + b[c];
    }
  }
  Node* xn = x.node().get();
  Node* gn = gain.node().get();
  Node* bn = bias.node().get();
  return make_result(
      x.shape(), std::move(out), {&x, &gain, &bias}, op,
      [xn, gn, bn, rows, width, channel_of, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        double* gx = grad_of(xn);
        double* gg = grad_of(gn);
        double* gb = grad_of(bn);
        std::vector<double> dxhat(width);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t i = r * width + j;
            const std::size_t c = channel_of(j);
            const double dy = self.grad[i];
            if (gg) gg[c] += dy * xhat[i];
            if (gb) gb[c] += dy;
            dxhat[j] = dy * gn->data[c];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[i];
          }
          if (!gx) continue;
          mean_d /= static_cast<double>(width);
          mean_dx /= static_cast<double>(width);
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t i = r * width + j;
            gx[i] += inv_std[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

}  // namespace

Tensor layer_normalize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  checked(x, "layer_normalize");
  checked(gain, "layer_normalize");
  checked(bias, "layer_normalize");
  if (x.rank() == 0 || gain.rank() != 1 || bias.shape() != gain.shape() || x.shape().back() != gain.dim(0)) {
    throw DimensionError("layer_normalize: gain/bias " + shape_to_string(gain.shape()) + " do not match " +
                         shape_to_string(x.shape()));
  }
  const std::size_t width = gain.dim(0);
  return normalize_rows(x, gain, bias, eps, x.numel() / width, width, "layer_normalize",
                        [](std::size_t j) { return j; });
}

Tensor feature_map_normalize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  checked(x, "feature_map_normalize");
  if (x.rank() < 2 || gain.rank() != 1 || bias.shape() != gain.shape() || x.dim(1) != gain.dim(0)) {
    throw DimensionError("feature_map_normalize: gain/bias " + shape_to_string(gain.shape()) + " do not match " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  const std::size_t spatial = width / x.dim(1);
  return normalize_rows(x, gain, bias, eps, rows, width, "feature_map_normalize",
                        [spatial](std::size_t j) { return j / spatial; });
}

// ---- convolution -----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Conv2dOptions options) {
  checked(input, "conv2d");
  checked(kernels, "conv2d");
  if (input.rank() == 3) {
    const Shape& s = input.shape();
    Tensor batched = reshape(input, {1, s[0], s[1], s[2]});
    Tensor out = conv2d(batched, kernels, bias, options);
    const Shape& o = out.shape();
    return reshape(out, {o[1], o[2], o[3]});
  }
  if (input.rank() != 4 || kernels.rank() != 4) {
    throw DimensionError("conv2d: expected input [n,c,h,w] and kernels [o,c,kh,kw], got " +
                         shape_to_string(input.shape()) + " and " + shape_to_string(kernels.shape()));
  }
  const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t co = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const std::size_t stride = options.stride, pad = options.padding;
  if (kernels.dim(1) != ci) {
    throw DimensionError("conv2d: kernels " + shape_to_string(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(1)) + " input channels, input " + shape_to_string(input.shape()) +
                         " has " + std::to_string(ci));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernels.shape()) + " larger than padded input " +
                         shape_to_string(input.shape()) + " (padding " + std::to_string(pad) + ")");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " + std::to_string(co) +
                         " output channels");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = ci * kh * kw;
  const std::size_t npix = oh * ow;

  // im2col buffers are kept for the backward pass.
  auto cols = std::make_shared<std::vector<double>>(n * patch * npix, 0.0);
  const auto x = input.data();
  for (std::size_t s = 0; s < n; ++s) {
    double* col = cols->data() + s * patch * npix;
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          double* dst = col + ((c * kh + ky) * kw + kx) * npix;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[oy * ow + ox] = x[((s * ci + c) * h + iy) * w + ix];
            }
          }
        }
  }
  std::vector<double> out(n * co * npix, 0.0);
  const double* k = kernels.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    double* o = out.data() + s * co * npix;
    if (bias.defined()) {
      for (std::size_t c = 0; c < co; ++c) std::fill(o + c * npix, o + (c + 1) * npix, bias.data()[c]);
    }
    gemm_nn(co, npix, patch, k, cols->data() + s * patch * npix, o);
  }

  Node* in_node = input.node().get();
  Node* k_node = kernels.node().get();
  Node* b_node = bias.defined() ? bias.node().get() : nullptr;
  return make_result(
      {n, co, oh, ow}, std::move(out), {&input, &kernels, &bias}, "conv2d",
      [=](Node& self) {
        double* gk = grad_of(k_node);
        double* gb = b_node ? grad_of(b_node) : nullptr;
        double* gi = grad_of(in_node);
        std::vector<double> dcol(gi ? patch * npix : 0);
        for (std::size_t s = 0; s < n; ++s) {
          const double* g = self.grad.data() + s * co * npix;
          if (gb)
            for (std::size_t c = 0; c < co; ++c)
              for (std::size_t p = 0; p < npix; ++p) gb[c] += g[c * npix + p];
          if (gk) gemm_nt(co, patch, npix, g, cols->data() + s * patch * npix, gk);
          if (!gi) continue;
          std::fill(dcol.begin(), dcol.end(), 0.0);
          gemm_tn(patch, npix, co, k_node->data.data(), g, dcol.data());
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const double* src = dcol.data() + ((c * kh + ky) * kw + kx) * npix;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    gi[((s * ci + c) * h + iy) * w + ix] += src[oy * ow + ox];
                  }
                }
              }
        }
      });
}

Tensor global_average_pool(const Tensor& x) {
  checked(x, "global_average_pool");
  if (x.rank() != 4) throw DimensionError("global_average_pool: expected [n,c,h,w], got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c, 0.0);
  const auto v = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < area; ++p) acc += v[i * area + p];
    out[i] = acc / static_cast<double>(area);
  }
  Node* xn = x.node().get();
  return make_result({n, c}, std::move(out), {&x}, "global_average_pool", [xn, n, c, area](Node& self) {
    if (double* gx = grad_of(xn)) {
      const double inv = 1.0 / static_cast<double>(area);
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t p = 0; p < area; ++p) gx[i * area + p] += self.grad[i] * inv;
    }
  });
}

// ---- shape manipulation ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  checked(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  Node* xn = x.node().get();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {&x}, "reshape",
                     [xn](Node& self) {
                       if (double* gx = grad_of(xn))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  checked(x, "slice_rows");
  if (x.rank() == 0 || begin + count > x.dim(0) || count == 0) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_to_string(x.shape()));
  }
  Shape shape = x.shape();
  const std::size_t stride = x.numel() / shape[0];
  shape[0] = count;
  const auto v = x.data();
  std::vector<double> out(v.begin() + begin * stride, v.begin() + (begin + count) * stride);
  Node* xn = x.node().get();
  return make_result(std::move(shape), std::move(out), {&x}, "slice_rows", [xn, begin, stride](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * stride + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  checked(x, "slice_cols");
  if (x.rank() != 2 || begin + count > x.dim(1) || count == 0) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * count);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = v[i * n + begin + j];
  Node* xn = x.node().get();
  return make_result({m, count}, std::move(out), {&x}, "slice_cols", [xn, m, n, begin, count](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  checked(x, "gather_rows");
  if (x.rank() == 0 || rows.empty()) throw DimensionError("gather_rows: nothing to gather from " + shape_to_string(x.shape()));
  const std::size_t stride = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<double> out;
  out.reserve(rows.size() * stride);
  const auto v = x.data();
  for (std::size_t r : rows) {
    if (r >= x.dim(0)) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_to_string(x.shape()));
    out.insert(out.end(), v.begin() + r * stride, v.begin() + (r + 1) * stride);
  }
  Node* xn = x.node().get();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {&x}, "gather_rows", [xn, stride, idx](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < stride; ++j) gx[idx[k] * stride + j] += self.grad[k * stride + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  const std::size_t stride = parts[0].numel() / shape[0];
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    Shape tail_a(p.shape().begin() + 1, p.shape().end());
    Shape tail_b(shape.begin() + 1, shape.end());
    if (p.rank() != shape.size() || tail_a != tail_b) {
      throw DimensionError("concat_rows: " + shape_to_string(p.shape()) + " incompatible with " + shape_to_string(shape));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  std::vector<Node*> nodes;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node().get());
    sizes.push_back(p.numel());
  }
  (void)stride;
  return make_result_multi(std::move(shape), std::move(out), parts, "concat_rows", [nodes, sizes](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (double* g = grad_of(nodes[k]))
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[offset + i];
      offset += sizes[k];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw DimensionError("concat_cols: " + shape_to_string(p.shape()) + " incompatible with " + std::to_string(m) + " rows");
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + col + j] = v[i * widths[k] + j];
    col += widths[k];
  }
  std::vector<Node*> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node().get());
  return make_result_multi({m, total}, std::move(out), parts, "concat_cols", [nodes, widths, m, total](Node& self) {
    std::size_t col0 = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (double* g = grad_of(nodes[k]))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + col0 + j];
      col0 += widths[k];
    }
  });
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  checked(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Node* xn = x.node().get();
  return make_result({}, {acc}, {&x}, "sum", [xn](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return affine(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_rows(const Tensor& x) {
  checked(x, "sum_rows");
  if (x.rank() != 2) throw DimensionError("sum_rows: expected 2-D, got " + shape_to_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(n, 0.0);
  const auto v = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += v[i * n + j];
  Node* xn = x.node().get();
  return make_result({n}, std::move(out), {&x}, "sum_rows", [xn, m, n](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j];
  });
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  checked(x, "weighted_sum");
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " + shape_to_string(x.shape()));
  }
  double acc = 0.0;
  const auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) acc += weights[i] * v[i];
  Node* xn = x.node().get();
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({}, {acc}, {&x}, "weighted_sum", [xn, w](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += w[i] * self.grad[0];
  });
}

Tensor max_all(const Tensor& x) {
  checked(x, "max_all");
  const auto v = x.data();
  if (v.empty()) throw DimensionError("max_all: empty tensor");
  const std::size_t arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  Node* xn = x.node().get();
  return make_result({}, {v[arg]}, {&x}, "max_all", [xn, arg](Node& self) {
    if (double* gx = grad_of(xn)) gx[arg] += self.grad[0];
  });
}

Tensor prod_all(const Tensor& x) {
  checked(x, "prod_all");
  const auto v = x.data();
  const std::size_t n = v.size();
  // prefix[i] = Π v[<i], suffix[i] = Π v[>i]; the partial for i is their
  // product, which stays exact when some factor is zero.
  std::vector<double> prefix(n + 1, 1.0), suffix(n + 1, 1.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] * v[i];
  for (std::size_t i = n; i-- > 0;) suffix[i] = suffix[i + 1] * v[i];
  Node* xn = x.node().get();
  return make_result({}, {prefix[n]}, {&x}, "prod_all", [xn, prefix, suffix, n](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0] * prefix[i] * suffix[i + 1];
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  checked(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? scale : 0.0;
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * mask[i];
  Node* xn = x.node().get();
  return make_result(x.shape(), std::move(out), {&x}, "dropout", [xn, mask = std::move(mask)](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

}  // namespace sct
