#pragma once

#include <random>
#include <string>
#include <vector>

#include "sct/tensor.hpp"

namespace sct::nn {

struct NamedParameter {
  std::string name;
  Tensor value;
};

using ParameterList = std::vector<NamedParameter>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
Tensor uniform_parameter(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor operator()(const Tensor& x) const { return layer_normalize(x, gain, bias, eps); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Self-attention over an unordered token set [T, E]; no mask, no positions.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t embed_dim, std::size_t n_heads, std::mt19937_64& rng);

  // When `weights` is non-null it receives one [T, T] attention map per head.
  Tensor operator()(const Tensor& tokens, std::vector<Tensor>* weights = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t heads() const { return n_heads_; }

 private:
  std::size_t embed_dim_ = 0;
  std::size_t n_heads_ = 1;
  Linear query_, key_, value_, output_;
};

struct DropoutContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

Tensor maybe_dropout(const Tensor& x, double p, const DropoutContext& ctx);

// Pre-normalization encoder layer: x + drop(MHA(LN(x))), then x + drop(FF(LN(x))).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::size_t embed_dim, std::size_t n_heads, std::size_t ff_dim, double dropout,
                   std::mt19937_64& rng);

  Tensor operator()(const Tensor& tokens, const DropoutContext& ctx) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  LayerNorm norm_attention_, norm_feedforward_;
  MultiHeadAttention attention_;
  Linear ff_in_, ff_out_;
  double dropout_ = 0.0;
};

struct Conv {
  Tensor kernels;  // [out, in, k, k]
  Tensor bias;     // [out]
  Conv2dOptions options;

  Conv() = default;
  Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const { return conv2d(x, kernels, bias, options); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct MapNorm {
  Tensor gain;
  Tensor bias;

  MapNorm() = default;
  explicit MapNorm(std::size_t channels);

  Tensor operator()(const Tensor& x) const { return feature_map_normalize(x, gain, bias, 1e-5); }
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Two 3x3 convolutions with a skip connection; an optional strided 1x1
// projection on the skip when the block changes width or resolution.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Conv conv1_, conv2_;
  MapNorm norm1_, norm2_;
  bool has_projection_ = false;
  Conv projection_;
  MapNorm projection_norm_;
};

// Single-channel 2-D residual CNN mapping [n, 1, H, W] slices to [n, E].
class SliceEncoder {
 public:
  SliceEncoder() = default;
  SliceEncoder(const std::vector<std::size_t>& channel_plan, std::size_t blocks_per_stage, std::size_t embed_dim,
               std::mt19937_64& rng);

  Tensor operator()(const Tensor& slices) const;
  void collect(const std::string& prefix, ParameterList& out) const;

 private:
  Conv stem_;
  MapNorm stem_norm_;
  std::vector<ResidualBlock> blocks_;
  Linear projection_;
};

}  // namespace sct::nn
