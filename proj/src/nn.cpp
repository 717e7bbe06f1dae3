#include "sct/nn.hpp"

#include <cmath>

namespace sct::nn {

Tensor uniform_parameter(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(values), true);
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(uniform_parameter({in, out}, in, rng)), bias(uniform_parameter({out}, in, rng)) {}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t width) : gain(Tensor::full({width}, 1.0, true)), bias(Tensor::zeros({width}, true)) {}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

MultiHeadAttention::MultiHeadAttention(std::size_t embed_dim, std::size_t n_heads, std::mt19937_64& rng)
    : embed_dim_(embed_dim), n_heads_(n_heads) {
  if (n_heads == 0 || embed_dim % n_heads != 0) {
    throw ConfigError("multi_head_attention: embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  query_ = Linear(embed_dim, embed_dim, rng);
  key_ = Linear(embed_dim, embed_dim, rng);
  value_ = Linear(embed_dim, embed_dim, rng);
  output_ = Linear(embed_dim, embed_dim, rng);
}

Tensor MultiHeadAttention::operator()(const Tensor& tokens, std::vector<Tensor>* weights) const {
  if (tokens.rank() != 2 || tokens.dim(1) != embed_dim_) {
    throw DimensionError("multi_head_attention: expected [T, " + std::to_string(embed_dim_) + "], got " +
                         shape_to_string(tokens.shape()));
  }
  const std::size_t head_dim = embed_dim_ / n_heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor q = query_(tokens);
  const Tensor k = key_(tokens);
  const Tensor v = value_(tokens);
  std::vector<Tensor> heads;
  heads.reserve(n_heads_);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Tensor qh = slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = slice_cols(v, h * head_dim, head_dim);
    const Tensor attn = softmax(affine(matmul(qh, transpose(kh)), scale), 1);
    if (weights) weights->push_back(attn);
    heads.push_back(matmul(attn, vh));
  }
  const Tensor merged = n_heads_ == 1 ? heads.front() : concat_cols(heads);
  return output_(merged);
}

void MultiHeadAttention::collect(const std::string& prefix, ParameterList& out) const {
  query_.collect(prefix + ".query", out);
  key_.collect(prefix + ".key", out);
  value_.collect(prefix + ".value", out);
  output_.collect(prefix + ".output", out);
}

Tensor maybe_dropout(const Tensor& x, double p, const DropoutContext& ctx) {
  if (!ctx.training || p == 0.0) return x;
  if (!ctx.rng) throw ContractError("dropout: training mode requires an rng");
  return dropout(x, p, *ctx.rng);
}

TransformerLayer::TransformerLayer(std::size_t embed_dim, std::size_t n_heads, std::size_t ff_dim, double dropout,
                                   std::mt19937_64& rng)
    : norm_attention_(embed_dim),
      norm_feedforward_(embed_dim),
      attention_(embed_dim, n_heads, rng),
      ff_in_(embed_dim, ff_dim, rng),
      ff_out_(ff_dim, embed_dim, rng),
      dropout_(dropout) {}

Tensor TransformerLayer::operator()(const Tensor& tokens, const DropoutContext& ctx) const {
  Tensor x = add(tokens, maybe_dropout(attention_(norm_attention_(tokens)), dropout_, ctx));
  const Tensor ff = ff_out_(gelu(ff_in_(norm_feedforward_(x))));
  return add(x, maybe_dropout(ff, dropout_, ctx));
}

void TransformerLayer::collect(const std::string& prefix, ParameterList& out) const {
  norm_attention_.collect(prefix + ".norm_attention", out);
  attention_.collect(prefix + ".attention", out);
  norm_feedforward_.collect(prefix + ".norm_feedforward", out);
  ff_in_.collect(prefix + ".ff_in", out);
  ff_out_.collect(prefix + ".ff_out", out);
}

Conv::Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding,
           std::mt19937_64& rng)
    : kernels(uniform_parameter({out, in, k, k}, in * k * k, rng)),
      bias(uniform_parameter({out}, in * k * k, rng)),
      options{stride, padding} {}

void Conv::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".kernels", kernels});
  out.push_back({prefix + ".bias", bias});
}

MapNorm::MapNorm(std::size_t channels)
    : gain(Tensor::full({channels}, 1.0, true)), bias(Tensor::zeros({channels}, true)) {}

void MapNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

ResidualBlock::ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng)
    : conv1_(in, out, 3, stride, 1, rng), conv2_(out, out, 3, 1, 1, rng), norm1_(out), norm2_(out) {
  if (in != out || stride != 1) {
    has_projection_ = true;
    projection_ = Conv(in, out, 1, stride, 0, rng);
    projection_norm_ = MapNorm(out);
  }
}

Tensor ResidualBlock::operator()(const Tensor& x) const {
  const Tensor h = norm2_(conv2_(gelu(norm1_(conv1_(x)))));
  const Tensor skip = has_projection_ ? projection_norm_(projection_(x)) : x;
  return gelu(add(h, skip));
}

void ResidualBlock::collect(const std::string& prefix, ParameterList& out) const {
  conv1_.collect(prefix + ".conv1", out);
  norm1_.collect(prefix + ".norm1", out);
  conv2_.collect(prefix + ".conv2", out);
  norm2_.collect(prefix + ".norm2", out);
  if (has_projection_) {
    projection_.collect(prefix + ".projection", out);
    projection_norm_.collect(prefix + ".projection_norm", out);
  }
}

SliceEncoder::SliceEncoder(const std::vector<std::size_t>& channel_plan, std::size_t blocks_per_stage,
                           std::size_t embed_dim, std::mt19937_64& rng) {
  if (channel_plan.empty() || blocks_per_stage == 0) {
    throw ConfigError("encoder: channel plan and blocks per stage must be non-empty");
  }
  stem_ = Conv(1, channel_plan.front(), 3, 2, 1, rng);
  stem_norm_ = MapNorm(channel_plan.front());
  std::size_t width = channel_plan.front();
  for (std::size_t stage = 0; stage < channel_plan.size(); ++stage) {
    for (std::size_t b = 0; b < blocks_per_stage; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      blocks_.emplace_back(width, channel_plan[stage], stride, rng);
      width = channel_plan[stage];
    }
  }
  projection_ = Linear(width, embed_dim, rng);
}

Tensor SliceEncoder::operator()(const Tensor& slices) const {
  Tensor x = gelu(stem_norm_(stem_(slices)));
  for (const ResidualBlock& block : blocks_) x = block(x);
  return projection_(global_average_pool(x));
}

void SliceEncoder::collect(const std::string& prefix, ParameterList& out) const {
  stem_.collect(prefix + ".stem", out);
  stem_norm_.collect(prefix + ".stem_norm", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  projection_.collect(prefix + ".projection", out);
}

}  // namespace sct::nn
