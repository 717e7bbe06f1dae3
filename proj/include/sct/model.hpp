#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/nn.hpp"
#include "sct/study.hpp"
#include "sct/tensor.hpp"

namespace sct {

// How tokens whose sequence was dropped enter the transformer.
enum class MissingMode {
  learned_vector,  // keep the token, visual feature replaced by a learned vector
  remove,          // drop the token (a vertebra with no present sequence keeps learned-vector tokens)
};

struct SctConfig {
  std::size_t embed_dim = 128;
  std::size_t n_transformer_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t n_vertebra_levels = 24;
  std::size_t n_sequence_types = 4;
  std::vector<std::size_t> encoder_channels{16, 32, 64, 128};
  std::size_t encoder_blocks_per_stage = 1;
  double dropout = 0.5;
  std::vector<TaskSpec> tasks = cancer_tasks();
  std::size_t slice_height = 112;
  std::size_t slice_width = 112;
  MissingMode missing_mode = MissingMode::learned_vector;

  void validate() const;
  // Keys are sorted, so dump() of this object is canonical.
  nlohmann::json to_json() const;
  // Missing keys take the defaults above; ff_dim defaults to 2 * embed_dim.
  static SctConfig from_json(const nlohmann::json& j);
  std::size_t task_index(const std::string& name) const;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

struct EncodedVolume {
  Tensor feature;        // [E]
  Tensor slice_weights;  // [S]
};

struct ModelOutput {
  std::vector<Tensor> logits;  // per task, [N, n_logits]
  Tensor pooled;               // [N, E]
  // [vertebra][sequence] -> per-slice attention; empty for absent tokens.
  std::vector<std::vector<std::vector<double>>> slice_weights;
  // Per vertebra, [C_n, E] channel-wise sequence attention.
  std::vector<Tensor> sequence_weights;
  // Per transformer token: (vertebra, sequence) it came from.
  std::vector<std::pair<std::size_t, std::size_t>> token_origin;
};

class SctModel {
 public:
  SctModel(SctConfig config, std::uint64_t seed);
  SctModel(const SctModel&) = delete;
  SctModel& operator=(const SctModel&) = delete;
  SctModel(SctModel&&) = default;
  SctModel& operator=(SctModel&&) = default;

  const SctConfig& config() const { return config_; }

  EncodedVolume encode_volume(const Volume& volume) const;
  // Per-slice encoder output [S, E] before pooling.
  Tensor encode_slices(const Volume& volume) const;
  // [T, E] input tokens, plus the origin of each row.
  Tensor build_tokens(const StudySample& study, std::vector<std::pair<std::size_t, std::size_t>>* origin = nullptr,
                      std::vector<std::vector<std::vector<double>>>* slice_weights = nullptr) const;
  ModelOutput forward(const StudySample& study, const ForwardOptions& options = {}) const;
  // Runs forward with every volume cut down to slice `slice_index`.
  ModelOutput forward_single_slice(const StudySample& study, std::size_t slice_index,
                                   const ForwardOptions& options = {}) const;

  const nn::ParameterList& parameters() const { return parameters_; }
  // Parameters of the task classifiers only.
  nn::ParameterList head_parameters() const;
  nn::ParameterList backbone_parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  // Toggles differentiation for the non-head parameters.
  void set_backbone_trainable(bool trainable);

  SctModel clone() const;
  const Tensor& missing_feature() const { return missing_feature_; }

 private:
  std::vector<EncodedVolume> encode_batch(const std::vector<const Volume*>& volumes) const;

  SctConfig config_;
  nn::SliceEncoder encoder_;
  nn::Linear slice_scorer_;
  nn::Linear level_embedder_;
  nn::Linear sequence_embedder_;
  Tensor missing_feature_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear sequence_scorer_;
  std::vector<nn::Linear> heads_;
  nn::ParameterList parameters_;
};

// Copy of the study with every present volume reduced to one slice.
StudySample restrict_to_slice(const StudySample& study, std::size_t slice_index);

// Checkpoint: "SCT1", u32 version, u32 config length, canonical config JSON,
// u32 block count, then per block: u32 name length, name, u64 element count,
// little-endian f64 payload.
std::string serialize_model(const SctModel& model);
SctModel deserialize_model(const std::string& bytes);
void save_model(const SctModel& model, const std::string& path);
SctModel load_model(const std::string& path);

// FNV-1a over the parameter bytes of the given blocks.
std::uint64_t parameter_hash(const nn::ParameterList& parameters);

}  // namespace sct
