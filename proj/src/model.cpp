#include "sct/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "sct/config_keys.hpp"

namespace sct {

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'C', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kHeadPrefix = "heads.";

const char* missing_mode_name(MissingMode mode) {
  return mode == MissingMode::learned_vector ? "learned_vector" : "remove";
}

}  // namespace

// ---- config -----------------------------------------------------------------

void SctConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model config: ") + field + " must be >= 1");
  };
  positive(embed_dim, "embed_dim");
  positive(n_transformer_layers, "n_transformer_layers");
  positive(n_heads, "n_heads");
  positive(ff_dim, "ff_dim");
  positive(n_vertebra_levels, "n_vertebra_levels");
  positive(n_sequence_types, "n_sequence_types");
  positive(encoder_blocks_per_stage, "encoder_blocks_per_stage");
  positive(slice_height, "slice_size");
  positive(slice_width, "slice_size");
  if (embed_dim % n_heads != 0) {
    throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (encoder_channels.empty() || std::count(encoder_channels.begin(), encoder_channels.end(), 0u) > 0) {
    throw ConfigError("model config: encoder_channels must be a non-empty list of positive widths");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must lie in [0, 1)");
  if (tasks.empty()) throw ConfigError("model config: tasks must not be empty");
  for (const TaskSpec& t : tasks) {
    if (t.n_classes < 2) throw ConfigError("model config: task '" + t.name + "' needs at least 2 classes");
  }
}

nlohmann::json SctConfig::to_json() const {
  nlohmann::json tasks_json = nlohmann::json::array();
  for (const TaskSpec& t : tasks) {
    tasks_json.push_back({{"name", t.name}, {"n_classes", t.n_classes}, {"min_label", t.min_label}});
  }
  return {{"embed_dim", embed_dim},
          {"n_transformer_layers", n_transformer_layers},
          {"n_heads", n_heads},
          {"ff_dim", ff_dim},
          {"n_vertebra_levels", n_vertebra_levels},
          {"n_sequence_types", n_sequence_types},
          {"encoder_channels", encoder_channels},
          {"encoder_blocks_per_stage", encoder_blocks_per_stage},
          {"dropout", dropout},
          {"tasks", tasks_json},
          {"slice_size", {slice_height, slice_width}},
          {"missing_mode", missing_mode_name(missing_mode)}};
}

SctConfig SctConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  SctConfig c;
  reject_unknown_keys(j, c.to_json(), "model config");
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.n_transformer_layers = j.value("n_transformer_layers", c.n_transformer_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ff_dim = j.value("ff_dim", 2 * c.embed_dim);
    c.n_vertebra_levels = j.value("n_vertebra_levels", c.n_vertebra_levels);
    c.n_sequence_types = j.value("n_sequence_types", c.n_sequence_types);
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.encoder_blocks_per_stage = j.value("encoder_blocks_per_stage", c.encoder_blocks_per_stage);
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("slice_size")) {
      const auto& s = j.at("slice_size");
      if (!s.is_array() || s.size() != 2) throw ConfigError("model config: slice_size must be [height, width]");
      c.slice_height = s[0].get<std::size_t>();
      c.slice_width = s[1].get<std::size_t>();
    }
    if (j.contains("tasks")) {
      const auto& t = j.at("tasks");
      if (t.is_string()) {
        const TaskFamily family = task_family_from_name(t.get<std::string>());
        if (family == TaskFamily::custom) throw ConfigError("model config: custom tasks must be listed explicitly");
        c.tasks = family == TaskFamily::cancer ? cancer_tasks() : grading_tasks();
      } else {
        c.tasks.clear();
        for (const auto& item : t) {
          c.tasks.push_back({item.at("name").get<std::string>(), item.at("n_classes").get<std::size_t>(),
                             item.value("min_label", 0)});
        }
      }
    }
    const std::string mode = j.value("missing_mode", std::string("learned_vector"));
    if (mode == "learned_vector") {
      c.missing_mode = MissingMode::learned_vector;
    } else if (mode == "remove") {
      c.missing_mode = MissingMode::remove;
    } else {
      throw ConfigError("model config: missing_mode must be learned_vector or remove, got '" + mode + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t SctConfig::task_index(const std::string& name) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].name == name) return i;
  }
  throw ConfigError("model has no task head named '" + name + "'");
}

// ---- model ------------------------------------------------------------------

SctModel::SctModel(SctConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t e = config_.embed_dim;
  encoder_ = nn::SliceEncoder(config_.encoder_channels, config_.encoder_blocks_per_stage, e, rng);
  slice_scorer_ = nn::Linear(e, 1, rng);
  level_embedder_ = nn::Linear(config_.n_vertebra_levels, e, rng);
  sequence_embedder_ = nn::Linear(config_.n_sequence_types, e, rng);
  missing_feature_ = nn::uniform_parameter({e}, e, rng);
  for (std::size_t i = 0; i < config_.n_transformer_layers; ++i) {
    layers_.emplace_back(e, config_.n_heads, config_.ff_dim, config_.dropout, rng);
  }
  final_norm_ = nn::LayerNorm(e);
  sequence_scorer_ = nn::Linear(e, e, rng);
  for (const TaskSpec& task : config_.tasks) heads_.emplace_back(e, task.n_logits(), rng);

  encoder_.collect("encoder", parameters_);
  slice_scorer_.collect("slice_attention", parameters_);
  level_embedder_.collect("level_embedder", parameters_);
  sequence_embedder_.collect("sequence_embedder", parameters_);
  parameters_.push_back({"missing_feature", missing_feature_});
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("transformer.layer" + std::to_string(i), parameters_);
  final_norm_.collect("transformer.final_norm", parameters_);
  sequence_scorer_.collect("sequence_attention", parameters_);
  for (std::size_t i = 0; i < heads_.size(); ++i) heads_[i].collect(kHeadPrefix + config_.tasks[i].name, parameters_);
}

std::vector<EncodedVolume> SctModel::encode_batch(const std::vector<const Volume*>& volumes) const {
  if (volumes.empty()) return {};
  const std::size_t h = config_.slice_height, w = config_.slice_width;
  std::size_t total = 0;
  for (const Volume* v : volumes) {
    if (v->height != h || v->width != w) {
      throw DimensionError("encode_volume: slices are " + std::to_string(v->height) + "x" + std::to_string(v->width) +
                           " but the model expects " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (v->slices == 0) throw DimensionError("encode_volume: volume has no slices");
    total += v->slices;
  }
  std::vector<double> stacked;
  stacked.reserve(total * h * w);
  for (const Volume* v : volumes) stacked.insert(stacked.end(), v->voxels.begin(), v->voxels.end());
  const Tensor features = encoder_(Tensor::from_data({total, 1, h, w}, std::move(stacked)));
  const Tensor scores = slice_scorer_(features);

  std::vector<EncodedVolume> out;
  out.reserve(volumes.size());
  std::size_t offset = 0;
  for (const Volume* v : volumes) {
    const std::size_t s = v->slices;
    const Tensor weights = softmax(reshape(slice_rows(scores, offset, s), {1, s}), 1);
    const Tensor pooled = matmul(weights, slice_rows(features, offset, s));
    out.push_back({reshape(pooled, {config_.embed_dim}), reshape(weights, {s})});
    offset += s;
  }
  return out;
}

EncodedVolume SctModel::encode_volume(const Volume& volume) const { return encode_batch({&volume}).front(); }

Tensor SctModel::encode_slices(const Volume& volume) const {
  if (volume.height != config_.slice_height || volume.width != config_.slice_width) {
    throw DimensionError("encode_slices: slice size mismatch");
  }
  return encoder_(Tensor::from_data({volume.slices, 1, volume.height, volume.width}, volume.voxels));
}

Tensor SctModel::build_tokens(const StudySample& study, std::vector<std::pair<std::size_t, std::size_t>>* origin,
                              std::vector<std::vector<std::vector<double>>>* slice_weights) const {
  study.validate();
  const std::size_t n_vert = study.n_vertebrae(), n_seq = study.n_sequences();
  const std::size_t e = config_.embed_dim;

  std::vector<std::pair<std::size_t, std::size_t>> keep;
  for (std::size_t n = 0; n < n_vert; ++n) {
    bool any_present = false;
    for (std::size_t c = 0; c < n_seq; ++c) any_present = any_present || study.token(n, c).present;
    for (std::size_t c = 0; c < n_seq; ++c) {
      const bool drop = config_.missing_mode == MissingMode::remove && any_present && !study.token(n, c).present;
      if (!drop) keep.emplace_back(n, c);
    }
  }

  std::vector<const Volume*> volumes;
  std::vector<std::size_t> volume_of(keep.size(), SIZE_MAX);
  for (std::size_t t = 0; t < keep.size(); ++t) {
    const VertebraToken& token = study.token(keep[t].first, keep[t].second);
    if (token.present) {
      volume_of[t] = volumes.size();
      volumes.push_back(&token.volume);
    }
  }
  const std::vector<EncodedVolume> encoded = encode_batch(volumes);

  if (slice_weights) {
    slice_weights->assign(n_vert, std::vector<std::vector<double>>(n_seq));
    for (std::size_t t = 0; t < keep.size(); ++t) {
      if (volume_of[t] == SIZE_MAX) continue;
      const auto w = encoded[volume_of[t]].slice_weights.data();
      (*slice_weights)[keep[t].first][keep[t].second].assign(w.begin(), w.end());
    }
  }

  const Tensor missing = reshape(missing_feature_, {1, e});
  std::vector<Tensor> visual;
  std::vector<double> level_codes(keep.size() * config_.n_vertebra_levels, 0.0);
  std::vector<double> sequence_codes(keep.size() * config_.n_sequence_types, 0.0);
  for (std::size_t t = 0; t < keep.size(); ++t) {
    const VertebraToken& token = study.token(keep[t].first, keep[t].second);
    visual.push_back(volume_of[t] == SIZE_MAX ? missing : reshape(encoded[volume_of[t]].feature, {1, e}));
    const auto lvl = token.level_onehot(config_.n_vertebra_levels);
    const auto seq = token.sequence_onehot(config_.n_sequence_types);
    std::copy(lvl.begin(), lvl.end(), level_codes.begin() + static_cast<std::ptrdiff_t>(t * lvl.size()));
    std::copy(seq.begin(), seq.end(), sequence_codes.begin() + static_cast<std::ptrdiff_t>(t * seq.size()));
  }
  const std::size_t count = keep.size();
  const Tensor level_embedding =
      level_embedder_(Tensor::from_data({count, config_.n_vertebra_levels}, std::move(level_codes)));
  const Tensor sequence_embedding =
      sequence_embedder_(Tensor::from_data({count, config_.n_sequence_types}, std::move(sequence_codes)));
  if (origin) *origin = keep;
  return add(add(concat_rows(visual), level_embedding), sequence_embedding);
}

ModelOutput SctModel::forward(const StudySample& study, const ForwardOptions& options) const {
  if (study.levels.empty() || study.sequences.empty()) {
    throw ContractError("forward: study '" + study.id + "' has no vertebrae or no sequences");
  }
  ModelOutput out;
  Tensor tokens = build_tokens(study, &out.token_origin, &out.slice_weights);
  const nn::DropoutContext ctx{options.training, options.rng};
  for (const nn::TransformerLayer& layer : layers_) tokens = layer(tokens, ctx);
  tokens = final_norm_(tokens);

  // Tokens are vertebra-major, so each vertebra owns a contiguous run of rows.
  std::vector<Tensor> pooled;
  std::size_t row = 0;
  for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
    std::size_t count = 0;
    while (row + count < out.token_origin.size() && out.token_origin[row + count].first == n) ++count;
    const Tensor own = slice_rows(tokens, row, count);
    const Tensor weights = softmax(sequence_scorer_(own), 0);
    out.sequence_weights.push_back(weights);
    pooled.push_back(reshape(sum_rows(mul(own, weights)), {1, config_.embed_dim}));
    row += count;
  }
  out.pooled = concat_rows(pooled);
  for (const nn::Linear& head : heads_) out.logits.push_back(head(out.pooled));
  return out;
}

StudySample restrict_to_slice(const StudySample& study, std::size_t slice_index) {
  StudySample out = study;
  for (VertebraToken& token : out.tokens) {
    if (token.present) token.volume = token.volume.single_slice(slice_index);
  }
  return out;
}

ModelOutput SctModel::forward_single_slice(const StudySample& study, std::size_t slice_index,
                                           const ForwardOptions& options) const {
  return forward(restrict_to_slice(study, slice_index), options);
}

nn::ParameterList SctModel::head_parameters() const {
  nn::ParameterList out;
  for (const auto& p : parameters_) {
    if (p.name.starts_with(kHeadPrefix)) out.push_back(p);
  }
  return out;
}

nn::ParameterList SctModel::backbone_parameters() const {
  nn::ParameterList out;
  for (const auto& p : parameters_) {
    if (!p.name.starts_with(kHeadPrefix)) out.push_back(p);
  }
  return out;
}

std::size_t SctModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters_) total += p.value.numel();
  return total;
}

void SctModel::zero_grad() {
  for (auto& p : parameters_) p.value.zero_grad();
}

void SctModel::set_backbone_trainable(bool trainable) {
  for (auto& p : parameters_) {
    if (!p.name.starts_with(kHeadPrefix)) p.value.set_requires_grad(trainable);
  }
}

SctModel SctModel::clone() const { return deserialize_model(serialize_model(*this)); }

// ---- checkpoint ---------------------------------------------------------------

std::string serialize_model(const SctModel& model) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  binary::put_uint<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = model.config().to_json().dump();
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  const auto& params = model.parameters();
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    binary::put_uint<std::uint64_t>(out, p.value.numel());
    for (double v : p.value.data()) binary::put_f64(out, v);
  }
  return out;
}

SctModel deserialize_model(const std::string& bytes) {
  binary::Reader in(bytes, "checkpoint");
  if (in.take(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic (expected SCT1)");
  const auto version = in.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto config_len = in.uint<std::uint32_t>();
  nlohmann::json config_json;
  try {
    config_json = nlohmann::json::parse(in.take(config_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: config is not valid JSON: ") + e.what());
  }
  SctModel model(SctConfig::from_json(config_json), 0);
  const auto n_blocks = in.uint<std::uint32_t>();
  const auto& params = model.parameters();
  if (n_blocks != params.size()) {
    throw FormatError("checkpoint: " + std::to_string(n_blocks) + " parameter blocks, config implies " +
                      std::to_string(params.size()));
  }
  for (auto p : params) {
    const auto name_len = in.uint<std::uint32_t>();
    const std::string name(in.take(name_len));
    if (name != p.name) throw FormatError("checkpoint: expected block '" + p.name + "', found '" + name + "'");
    const auto count = in.uint<std::uint64_t>();
    if (count != p.value.numel()) {
      throw FormatError("checkpoint: block '" + name + "' holds " + std::to_string(count) + " values, expected " +
                        std::to_string(p.value.numel()));
    }
    auto data = p.value.mutable_data();
    for (double& v : data) v = in.f64();
  }
  if (!in.at_end()) throw FormatError("checkpoint: " + std::to_string(in.remaining()) + " trailing bytes");
  return model;
}

void save_model(const SctModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_model(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing '" + path + "'");
}

SctModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return deserialize_model(buffer.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::uint64_t parameter_hash(const nn::ParameterList& parameters) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (const auto& p : parameters) {
    for (char ch : p.name) mix(static_cast<unsigned char>(ch));
    for (double v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
  }
  return h;
}

}  // namespace sct
