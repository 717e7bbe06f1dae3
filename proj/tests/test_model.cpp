#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "sct/data.hpp"
#include "sct/errors.hpp"
#include "sct/model.hpp"
#include "study_factory.hpp"

using namespace sct;
using sct::testing::random_study;
using sct::testing::tiny_config;

namespace {

const Tensor& param(const SctModel& model, const std::string& name) {
  for (const auto& p : model.parameters()) {
    if (p.name == name) return p.value;
  }
  throw std::runtime_error("no parameter " + name);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  SctConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const SctConfig d = tiny_config();
  const SctConfig back = SctConfig::from_json(d.to_json());
  CHECK(back.to_json().dump() == d.to_json().dump());

  const SctConfig grading = SctConfig::from_json({{"tasks", "grading"}, {"embed_dim", 32}});
  REQUIRE(grading.tasks.size() == 8);
  CHECK(grading.ff_dim == 64);
  std::vector<std::size_t> classes;
  for (const auto& t : grading.tasks) classes.push_back(t.n_classes);
  CHECK(classes == std::vector<std::size_t>{5, 4, 2, 2, 2, 2, 2, 2});
  CHECK(SctConfig::from_json({{"tasks", "cancer"}}).tasks.size() == 3);
  CHECK_THROWS_AS(SctConfig::from_json({{"tasks", "nonsense"}}), ConfigError);
}

TEST_CASE("defaults") {
  const SctConfig c;
  CHECK(c.embed_dim == 128);
  CHECK(c.n_transformer_layers == 2);
  CHECK(c.n_vertebra_levels == 24);
  CHECK(c.dropout == 0.5);
  CHECK(c.ff_dim == 2 * c.embed_dim);
}

TEST_CASE("head widths follow the task registry") {
  SctConfig c = tiny_config();
  c.tasks = grading_tasks();
  const SctModel model(c, 1);
  std::mt19937_64 rng(1);
  const ModelOutput out = model.forward(random_study(3, 2, 2, 8, 8, rng));
  REQUIRE(out.logits.size() == 8);
  CHECK(out.logits[0].shape() == Shape{3, 5});
  CHECK(out.logits[1].shape() == Shape{3, 4});
  for (std::size_t t = 2; t < 8; ++t) CHECK(out.logits[t].shape() == Shape{3, 1});
}

TEST_CASE("encode_volume") {
  const SctModel model(tiny_config(), 2);
  std::mt19937_64 rng(2);

  SUBCASE("a single slice gets weight 1 and its own encoding") {
    const StudySample s = random_study(1, 1, 1, 8, 8, rng);
    const EncodedVolume enc = model.encode_volume(s.tokens[0].volume);
    CHECK(enc.slice_weights[0] == 1.0);
    const Tensor per_slice = model.encode_slices(s.tokens[0].volume);
    CHECK(max_abs_diff(enc.feature.data(), per_slice.data()) < 1e-12);
  }
  SUBCASE("identical slices share the weight evenly") {
    Volume v = random_study(1, 1, 1, 8, 8, rng).tokens[0].volume;
    Volume twice(2, 8, 8);
    std::copy(v.voxels.begin(), v.voxels.end(), twice.voxels.begin());
    std::copy(v.voxels.begin(), v.voxels.end(), twice.voxels.begin() + 64);
    const EncodedVolume enc = model.encode_volume(twice);
    CHECK(enc.slice_weights[0] == doctest::Approx(0.5));
    CHECK(enc.slice_weights[1] == doctest::Approx(0.5));
    CHECK(max_abs_diff(enc.feature.data(), model.encode_volume(v).feature.data()) < 1e-12);
  }
  SUBCASE("feature is the softmax-weighted sum of per-slice encodings") {
    const Volume v = random_study(1, 1, 3, 8, 8, rng).tokens[0].volume;
    const Tensor f = model.encode_slices(v);
    const Tensor& w = param(model, "slice_attention.weight");
    const double b = param(model, "slice_attention.bias")[0];
    const std::size_t e = 16;
    std::vector<double> score(3, b);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t j = 0; j < e; ++j) score[s] += f[s * e + j] * w[j];
    }
    const double top = *std::max_element(score.begin(), score.end());
    double z = 0.0;
    for (double& sc : score) z += (sc = std::exp(sc - top));
    std::vector<double> expected(e, 0.0);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t j = 0; j < e; ++j) expected[j] += score[s] / z * f[s * e + j];
    }
    const EncodedVolume enc = model.encode_volume(v);
    CHECK(max_abs_diff(enc.feature.data(), expected) < 1e-12);
    double total = 0.0;
    for (double x : enc.slice_weights.data()) total += x;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  SUBCASE("wrong slice size") {
    CHECK_THROWS_AS(model.encode_volume(Volume(2, 8, 9)), DimensionError);
  }
}

TEST_CASE("build_tokens") {
  const SctModel model(tiny_config(), 3);
  std::mt19937_64 rng(3);
  CHECK(model.build_tokens(random_study(1, 1, 2, 8, 8, rng)).dim(0) == 1);
  CHECK(model.build_tokens(random_study(3, 2, 2, 8, 8, rng)).dim(0) == 6);

  SUBCASE("an absent token is missing vector + level + sequence embedding") {
    StudySample s = random_study(2, 2, 2, 8, 8, rng, 5);
    s.token(1, 0).present = false;
    const Tensor tokens = model.build_tokens(s);
    const Tensor& lw = param(model, "level_embedder.weight");
    const Tensor& lb = param(model, "level_embedder.bias");
    const Tensor& sw = param(model, "sequence_embedder.weight");
    const Tensor& sb = param(model, "sequence_embedder.bias");
    const std::size_t e = 16, level = 6, seq = 0;
    for (std::size_t j = 0; j < e; ++j) {
      const double expected = (model.missing_feature()[j] + (lw[level * e + j] + lb[j])) + (sw[seq * e + j] + sb[j]);
      CHECK(tokens[2 * e + j] == expected);
    }
  }
  SUBCASE("remove mode drops absent tokens unless the vertebra has none") {
    SctConfig c = tiny_config();
    c.missing_mode = MissingMode::remove;
    const SctModel remover(c, 3);
    StudySample s = random_study(2, 2, 2, 8, 8, rng);
    s.token(0, 1).present = false;
    s.token(1, 0).present = false;
    s.token(1, 1).present = false;
    std::vector<std::pair<std::size_t, std::size_t>> origin;
    CHECK(remover.build_tokens(s, &origin).dim(0) == 3);
    CHECK(origin[0] == std::pair<std::size_t, std::size_t>{0, 0});
    CHECK(origin[1].first == 1);
  }
}

TEST_CASE("forward") {
  const SctModel model(tiny_config(), 4);
  std::mt19937_64 rng(4);

  SUBCASE("per-vertebra logits") {
    const ModelOutput out = model.forward(random_study(3, 2, 5, 8, 8, rng));
    for (const Tensor& l : out.logits) CHECK(l.shape() == Shape{3, 1});
    CHECK(out.pooled.shape() == Shape{3, 16});
  }
  SUBCASE("one vertebra, one sequence: sequence attention is 1") {
    const ModelOutput out = model.forward(random_study(1, 1, 3, 8, 8, rng));
    for (double w : out.sequence_weights[0].data()) CHECK(w == 1.0);
  }
  SUBCASE("empty study") {
    StudySample s;
    CHECK_THROWS_AS(model.forward(s), ContractError);
  }
  SUBCASE("vertebra permutation permutes outputs") {
    const StudySample s = random_study(4, 2, 3, 8, 8, rng);
    const std::vector<std::size_t> perm{3, 1, 0, 2};
    StudySample p = s;
    p.tokens.clear();
    p.levels.clear();
    for (std::size_t i : perm) {
      p.levels.push_back(s.levels[i]);
      for (std::size_t c = 0; c < 2; ++c) p.tokens.push_back(s.token(i, c));
    }
    const ModelOutput a = model.forward(s), b = model.forward(p);
    for (std::size_t t = 0; t < a.logits.size(); ++t) {
      for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(b.logits[t][i] - a.logits[t][perm[i]]) < 1e-9);
    }
  }
  SUBCASE("sequence order does not matter") {
    const StudySample s = random_study(3, 3, 2, 8, 8, rng);
    StudySample r = s;
    r.sequences = {2, 0, 1};
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t c = 0; c < 3; ++c) r.token(n, c) = s.token(n, static_cast<std::size_t>(r.sequences[c]));
    }
    const ModelOutput a = model.forward(s), b = model.forward(r);
    CHECK(max_abs_diff(a.pooled.data(), b.pooled.data()) < 1e-9);
  }
  SUBCASE("changing one volume changes only that vertebra's pre-transformer tokens") {
    StudySample s = random_study(3, 2, 2, 8, 8, rng);
    const Tensor before = model.build_tokens(s);
    for (double& v : s.token(1, 0).volume.voxels) v += 1.0;
    const Tensor after = model.build_tokens(s);
    for (std::size_t t = 0; t < 6; ++t) {
      const bool changed = max_abs_diff(before.data().subspan(t * 16, 16), after.data().subspan(t * 16, 16)) > 0.0;
      CHECK(changed == (t == 2));
    }
  }
  SUBCASE("slicewise forward") {
    const StudySample one = random_study(2, 2, 1, 8, 8, rng);
    const ModelOutput a = model.forward(one), b = model.forward_single_slice(one, 0);
    for (std::size_t t = 0; t < a.logits.size(); ++t) CHECK(max_abs_diff(a.logits[t].data(), b.logits[t].data()) == 0.0);
    const StudySample seven = random_study(2, 1, 7, 8, 8, rng);
    for (std::size_t s = 0; s < 7; ++s) CHECK(model.forward_single_slice(seven, s).logits[0].dim(0) == 2);
    CHECK_THROWS_AS(model.forward_single_slice(seven, 7), DimensionError);
  }
  SUBCASE("dropout only acts in training mode") {
    SctConfig c = tiny_config();
    c.dropout = 0.5;
    const SctModel m(c, 5);
    const StudySample s = random_study(2, 2, 2, 8, 8, rng);
    std::mt19937_64 d1(1), d2(2);
    const auto eval_a = m.forward(s).logits[0], eval_b = m.forward(s).logits[0];
    CHECK(max_abs_diff(eval_a.data(), eval_b.data()) == 0.0);
    const auto train_a = m.forward(s, {.training = true, .rng = &d1}).logits[0];
    const auto train_b = m.forward(s, {.training = true, .rng = &d2}).logits[0];
    CHECK(max_abs_diff(train_a.data(), train_b.data()) > 0.0);
  }
}

TEST_CASE("parameter count depends only on the config") {
  const SctModel a(tiny_config(), 1), b(tiny_config(), 2);
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(parameter_hash(a.parameters()) != parameter_hash(b.parameters()));
  CHECK(a.head_parameters().size() + a.backbone_parameters().size() == a.parameters().size());
}

TEST_CASE("checkpoint round trip") {
  const SctModel model(tiny_config(), 6);
  const std::string bytes = serialize_model(model);
  const SctModel loaded = deserialize_model(bytes);
  CHECK(serialize_model(loaded) == bytes);
  std::mt19937_64 rng(6);
  const StudySample s = random_study(3, 2, 3, 8, 8, rng);
  const ModelOutput a = model.forward(s), b = loaded.forward(s);
  for (std::size_t t = 0; t < a.logits.size(); ++t) CHECK(max_abs_diff(a.logits[t].data(), b.logits[t].data()) == 0.0);

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
  CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(deserialize_model(version), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "sct_model_roundtrip.sct";
  save_model(model, path.string());
  CHECK(parameter_hash(load_model(path.string()).parameters()) == parameter_hash(model.parameters()));
  std::filesystem::remove(path);
}

TEST_CASE("freezing the backbone") {
  SctModel model(tiny_config(), 7);
  model.set_backbone_trainable(false);
  for (const auto& p : model.backbone_parameters()) CHECK_FALSE(p.value.requires_grad());
  for (const auto& p : model.head_parameters()) CHECK(p.value.requires_grad());
  model.set_backbone_trainable(true);
  for (const auto& p : model.parameters()) CHECK(p.value.requires_grad());
}

TEST_CASE("clone is independent") {
  SctModel model(tiny_config(), 8);
  SctModel copy = model.clone();
  Tensor w = copy.parameters().front().value;
  w.mutable_data()[0] += 1.0;
  CHECK(parameter_hash(copy.parameters()) != parameter_hash(model.parameters()));
}
