#include "sct/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "sct/config_keys.hpp"
#include "sct/rng.hpp"

namespace sct {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- report labels -----------------------------------------------------------

LabelTriple derive_labels(const AnnotationRecord& record, const std::vector<int>& vertebrae) {
  LabelTriple out;
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    const ConditionAnnotation& cond = record.conditions[k];
    const char* name = kConditionNames[k];
    for (int level : cond.positive) {
      if (cond.negative.contains(level)) {
        throw ValidationError("annotation " + record.study_id + ": level " + std::to_string(level) +
                              " is both positive and negative for " + name);
      }
    }
    for (const auto* marks : {&cond.positive, &cond.negative}) {
      for (int level : *marks) {
        if (std::find(vertebrae.begin(), vertebrae.end(), level) == vertebrae.end()) {
          throw ValidationError("annotation " + record.study_id + ": " + name + " names level " +
                                std::to_string(level) + " which is not among the study's vertebrae");
        }
      }
    }
    const bool is_compression = static_cast<Condition>(k) == Condition::compression;
    const bool unnamed_unknown = !is_compression && (cond.widespread || cond.ambiguous);
    auto& labels = out.vertebra[k];
    labels.reserve(vertebrae.size());
    for (int level : vertebrae) {
      if (cond.positive.contains(level)) {
        labels.push_back(Label::positive);
      } else if (cond.negative.contains(level) || is_compression) {
        labels.push_back(Label::negative);
      } else {
        labels.push_back(unnamed_unknown ? Label::unknown : Label::negative);
      }
    }
    out.bag[k] = !cond.positive.empty() || cond.widespread;
  }
  return out;
}

json annotation_to_json(const AnnotationRecord& record, const std::vector<std::string>& level_names) {
  json out = json::object();
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    const ConditionAnnotation& cond = record.conditions[k];
    json pos = json::array(), neg = json::array();
    for (int l : cond.positive) pos.push_back(level_names.at(static_cast<std::size_t>(l)));
    for (int l : cond.negative) neg.push_back(level_names.at(static_cast<std::size_t>(l)));
    out[kConditionNames[k]] = {{"widespread", cond.widespread}, {"ambiguous", cond.ambiguous},
                               {"positive", pos}, {"negative", neg}};
  }
  return out;
}

AnnotationRecord annotation_from_json(const json& j, const std::vector<std::string>& level_names) {
  if (!j.is_object()) throw ValidationError("annotation: expected an object keyed by condition");
  AnnotationRecord record;
  for (const auto& [key, value] : j.items()) {
    const auto cond = condition_from_name(key);
    if (!cond) throw ValidationError("annotation: unknown condition '" + key + "'");
    ConditionAnnotation& out = record.conditions[static_cast<std::size_t>(*cond)];
    out.widespread = value.value("widespread", false);
    out.ambiguous = value.value("ambiguous", false);
    for (const auto& l : value.value("positive", json::array())) out.positive.insert(level_index(level_names, l));
    for (const auto& l : value.value("negative", json::array())) out.negative.insert(level_index(level_names, l));
  }
  return record;
}

// ---- phantoms ----------------------------------------------------------------

std::vector<SequenceContrast> default_sequence_table() {
  return {{"T1", 1.0, 1.0}, {"T2", 0.8, -1.0}, {"STIR", 0.6, 1.0}, {"FLAIR", 0.7, 1.0}};
}

namespace {

constexpr double kTissue = 0.2;

double smooth_step(double v) { return 1.0 / (1.0 + std::exp(-v / 0.6)); }

struct VertebraGeometry {
  double height_scale = 1.0;
  double shift_x = 0.0;
  bool bulge = false;
  double focus_amplitude = 0.0;  // in contrast units
  int focus_slice = 0;
  bool focus_all_slices = false;
  double focus_y = 0.0, focus_x = 0.0;  // offsets from the body centre, pixels
  bool upper_notch = false, lower_notch = false;
  bool upper_band = false, lower_band = false;
  double phase_y = 0.0, phase_x = 0.0;
};

Volume render(const PhantomSpec& spec, const VertebraGeometry& g, const SequenceContrast& contrast,
              std::mt19937_64& noise_rng) {
  const std::size_t s_n = spec.slices, h = spec.height, w = spec.width;
  Volume vol(s_n, h, w);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0 + g.shift_x;
  const double half_h = 0.3 * static_cast<double>(h) * g.height_scale;
  const double half_w = 0.32 * static_cast<double>(w);
  const double focus_sigma = 0.1 * static_cast<double>(h);
  const double bulge_sigma = 0.12 * static_cast<double>(h);
  const double unit = spec.contrast_unit;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t s = 0; s < s_n; ++s) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        double body = smooth_step(half_h - std::abs(dy)) * smooth_step(half_w - std::abs(dx));
        if (g.bulge) {
          const double by = dy, bx = dx - half_w;
          body = std::max(body, std::exp(-(by * by + bx * bx) / (2.0 * bulge_sigma * bulge_sigma)));
        }
        const double texture = 0.05 * std::sin(2.0 * std::numbers::pi * static_cast<double>(y) / static_cast<double>(h) + g.phase_y) *
                               std::sin(2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(w) + g.phase_x);
        double v = kTissue + (contrast.baseline - kTissue + texture) * body;
        if (g.focus_amplitude != 0.0 && (g.focus_all_slices || static_cast<int>(s) == g.focus_slice)) {
          const double fy = dy - g.focus_y, fx = dx - g.focus_x;
          v += contrast.lesion_sign * g.focus_amplitude * unit *
               std::exp(-(fy * fy + fx * fx) / (2.0 * focus_sigma * focus_sigma));
        }
        const double edge_sigma = 0.08 * static_cast<double>(h);
        auto edge = [&](double edge_y, double cx_off) {
          const double ey = dy - edge_y, ex = dx - cx_off;
          return std::exp(-(ey * ey) / (2.0 * edge_sigma * edge_sigma) - (ex * ex) / (2.0 * (2.0 * edge_sigma) * (2.0 * edge_sigma)));
        };
        if (g.upper_notch) v -= 0.5 * edge(-half_h, 0.0);
        if (g.lower_notch) v -= 0.5 * edge(half_h, 0.0);
        if (g.upper_band) v += 0.4 * std::exp(-std::pow(dy + 0.7 * half_h, 2) / (2.0 * edge_sigma * edge_sigma)) * body;
        if (g.lower_band) v += 0.4 * std::exp(-std::pow(dy - 0.7 * half_h, 2) / (2.0 * edge_sigma * edge_sigma)) * body;
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(noise_rng);
        vol.at(s, y, x) = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return vol;
}

int grade_or(const GradingLabels& labels, const std::string& task, std::size_t vertebra, int fallback) {
  const auto it = labels.find(task);
  if (it == labels.end() || vertebra >= it->second.size() || it->second[vertebra] == kMissingGrade) return fallback;
  return it->second[vertebra];
}

}  // namespace

StudySample generate_phantom_study(const PhantomSpec& spec) {
  const std::size_t n_vert = spec.n_vertebrae();
  if (n_vert == 0) throw ValidationError("phantom " + spec.study_id + ": no vertebrae");
  if (spec.sequence_types.empty()) throw ValidationError("phantom " + spec.study_id + ": no sequences");
  if (spec.slices == 0 || spec.height < 4 || spec.width < 4) throw ValidationError("phantom " + spec.study_id + ": volume too small");
  auto flag = [](const std::vector<bool>& v, std::size_t i) { return i < v.size() && v[i]; };

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  StudySample study;
  study.id = spec.study_id;
  study.sequences = spec.sequence_types;
  LabelTriple truth;
  for (std::size_t n = 0; n < n_vert; ++n) study.levels.push_back(spec.first_level + static_cast<int>(n));

  for (std::size_t n = 0; n < n_vert; ++n) {
    VertebraGeometry g;
    const int c = spec.lesion_contrast[n];
    if (c < 0 || c > 3) throw ValidationError("phantom " + spec.study_id + ": lesion contrast must lie in 0..3");
    g.phase_y = 2.0 * std::numbers::pi * unit(rng);
    g.phase_x = 2.0 * std::numbers::pi * unit(rng);
    const double fy = (unit(rng) - 0.5) * 0.3 * static_cast<double>(spec.height);
    const double fx = (unit(rng) - 0.5) * 0.35 * static_cast<double>(spec.width);
    const int random_slice = static_cast<int>(unit(rng) * static_cast<double>(spec.slices));
    g.focus_y = fy;
    g.focus_x = fx;
    g.focus_slice = (n < spec.lesion_slice.size() && spec.lesion_slice[n] >= 0) ? spec.lesion_slice[n]
                                                                                  : std::min(random_slice, static_cast<int>(spec.slices) - 1);
    if (spec.grading) {
      const GradingLabels& gl = *spec.grading;
      const int pfirrmann = grade_or(gl, "pfirrmann", n, 1);
      g.focus_amplitude = static_cast<double>(pfirrmann - 1);
      g.focus_all_slices = true;
      g.focus_y = 0.0;
      g.focus_x = 0.0;
      g.height_scale = 1.0 - 0.12 * static_cast<double>(grade_or(gl, "disc_narrowing", n, 1) - 1);
      g.bulge = grade_or(gl, "central_canal_stenosis", n, 0) == 1;
      g.shift_x = grade_or(gl, "spondylolisthesis", n, 0) == 1 ? 0.12 * static_cast<double>(spec.width) : 0.0;
      g.upper_notch = grade_or(gl, "upper_endplate_defect", n, 0) == 1;
      g.lower_notch = grade_or(gl, "lower_endplate_defect", n, 0) == 1;
      g.upper_band = grade_or(gl, "upper_marrow_change", n, 0) == 1;
      g.lower_band = grade_or(gl, "lower_marrow_change", n, 0) == 1;
    } else {
      g.focus_amplitude = static_cast<double>(spec.baseline_offset + c);
      g.height_scale = flag(spec.fracture, n) ? 0.6 : 1.0;
      g.bulge = flag(spec.compression, n);
    }
    for (std::size_t k = 0; k < spec.sequence_types.size(); ++k) {
      const int type = spec.sequence_types[k];
      if (type < 0 || static_cast<std::size_t>(type) >= spec.contrast_table.size()) {
        throw ValidationError("phantom " + spec.study_id + ": sequence type " + std::to_string(type) + " has no contrast entry");
      }
      VertebraToken token;
      token.level = study.levels[n];
      token.sequence = type;
      token.volume = render(spec, g, spec.contrast_table[static_cast<std::size_t>(type)], rng);
      study.tokens.push_back(std::move(token));
    }
    truth.vertebra[0].push_back(c >= 2 ? Label::positive : Label::negative);
    truth.vertebra[1].push_back(flag(spec.fracture, n) ? Label::positive : Label::negative);
    truth.vertebra[2].push_back(flag(spec.compression, n) ? Label::positive : Label::negative);
  }
  if (spec.grading) {
    study.grading = spec.grading;
  } else {
    for (std::size_t k = 0; k < kNumConditions; ++k) {
      truth.bag[k] = std::count(truth.vertebra[k].begin(), truth.vertebra[k].end(), Label::positive) > 0;
    }
    study.exhaustive_labels = truth;
  }
  return study;
}

json PhantomMixture::to_json() const {
  return {{"task", task_family_name(family)},
          {"min_vertebrae", min_vertebrae},
          {"max_vertebrae", max_vertebrae},
          {"slices", slices},
          {"slice_size", {height, width}},
          {"sequence_types", sequence_types},
          {"baseline_positive_prob", baseline_positive_prob},
          {"no_lesion_fraction", no_lesion_fraction},
          {"contrast_given_baseline", contrast_given_baseline},
          {"fracture_prob_metastatic", fracture_prob_metastatic},
          {"fracture_prob_other", fracture_prob_other},
          {"compression_prob_fractured", compression_prob_fractured},
          {"compression_prob_other", compression_prob_other},
          {"report_complete_prob", report_complete_prob},
          {"noise_sigma", noise_sigma}};
}

PhantomMixture PhantomMixture::from_json(const json& j) {
  PhantomMixture m;
  reject_unknown_keys(j, m.to_json(), "phantom");
  try {
    if (j.contains("task")) m.family = task_family_from_name(j.at("task").get<std::string>());
    m.min_vertebrae = j.value("min_vertebrae", m.min_vertebrae);
    m.max_vertebrae = j.value("max_vertebrae", m.max_vertebrae);
    m.slices = j.value("slices", m.slices);
    if (j.contains("slice_size")) {
      m.height = j.at("slice_size").at(0).get<std::size_t>();
      m.width = j.at("slice_size").at(1).get<std::size_t>();
    }
    m.sequence_types = j.value("sequence_types", m.sequence_types);
    m.baseline_positive_prob = j.value("baseline_positive_prob", m.baseline_positive_prob);
    m.no_lesion_fraction = j.value("no_lesion_fraction", m.no_lesion_fraction);
    m.contrast_given_baseline = j.value("contrast_given_baseline", m.contrast_given_baseline);
    m.fracture_prob_metastatic = j.value("fracture_prob_metastatic", m.fracture_prob_metastatic);
    m.fracture_prob_other = j.value("fracture_prob_other", m.fracture_prob_other);
    m.compression_prob_fractured = j.value("compression_prob_fractured", m.compression_prob_fractured);
    m.compression_prob_other = j.value("compression_prob_other", m.compression_prob_other);
    m.report_complete_prob = j.value("report_complete_prob", m.report_complete_prob);
    m.noise_sigma = j.value("noise_sigma", m.noise_sigma);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("phantom: ") + e.what());
  }
  if (m.min_vertebrae == 0 || m.max_vertebrae < m.min_vertebrae) throw ConfigError("phantom: need 1 <= min_vertebrae <= max_vertebrae");
  if (m.max_vertebrae > default_level_names().size()) throw ConfigError("phantom: max_vertebrae exceeds the level vocabulary");
  if (m.family == TaskFamily::custom) throw ConfigError("phantom: task must be cancer or grading");
  return m;
}

PhantomSpec sample_phantom_spec(const PhantomMixture& mixture, std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng(derive_seed(seed, {index}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PhantomSpec spec;
  char id[32];
  std::snprintf(id, sizeof(id), "study_%05zu", index);
  spec.study_id = id;
  spec.slices = mixture.slices;
  spec.height = mixture.height;
  spec.width = mixture.width;
  spec.sequence_types = mixture.sequence_types;
  spec.noise_sigma = mixture.noise_sigma;
  const std::size_t n = std::uniform_int_distribution<std::size_t>(mixture.min_vertebrae, mixture.max_vertebrae)(rng);
  const std::size_t n_levels = default_level_names().size();
  spec.first_level = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n_levels - n)(rng));
  spec.lesion_contrast.assign(n, 0);
  spec.fracture.assign(n, false);
  spec.compression.assign(n, false);

  if (mixture.family == TaskFamily::grading) {
    GradingLabels labels;
    for (const TaskSpec& task : grading_tasks()) {
      std::uniform_int_distribution<int> grade(task.min_label, task.min_label + static_cast<int>(task.n_classes) - 1);
      auto& column = labels[task.name];
      for (std::size_t i = 0; i < n; ++i) column.push_back(grade(rng));
    }
    spec.grading = std::move(labels);
    spec.seed = rng();
    return spec;
  }

  spec.baseline_offset = unit(rng) < mixture.baseline_positive_prob ? 1 : 0;
  const auto forced = static_cast<std::size_t>(std::ceil(mixture.no_lesion_fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto& weights = mixture.contrast_given_baseline[static_cast<std::size_t>(spec.baseline_offset)];
  std::discrete_distribution<int> contrast(weights.begin(), weights.end());
  for (std::size_t i = 0; i < n; ++i) spec.lesion_contrast[order[i]] = i < forced ? 0 : contrast(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const bool metastatic = spec.lesion_contrast[i] >= 2;
    spec.fracture[i] = unit(rng) < (metastatic ? mixture.fracture_prob_metastatic : mixture.fracture_prob_other);
    spec.compression[i] =
        unit(rng) < ((metastatic && spec.fracture[i]) ? mixture.compression_prob_fractured : mixture.compression_prob_other);
  }
  spec.seed = rng();
  return spec;
}

AnnotationRecord simulate_report(const StudySample& study, double complete_prob, std::mt19937_64& rng) {
  if (!study.exhaustive_labels) throw ContractError("simulate_report: study " + study.id + " has no exhaustive labels");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AnnotationRecord record;
  record.study_id = study.id;
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    std::vector<int> positives;
    for (std::size_t n = 0; n < study.levels.size(); ++n) {
      if (study.exhaustive_labels->vertebra[k][n] == Label::positive) positives.push_back(study.levels[n]);
    }
    ConditionAnnotation& cond = record.conditions[k];
    const bool complete = unit(rng) < complete_prob;
    if (positives.empty()) continue;
    if (static_cast<Condition>(k) == Condition::compression || complete) {
      cond.positive.insert(positives.begin(), positives.end());
      continue;
    }
    // Incomplete report: only some positives are named.
    for (int level : positives) {
      if (unit(rng) < 0.5) cond.positive.insert(level);
    }
    if (cond.positive.empty()) cond.positive.insert(positives[static_cast<std::size_t>(unit(rng) * static_cast<double>(positives.size())) % positives.size()]);
    if (static_cast<Condition>(k) == Condition::metastasis) {
      cond.widespread = true;
    } else {
      cond.ambiguous = true;
    }
  }
  return record;
}

std::vector<StudySample> generate_phantom_dataset(const PhantomMixture& mixture, DatasetCounts counts,
                                                  std::uint64_t seed) {
  const std::size_t total = counts.train + counts.val + counts.test;
  std::vector<StudySample> studies;
  studies.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    StudySample study = generate_phantom_study(sample_phantom_spec(mixture, seed, i));
    study.split = i < counts.train ? Split::train : (i < counts.train + counts.val ? Split::val : Split::test);
    if (mixture.family == TaskFamily::cancer) {
      std::mt19937_64 rng(derive_seed(seed, {i, 0x5245504Full}));
      study.annotation = simulate_report(study, mixture.report_complete_prob, rng);
      study.report_labels = derive_labels(*study.annotation, study.levels);
    }
    studies.push_back(std::move(study));
  }
  return studies;
}

json LabelLedger::to_json() const {
  auto counts = [](const std::array<Counts, kNumConditions>& c) {
    json out = json::object();
    for (std::size_t k = 0; k < kNumConditions; ++k) {
      out[kConditionNames[k]] = {{"positive", c[k].positive}, {"negative", c[k].negative},
                                 {"unknown", c[k].unknown}, {"bag_positive", c[k].bag_positive}};
    }
    return out;
  };
  return {{"studies", studies}, {"report", counts(report)}, {"exhaustive", counts(exhaustive)}};
}

LabelLedger LabelLedger::from_json(const json& j) {
  LabelLedger ledger;
  ledger.studies = j.at("studies").get<std::size_t>();
  auto read = [&j](const char* key, std::array<Counts, kNumConditions>& c) {
    for (std::size_t k = 0; k < kNumConditions; ++k) {
      const auto& v = j.at(key).at(kConditionNames[k]);
      c[k] = {v.at("positive").get<std::size_t>(), v.at("negative").get<std::size_t>(),
              v.at("unknown").get<std::size_t>(), v.at("bag_positive").get<std::size_t>()};
    }
  };
  read("report", ledger.report);
  read("exhaustive", ledger.exhaustive);
  return ledger;
}

LabelLedger count_labels(const std::vector<StudySample>& studies) {
  LabelLedger ledger;
  ledger.studies = studies.size();
  auto tally = [](const LabelTriple& labels, std::array<LabelLedger::Counts, kNumConditions>& counts) {
    for (std::size_t k = 0; k < kNumConditions; ++k) {
      for (Label l : labels.vertebra[k]) {
        if (l == Label::positive) ++counts[k].positive;
        if (l == Label::negative) ++counts[k].negative;
        if (l == Label::unknown) ++counts[k].unknown;
      }
      if (labels.bag[k]) ++counts[k].bag_positive;
    }
  };
  for (const StudySample& s : studies) {
    if (s.report_labels) tally(*s.report_labels, ledger.report);
    if (s.exhaustive_labels) tally(*s.exhaustive_labels, ledger.exhaustive);
  }
  return ledger;
}

// ---- preprocessing -------------------------------------------------------------

Volume normalize_volume(const Volume& raw) {
  Volume out = raw;
  const auto n = static_cast<double>(raw.voxels.size());
  if (raw.voxels.empty()) return out;
  double mu = 0.0;
  for (double v : raw.voxels) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : raw.voxels) var += (v - mu) * (v - mu);
  const double denom = std::sqrt(var / n) + 1e-6;
  for (double& v : out.voxels) v = (v - mu) / denom;
  return out;
}

StudySample normalize_study(const StudySample& study) {
  StudySample out = study;
  for (VertebraToken& t : out.tokens) {
    if (t.present) t.volume = normalize_volume(t.volume);
  }
  return out;
}

AugmentParams sample_augment_params(const AugmentRanges& r, std::size_t height, std::size_t width,
                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  AugmentParams p;
  p.rotation_deg = r.rotation_deg * sym(rng);
  p.translate_y = r.translation_px * static_cast<double>(height) / r.reference_extent * sym(rng);
  p.translate_x = r.translation_px * static_cast<double>(width) / r.reference_extent * sym(rng);
  p.scale = 1.0 + r.scale * sym(rng);
  p.gain = 1.0 + r.gain * sym(rng);
  return p;
}

Volume augment(const Volume& volume, const AugmentParams& p) {
  Volume out(volume.slices, volume.height, volume.width);
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double cy = (static_cast<double>(volume.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(volume.width) - 1.0) / 2.0;
  const auto h = static_cast<std::ptrdiff_t>(volume.height), w = static_cast<std::ptrdiff_t>(volume.width);
  const bool identity = theta == 0.0 && p.translate_x == 0.0 && p.translate_y == 0.0 && p.scale == 1.0;
  for (std::size_t s = 0; s < volume.slices; ++s) {
    auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
      if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
      return volume.at(s, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    };
    for (std::size_t y = 0; y < volume.height; ++y) {
      for (std::size_t x = 0; x < volume.width; ++x) {
        double value;
        if (identity) {
          value = volume.at(s, y, x);
        } else {
          // Inverse map: output pixel -> source location.
          const double oy = (static_cast<double>(y) - cy - p.translate_y) / p.scale;
          const double ox = (static_cast<double>(x) - cx - p.translate_x) / p.scale;
          const double sy = cos_t * oy + sin_t * ox + cy;
          const double sx = -sin_t * oy + cos_t * ox + cx;
          const double fy = std::floor(sy), fx = std::floor(sx);
          const double wy = sy - fy, wx = sx - fx;
          const auto iy = static_cast<std::ptrdiff_t>(fy), ix = static_cast<std::ptrdiff_t>(fx);
          value = (1 - wy) * ((1 - wx) * sample(iy, ix) + wx * sample(iy, ix + 1)) +
                  wy * ((1 - wx) * sample(iy + 1, ix) + wx * sample(iy + 1, ix + 1));
        }
        out.at(s, y, x) = value * p.gain;
      }
    }
  }
  return out;
}

Volume augment(const Volume& volume, const AugmentRanges& ranges, std::mt19937_64& rng) {
  return augment(volume, sample_augment_params(ranges, volume.height, volume.width, rng));
}

StudySample sequence_drop(const StudySample& study, std::mt19937_64& rng, SequenceDropProbs probs) {
  if (study.n_sequences() < 2) throw ContractError("sequence_drop: study " + study.id + " has fewer than 2 sequences");
  StudySample out = study;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, study.n_sequences() - 1);
  for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
    const double u = unit(rng);
    if (u < probs.all) {
      for (std::size_t c = 0; c < study.n_sequences(); ++c) out.token(n, c).present = false;
    } else if (u < probs.all + probs.single) {
      out.token(n, pick(rng)).present = false;
    }
  }
  return out;
}

// ---- files -----------------------------------------------------------------------

namespace {

constexpr char kVolumeMagic[4] = {'S', 'C', 'T', 'V'};
constexpr std::uint32_t kVolumeVersion = 1;
constexpr int kManifestVersion = 1;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing '" + path.string() + "'");
}

json labels_to_json(const LabelTriple& labels) {
  json out = json::object();
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    json column = json::array();
    for (Label l : labels.vertebra[k]) column.push_back(l == Label::positive ? 1 : 0);
    out[kConditionNames[k]] = column;
  }
  return out;
}

LabelTriple labels_from_json(const json& j, std::size_t n_vertebrae, const std::string& study) {
  LabelTriple out;
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    const auto& column = j.at(kConditionNames[k]);
    if (column.size() != n_vertebrae) throw ValidationError("study " + study + ": exhaustive labels have wrong length");
    for (const auto& v : column) out.vertebra[k].push_back(v.get<int>() == 1 ? Label::positive : Label::negative);
    out.bag[k] = std::count(out.vertebra[k].begin(), out.vertebra[k].end(), Label::positive) > 0;
  }
  return out;
}

}  // namespace

void save_volume(const std::string& path, const Volume& volume) {
  std::string out(kVolumeMagic, 4);
  binary::put_uint<std::uint32_t>(out, kVolumeVersion);
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(volume.slices));
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(volume.height));
  binary::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(volume.width));
  for (double v : volume.voxels) binary::put_f32(out, static_cast<float>(v));
  write_file(path, out);
}

Volume load_volume(const std::string& path) {
  const std::string bytes = read_file(path);
  binary::Reader in(bytes, path);
  if (in.take(4) != std::string_view(kVolumeMagic, 4)) throw LoadError(path + ": bad magic (expected SCTV)");
  const auto version = in.uint<std::uint32_t>();
  if (version != kVolumeVersion) throw LoadError(path + ": unsupported volume version " + std::to_string(version));
  const auto s = in.uint<std::uint32_t>(), h = in.uint<std::uint32_t>(), w = in.uint<std::uint32_t>();
  const std::size_t count = static_cast<std::size_t>(s) * h * w;
  if (in.remaining() != count * 4) {
    throw LoadError(path + ": payload holds " + std::to_string(in.remaining()) + " bytes but dims " + std::to_string(s) +
                    "x" + std::to_string(h) + "x" + std::to_string(w) + " need " + std::to_string(count * 4));
  }
  Volume vol(s, h, w);
  for (double& v : vol.voxels) v = static_cast<double>(in.f32());
  return vol;
}

std::vector<StudySample> Dataset::split(Split which) const {
  std::vector<StudySample> out;
  for (const StudySample& s : studies) {
    if (s.split == which) out.push_back(s);
  }
  return out;
}

void write_dataset(const fs::path& dir, const Dataset& dataset) {
  std::error_code ec;
  fs::create_directories(dir / "volumes", ec);
  if (ec) throw LoadError("cannot create '" + (dir / "volumes").string() + "': " + ec.message());
  json studies = json::array();
  for (const StudySample& s : dataset.studies) {
    json entry = {{"id", s.id}, {"split", split_name(s.split)}};
    json levels = json::array(), sequences = json::array(), volumes = json::array();
    for (int l : s.levels) levels.push_back(dataset.level_names.at(static_cast<std::size_t>(l)));
    for (int c : s.sequences) sequences.push_back(dataset.sequence_names.at(static_cast<std::size_t>(c)));
    for (std::size_t n = 0; n < s.n_vertebrae(); ++n) {
      for (std::size_t c = 0; c < s.n_sequences(); ++c) {
        const VertebraToken& t = s.token(n, c);
        if (!t.present) continue;
        const std::string level = dataset.level_names.at(static_cast<std::size_t>(t.level));
        const std::string seq = dataset.sequence_names.at(static_cast<std::size_t>(t.sequence));
        const std::string rel = "volumes/" + s.id + "_" + level + "_" + seq + ".sctv";
        save_volume((dir / rel).string(), t.volume);
        volumes.push_back({{"level", level}, {"sequence", seq}, {"path", rel}});
      }
    }
    entry["levels"] = levels;
    entry["sequences"] = sequences;
    entry["volumes"] = volumes;
    if (s.annotation) entry["annotation"] = annotation_to_json(*s.annotation, dataset.level_names);
    if (s.exhaustive_labels) entry["exhaustive"] = labels_to_json(*s.exhaustive_labels);
    if (s.grading) entry["grading"] = *s.grading;
    studies.push_back(std::move(entry));
  }
  const json manifest = {{"format", "sct-manifest"},
                         {"version", kManifestVersion},
                         {"task", task_family_name(dataset.family)},
                         {"levels", dataset.level_names},
                         {"sequences", dataset.sequence_names},
                         {"slice_size", {dataset.slice_height, dataset.slice_width}},
                         {"studies", studies}};
  write_file(dir / "manifest.json", manifest.dump(1) + "\n");
  write_file(dir / "label_ledger.json", count_labels(dataset.studies).to_json().dump(1) + "\n");
}

Dataset load_dataset(const fs::path& manifest_path) {
  const std::string where = manifest_path.string();
  json manifest;
  try {
    manifest = json::parse(read_file(where));
  } catch (const json::exception& e) {
    throw LoadError(where + ": not valid JSON: " + e.what());
  }
  const fs::path root = manifest_path.parent_path();
  Dataset ds;
  try {
    if (manifest.value("format", std::string()) != "sct-manifest") throw LoadError(where + ": not an sct-manifest");
    if (manifest.value("version", 0) != kManifestVersion) throw LoadError(where + ": unsupported manifest version");
    ds.family = task_family_from_name(manifest.value("task", std::string("cancer")));
    ds.level_names = manifest.at("levels").get<std::vector<std::string>>();
    ds.sequence_names = manifest.at("sequences").get<std::vector<std::string>>();
    ds.slice_height = manifest.at("slice_size").at(0).get<std::size_t>();
    ds.slice_width = manifest.at("slice_size").at(1).get<std::size_t>();
    for (const auto& entry : manifest.at("studies")) {
      StudySample s;
      s.id = entry.at("id").get<std::string>();
      s.split = split_from_name(entry.at("split").get<std::string>());
      for (const auto& l : entry.at("levels")) s.levels.push_back(level_index(ds.level_names, l.get<std::string>()));
      for (const auto& c : entry.at("sequences")) {
        const auto it = std::find(ds.sequence_names.begin(), ds.sequence_names.end(), c.get<std::string>());
        if (it == ds.sequence_names.end()) throw ValidationError("study " + s.id + ": unknown sequence " + c.dump());
        s.sequences.push_back(static_cast<int>(it - ds.sequence_names.begin()));
      }
      s.tokens.resize(s.levels.size() * s.sequences.size());
      for (std::size_t n = 0; n < s.levels.size(); ++n) {
        for (std::size_t c = 0; c < s.sequences.size(); ++c) {
          VertebraToken& t = s.token(n, c);
          t.level = s.levels[n];
          t.sequence = s.sequences[c];
          t.present = false;
        }
      }
      for (const auto& v : entry.at("volumes")) {
        const int level = level_index(ds.level_names, v.at("level").get<std::string>());
        const auto seq_it = std::find(ds.sequence_names.begin(), ds.sequence_names.end(), v.at("sequence").get<std::string>());
        const auto lvl_it = std::find(s.levels.begin(), s.levels.end(), level);
        if (lvl_it == s.levels.end() || seq_it == ds.sequence_names.end()) {
          throw ValidationError("study " + s.id + ": volume entry names a vertebra or sequence the study does not list");
        }
        const int seq = static_cast<int>(seq_it - ds.sequence_names.begin());
        const auto c_it = std::find(s.sequences.begin(), s.sequences.end(), seq);
        if (c_it == s.sequences.end()) throw ValidationError("study " + s.id + ": volume sequence not listed for study");
        VertebraToken& t = s.token(static_cast<std::size_t>(lvl_it - s.levels.begin()),
                                   static_cast<std::size_t>(c_it - s.sequences.begin()));
        const std::string path = (root / v.at("path").get<std::string>()).string();
        if (!fs::exists(path)) throw LoadError("study " + s.id + ": missing volume file '" + path + "'");
        t.volume = load_volume(path);
        if (t.volume.height != ds.slice_height || t.volume.width != ds.slice_width) {
          throw LoadError(path + ": slice size " + std::to_string(t.volume.height) + "x" + std::to_string(t.volume.width) +
                          " does not match manifest slice_size");
        }
        t.present = true;
      }
      for (std::size_t n = 0; n < s.levels.size(); ++n) {
        bool any = false;
        for (std::size_t c = 0; c < s.sequences.size(); ++c) any = any || s.token(n, c).present;
        if (!any) throw ValidationError("study " + s.id + ": vertebra " + ds.level_names[static_cast<std::size_t>(s.levels[n])] + " has no volume in any sequence");
      }
      if (entry.contains("annotation")) {
        s.annotation = annotation_from_json(entry.at("annotation"), ds.level_names);
        s.annotation->study_id = s.id;
        s.report_labels = derive_labels(*s.annotation, s.levels);
      }
      if (entry.contains("exhaustive")) s.exhaustive_labels = labels_from_json(entry.at("exhaustive"), s.levels.size(), s.id);
      if (entry.contains("grading")) {
        s.grading = entry.at("grading").get<GradingLabels>();
        for (const TaskSpec& task : grading_tasks()) {
          const auto it = s.grading->find(task.name);
          if (it == s.grading->end()) continue;
          for (int g : it->second) {
            if (g != kMissingGrade && (g < task.min_label || g >= task.min_label + static_cast<int>(task.n_classes))) {
              throw ValidationError("study " + s.id + ": " + task.name + " grade " + std::to_string(g) + " out of range");
            }
          }
        }
      }
      ds.studies.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw LoadError(where + ": malformed manifest: " + e.what());
  }
  return ds;
}

}  // namespace sct
