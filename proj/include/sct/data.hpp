#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/study.hpp"

namespace sct {

// ---- report labels -----------------------------------------------------------

// Turns a report-style annotation into per-vertebra and per-study labels.
//
// Metastasis and fracture: named positives are positive, named negatives are
// negative, and every other level is unknown when the report flags the
// condition as widespread or as inconclusive about the unnamed levels;
// otherwise those levels are negative. Compression is negative unless named
// positive. A study is positive for a condition when any level is named
// positive or the condition is widespread.
LabelTriple derive_labels(const AnnotationRecord& record, const std::vector<int>& vertebrae);

nlohmann::json annotation_to_json(const AnnotationRecord& record, const std::vector<std::string>& level_names);
AnnotationRecord annotation_from_json(const nlohmann::json& j, const std::vector<std::string>& level_names);

// ---- phantoms ----------------------------------------------------------------

struct SequenceContrast {
  std::string name;
  double baseline = 1.0;     // vertebral body intensity
  double lesion_sign = 1.0;  // +1 bright lesions, -1 dark lesions
};

// T1, T2, STIR, FLAIR.
std::vector<SequenceContrast> default_sequence_table();

struct PhantomSpec {
  std::string study_id = "phantom";
  std::size_t slices = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  int first_level = 0;
  std::vector<int> sequence_types{0, 1};
  std::vector<SequenceContrast> contrast_table = default_sequence_table();
  // Study-wide offset b in {0, 1}.
  int baseline_offset = 0;
  // Per vertebra c in {0, 1, 2, 3}; metastatic iff c >= 2.
  std::vector<int> lesion_contrast;
  std::vector<bool> fracture;
  std::vector<bool> compression;
  // Slice holding each lesion focus; -1 draws one at random.
  std::vector<int> lesion_slice;
  // Grading labels per task; when set, disc features are rendered instead.
  std::optional<GradingLabels> grading;
  double noise_sigma = 0.05;
  double contrast_unit = 0.3;
  std::uint64_t seed = 0;

  std::size_t n_vertebrae() const { return lesion_contrast.size(); }
};

// Renders one study. The focus amplitude b + c is the only intensity cue a
// single vertebra carries about its label; b is shared by every vertebra of
// the study. Volumes are rounded to f32 so they survive the on-disk format
// unchanged.
StudySample generate_phantom_study(const PhantomSpec& spec);

// Distribution over phantom studies.
struct PhantomMixture {
  TaskFamily family = TaskFamily::cancer;
  std::size_t min_vertebrae = 5;
  std::size_t max_vertebrae = 7;
  std::size_t slices = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<int> sequence_types{0, 1};
  double baseline_positive_prob = 0.5;
  // Share of each study's vertebrae forced to c = 0.
  double no_lesion_fraction = 0.3;
  // P(c | b) for the remaining vertebrae, rows indexed by b.
  std::array<std::array<double, 4>, 2> contrast_given_baseline{{{0.0, 0.1, 0.9, 0.0}, {0.0, 0.9, 0.1, 0.0}}};
  double fracture_prob_metastatic = 0.3;
  double fracture_prob_other = 0.05;
  double compression_prob_fractured = 0.5;
  double compression_prob_other = 0.02;
  // Probability that a report names every positive level.
  double report_complete_prob = 0.7;
  double noise_sigma = 0.05;

  nlohmann::json to_json() const;
  static PhantomMixture from_json(const nlohmann::json& j);
};

PhantomSpec sample_phantom_spec(const PhantomMixture& mixture, std::uint64_t seed, std::size_t index);

// Simulated report for a study with exhaustive labels.
AnnotationRecord simulate_report(const StudySample& study, double complete_prob, std::mt19937_64& rng);

struct DatasetCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

// Studies are generated independently from per-index seeds, so any subset can
// be regenerated in any order with identical results.
std::vector<StudySample> generate_phantom_dataset(const PhantomMixture& mixture, DatasetCounts counts,
                                                  std::uint64_t seed);

// Per condition: vertebra label counts from report and exhaustive labels, and
// positive bag counts.
struct LabelLedger {
  struct Counts {
    std::size_t positive = 0;
    std::size_t negative = 0;
    std::size_t unknown = 0;
    std::size_t bag_positive = 0;
    bool operator==(const Counts&) const = default;
  };
  std::size_t studies = 0;
  std::array<Counts, kNumConditions> report{};
  std::array<Counts, kNumConditions> exhaustive{};

  bool operator==(const LabelLedger&) const = default;
  nlohmann::json to_json() const;
  static LabelLedger from_json(const nlohmann::json& j);
};

LabelLedger count_labels(const std::vector<StudySample>& studies);

// ---- preprocessing -------------------------------------------------------------

// (v - mean) / (std + 1e-6) over the whole volume.
Volume normalize_volume(const Volume& raw);
StudySample normalize_study(const StudySample& study);

struct AugmentRanges {
  double rotation_deg = 15.0;
  // Translation in pixels of a `reference_extent`-pixel slice; rescaled to the
  // actual slice width.
  double translation_px = 32.0;
  double reference_extent = 112.0;
  double scale = 0.1;
  double gain = 0.1;
};

struct AugmentParams {
  double rotation_deg = 0.0;
  double translate_y = 0.0;
  double translate_x = 0.0;
  double scale = 1.0;
  double gain = 1.0;
};

AugmentParams sample_augment_params(const AugmentRanges& ranges, std::size_t height, std::size_t width,
                                    std::mt19937_64& rng);
// Same affine warp on every slice (bilinear, zero fill), then intensity gain.
Volume augment(const Volume& volume, const AugmentParams& params);
Volume augment(const Volume& volume, const AugmentRanges& ranges, std::mt19937_64& rng);

struct SequenceDropProbs {
  double single = 0.4;
  double all = 0.1;
};

// Per vertebra: with p = single one random sequence is marked absent, with
// p = all every sequence is. Labels are untouched.
StudySample sequence_drop(const StudySample& study, std::mt19937_64& rng, SequenceDropProbs probs = {});

// ---- files -----------------------------------------------------------------------

// "SCTV" | u32 version | u32 S, H, W | f32 little-endian payload.
void save_volume(const std::string& path, const Volume& volume);
Volume load_volume(const std::string& path);

struct Dataset {
  TaskFamily family = TaskFamily::cancer;
  std::vector<std::string> level_names = default_level_names();
  std::vector<std::string> sequence_names;
  std::size_t slice_height = 0;
  std::size_t slice_width = 0;
  std::vector<StudySample> studies;

  std::vector<StudySample> split(Split which) const;
};

// Writes volumes/, manifest.json and label_ledger.json under `dir`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace sct
