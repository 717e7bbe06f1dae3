#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sct/tensor.hpp"

namespace sct {

// S x H x W stack of sagittal slices, row-major.
struct Volume {
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> voxels;

  Volume() = default;
  Volume(std::size_t s, std::size_t h, std::size_t w, double fill = 0.0)
      : slices(s), height(h), width(w), voxels(s * h * w, fill) {}

  double& at(std::size_t s, std::size_t y, std::size_t x) { return voxels[(s * height + y) * width + x]; }
  double at(std::size_t s, std::size_t y, std::size_t x) const { return voxels[(s * height + y) * width + x]; }
  std::size_t slice_size() const { return height * width; }
  Tensor to_tensor() const { return Tensor::from_data({slices, height, width}, voxels); }
  // Keeps only slice `index`.
  Volume single_slice(std::size_t index) const;
};

// One vertebra as seen in one MR sequence.
struct VertebraToken {
  Volume volume;
  int level = 0;     // index into the level vocabulary
  int sequence = 0;  // index into the sequence vocabulary
  bool present = true;

  std::vector<double> level_onehot(std::size_t n_levels) const;
  std::vector<double> sequence_onehot(std::size_t n_sequences) const;
};

enum class Condition : std::size_t { metastasis = 0, fracture = 1, compression = 2 };
inline constexpr std::size_t kNumConditions = 3;
inline constexpr std::array<const char*, kNumConditions> kConditionNames = {"metastasis", "fracture", "compression"};

std::optional<Condition> condition_from_name(const std::string& name);

enum class Label { negative, positive, unknown };

// Report-style annotation of one condition.
struct ConditionAnnotation {
  bool widespread = false;
  // The report is inconclusive about the levels it does not name.
  bool ambiguous = false;
  std::set<int> positive;
  std::set<int> negative;
};

struct AnnotationRecord {
  std::string study_id;
  std::array<ConditionAnnotation, kNumConditions> conditions;
};

struct LabelTriple {
  std::array<std::vector<Label>, kNumConditions> vertebra;
  std::array<bool, kNumConditions> bag{};
};

inline constexpr int kMissingGrade = -1;

// Per task name, one grade per vertebra (IVD); kMissingGrade where absent.
using GradingLabels = std::map<std::string, std::vector<int>>;

enum class Split { train, val, test };
const char* split_name(Split split);
Split split_from_name(const std::string& name);

struct StudySample {
  std::string id;
  Split split = Split::train;
  std::vector<int> levels;     // N, anatomical order
  std::vector<int> sequences;  // C
  // N * C tokens, vertebra-major.
  std::vector<VertebraToken> tokens;

  std::optional<AnnotationRecord> annotation;
  std::optional<LabelTriple> report_labels;
  std::optional<LabelTriple> exhaustive_labels;
  std::optional<GradingLabels> grading;

  std::size_t n_vertebrae() const { return levels.size(); }
  std::size_t n_sequences() const { return sequences.size(); }
  const VertebraToken& token(std::size_t vertebra, std::size_t sequence) const {
    return tokens[vertebra * sequences.size() + sequence];
  }
  VertebraToken& token(std::size_t vertebra, std::size_t sequence) {
    return tokens[vertebra * sequences.size() + sequence];
  }
  // Throws ContractError when the token grid is inconsistent.
  void validate() const;
};

struct TaskSpec {
  std::string name;
  std::size_t n_classes = 2;
  int min_label = 0;  // grade that maps to class 0

  std::size_t n_logits() const { return n_classes == 2 ? 1 : n_classes; }
  bool binary() const { return n_classes == 2; }
};

enum class TaskFamily { cancer, grading, custom };
TaskFamily task_family_from_name(const std::string& name);
const char* task_family_name(TaskFamily family);

std::vector<TaskSpec> cancer_tasks();
std::vector<TaskSpec> grading_tasks();

// Vertebra names S1 up to C2, the order used by report tables.
const std::vector<std::string>& default_level_names();
int level_index(const std::vector<std::string>& vocabulary, const std::string& name);

}  // namespace sct
