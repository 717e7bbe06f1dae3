#include "sct/study.hpp"

#include <algorithm>

namespace sct {

Volume Volume::single_slice(std::size_t index) const {
  if (index >= slices) {
    throw DimensionError("single_slice: slice " + std::to_string(index) + " of a " + std::to_string(slices) +
                         "-slice volume");
  }
  Volume out(1, height, width);
  std::copy_n(voxels.begin() + static_cast<std::ptrdiff_t>(index * slice_size()), slice_size(), out.voxels.begin());
  return out;
}

std::vector<double> VertebraToken::level_onehot(std::size_t n_levels) const {
  if (level < 0 || static_cast<std::size_t>(level) >= n_levels) {
    throw DimensionError("level code " + std::to_string(level) + " outside vocabulary of " + std::to_string(n_levels));
  }
  std::vector<double> code(n_levels, 0.0);
  code[static_cast<std::size_t>(level)] = 1.0;
  return code;
}

std::vector<double> VertebraToken::sequence_onehot(std::size_t n_sequences) const {
  if (sequence < 0 || static_cast<std::size_t>(sequence) >= n_sequences) {
    throw DimensionError("sequence code " + std::to_string(sequence) + " outside vocabulary of " +
                         std::to_string(n_sequences));
  }
  std::vector<double> code(n_sequences, 0.0);
  code[static_cast<std::size_t>(sequence)] = 1.0;
  return code;
}

std::optional<Condition> condition_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kNumConditions; ++i) {
    if (name == kConditionNames[i]) return static_cast<Condition>(i);
  }
  return std::nullopt;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ValidationError("unknown split '" + name + "'");
}

void StudySample::validate() const {
  if (levels.empty() || sequences.empty()) throw ContractError("study " + id + ": needs at least one vertebra and sequence");
  if (tokens.size() != levels.size() * sequences.size()) {
    throw ContractError("study " + id + ": expected " + std::to_string(levels.size() * sequences.size()) +
                        " tokens, found " + std::to_string(tokens.size()));
  }
  for (std::size_t n = 0; n < levels.size(); ++n) {
    for (std::size_t c = 0; c < sequences.size(); ++c) {
      const VertebraToken& t = token(n, c);
      if (t.level != levels[n] || t.sequence != sequences[c]) {
        throw ContractError("study " + id + ": token (" + std::to_string(n) + ", " + std::to_string(c) +
                            ") carries mismatched level/sequence codes");
      }
      if (t.present && t.volume.slices == 0) {
        throw ContractError("study " + id + ": present token without slices");
      }
    }
  }
}

TaskFamily task_family_from_name(const std::string& name) {
  if (name == "cancer") return TaskFamily::cancer;
  if (name == "grading") return TaskFamily::grading;
  if (name == "custom") return TaskFamily::custom;
  throw ConfigError("unknown task registry '" + name + "' (expected cancer, grading or custom)");
}

const char* task_family_name(TaskFamily family) {
  switch (family) {
    case TaskFamily::cancer:
      return "cancer";
    case TaskFamily::grading:
      return "grading";
    case TaskFamily::custom:
      return "custom";
  }
  return "custom";
}

std::vector<TaskSpec> cancer_tasks() {
  return {{"metastasis", 2, 0}, {"fracture", 2, 0}, {"compression", 2, 0}};
}

std::vector<TaskSpec> grading_tasks() {
  return {{"pfirrmann", 5, 1},
          {"disc_narrowing", 4, 1},
          {"central_canal_stenosis", 2, 0},
          {"spondylolisthesis", 2, 0},
          {"upper_endplate_defect", 2, 0},
          {"lower_endplate_defect", 2, 0},
          {"upper_marrow_change", 2, 0},
          {"lower_marrow_change", 2, 0}};
}

const std::vector<std::string>& default_level_names() {
  static const std::vector<std::string> names = {"S1",  "L5",  "L4",  "L3", "L2", "L1", "T12", "T11",
                                                 "T10", "T9",  "T8",  "T7", "T6", "T5", "T4",  "T3",
                                                 "T2",  "T1",  "C7",  "C6", "C5", "C4", "C3",  "C2"};
  return names;
}

int level_index(const std::vector<std::string>& vocabulary, const std::string& name) {
  const auto it = std::find(vocabulary.begin(), vocabulary.end(), name);
  if (it == vocabulary.end()) throw ValidationError("level '" + name + "' is not in the vocabulary");
  return static_cast<int>(it - vocabulary.begin());
}

}  // namespace sct
