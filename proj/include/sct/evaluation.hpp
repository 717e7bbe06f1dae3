#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sct/model.hpp"
#include "sct/training.hpp"

namespace sct {

// Area under the ROC curve, ties counted one half. Empty when either class
// is missing.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};
// One point per distinct score, from (0, 0) to (1, 1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

// Mean recall over the classes that occur in `labels`. Empty for empty input.
std::optional<double> balanced_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                        std::size_t n_classes);

// Lowest index wins ties.
std::size_t argmax_class(std::span<const double> logits);

struct TaskMetric {
  std::string task;
  std::string metric;
  std::optional<double> value;
  std::size_t n_included = 0;
  std::size_t n_excluded = 0;
};

struct Prediction {
  std::string study;
  std::string level;
  std::string task;
  double score = 0.0;
  // "NA" for excluded vertebrae.
  std::string label;
};

struct EvaluationReport {
  std::vector<TaskMetric> metrics;
  std::vector<Prediction> predictions;
};

// Dropout off, volumes normalized. Vertebra scores are pooled across studies;
// unknown labels are excluded. Report conditions also get a study-level AUC
// of the max-aggregated bag probability.
EvaluationReport evaluate(const SctModel& model, const std::vector<StudySample>& studies, LabelSource source,
                          const std::vector<std::string>& level_names = default_level_names());

// task,metric,value,n_included,n_excluded
std::string metrics_csv(const std::vector<TaskMetric>& metrics);
// study,level,task,score,label
std::string predictions_csv(const std::vector<Prediction>& predictions);

// Per (vertebra, sequence, slice): slice attention weight; per (vertebra,
// sequence): mean sequence-attention weight over channels; per (vertebra,
// slice, task): score from a forward pass on that slice alone.
struct AttributionRow {
  std::string kind;  // slice_attention | sequence_attention | slicewise_score
  std::string level;
  std::string sequence;
  std::string task;
  long slice = -1;
  double value = 0.0;
};

std::vector<AttributionRow> export_attribution(const SctModel& model, const StudySample& study,
                                               const std::vector<std::string>& level_names = default_level_names(),
                                               const std::vector<std::string>& sequence_names = {});
// study,kind,level,sequence,task,slice,value
std::string attribution_csv(const std::string& study_id, const std::vector<AttributionRow>& rows);

}  // namespace sct
