#include "sct/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace sct {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": " + std::to_string(a) + " scores vs " + std::to_string(b) + " labels");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size(), "roc_auc");
  // Sweep thresholds from high to low. Twice the trapezoid area is kept as an
  // integer, so ties add exactly one half per tied pair.
  const auto order = descending_order(scores);
  std::uint64_t pos = 0, neg = 0, twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::uint64_t dp = 0, dn = 0;
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) {
      if (labels[order[j]] == 1) {
        ++dp;
      } else if (labels[order[j]] == 0) {
        ++dn;
      } else {
        throw ValidationError("roc_auc: labels must be 0 or 1");
      }
    }
    twice_area += dn * (2 * pos + dp);
    pos += dp;
    neg += dn;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size(), "roc_curve");
  const auto order = descending_order(scores);
  const auto total_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto total_neg = static_cast<double>(labels.size()) - total_pos;
  std::vector<RocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == threshold; ++i) (labels[order[i]] == 1 ? tp : fp) += 1.0;
    curve.push_back({threshold, total_neg > 0 ? fp / total_neg : 0.0, total_pos > 0 ? tp / total_pos : 0.0});
  }
  return curve;
}

std::optional<double> balanced_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                        std::size_t n_classes) {
  check_lengths(predictions.size(), labels.size(), "balanced_accuracy");
  if (labels.empty()) return std::nullopt;
  std::vector<std::size_t> hits(n_classes, 0), support(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes || predictions[i] < 0 ||
        static_cast<std::size_t>(predictions[i]) >= n_classes) {
      throw ValidationError("balanced_accuracy: class id outside 0.." + std::to_string(n_classes - 1));
    }
    ++support[static_cast<std::size_t>(y)];
    if (predictions[i] == y) ++hits[static_cast<std::size_t>(y)];
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (support[c] == 0) continue;
    total += static_cast<double>(hits[c]) / static_cast<double>(support[c]);
    ++present;
  }
  return total / static_cast<double>(present);
}

std::size_t argmax_class(std::span<const double> logits) {
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct TaskAccumulator {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::size_t excluded = 0;
  std::vector<double> bag_scores;
  std::vector<int> bag_labels;
};

}  // namespace

EvaluationReport evaluate(const SctModel& model, const std::vector<StudySample>& studies, LabelSource source,
                          const std::vector<std::string>& level_names) {
  const SctConfig& config = model.config();
  const bool conditions = uses_report_conditions(config);
  std::vector<TaskAccumulator> acc(config.tasks.size());
  EvaluationReport report;

  for (const StudySample& raw : studies) {
    const StudySample study = normalize_study(raw);
    const ModelOutput out = model.forward(study);
    const LabelTriple* triple = nullptr;
    if (conditions) {
      const auto& labels = source == LabelSource::report ? study.report_labels : study.exhaustive_labels;
      if (!labels) throw ValidationError("study " + study.id + " has no " + label_source_name(source) + " labels");
      triple = &*labels;
    } else if (!study.grading) {
      throw ValidationError("study " + study.id + " has no grading labels");
    }
    for (std::size_t t = 0; t < config.tasks.size(); ++t) {
      const TaskSpec& task = config.tasks[t];
      const auto logits = out.logits[t].data();
      const std::size_t k = task.n_logits();
      double bag = 0.0;
      for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
        int label = -1;
        if (triple) {
          const Label l = triple->vertebra[t][n];
          if (l != Label::unknown) label = l == Label::positive ? 1 : 0;
        } else if (const auto it = study.grading->find(task.name); it != study.grading->end()) {
          if (it->second.at(n) != kMissingGrade) label = it->second[n] - task.min_label;
        }
        double score;
        int predicted;
        if (task.binary()) {
          score = sigmoid_value(logits[n]);
          predicted = logits[n] > 0.0 ? 1 : 0;
        } else {
          const auto row = logits.subspan(n * k, k);
          predicted = static_cast<int>(argmax_class(row));
          const double top = row[static_cast<std::size_t>(predicted)];
          double z = 0.0;
          for (double v : row) z += std::exp(v - top);
          score = 1.0 / z;
        }
        bag = std::max(bag, score);
        report.predictions.push_back({study.id, level_names.at(static_cast<std::size_t>(study.levels[n])), task.name,
                                      score, label < 0 ? "NA" : std::to_string(label)});
        TaskAccumulator& a = acc[t];
        if (label < 0) {
          ++a.excluded;
          continue;
        }
        a.scores.push_back(score);
        a.labels.push_back(label);
        a.predictions.push_back(predicted);
      }
      if (triple) {
        acc[t].bag_scores.push_back(bag);
        acc[t].bag_labels.push_back(triple->bag[t] ? 1 : 0);
      }
    }
  }

  for (std::size_t t = 0; t < config.tasks.size(); ++t) {
    const TaskSpec& task = config.tasks[t];
    const TaskAccumulator& a = acc[t];
    const std::size_t n = a.labels.size();
    if (task.binary()) report.metrics.push_back({task.name, "auc_vertebra_pooled", roc_auc(a.scores, a.labels), n, a.excluded});
    if (!conditions) {
      report.metrics.push_back({task.name, "balanced_accuracy", balanced_accuracy(a.predictions, a.labels, task.n_classes), n, a.excluded});
    }
    if (conditions) {
      report.metrics.push_back({task.name, "auc_study", roc_auc(a.bag_scores, a.bag_labels), a.bag_labels.size(), 0});
    }
  }
  return report;
}

std::string metrics_csv(const std::vector<TaskMetric>& metrics) {
  std::string out = "task,metric,value,n_included,n_excluded\n";
  char value[64];
  for (const TaskMetric& m : metrics) {
    if (m.value) {
      std::snprintf(value, sizeof(value), "%.17g", *m.value);
    } else {
      std::snprintf(value, sizeof(value), "NA");
    }
    out += m.task + "," + m.metric + "," + value + "," + std::to_string(m.n_included) + "," +
           std::to_string(m.n_excluded) + "\n";
  }
  return out;
}

std::string predictions_csv(const std::vector<Prediction>& predictions) {
  std::string out = "study,level,task,score,label\n";
  char score[64];
  for (const Prediction& p : predictions) {
    std::snprintf(score, sizeof(score), "%.17g", p.score);
    out += p.study + "," + p.level + "," + p.task + "," + score + "," + p.label + "\n";
  }
  return out;
}

std::vector<AttributionRow> export_attribution(const SctModel& model, const StudySample& raw,
                                               const std::vector<std::string>& level_names,
                                               const std::vector<std::string>& sequence_names) {
  const SctConfig& config = model.config();
  const StudySample study = normalize_study(raw);
  const ModelOutput out = model.forward(study);
  auto level = [&](std::size_t n) { return level_names.at(static_cast<std::size_t>(study.levels[n])); };
  auto sequence = [&](std::size_t c) {
    const int id = study.sequences[c];
    return static_cast<std::size_t>(id) < sequence_names.size() ? sequence_names[static_cast<std::size_t>(id)]
                                                               : std::to_string(id);
  };

  std::vector<AttributionRow> rows;
  for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
    for (std::size_t c = 0; c < study.n_sequences(); ++c) {
      const auto& weights = out.slice_weights[n][c];
      for (std::size_t s = 0; s < weights.size(); ++s) {
        rows.push_back({"slice_attention", level(n), sequence(c), "", static_cast<long>(s), weights[s]});
      }
    }
  }
  std::size_t row = 0;
  for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
    const Tensor& w = out.sequence_weights[n];
    const std::size_t e = w.dim(1);
    for (std::size_t r = 0; r < w.dim(0); ++r, ++row) {
      const std::size_t c = out.token_origin[row].second;
      double mean_weight = 0.0;
      for (std::size_t j = 0; j < e; ++j) mean_weight += w.data()[r * e + j];
      rows.push_back({"sequence_attention", level(n), sequence(c), "", -1, mean_weight / static_cast<double>(e)});
    }
  }

  std::size_t max_slices = 0;
  for (const VertebraToken& t : study.tokens) {
    if (t.present) max_slices = std::max(max_slices, t.volume.slices);
  }
  for (std::size_t s = 0; s < max_slices; ++s) {
    // Volumes shorter than s + 1 slices keep their last slice.
    StudySample sliced = study;
    for (VertebraToken& t : sliced.tokens) {
      if (t.present) t.volume = t.volume.single_slice(std::min(s, t.volume.slices - 1));
    }
    const ModelOutput single = model.forward(sliced);
    for (std::size_t t = 0; t < config.tasks.size(); ++t) {
      const TaskSpec& task = config.tasks[t];
      const auto logits = single.logits[t].data();
      const std::size_t k = task.n_logits();
      for (std::size_t n = 0; n < study.n_vertebrae(); ++n) {
        double score;
        if (task.binary()) {
          score = sigmoid_value(logits[n]);
        } else {
          // Expected class index under the softmax.
          const auto r = logits.subspan(n * k, k);
          const double top = *std::max_element(r.begin(), r.end());
          double z = 0.0, ev = 0.0;
          for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(r[j] - top);
            z += p;
            ev += p * static_cast<double>(j);
          }
          score = ev / z;
        }
        rows.push_back({"slicewise_score", level(n), "", task.name, static_cast<long>(s), score});
      }
    }
  }
  return rows;
}

std::string attribution_csv(const std::string& study_id, const std::vector<AttributionRow>& rows) {
  std::string out = "study,kind,level,sequence,task,slice,value\n";
  char value[64];
  for (const AttributionRow& r : rows) {
    std::snprintf(value, sizeof(value), "%.17g", r.value);
    out += study_id + "," + r.kind + "," + r.level + "," + r.sequence + "," + r.task + "," +
           (r.slice < 0 ? std::string() : std::to_string(r.slice)) + "," + value + "\n";
  }
  return out;
}

}  // namespace sct
