#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/data.hpp"
#include "sct/model.hpp"

namespace sct {

// ---- losses ----------------------------------------------------------------------

enum class BagAggregator { max, noisy_or };

struct LossConfig {
  double w_si = 1.0;
  double w_mil = 1.0;
  BagAggregator aggregator = BagAggregator::max;
  double eps = 1e-7;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

// Mean binary cross-entropy over elements with mask = 1. Probabilities are
// clamped to [eps, 1 - eps]. Masked elements enter with weight exactly zero,
// so they add nothing to any gradient; with no element selected the loss is 0.
Tensor masked_binary_loss(const Tensor& logits, std::span<const double> labels, std::span<const double> mask,
                          double eps = 1e-7);

Tensor bag_aggregate(const Tensor& probs, BagAggregator aggregator = BagAggregator::max);

// `logits` holds one [N, 1] tensor per condition, in Condition order.
Tensor hybrid_loss(std::span<const Tensor> logits, const LabelTriple& labels, const LossConfig& config);

// Sum over tasks of mean cross-entropy over graded vertebrae; softmax for
// multi-class tasks, sigmoid for binary ones. Tasks missing from `labels` and
// kMissingGrade entries are skipped. Out-of-range grades throw ValidationError.
Tensor grading_loss(std::span<const Tensor> logits, const GradingLabels& labels, std::span<const TaskSpec> tasks,
                    double eps = 1e-7);

// ---- optimizer -------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(nn::ParameterList parameters, AdamConfig config = {});

  // Bias-corrected update of every parameter that currently requires grad.
  void step();
  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  std::span<const double> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const double> second_moment(std::size_t i) const { return v_[i]; }

 private:
  nn::ParameterList parameters_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t step_ = 0;
};

// Best-so-far patience: stop once `patience` consecutive observations fail
// to go below the best value seen.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience);

  // Returns true when `value` is a new best.
  bool observe(double value);
  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_index() const { return best_index_; }
  std::size_t observations() const { return count_; }

 private:
  std::size_t patience_;
  double best_ = 0.0;
  std::size_t best_index_ = 0;
  std::size_t since_best_ = 0;
  std::size_t count_ = 0;
};

// ---- training loop ---------------------------------------------------------------

enum class LabelSource { report, exhaustive };
const char* label_source_name(LabelSource source);
LabelSource label_source_from_name(const std::string& name);

struct TrainSchedule {
  // 0 picks the family default: 6 for cancer, 20 for grading.
  std::size_t batch_size = 0;
  std::size_t patience = 10;
  std::size_t finetune_epochs = 10;
  std::size_t max_epochs = 200;
  double lr = 1e-4;
  bool augment = true;
  bool sequence_drop = true;
  LabelSource label_source = LabelSource::report;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainSchedule from_json(const nlohmann::json& j);
  std::size_t effective_batch_size(const SctConfig& config) const;
};

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::string phase;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t backbone_epochs = 0;
};

// True when every task of the model is a report condition.
bool uses_report_conditions(const SctConfig& config);

// Loss of one forward pass against the study's labels.
Tensor study_loss(const SctConfig& config, const ModelOutput& output, const StudySample& study,
                  const LossConfig& loss, LabelSource source);

// Mean study loss with dropout off; studies are normalized first.
double validation_loss(const SctModel& model, const std::vector<StudySample>& studies, const LossConfig& loss,
                       LabelSource source);

// Phase 1 trains everything with early stopping on validation loss and
// restores the best parameters; phase 2 trains only the task heads for
// `finetune_epochs`. Studies are normalized per volume inside the loop.
TrainResult train(SctModel& model, const std::vector<StudySample>& train_set, const std::vector<StudySample>& val_set,
                  const TrainSchedule& schedule, const LossConfig& loss);

// epoch,train_loss,val_loss,phase
std::string history_csv(const std::vector<HistoryRow>& history);

// ---- finite differences ----------------------------------------------------------

struct GradcheckOptions {
  double step = 1e-5;
  // 0 checks every entry; otherwise an evenly spaced subset per block.
  std::size_t max_entries_per_block = 0;
};

struct GradcheckBlock {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

// Compares backprop gradients of `model` parameters with central
// differences of `loss_fn`. Error per entry is |ad - fd| / max(1, |ad|, |fd|).
std::vector<GradcheckBlock> gradcheck(SctModel& model, const std::function<Tensor(const SctModel&)>& loss_fn,
                                      const GradcheckOptions& options = {});

}  // namespace sct
