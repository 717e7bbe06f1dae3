#include "sct/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "sct/config_keys.hpp"
#include "sct/rng.hpp"

namespace sct {

using nlohmann::json;

// ---- losses ----------------------------------------------------------------------

void LossConfig::validate() const {
  if (!(w_si >= 0.0) || !(w_mil >= 0.0)) throw ConfigError("loss: w_si and w_mil must be >= 0");
  if (w_si == 0.0 && w_mil == 0.0) throw ConfigError("loss: w_si and w_mil cannot both be 0");
  if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("loss: eps must lie in (0, 0.5)");
}

json LossConfig::to_json() const {
  return {{"w_si", w_si}, {"w_mil", w_mil}, {"aggregator", aggregator == BagAggregator::max ? "max" : "noisy_or"},
          {"eps", eps}};
}

LossConfig LossConfig::from_json(const json& j) {
  LossConfig c;
  reject_unknown_keys(j, c.to_json(), "loss");
  try {
    c.w_si = j.value("w_si", c.w_si);
    c.w_mil = j.value("w_mil", c.w_mil);
    c.eps = j.value("eps", c.eps);
    const std::string agg = j.value("aggregator", std::string("max"));
    if (agg == "max") {
      c.aggregator = BagAggregator::max;
    } else if (agg == "noisy_or") {
      c.aggregator = BagAggregator::noisy_or;
    } else {
      throw ConfigError("loss.aggregator: expected 'max' or 'noisy_or', got '" + agg + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("loss: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

// -(y log p + (1 - y) log(1 - p)) weighted per element.
Tensor weighted_bce(const Tensor& probs, std::span<const double> labels, std::span<const double> weights, double eps) {
  const Tensor p = clamp(probs, eps, 1.0 - eps);
  std::vector<double> pos(labels.size()), neg(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pos[i] = -labels[i] * weights[i];
    neg[i] = -(1.0 - labels[i]) * weights[i];
  }
  return add(weighted_sum(log(p), pos), weighted_sum(log(affine(p, -1.0, 1.0)), neg));
}

}  // namespace

Tensor masked_binary_loss(const Tensor& logits, std::span<const double> labels, std::span<const double> mask,
                          double eps) {
  if (logits.numel() != labels.size() || labels.size() != mask.size()) {
    throw DimensionError("masked_binary_loss: " + std::to_string(logits.numel()) + " logits, " +
                         std::to_string(labels.size()) + " labels, " + std::to_string(mask.size()) + " mask entries");
  }
  const double selected = std::accumulate(mask.begin(), mask.end(), 0.0);
  std::vector<double> weights(mask.size(), 0.0);
  if (selected > 0.0) {
    for (std::size_t i = 0; i < mask.size(); ++i) weights[i] = mask[i] / selected;
  }
  return weighted_bce(sigmoid(logits), labels, weights, eps);
}

Tensor bag_aggregate(const Tensor& probs, BagAggregator aggregator) {
  if (aggregator == BagAggregator::max) return max_all(probs);
  return affine(prod_all(affine(probs, -1.0, 1.0)), -1.0, 1.0);
}

Tensor hybrid_loss(std::span<const Tensor> logits, const LabelTriple& labels, const LossConfig& config) {
  if (logits.size() != kNumConditions) {
    throw DimensionError("hybrid_loss: expected " + std::to_string(kNumConditions) + " logit tensors, got " +
                         std::to_string(logits.size()));
  }
  Tensor total;
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    const auto& column = labels.vertebra[k];
    std::vector<double> y(column.size()), mask(column.size());
    for (std::size_t i = 0; i < column.size(); ++i) {
      y[i] = column[i] == Label::positive ? 1.0 : 0.0;
      mask[i] = column[i] == Label::unknown ? 0.0 : 1.0;
    }
    const Tensor si = affine(masked_binary_loss(logits[k], y, mask, config.eps), config.w_si);
    const double bag_label = labels.bag[k] ? 1.0 : 0.0;
    const double one = 1.0;
    const Tensor bag = bag_aggregate(sigmoid(logits[k]), config.aggregator);
    const Tensor mil = affine(weighted_bce(bag, std::span(&bag_label, 1), std::span(&one, 1), config.eps), config.w_mil);
    const Tensor term = add(si, mil);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor grading_loss(std::span<const Tensor> logits, const GradingLabels& labels, std::span<const TaskSpec> tasks,
                    double eps) {
  if (logits.size() != tasks.size()) {
    throw DimensionError("grading_loss: " + std::to_string(logits.size()) + " logit tensors for " +
                         std::to_string(tasks.size()) + " tasks");
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskSpec& task = tasks[t];
    const std::size_t n = logits[t].dim(0);
    std::vector<int> grades(n, kMissingGrade);
    if (const auto it = labels.find(task.name); it != labels.end()) {
      if (it->second.size() != n) {
        throw DimensionError("grading_loss: task " + task.name + " has " + std::to_string(it->second.size()) +
                             " grades for " + std::to_string(n) + " vertebrae");
      }
      grades = it->second;
    }
    std::vector<double> cls(n, 0.0), mask(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (grades[i] == kMissingGrade) continue;
      const int c = grades[i] - task.min_label;
      if (c < 0 || c >= static_cast<int>(task.n_classes)) {
        throw ValidationError("grading_loss: task " + task.name + " grade " + std::to_string(grades[i]) +
                              " outside [" + std::to_string(task.min_label) + ", " +
                              std::to_string(task.min_label + static_cast<int>(task.n_classes) - 1) + "]");
      }
      cls[i] = c;
      mask[i] = 1.0;
    }
    Tensor term;
    if (task.binary()) {
      term = masked_binary_loss(logits[t], cls, mask, eps);
    } else {
      const double selected = std::accumulate(mask.begin(), mask.end(), 0.0);
      const std::size_t k = task.n_classes;
      std::vector<double> weights(n * k, 0.0);
      if (selected > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
          weights[i * k + static_cast<std::size_t>(cls[i])] = -mask[i] / selected;
        }
      }
      term = weighted_sum(log(clamp(softmax(logits[t], 1), eps, 1.0)), weights);
    }
    total = add(total, term);
  }
  return total;
}

// ---- optimizer -------------------------------------------------------------------

Adam::Adam(nn::ParameterList parameters, AdamConfig config) : parameters_(std::move(parameters)), config_(config) {
  for (const auto& p : parameters_) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < parameters_.size(); ++i) {
    Tensor& p = parameters_[i].value;
    if (!p.requires_grad() || !p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw ConfigError("early stopping: patience must be >= 1");
}

bool EarlyStopper::observe(double value) {
  ++count_;
  if (count_ == 1 || value < best_) {
    best_ = value;
    best_index_ = count_ - 1;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

// ---- training loop ---------------------------------------------------------------

const char* label_source_name(LabelSource source) {
  return source == LabelSource::report ? "report" : "exhaustive";
}

LabelSource label_source_from_name(const std::string& name) {
  if (name == "report") return LabelSource::report;
  if (name == "exhaustive") return LabelSource::exhaustive;
  throw ConfigError("label source must be 'report' or 'exhaustive', got '" + name + "'");
}

void TrainSchedule::validate() const {
  if (patience == 0) throw ConfigError("schedule.patience must be >= 1");
  if (max_epochs == 0) throw ConfigError("schedule.max_epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("schedule.lr must be > 0");
}

json TrainSchedule::to_json() const {
  return {{"batch_size", batch_size},
          {"patience", patience},
          {"finetune_epochs", finetune_epochs},
          {"max_epochs", max_epochs},
          {"lr", lr},
          {"augment", augment},
          {"sequence_drop", sequence_drop},
          {"label_source", label_source_name(label_source)},
          {"seed", seed}};
}

TrainSchedule TrainSchedule::from_json(const json& j) {
  TrainSchedule s;
  reject_unknown_keys(j, s.to_json(), "schedule");
  try {
    s.batch_size = j.value("batch_size", s.batch_size);
    s.patience = j.value("patience", s.patience);
    s.finetune_epochs = j.value("finetune_epochs", s.finetune_epochs);
    s.max_epochs = j.value("max_epochs", s.max_epochs);
    s.lr = j.value("lr", s.lr);
    s.augment = j.value("augment", s.augment);
    s.sequence_drop = j.value("sequence_drop", s.sequence_drop);
    s.label_source = label_source_from_name(j.value("label_source", std::string("report")));
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  s.validate();
  return s;
}

std::size_t TrainSchedule::effective_batch_size(const SctConfig& config) const {
  if (batch_size != 0) return batch_size;
  return uses_report_conditions(config) ? 6 : 20;
}

bool uses_report_conditions(const SctConfig& config) {
  if (config.tasks.size() != kNumConditions) return false;
  for (std::size_t k = 0; k < kNumConditions; ++k) {
    if (config.tasks[k].name != kConditionNames[k] || !config.tasks[k].binary()) return false;
  }
  return true;
}

Tensor study_loss(const SctConfig& config, const ModelOutput& output, const StudySample& study, const LossConfig& loss,
                  LabelSource source) {
  if (uses_report_conditions(config)) {
    const auto& labels = source == LabelSource::report ? study.report_labels : study.exhaustive_labels;
    if (!labels) {
      throw ValidationError("study " + study.id + " has no " + label_source_name(source) + " labels");
    }
    return hybrid_loss(output.logits, *labels, loss);
  }
  if (!study.grading) throw ValidationError("study " + study.id + " has no grading labels");
  return grading_loss(output.logits, *study.grading, config.tasks, loss.eps);
}

double validation_loss(const SctModel& model, const std::vector<StudySample>& studies, const LossConfig& loss,
                       LabelSource source) {
  if (studies.empty()) return 0.0;
  double total = 0.0;
  for (const StudySample& s : studies) {
    const StudySample prepared = normalize_study(s);
    total += study_loss(model.config(), model.forward(prepared), prepared, loss, source).item();
  }
  return total / static_cast<double>(studies.size());
}

namespace {

constexpr std::uint64_t kShuffleKey = 0x53485546ull;
constexpr std::uint64_t kFinetuneKey = 0x46494e45ull;

StudySample prepare_training_study(const StudySample& study, const TrainSchedule& schedule, std::mt19937_64& rng) {
  StudySample out = (schedule.sequence_drop && study.n_sequences() >= 2) ? sequence_drop(study, rng) : study;
  out = normalize_study(out);
  if (schedule.augment) {
    const AugmentRanges ranges;
    for (VertebraToken& t : out.tokens) {
      if (t.present) t.volume = augment(t.volume, ranges, rng);
    }
  }
  return out;
}

std::vector<std::vector<double>> snapshot(const nn::ParameterList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

void restore(const nn::ParameterList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor handle = params[i].value;
    std::copy(values[i].begin(), values[i].end(), handle.mutable_data().begin());
  }
}

// One pass over the training set; returns the mean study loss.
double run_epoch(SctModel& model, Adam& optimizer, const std::vector<StudySample>& train_set,
                 const TrainSchedule& schedule, const LossConfig& loss, std::size_t batch, std::uint64_t epoch_key) {
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(derive_seed(schedule.seed, {epoch_key, kShuffleKey}));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  double total = 0.0;
  model.zero_grad();
  std::size_t in_batch = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t index = order[pos];
    std::mt19937_64 rng(derive_seed(schedule.seed, {epoch_key, index}));
    const StudySample prepared = prepare_training_study(train_set[index], schedule, rng);
    const ModelOutput out = model.forward(prepared, {.training = true, .rng = &rng});
    const Tensor l = study_loss(model.config(), out, prepared, loss, schedule.label_source);
    total += l.item();
    const std::size_t batch_len = std::min(batch, order.size() - (pos - in_batch));
    affine(l, 1.0 / static_cast<double>(batch_len)).backward();
    if (++in_batch == batch_len) {
      optimizer.step();
      model.zero_grad();
      in_batch = 0;
    }
  }
  return total / static_cast<double>(train_set.size());
}

}  // namespace

TrainResult train(SctModel& model, const std::vector<StudySample>& train_set, const std::vector<StudySample>& val_set,
                  const TrainSchedule& schedule, const LossConfig& loss) {
  schedule.validate();
  loss.validate();
  if (train_set.empty()) throw ConfigError("train: the training split is empty");
  if (val_set.empty()) throw ConfigError("train: the validation split is empty");
  const std::size_t batch = schedule.effective_batch_size(model.config());
  const AdamConfig adam{.lr = schedule.lr};

  TrainResult result;
  model.set_backbone_trainable(true);
  {
    Adam optimizer(model.parameters(), adam);
    EarlyStopper stopper(schedule.patience);
    std::vector<std::vector<double>> best = snapshot(model.parameters());
    for (std::size_t epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
      const double train_loss = run_epoch(model, optimizer, train_set, schedule, loss, batch, epoch);
      const double val_loss = validation_loss(model, val_set, loss, schedule.label_source);
      result.history.push_back({epoch, train_loss, val_loss, "backbone"});
      if (stopper.observe(val_loss)) best = snapshot(model.parameters());
      result.backbone_epochs = epoch;
      if (stopper.should_stop()) break;
    }
    restore(model.parameters(), best);
    result.best_epoch = stopper.best_index() + 1;
    result.best_val_loss = stopper.best();
  }

  model.set_backbone_trainable(false);
  Adam head_optimizer(model.head_parameters(), adam);
  for (std::size_t e = 1; e <= schedule.finetune_epochs; ++e) {
    const std::size_t epoch = result.backbone_epochs + e;
    const double train_loss =
        run_epoch(model, head_optimizer, train_set, schedule, loss, batch, derive_seed(kFinetuneKey, {e}));
    const double val_loss = validation_loss(model, val_set, loss, schedule.label_source);
    result.history.push_back({epoch, train_loss, val_loss, "finetune"});
  }
  model.set_backbone_trainable(true);
  model.zero_grad();
  return result;
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,train_loss,val_loss,phase\n";
  char line[128];
  for (const HistoryRow& row : history) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%s\n", row.epoch, row.train_loss, row.val_loss,
                  row.phase.c_str());
    out += line;
  }
  return out;
}

// ---- finite differences ----------------------------------------------------------

std::vector<GradcheckBlock> gradcheck(SctModel& model, const std::function<Tensor(const SctModel&)>& loss_fn,
                                      const GradcheckOptions& options) {
  model.zero_grad();
  loss_fn(model).backward();
  std::vector<GradcheckBlock> report;
  for (const auto& param : model.parameters()) {
    Tensor p = param.value;
    GradcheckBlock block{param.name, 0, 0.0};
    const std::size_t n = p.numel();
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(n, 0.0);
    const std::size_t stride =
        (options.max_entries_per_block == 0 || n <= options.max_entries_per_block)
            ? 1
            : (n + options.max_entries_per_block - 1) / options.max_entries_per_block;
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = p.data()[i];
      p.mutable_data()[i] = original + options.step;
      const double up = loss_fn(model).item();
      p.mutable_data()[i] = original - options.step;
      const double down = loss_fn(model).item();
      p.mutable_data()[i] = original;
      const double fd = (up - down) / (2.0 * options.step);
      const double ad = analytic[i];
      const double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      block.max_rel_error = std::max(block.max_rel_error, err);
      ++block.checked;
    }
    report.push_back(std::move(block));
  }
  model.zero_grad();
  return report;
}

}  // namespace sct
