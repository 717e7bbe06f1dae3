// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. An optional argument filters criteria by name.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sct/commands.hpp"
#include "sct/data.hpp"
#include "sct/evaluation.hpp"
#include "sct/training.hpp"
#include "study_factory.hpp"

using namespace sct;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- criteria ----------------------------------------------------------------------

Outcome gradcheck_tiny() {
  const auto start = std::chrono::steady_clock::now();
  SctConfig cfg = sct::testing::tiny_config();
  SctModel model(cfg, 101);
  PhantomSpec spec;
  spec.slices = 2;
  spec.height = spec.width = 8;
  spec.lesion_contrast = {2, 0, 1};
  spec.fracture = {true, false, false};
  spec.compression = {true, false, false};
  spec.seed = 5;
  StudySample study = normalize_study(generate_phantom_study(spec));
  study.token(1, 1).present = false;  // reaches the missing-sequence vector
  LabelTriple labels = *study.exhaustive_labels;
  for (auto& column : labels.vertebra) column[2] = Label::unknown;
  study.report_labels = labels;

  const auto report = gradcheck(model, [&](const SctModel& m) {
    return study_loss(m.config(), m.forward(study), study, LossConfig{}, LabelSource::report);
  });
  double worst = 0.0;
  std::string worst_name;
  std::size_t entries = 0;
  for (const GradcheckBlock& b : report) {
    entries += b.checked;
    if (b.max_rel_error >= worst) {
      worst = b.max_rel_error;
      worst_name = b.name;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 1e-4 && secs < 300.0 && report.size() == model.parameters().size(),
          fmt("%zu blocks, %zu entries, max rel error %.3g (%s), %.1f s", report.size(), entries, worst,
              worst_name.c_str(), secs)};
}

Outcome variable_geometry() {
  SctConfig cfg = sct::testing::tiny_config();
  cfg.n_vertebra_levels = 26;
  const SctModel model(cfg, 102);
  std::mt19937_64 rng(102);
  std::uniform_int_distribution<std::size_t> n_dist(1, 26), c_dist(1, 4), s_dist(1, 15);
  std::vector<std::array<std::size_t, 3>> grid{{1, 1, 1}, {26, 4, 15}, {26, 1, 1}, {1, 4, 15}};
  while (grid.size() < 30) grid.push_back({n_dist(rng), c_dist(rng), s_dist(rng)});
  std::size_t failures = 0;
  std::string first_failure;
  for (const auto& [n, c, s] : grid) {
    try {
      const ModelOutput out = model.forward(sct::testing::random_study(n, c, s, 8, 8, rng));
      bool ok = out.logits.size() == cfg.tasks.size();
      for (std::size_t t = 0; ok && t < cfg.tasks.size(); ++t) {
        ok = out.logits[t].shape() == Shape{n, cfg.tasks[t].n_logits()};
        for (double v : out.logits[t].data()) ok = ok && std::isfinite(v);
      }
      if (!ok) throw std::runtime_error("bad output shape");
    } catch (const std::exception& e) {
      if (failures++ == 0) first_failure = fmt(" first: N=%zu C=%zu S=%zu %s", n, c, s, e.what());
    }
  }
  return {failures == 0, fmt("%zu points, %zu failures%s", grid.size(), failures, first_failure.c_str())};
}

Outcome equivariance() {
  SctConfig cfg = sct::testing::tiny_config();
  cfg.dropout = 0.5;  // must be inert outside training
  const SctModel model(cfg, 103);
  std::mt19937_64 rng(103);
  double worst_perm = 0.0, worst_seq = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 5), c = 1 + static_cast<std::size_t>(trial % 4);
    const StudySample s = sct::testing::random_study(n, c, 3, 8, 8, rng, trial % 3);
    const ModelOutput base = model.forward(s);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    StudySample p = s;
    p.levels.clear();
    p.tokens.clear();
    for (std::size_t i : perm) {
      p.levels.push_back(s.levels[i]);
      for (std::size_t j = 0; j < c; ++j) p.tokens.push_back(s.token(i, j));
    }
    const ModelOutput permuted = model.forward(p);
    for (std::size_t t = 0; t < base.logits.size(); ++t) {
      const std::size_t k = base.logits[t].dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        worst_perm = std::max(worst_perm, max_abs_diff(permuted.logits[t].data().subspan(i * k, k),
                                                       base.logits[t].data().subspan(perm[i] * k, k)));
      }
    }

    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    StudySample r = s;
    for (std::size_t j = 0; j < c; ++j) r.sequences[j] = s.sequences[order[j]];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) r.token(i, j) = s.token(i, order[j]);
    }
    const ModelOutput reordered = model.forward(r);
    for (std::size_t t = 0; t < base.logits.size(); ++t) {
      worst_seq = std::max(worst_seq, max_abs_diff(reordered.logits[t].data(), base.logits[t].data()));
    }
  }
  return {worst_perm < 1e-9 && worst_seq < 1e-9,
          fmt("vertebra permutation %.3g, sequence order %.3g over 20 studies", worst_perm, worst_seq)};
}

Outcome attention_normalization() {
  const SctModel model(sct::testing::tiny_config(), 104);
  std::mt19937_64 rng(104);
  std::uniform_int_distribution<std::size_t> n_dist(1, 8), c_dist(1, 4), s_dist(1, 9);
  std::bernoulli_distribution drop(0.2);
  double worst = 0.0;
  std::size_t distributions = 0;
  for (int trial = 0; trial < 100; ++trial) {
    StudySample s = sct::testing::random_study(n_dist(rng), c_dist(rng), s_dist(rng), 8, 8, rng);
    for (VertebraToken& t : s.tokens) t.present = !drop(rng);
    const ModelOutput out = model.forward(s);
    for (const auto& vertebra : out.slice_weights) {
      for (const auto& w : vertebra) {
        if (w.empty()) continue;
        worst = std::max(worst, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
        ++distributions;
      }
    }
    for (const Tensor& w : out.sequence_weights) {
      const std::size_t rows = w.dim(0), e = w.dim(1);
      for (std::size_t j = 0; j < e; ++j) {
        double total = 0.0;
        for (std::size_t i = 0; i < rows; ++i) total += w.data()[i * e + j];
        worst = std::max(worst, std::abs(total - 1.0));
        ++distributions;
      }
    }
  }
  return {worst < 1e-9, fmt("%zu distributions over 100 studies, max |sum - 1| %.3g", distributions, worst)};
}

Outcome masking_exactness() {
  const SctModel model(sct::testing::tiny_config(), 105);
  std::mt19937_64 rng(105);
  std::size_t compared = 0, mismatched = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + static_cast<std::size_t>(trial % 3);
    const StudySample s = sct::testing::random_study(n, 2, 2, 8, 8, rng);
    const std::size_t unknown = static_cast<std::size_t>(trial) % n;
    std::vector<double> y(n), mask(n, 1.0), y_kept;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<double>((i + static_cast<std::size_t>(trial)) % 2);
      if (i == unknown) {
        mask[i] = 0.0;
      } else {
        kept.push_back(i);
        y_kept.push_back(y[i]);
      }
    }
    const std::vector<double> ones(kept.size(), 1.0);

    auto gradients = [&](bool remove) {
      SctModel m = model.clone();
      m.zero_grad();
      const ModelOutput out = m.forward(s);
      Tensor total;
      for (const Tensor& logits : out.logits) {
        const Tensor term = remove ? masked_binary_loss(gather_rows(logits, kept), y_kept, ones)
                                   : masked_binary_loss(logits, y, mask);
        total = total.defined() ? add(total, term) : term;
      }
      total.backward();
      std::vector<std::vector<double>> g;
      for (const auto& p : m.parameters()) g.emplace_back(p.value.grad().begin(), p.value.grad().end());
      return std::make_pair(total.item(), g);
    };
    const auto [masked_loss, masked] = gradients(false);
    const auto [removed_loss, removed] = gradients(true);
    mismatched += masked_loss != removed_loss;
    for (std::size_t p = 0; p < masked.size(); ++p) {
      for (std::size_t i = 0; i < masked[p].size(); ++i) {
        ++compared;
        mismatched += masked[p][i] != removed[p][i];
      }
    }
  }
  return {mismatched == 0, fmt("%zu gradient entries over 10 studies, %zu differ", compared, mismatched)};
}

Outcome label_golden() {
  const auto& names = default_level_names();
  std::vector<int> levels(names.size());
  std::iota(levels.begin(), levels.end(), 0);
  AnnotationRecord r;
  r.conditions[0].widespread = true;
  r.conditions[0].positive = {level_index(names, "T12"), level_index(names, "L4")};
  r.conditions[1].positive = {level_index(names, "L4")};
  r.conditions[2].positive = {level_index(names, "L4")};
  const LabelTriple t = derive_labels(r, levels);
  auto count = [](const std::vector<Label>& v, Label l) { return std::count(v.begin(), v.end(), l); };
  const bool ok = count(t.vertebra[0], Label::positive) == 2 && count(t.vertebra[0], Label::unknown) == 22 &&
                  count(t.vertebra[1], Label::positive) == 1 && count(t.vertebra[1], Label::negative) == 23 &&
                  count(t.vertebra[2], Label::positive) == 1 && count(t.vertebra[2], Label::negative) == 23;
  return {ok, fmt("metastasis %ld+/%ld?, fracture %ld+/%ld-, compression %ld+/%ld-", count(t.vertebra[0], Label::positive),
                  count(t.vertebra[0], Label::unknown), count(t.vertebra[1], Label::positive),
                  count(t.vertebra[1], Label::negative), count(t.vertebra[2], Label::positive),
                  count(t.vertebra[2], Label::negative))};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(106);
  std::uniform_int_distribution<int> size(1, 60), grid(0, 9), cls(0, 4);
  std::bernoulli_distribution coin(0.5);
  double worst_auc = 0.0, worst_ba = 0.0;
  std::size_t auc_defined = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(size(rng));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? grid(rng) / 10.0 : std::normal_distribution<double>()(rng);
      y[i] = coin(rng);
    }
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i] != 1 || y[j] != 0) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
    const auto auc = roc_auc(s, y);
    if (auc.has_value() != (pairs > 0)) return {false, fmt("definedness mismatch at case %d", trial)};
    if (auc) {
      ++auc_defined;
      worst_auc = std::max(worst_auc, std::abs(*auc - wins / pairs));
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(size(rng));
    std::vector<int> pred(n), lab(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = cls(rng);
      lab[i] = cls(rng);
    }
    double recall_sum = 0.0;
    int present = 0;
    for (int c = 0; c < 5; ++c) {
      int hit = 0, total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (lab[i] != c) continue;
        ++total;
        hit += pred[i] == c;
      }
      if (total == 0) continue;
      ++present;
      recall_sum += static_cast<double>(hit) / total;
    }
    worst_ba = std::max(worst_ba, std::abs(*balanced_accuracy(pred, lab, 5) - recall_sum / present));
  }
  return {worst_auc < 1e-12 && worst_ba < 1e-12,
          fmt("roc_auc max diff %.3g (%zu defined cases), balanced_accuracy max diff %.3g", worst_auc, auc_defined, worst_ba)};
}

// ---- context separation --------------------------------------------------------------

// Population AUC of the best scorer that sees one vertebra in isolation. What a
// single vertebra shows is its focus amplitude b + c plus its fracture and
// compression shape; the score is P(metastatic | those), and every quantity is
// an expected count under the mixture.
double context_free_ceiling(const PhantomMixture& m) {
  std::map<std::array<int, 3>, std::array<double, 2>> counts;  // observation -> {negative, positive} mass
  const double n_weight = 1.0 / static_cast<double>(m.max_vertebrae - m.min_vertebrae + 1);
  for (int b = 0; b < 2; ++b) {
    const double pb = b ? m.baseline_positive_prob : 1.0 - m.baseline_positive_prob;
    for (std::size_t n = m.min_vertebrae; n <= m.max_vertebrae; ++n) {
      const double forced = std::ceil(m.no_lesion_fraction * static_cast<double>(n) - 1e-9);
      for (int c = 0; c < 4; ++c) {
        const double expected = (c == 0 ? forced : 0.0) + (static_cast<double>(n) - forced) * m.contrast_given_baseline[b][c];
        const bool metastatic = c >= 2;
        const double pf = metastatic ? m.fracture_prob_metastatic : m.fracture_prob_other;
        for (int f = 0; f < 2; ++f) {
          const double pm = (metastatic && f) ? m.compression_prob_fractured : m.compression_prob_other;
          for (int k = 0; k < 2; ++k) {
            const double mass = pb * n_weight * expected * (f ? pf : 1.0 - pf) * (k ? pm : 1.0 - pm);
            counts[{b + c, f, k}][metastatic] += mass;
          }
        }
      }
    }
  }
  double wins = 0.0, total = 0.0;
  for (const auto& [obs_pos, pos] : counts) {
    for (const auto& [obs_neg, neg] : counts) {
      const double weight = pos[1] * neg[0];
      if (weight == 0.0) continue;
      const double score_pos = pos[1] / (pos[0] + pos[1]);
      const double score_neg = neg[1] / (neg[0] + neg[1]);
      total += weight;
      wins += weight * (score_pos > score_neg ? 1.0 : score_pos == score_neg ? 0.5 : 0.0);
    }
  }
  return wins / total;
}

// Every vertebra becomes its own one-vertebra study with exhaustive labels.
std::vector<StudySample> isolate_vertebrae(const std::vector<StudySample>& studies) {
  std::vector<StudySample> out;
  for (const StudySample& s : studies) {
    for (std::size_t n = 0; n < s.n_vertebrae(); ++n) {
      StudySample one;
      one.id = s.id + "_" + std::to_string(n);
      one.split = s.split;
      one.levels = {s.levels[n]};
      one.sequences = s.sequences;
      for (std::size_t c = 0; c < s.n_sequences(); ++c) one.tokens.push_back(s.token(n, c));
      LabelTriple t;
      for (std::size_t k = 0; k < kNumConditions; ++k) {
        const Label l = s.exhaustive_labels->vertebra[k][n];
        t.vertebra[k] = {l};
        t.bag[k] = l == Label::positive;
      }
      one.exhaustive_labels = t;
      one.report_labels = t;
      out.push_back(std::move(one));
    }
  }
  return out;
}

double metastasis_auc(const SctModel& model, const std::vector<StudySample>& test) {
  const EvaluationReport r = evaluate(model, test, LabelSource::exhaustive);
  for (const TaskMetric& m : r.metrics) {
    if (m.task == "metastasis" && m.metric == "auc_vertebra_pooled") return m.value.value_or(NAN);
  }
  return NAN;
}

constexpr std::uint64_t kContextDataSeed = 7;

Outcome context_separation() {
  const auto start = std::chrono::steady_clock::now();
  const PhantomMixture mixture;
  const double ceiling = context_free_ceiling(mixture);

  const auto studies = generate_phantom_dataset(mixture, {200, 50, 100}, kContextDataSeed);
  std::vector<StudySample> train_set, val_set, test_set;
  for (const StudySample& s : studies) {
    (s.split == Split::train ? train_set : s.split == Split::val ? val_set : test_set).push_back(s);
  }

  SctConfig cfg;
  cfg.embed_dim = 32;
  cfg.ff_dim = 64;
  cfg.n_heads = 2;
  cfg.encoder_channels = {8, 16};
  cfg.slice_height = mixture.height;
  cfg.slice_width = mixture.width;
  cfg.dropout = 0.1;
  TrainSchedule schedule;
  schedule.lr = 1e-3;
  schedule.augment = false;
  schedule.max_epochs = 80;
  schedule.seed = 3;

  // Baseline: same architecture, one vertebra per forward pass, full labels.
  SctModel baseline(cfg, 1);
  TrainSchedule baseline_schedule = schedule;
  baseline_schedule.max_epochs = 40;
  baseline_schedule.finetune_epochs = 5;
  baseline_schedule.label_source = LabelSource::exhaustive;
  const TrainResult base_run =
      train(baseline, isolate_vertebrae(train_set), isolate_vertebrae(val_set), baseline_schedule, LossConfig{});
  const double baseline_auc = metastasis_auc(baseline, isolate_vertebrae(test_set));

  // SCT on whole studies, trained from report labels.
  SctModel model(cfg, 1);
  const TrainResult sct_run = train(model, train_set, val_set, schedule, LossConfig{});
  const double sct_auc = metastasis_auc(model, test_set);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool a = baseline_auc <= ceiling + 0.03;
  const bool b = sct_auc >= ceiling + 0.10;
  return {a && b && secs < 900.0,
          fmt("ceiling %.4f; baseline %.4f (%s, %zu epochs); SCT %.4f (%s, %zu epochs); %.0f s", ceiling, baseline_auc,
              a ? "<= ceiling+0.03" : "ABOVE ceiling+0.03", base_run.history.size(), sct_auc,
              b ? ">= ceiling+0.10" : "BELOW ceiling+0.10", sct_run.history.size(), secs)};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("sct_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  auto write = [&](const std::string& name, const json& j) {
    std::ofstream(root / name) << j.dump(1);
    return root / name;
  };
  const json phantom = {{"min_vertebrae", 3}, {"max_vertebrae", 5}, {"slices", 2}, {"slice_size", {8, 8}}};
  const fs::path synth = write("synth.json", {{"phantom", phantom}, {"counts", {{"train", 8}, {"val", 3}, {"test", 4}}}});
  const fs::path train_cfg = write("train.json", {{"manifest", "data/manifest.json"},
                                                  {"model", sct::testing::tiny_config().to_json()},
                                                  {"schedule", {{"max_epochs", 3}, {"finetune_epochs", 2}, {"lr", 1e-3}}}});
  std::array<std::string, 3> first;
  bool same = true;
  for (int run = 0; run < 2; ++run) {
    const fs::path run_dir = root / ("run" + std::to_string(run));
    cmd_synth({synth, 42, root / "data"});
    cmd_train({train_cfg, 42, run_dir});
    const fs::path eval_cfg = write("eval.json", {{"manifest", "data/manifest.json"}, {"checkpoint", (run_dir / "checkpoint.sct").string()}});
    cmd_eval({eval_cfg, 42, run_dir / "eval"});
    const std::array<std::string, 3> files{slurp(run_dir / "history.csv"), slurp(run_dir / "eval/metrics_report.csv"),
                                           slurp(run_dir / "eval/metrics_exhaustive.csv")};
    if (run == 0) {
      first = files;
    } else {
      same = files == first;
    }
    fs::remove_all(root / "data");
  }
  fs::remove_all(root);
  const bool nonempty = std::count(first[0].begin(), first[0].end(), '\n') == 6 && !first[1].empty();
  return {same && nonempty, same ? "history and both metrics files byte-identical across two runs"
                                 : "outputs differ between runs"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradcheck_tiny_model", gradcheck_tiny},
      {"variable_geometry", variable_geometry},
      {"equivariance", equivariance},
      {"attention_normalization", attention_normalization},
      {"masking_exactness", masking_exactness},
      {"label_rule_golden", label_golden},
      {"metric_oracles", metric_oracles},
      {"context_separation", context_separation},
      {"determinism", determinism},
  };
  const std::string filter = argc > 1 ? argv[1] : "";
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (!filter.empty() && std::string(name).find(filter) == std::string::npos) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %-24s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d failed\n", failed);
  return failed == 0 ? 0 : 1;
}
