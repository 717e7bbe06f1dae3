#include "sct/commands.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "sct/data.hpp"
#include "sct/evaluation.hpp"
#include "sct/model.hpp"
#include "sct/rng.hpp"
#include "sct/training.hpp"

namespace sct {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_config(const fs::path& path) {
  if (path.empty()) throw ConfigError("--config is required");
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::uint64_t resolve_seed(const CommandArgs& args, const json& config) {
  if (args.seed) return *args.seed;
  if (config.contains("seed")) {
    if (!config.at("seed").is_number_unsigned()) throw ConfigError("config field 'seed' must be a non-negative integer");
    return config.at("seed").get<std::uint64_t>();
  }
  throw ConfigError("a seed is required: pass --seed or set 'seed' in the config");
}

// Relative paths in a config are taken relative to the config file.
fs::path config_path(const CommandArgs& args, const json& config, const char* field, bool must_exist = true) {
  if (!config.contains(field) || !config.at(field).is_string()) {
    throw ConfigError(std::string("config field '") + field + "' (path) is required");
  }
  fs::path p = config.at(field).get<std::string>();
  if (p.is_relative()) p = args.config.parent_path() / p;
  if (must_exist && !fs::exists(p)) throw ConfigError(std::string("config field '") + field + "': '" + p.string() + "' does not exist");
  return p;
}

void prepare_out(const fs::path& out) {
  if (out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw LoadError("cannot create output directory '" + out.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw LoadError("failed writing '" + path.string() + "'");
}

template <typename T, typename F>
T parse_section(const json& config, const char* field, F&& parse) {
  if (!config.contains(field)) return parse(json::object());
  if (!config.at(field).is_object()) throw ConfigError(std::string("config field '") + field + "' must be an object");
  return parse(config.at(field));
}

Split parse_split(const json& config) {
  try {
    return split_from_name(config.value("split", std::string("test")));
  } catch (const Error& e) {
    throw ConfigError(std::string("config field 'split': ") + e.what());
  }
}

// The model must understand every level, sequence and slice size the dataset uses.
void check_compatible(const SctConfig& model, const Dataset& data, const std::string& what) {
  if (data.level_names.size() > model.n_vertebra_levels) {
    throw ConfigError(what + ": dataset has " + std::to_string(data.level_names.size()) +
                      " level names but the model embeds " + std::to_string(model.n_vertebra_levels));
  }
  if (data.sequence_names.size() > model.n_sequence_types) {
    throw ConfigError(what + ": dataset has " + std::to_string(data.sequence_names.size()) +
                      " sequence types but the model embeds " + std::to_string(model.n_sequence_types));
  }
  if (!data.studies.empty() && (data.slice_height != model.slice_height || data.slice_width != model.slice_width)) {
    throw ConfigError(what + ": dataset slices are " + std::to_string(data.slice_height) + "x" +
                      std::to_string(data.slice_width) + " but the model expects " +
                      std::to_string(model.slice_height) + "x" + std::to_string(model.slice_width));
  }
  const bool conditions = uses_report_conditions(model);
  if (conditions != (data.family == TaskFamily::cancer)) {
    throw ConfigError(what + ": model tasks do not match the dataset's '" + task_family_name(data.family) + "' labels");
  }
}

}  // namespace

void cmd_synth(const CommandArgs& args) {
  const json config = read_config(args.config);
  const std::uint64_t seed = resolve_seed(args, config);
  const PhantomMixture mixture = parse_section<PhantomMixture>(config, "phantom", PhantomMixture::from_json);
  DatasetCounts counts;
  try {
    const json c = config.value("counts", json::object());
    counts.train = c.value("train", std::size_t{0});
    counts.val = c.value("val", std::size_t{0});
    counts.test = c.value("test", std::size_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field 'counts': ") + e.what());
  }
  prepare_out(args.out);

  Dataset ds;
  ds.family = mixture.family;
  for (const SequenceContrast& s : default_sequence_table()) ds.sequence_names.push_back(s.name);
  ds.slice_height = mixture.height;
  ds.slice_width = mixture.width;
  ds.studies = generate_phantom_dataset(mixture, counts, seed);
  write_dataset(args.out, ds);
}

void cmd_train(const CommandArgs& args) {
  const json config = read_config(args.config);
  const std::uint64_t seed = resolve_seed(args, config);
  const fs::path manifest = config_path(args, config, "manifest");
  const SctConfig model_config = parse_section<SctConfig>(config, "model", SctConfig::from_json);
  model_config.validate();
  TrainSchedule schedule = parse_section<TrainSchedule>(config, "schedule", TrainSchedule::from_json);
  schedule.seed = seed;
  const LossConfig loss = parse_section<LossConfig>(config, "loss", LossConfig::from_json);

  const Dataset data = load_dataset(manifest);
  check_compatible(model_config, data, "train");
  const auto train_set = data.split(Split::train);
  const auto val_set = data.split(Split::val);
  if (train_set.empty()) throw ConfigError("train: manifest has no train studies");
  if (val_set.empty()) throw ConfigError("train: manifest has no val studies");
  prepare_out(args.out);

  SctModel model(model_config, derive_seed(seed, {0x4d4f44454cull}));
  const TrainResult result = train(model, train_set, val_set, schedule, loss);
  save_model(model, (args.out / "checkpoint.sct").string());
  write_text(args.out / "history.csv", history_csv(result.history));
  const json summary = {{"best_epoch", result.best_epoch},
                        {"best_val_loss", result.best_val_loss},
                        {"backbone_epochs", result.backbone_epochs},
                        {"final_val_loss", result.history.back().val_loss},
                        {"parameters", model.parameter_count()},
                        {"seed", seed}};
  write_text(args.out / "train_summary.json", summary.dump(1) + "\n");
}

void cmd_eval(const CommandArgs& args) {
  const json config = read_config(args.config);
  resolve_seed(args, config);
  const fs::path manifest = config_path(args, config, "manifest");
  const fs::path checkpoint = config_path(args, config, "checkpoint");
  const Split split = parse_split(config);
  std::vector<LabelSource> sources;
  try {
    for (const auto& s : config.value("label_sources", json::array({"report", "exhaustive"}))) {
      sources.push_back(label_source_from_name(s.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field 'label_sources': ") + e.what());
  }

  const SctModel model = load_model(checkpoint.string());
  const Dataset data = load_dataset(manifest);
  check_compatible(model.config(), data, "eval");
  const auto studies = data.split(split);
  if (studies.empty()) throw ConfigError(std::string("eval: split '") + split_name(split) + "' is empty");
  prepare_out(args.out);

  if (!uses_report_conditions(model.config())) {
    const EvaluationReport report = evaluate(model, studies, LabelSource::exhaustive, data.level_names);
    write_text(args.out / "metrics.csv", metrics_csv(report.metrics));
    write_text(args.out / "predictions.csv", predictions_csv(report.predictions));
    return;
  }
  for (LabelSource source : sources) {
    const bool available = std::all_of(studies.begin(), studies.end(), [&](const StudySample& s) {
      return source == LabelSource::report ? s.report_labels.has_value() : s.exhaustive_labels.has_value();
    });
    if (!available) {
      std::cerr << "eval: skipping " << label_source_name(source) << " labels, not present for every study\n";
      continue;
    }
    const EvaluationReport report = evaluate(model, studies, source, data.level_names);
    const std::string suffix = label_source_name(source);
    write_text(args.out / ("metrics_" + suffix + ".csv"), metrics_csv(report.metrics));
    write_text(args.out / ("predictions_" + suffix + ".csv"), predictions_csv(report.predictions));
  }
}

void cmd_attribute(const CommandArgs& args) {
  const json config = read_config(args.config);
  resolve_seed(args, config);
  const fs::path manifest = config_path(args, config, "manifest");
  const fs::path checkpoint = config_path(args, config, "checkpoint");
  const Split split = parse_split(config);
  std::vector<std::string> wanted;
  try {
    wanted = config.value("studies", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field 'studies': ") + e.what());
  }

  const SctModel model = load_model(checkpoint.string());
  const Dataset data = load_dataset(manifest);
  check_compatible(model.config(), data, "attribute");
  std::vector<StudySample> studies;
  for (const StudySample& s : data.studies) {
    const bool selected = wanted.empty() ? s.split == split : std::find(wanted.begin(), wanted.end(), s.id) != wanted.end();
    if (selected) studies.push_back(s);
  }
  if (studies.empty()) throw ConfigError("attribute: no study matches the selection");
  prepare_out(args.out);

  std::string csv;
  for (const StudySample& s : studies) {
    std::string part = attribution_csv(s.id, export_attribution(model, s, data.level_names, data.sequence_names));
    csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
  }
  write_text(args.out / "attribution.csv", csv);
}

bool cmd_gradcheck(const CommandArgs& args) {
  const json config = read_config(args.config);
  const std::uint64_t seed = resolve_seed(args, config);
  SctConfig model_config;
  model_config.embed_dim = 16;
  model_config.ff_dim = 32;
  model_config.n_heads = 2;
  model_config.n_transformer_layers = 2;
  model_config.encoder_channels = {4, 8};
  model_config.slice_height = model_config.slice_width = 8;
  if (config.contains("model")) {
    json merged = model_config.to_json();
    merged.merge_patch(config.at("model"));
    model_config = SctConfig::from_json(merged);
  }
  model_config.validate();
  if (!uses_report_conditions(model_config)) throw ConfigError("gradcheck: model tasks must be the report conditions");
  GradcheckOptions options;
  double tolerance = 1e-4;
  std::size_t n_vertebrae = 3, slices = 2;
  try {
    options.step = config.value("step", options.step);
    options.max_entries_per_block = config.value("max_entries_per_block", options.max_entries_per_block);
    tolerance = config.value("tolerance", tolerance);
    n_vertebrae = config.value("n_vertebrae", n_vertebrae);
    slices = config.value("slices", slices);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gradcheck config: ") + e.what());
  }
  if (n_vertebrae == 0 || slices == 0) throw ConfigError("gradcheck: n_vertebrae and slices must be >= 1");
  prepare_out(args.out);

  PhantomSpec spec;
  spec.study_id = "gradcheck";
  spec.slices = slices;
  spec.height = model_config.slice_height;
  spec.width = model_config.slice_width;
  spec.seed = derive_seed(seed, {1});
  for (std::size_t n = 0; n < n_vertebrae; ++n) {
    spec.lesion_contrast.push_back(n % 3 == 0 ? 2 : 0);
    spec.fracture.push_back(n % 2 == 1);
    spec.compression.push_back(false);
  }
  StudySample study = normalize_study(generate_phantom_study(spec));
  // An absent token routes gradient into the learned missing-sequence vector.
  study.token(0, study.n_sequences() - 1).present = false;
  // Mixed supervision: one unknown vertebra per condition exercises both loss terms.
  LabelTriple labels = *study.exhaustive_labels;
  for (auto& column : labels.vertebra) column.back() = Label::unknown;
  study.report_labels = labels;

  SctModel model(model_config, derive_seed(seed, {2}));
  const LossConfig loss;
  const auto report = gradcheck(
      model,
      [&](const SctModel& m) { return study_loss(m.config(), m.forward(study), study, loss, LabelSource::report); },
      options);
  std::string csv = "block,checked,max_rel_error\n";
  bool ok = true;
  double worst = 0.0;
  for (const GradcheckBlock& b : report) {
    std::ostringstream line;
    line.precision(6);
    line << b.name << "," << b.checked << "," << std::scientific << b.max_rel_error << "\n";
    csv += line.str();
    ok = ok && b.max_rel_error < tolerance;
    worst = std::max(worst, b.max_rel_error);
  }
  write_text(args.out / "gradcheck.csv", csv);
  std::cout << "gradcheck: " << report.size() << " blocks, max relative error " << worst
            << (ok ? " (ok)" : " (exceeds tolerance)") << "\n";
  return ok;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const ValidationError*>(&e)) return kExitValidation;
  if (dynamic_cast<const LoadError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  return kExitInternal;
}

}  // namespace sct
