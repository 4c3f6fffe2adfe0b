#include "ssmcyto/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "ssmcyto/error.hpp"
#include "ssmcyto/kernels.hpp"
#include "ssmcyto/metrics.hpp"
#include "ssmcyto/selftest.hpp"
#include "ssmcyto/synth.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {
namespace {

template <class T>
T get_as(const nlohmann::json& v, const std::string& where) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + where + "': " + e.what());
  }
}

void require_object(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be a JSON object");
}

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
  throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ':')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("--ratios: cannot parse '" + text + "' (expected e.g. 4:1 or 7:1:2)");
    }
  }
  if (out.empty() || out.size() > 3) throw ConfigError("--ratios: expected 1 to 3 parts, got '" + text + "'");
  return out;
}

std::string absolute(const std::string& p) { return fs::absolute(fs::path(p)).lexically_normal().string(); }

const NormStats& require_stats(const DatasetManifest& m, const std::string& manifest) {
  if (!m.stats) throw ContractError("manifest '" + manifest + "' has no normalization stats; run prepare first");
  return *m.stats;
}

void check_classes(const std::vector<std::string>& model_classes, const DatasetManifest& m, const std::string& model,
                   const std::string& manifest) {
  if (model_classes != m.classes)
    throw ConfigError("class list of '" + model + "' does not match manifest '" + manifest + "'");
}

void write_json(const nlohmann::json& j, const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

struct Options {
  std::string config, root, ratios, out, manifest, targets, variant, model, split = "test", timestamp, csv;
  std::vector<std::string> bases;
  std::optional<std::uint64_t> seed;
  std::optional<double> holdout, noise;
  std::optional<std::size_t> image_size, per_class, classes;
};

RunConfig config_or_default(const Options& o) { return o.config.empty() ? RunConfig{} : load_run_config(o.config); }

int cmd_synth(const Options& o, std::ostream& out) {
  SynthConfig cfg;
  const std::size_t k = o.classes.value_or(kSynthClassCount);
  if (k < 2 || k > kSynthClassCount)
    throw ConfigError("--classes must be in [2, " + std::to_string(kSynthClassCount) + "]");
  cfg.per_class.assign(k, o.per_class.value_or(125));
  cfg.image_size = o.image_size.value_or(32);
  cfg.noise = o.noise.value_or(0.1);
  cfg.seed = o.seed.value_or(0);
  generate_synthetic(cfg, o.out);
  out << "wrote " << k * cfg.per_class[0] << " images in " << k << " classes to " << o.out << "\n";
  return 0;
}

int cmd_prepare(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = config_or_default(o);
  const std::string root = !o.root.empty() ? o.root : rc.dataset.root;
  if (root.empty()) throw ConfigError("--root is required (or set dataset.root in the config)");
  const std::vector<double> ratios = o.ratios.empty() ? rc.dataset.ratios : parse_ratios(o.ratios);
  const std::uint64_t seed = o.seed.value_or(rc.seed);
  const double holdout = o.holdout.value_or(rc.dataset.holdout_fraction);
  const std::size_t size = o.image_size.value_or(rc.dataset.image_size);

  LoadReport report;
  DatasetManifest m = load_manifest(absolute(root), &report);
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";
  for (const auto& e : report.errors) err << "skipped: " << e << "\n";
  if (m.samples.empty()) throw ContractError("no readable images under '" + root + "'");

  std::vector<std::string> warnings;
  m = stratified_split(m, ratios, seed, &warnings);
  if (holdout > 0.0) m = partition_holdout(m, holdout, seed, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  m.stats = compute_norm_stats(m, size);
  m.validate();
  save_manifest(m, o.out);

  const auto counts = m.counts();
  out << "classes " << m.classes.size() << ", samples " << m.samples.size() << "\n";
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    out << "  " << m.classes[c];
    for (std::size_t s = 0; s < kSplitCount; ++s)
      if (counts[c][s] > 0) out << " " << to_string(static_cast<Split>(s)) << "=" << counts[c][s];
    out << "\n";
  }
  out << "wrote " << o.out << "\n";
  return 0;
}

int cmd_balance(const Options& o, std::ostream& out) {
  const RunConfig rc = config_or_default(o);
  const std::string spec = !o.targets.empty() ? o.targets : rc.augmentation.targets;
  if (spec.empty()) throw ConfigError("--targets is required (or set augmentation.targets in the config)");
  const DatasetManifest m = load_manifest_csv(o.manifest);
  const auto before = m.class_counts(Split::train);
  const auto targets = parse_targets(spec, m.classes, before);
  const DatasetManifest b = balance_dataset(m, targets, rc.augmentation.params, o.seed.value_or(rc.seed), o.out);
  const std::string csv = (fs::path(o.out) / "manifest.csv").string();
  save_manifest(b, csv);
  const auto after = b.class_counts(Split::train);
  for (std::size_t c = 0; c < m.classes.size(); ++c)
    out << "  " << m.classes[c] << " " << before[c] << " -> " << after[c] << "\n";
  out << "wrote " << csv << "\n";
  return 0;
}

ModelConfig model_for(const RunConfig& rc, const DatasetManifest& m, const NormStats& stats) {
  ModelConfig cfg = rc.model;
  cfg.n_classes = m.classes.size();
  cfg.image_size = stats.image_size;
  return cfg;
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig rc = config_or_default(o);
  const DatasetManifest m = load_manifest_csv(o.manifest);
  const NormStats& stats = require_stats(m, o.manifest);
  ModelConfig mc = model_for(rc, m, stats);
  if (!o.variant.empty()) mc.variant = parse_variant(o.variant);
  TrainConfig tc = rc.train;
  if (o.seed) tc.seed = mc.seed = *o.seed;

  const ImageSet train = load_image_set(m, Split::train, stats.image_size);
  std::optional<ImageSet> val;
  if (!m.select(Split::val).empty()) val = load_image_set(m, Split::val, stats.image_size);
  out << "training " << to_string(mc.variant) << " on " << train.size() << " images\n";
  TrainResult r = train_model(mc, tc, train, stats, val ? &*val : nullptr, [&](const EpochLog& e) {
    out << "  epoch " << e.epoch << " loss " << e.train_loss << " acc " << e.train_accuracy;
    if (e.val_accuracy) out << " val " << *e.val_accuracy;
    out << "\n" << std::flush;
  });
  save_checkpoint(make_base_checkpoint(*r.model, tc, m.classes, stats, train.paths, r.log), o.out);
  out << "wrote " << o.out << "\n";
  return 0;
}

int cmd_ensemble(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = config_or_default(o);
  const DatasetManifest m = load_manifest_csv(o.manifest);
  const NormStats& stats = require_stats(m, o.manifest);
  const std::uint64_t seed = o.seed.value_or(rc.seed);
  const double fraction = rc.ensemble.holdout_fraction;

  DatasetManifest parts = m;
  if (m.select(Split::holdout).empty()) {
    // No holdout yet: carve it from train. Bases trained on the full train
    // split will then fail the leakage guard, which is the point.
    std::vector<std::string> warnings;
    parts = partition_holdout(m, fraction, seed, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << "\n";
  }
  const ImageSet holdout = load_image_set(parts, Split::holdout, stats.image_size);
  std::vector<std::string> bases;
  for (const auto& b : o.bases) bases.push_back(absolute(b));

  Ensemble e = train_ensemble(bases, holdout, rc.ensemble.meta, fraction, seed);
  check_classes(e.spec.classes, m, "ensemble bases", o.manifest);
  for (const auto& l : e.log) out << "  meta epoch " << l.epoch << " loss " << l.loss << " acc " << l.accuracy << "\n";
  save_ensemble(e, o.out);
  out << "wrote " << o.out << "\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const DatasetManifest m = load_manifest_csv(o.manifest);
  const Split split = parse_split(o.split);
  const ImageSet set = load_image_set(m, split, require_stats(m, o.manifest).image_size);
  if (set.size() == 0) throw ContractError("manifest '" + o.manifest + "' has no " + o.split + " samples");

  nlohmann::json extra = nlohmann::json::array();
  Tensor proba;
  if (fs::path(o.model).extension() == ".json") {
    const Ensemble e = load_ensemble(o.model);
    check_classes(e.spec.classes, m, o.model, o.manifest);
    for (std::size_t i = 0; i < e.bases.size(); ++i) {
      const double acc = accuracy(argmax_rows(predict_proba(*e.bases[i].model, set, e.bases[i].stats)), set.labels);
      extra.push_back({{"checkpoint", e.spec.base_checkpoints[i]},
                       {"variant", to_string(e.bases[i].model->config().variant)},
                       {"accuracy", acc}});
      out << "  base " << to_string(e.bases[i].model->config().variant) << " accuracy " << acc << "\n";
    }
    proba = ensemble_proba(e, set);
  } else {
    const BaseModel b = restore_base_model(load_checkpoint(o.model));
    check_classes(b.classes, m, o.model, o.manifest);
    if (b.stats.image_size != set.images.front().width) throw ContractError("checkpoint '" + o.model + "' expects " +
                                                                            std::to_string(b.stats.image_size) + " px");
    proba = predict_proba(*b.model, set, b.stats);
  }
  const MetricsReport r = weighted_metrics(confusion_matrix(set.labels, argmax_rows(proba), m.classes.size()), m.classes);
  const ReportContext ctx{m.classes, o.model, o.split, o.timestamp.empty() ? utc_timestamp() : o.timestamp};
  nlohmann::json j = report_json(r, ctx);
  if (!extra.empty()) j["base_accuracies"] = extra;
  write_json(j, o.out);
  if (!o.csv.empty()) write_confusion_csv(r.confusion, m.classes, o.csv);
  for (const auto& n : r.notes) out << "note: " << n << "\n";
  out << "accuracy " << r.accuracy << " weighted_f1 " << r.weighted_f1 << "\n";
  out << "wrote " << o.out << "\n";
  return 0;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  require_object(j, "<root>");
  RunConfig c;
  bool model_seed = false, train_seed = false, train_augment = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "dataset") {
      require_object(value, key);
      for (const auto& [k, v] : value.items()) {
        if (k == "root") c.dataset.root = get_as<std::string>(v, "dataset.root");
        else if (k == "ratios") c.dataset.ratios = get_as<std::vector<double>>(v, "dataset.ratios");
        else if (k == "image_size") c.dataset.image_size = get_as<std::size_t>(v, "dataset.image_size");
        else if (k == "holdout_fraction") c.dataset.holdout_fraction = get_as<double>(v, "dataset.holdout_fraction");
        else unknown_key(key, k);
      }
    } else if (key == "augmentation") {
      require_object(value, key);
      for (const auto& [k, v] : value.items()) {
        if (k == "params") c.augmentation.params = augment_params_from_json(v);
        else if (k == "targets") c.augmentation.targets = get_as<std::string>(v, "augmentation.targets");
        else unknown_key(key, k);
      }
    } else if (key == "model") {
      require_object(value, key);
      model_seed = value.contains("seed");
      c.model = model_config_from_json(value);
    } else if (key == "train") {
      require_object(value, key);
      train_seed = value.contains("seed");
      train_augment = value.contains("augment");
      c.train = train_config_from_json(value);
    } else if (key == "ensemble") {
      require_object(value, key);
      for (const auto& [k, v] : value.items()) {
        if (k == "holdout_fraction") c.ensemble.holdout_fraction = get_as<double>(v, "ensemble.holdout_fraction");
        else if (k == "meta") c.ensemble.meta = meta_config_from_json(v);
        else unknown_key(key, k);
      }
    } else if (key == "output") {
      require_object(value, key);
      for (const auto& [k, v] : value.items()) {
        if (k == "directory") c.output.directory = get_as<std::string>(v, "output.directory");
        else unknown_key(key, k);
      }
    } else if (key == "seed") {
      c.seed = get_as<std::uint64_t>(value, "seed");
    } else {
      unknown_key("", key);
    }
  }
  // The top-level seed fills in every seed a section leaves unset, and the
  // augmentation section feeds online augmentation unless train overrides it.
  if (!model_seed) c.model.seed = c.seed;
  if (!train_seed) c.train.seed = c.seed;
  if (!train_augment) c.train.augment = c.augmentation.params;
  if (c.ensemble.holdout_fraction <= 0.0 || c.ensemble.holdout_fraction >= 1.0)
    throw ConfigError("ensemble.holdout_fraction must be in (0, 1)");
  if (c.dataset.holdout_fraction < 0.0 || c.dataset.holdout_fraction >= 1.0)
    throw ConfigError("dataset.holdout_fraction must be in [0, 1)");
  validate(c.train);
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"dataset",
           {{"root", c.dataset.root},
            {"ratios", c.dataset.ratios},
            {"image_size", c.dataset.image_size},
            {"holdout_fraction", c.dataset.holdout_fraction}}},
          {"augmentation", {{"params", to_json(c.augmentation.params)}, {"targets", c.augmentation.targets}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"ensemble", {{"holdout_fraction", c.ensemble.holdout_fraction}, {"meta", to_json(c.ensemble.meta)}}},
          {"output", {{"directory", c.output.directory}}},
          {"seed", c.seed}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

void apply_thread_env() {
  const char* env = std::getenv("SSMCYTO_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n <= 0) throw ConfigError("SSMCYTO_THREADS must be a positive integer, got '" + std::string(env) + "'");
  kernels::set_thread_count(static_cast<int>(std::min<long>(n, kernels::thread_count())));
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"State space model ensembles for blood cell image classification", "ssmcyto"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate the deterministic synthetic pattern dataset");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--per-class", o.per_class, "Images per class (default 125)");
  synth->add_option("--classes", o.classes, "Number of classes, 2 to 8 (default 8)");
  synth->add_option("--size", o.image_size, "Image side in pixels (default 32)");
  synth->add_option("--noise", o.noise, "Pixel noise standard deviation (default 0.1)");
  synth->add_option("--seed", o.seed, "Generator seed (default 0)");

  auto* prepare = app.add_subcommand("prepare", "Scan a class-per-directory dataset and split it");
  prepare->add_option("--root", o.root, "Dataset root");
  prepare->add_option("--ratios", o.ratios, "Split ratios, e.g. 4:1 or 7:1:2");
  prepare->add_option("--seed", o.seed, "Split seed");
  prepare->add_option("--holdout", o.holdout, "Fraction of train moved to the ensemble holdout");
  prepare->add_option("--image-size", o.image_size, "Resolution for normalization stats");
  prepare->add_option("--config", o.config, "RunConfig JSON");
  prepare->add_option("--out", o.out, "Manifest CSV to write")->required();

  auto* balance = app.add_subcommand("balance", "Augment minority classes up to per-class targets");
  balance->add_option("--manifest", o.manifest, "Input manifest CSV")->required();
  balance->add_option("--targets", o.targets, "\"500\" or \"name=500,other=300\"");
  balance->add_option("--seed", o.seed, "Augmentation seed");
  balance->add_option("--config", o.config, "RunConfig JSON");
  balance->add_option("--out", o.out, "Output directory (images and manifest.csv)")->required();

  auto* train = app.add_subcommand("train", "Train one base model");
  train->add_option("--manifest", o.manifest, "Manifest CSV")->required();
  train->add_option("--variant", o.variant, "vanilla, vim, vmamba_ss2d, mambavision, medmamba, localmamba");
  train->add_option("--config", o.config, "RunConfig JSON");
  train->add_option("--seed", o.seed, "Overrides model and train seeds");
  train->add_option("--out", o.out, "Checkpoint to write")->required();

  auto* ensemble = app.add_subcommand("ensemble", "Train the stacking meta-learner on the holdout");
  ensemble->add_option("--manifest", o.manifest, "Manifest CSV")->required();
  ensemble->add_option("--config", o.config, "RunConfig JSON");
  ensemble->add_option("--bases", o.bases, "Base checkpoints")->required()->expected(1, -1);
  ensemble->add_option("--seed", o.seed, "Holdout partition and meta seed");
  ensemble->add_option("--out", o.out, "Ensemble spec JSON to write")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or ensemble spec");
  eval->add_option("--manifest", o.manifest, "Manifest CSV")->required();
  eval->add_option("--model", o.model, "Base checkpoint or ensemble spec (.json)")->required();
  eval->add_option("--split", o.split, "train, holdout, val or test (default test)");
  eval->add_option("--timestamp", o.timestamp, "Timestamp recorded in the report");
  eval->add_option("--csv", o.csv, "Also write the confusion matrix as CSV");
  eval->add_option("--out", o.out, "Report JSON to write")->required();

  auto* selftest = app.add_subcommand("selftest", "Run the invariant suites");

  // CLI11 consumes a reversed argument list without the program name.
  std::vector<std::string> rev(args.empty() ? args.end() : args.begin() + 1, args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    apply_thread_env();
    if (synth->parsed()) return cmd_synth(o, out);
    if (prepare->parsed()) return cmd_prepare(o, out, err);
    if (balance->parsed()) return cmd_balance(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (ensemble->parsed()) return cmd_ensemble(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (selftest->parsed()) return run_selftest(out) ? 0 : 1;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace ssmcyto
