#include "ssmcyto/ensemble.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "ssmcyto/error.hpp"
#include "ssmcyto/ops.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {

nlohmann::json to_json(const MetaConfig& cfg) {
  return {{"hidden", cfg.hidden},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"weight_decay", cfg.weight_decay}};
}

MetaConfig meta_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("meta config must be a JSON object");
  MetaConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "hidden") cfg.hidden = value.get<std::vector<std::size_t>>();
      else if (key == "epochs") cfg.epochs = value.get<std::size_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
      else throw ConfigError("meta config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("meta config: ") + e.what());
  }
  if (cfg.batch_size == 0) throw ConfigError("meta config: batch_size must be positive");
  for (std::size_t h : cfg.hidden)
    if (h == 0) throw ConfigError("meta config: hidden widths must be positive");
  if (!(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0)) throw ConfigError("meta config: lr and decay must be >= 0");
  return cfg;
}

MetaMlp::MetaMlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs, std::uint64_t seed)
    : inputs_(inputs), outputs_(outputs), hidden_(hidden) {
  if (inputs == 0 || outputs == 0) throw ConfigError("meta: zero-width input or output");
  Rng rng(seed);
  std::size_t in = inputs;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers_.push_back(make_linear(store_, "meta.fc" + std::to_string(i), in, hidden[i], true, rng));
    in = hidden[i];
  }
  layers_.push_back(make_linear(store_, "meta.out", in, outputs, true, rng));
}

Tensor MetaMlp::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != inputs_) {
    throw ShapeError("meta: expected [B, " + std::to_string(inputs_) + "], got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = silu(layers_[i](h));
  return layers_.back()(h);
}

std::unique_ptr<MetaMlp> averaging_meta(std::size_t n_models, std::size_t n_classes) {
  auto meta = std::make_unique<MetaMlp>(n_models * n_classes, std::vector<std::size_t>{}, n_classes, 0);
  Param& w = meta->params().params()[0];
  Param& b = meta->params().params()[1];
  std::span<double> wd = w.value.mutable_data();
  std::fill(wd.begin(), wd.end(), 0.0);
  for (std::size_t m = 0; m < n_models; ++m)
    for (std::size_t c = 0; c < n_classes; ++c) wd[(m * n_classes + c) * n_classes + c] = 1.0 / static_cast<double>(n_models);
  std::span<double> bd = b.value.mutable_data();
  std::fill(bd.begin(), bd.end(), 0.0);
  return meta;
}

std::vector<std::string> common_classes(const std::vector<BaseModel>& bases) {
  if (bases.empty()) throw ConfigError("ensemble: no base models");
  for (std::size_t i = 1; i < bases.size(); ++i)
    if (bases[i].classes != bases[0].classes) {
      throw ConfigError("ensemble: base model " + std::to_string(i) + " has a different class list than base 0");
    }
  return bases[0].classes;
}

Tensor assemble_meta_inputs(const std::vector<BaseModel>& bases, const ImageSet& set) {
  const std::size_t k = common_classes(bases).size(), n = bases.size(), rows = set.size();
  for (std::size_t m = 0; m < n; ++m)
    if (rows > 0 && bases[m].model->config().image_size != set.images[0].width) {
      throw ConfigError("ensemble: base " + std::to_string(m) + " expects " +
                        std::to_string(bases[m].model->config().image_size) + " px images");
    }
  std::vector<double> out(rows * n * k);
  for (std::size_t m = 0; m < n; ++m) {
    const Tensor p = predict_proba(*bases[m].model, set, bases[m].stats);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(r * k), k,
                  out.begin() + static_cast<std::ptrdiff_t>((r * n + m) * k));
  }
  return Tensor::from({rows, n * k}, std::move(out));
}

void check_no_leakage(const std::vector<BaseModel>& bases, const std::vector<std::string>& meta_paths) {
  std::unordered_set<std::string> meta(meta_paths.begin(), meta_paths.end());
  for (std::size_t i = 0; i < bases.size(); ++i)
    for (const std::string& p : bases[i].train_paths)
      if (meta.count(p)) throw ContractError("leakage: '" + p + "' trains base " + std::to_string(i) + " and the meta-learner");
}

std::vector<MetaEpoch> fit_meta(MetaMlp& meta, const Tensor& inputs, const std::vector<int>& labels,
                                const MetaConfig& cfg, std::uint64_t seed) {
  const std::size_t rows = inputs.dim(0), width = inputs.dim(1);
  if (rows == 0) throw ContractError("meta: the holdout set is empty");
  if (labels.size() != rows) throw ContractError("meta: label count does not match inputs");
  Rng rng = derive_rng(seed, 0x4d455441ULL);
  std::vector<std::size_t> order(rows);
  AdamState adam;
  std::vector<MetaEpoch> log;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    seeded_shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t hit = 0;
    for (std::size_t start = 0; start < rows; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, rows - start);
      std::vector<double> buf(b * width);
      std::vector<int> y(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(r * width), width,
                    buf.begin() + static_cast<std::ptrdiff_t>(i * width));
        y[i] = labels[r];
      }
      meta.params().zero_grad();
      const Tensor logits = meta.forward(Tensor::from({b, width}, std::move(buf)));
      const Tensor loss = cross_entropy(logits, y);
      backward(loss);
      adamw_step(meta.params(), adam, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
      loss_sum += loss.item() * static_cast<double>(b);
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < b; ++i) hit += pred[i] == y[i];
    }
    meta.params().zero_grad();
    log.push_back({epoch, loss_sum / static_cast<double>(rows), static_cast<double>(hit) / static_cast<double>(rows)});
  }
  return log;
}

nlohmann::json to_json(const EnsembleSpec& s) {
  return {{"base_checkpoints", s.base_checkpoints},
          {"classes", s.classes},
          {"n_classes", s.classes.size()},
          {"holdout_fraction", s.holdout_fraction},
          {"seed", s.seed},
          {"meta", to_json(s.meta)},
          {"meta_checkpoint", s.meta_checkpoint},
          {"base_checksums", s.base_checksums}};
}

EnsembleSpec ensemble_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("ensemble spec must be a JSON object");
  EnsembleSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "base_checkpoints") s.base_checkpoints = value.get<std::vector<std::string>>();
      else if (key == "classes") s.classes = value.get<std::vector<std::string>>();
      else if (key == "n_classes") continue;  // derived from classes, checked below
      else if (key == "holdout_fraction") s.holdout_fraction = value.get<double>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "meta") s.meta = meta_config_from_json(value);
      else if (key == "meta_checkpoint") s.meta_checkpoint = value.get<std::string>();
      else if (key == "base_checksums") s.base_checksums = value.get<std::vector<std::uint64_t>>();
      else throw FormatError("ensemble spec: unknown key '" + key + "'");
    }
    if (j.contains("n_classes") && j.at("n_classes").get<std::size_t>() != s.classes.size()) {
      throw FormatError("ensemble spec: n_classes disagrees with the class list");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ensemble spec: ") + e.what());
  }
  return s;
}

namespace {

std::vector<BaseModel> load_bases(const std::vector<std::string>& paths) {
  std::vector<BaseModel> bases;
  for (const std::string& p : paths) bases.push_back(restore_base_model(load_checkpoint(p)));
  return bases;
}

std::vector<std::uint64_t> checksums(const std::vector<BaseModel>& bases) {
  std::vector<std::uint64_t> out;
  for (const auto& b : bases) out.push_back(b.model->params().checksum());
  return out;
}

}  // namespace

Ensemble train_ensemble(const std::vector<std::string>& base_checkpoints, const ImageSet& holdout,
                        const MetaConfig& cfg, double holdout_fraction, std::uint64_t seed) {
  Ensemble e;
  e.bases = load_bases(base_checkpoints);
  e.spec.base_checkpoints = base_checkpoints;
  e.spec.classes = common_classes(e.bases);
  e.spec.holdout_fraction = holdout_fraction;
  e.spec.seed = seed;
  e.spec.meta = cfg;
  if (holdout.size() == 0) throw ContractError("ensemble: the holdout set is empty");
  check_no_leakage(e.bases, holdout.paths);

  const auto before = checksums(e.bases);
  const Tensor inputs = assemble_meta_inputs(e.bases, holdout);
  const std::size_t k = e.spec.classes.size();
  e.meta = std::make_unique<MetaMlp>(e.bases.size() * k, cfg.hidden, k, seed);
  e.log = fit_meta(*e.meta, inputs, holdout.labels, cfg, seed);
  const auto after = checksums(e.bases);
  if (before != after) throw ContractError("ensemble: base parameters changed during meta training");
  e.spec.base_checksums = after;
  e.holdout_paths = holdout.paths;
  return e;
}

void save_ensemble(const Ensemble& e, const std::string& spec_path) {
  const fs::path spec(spec_path);
  EnsembleSpec s = e.spec;
  s.meta_checkpoint = spec.stem().string() + ".meta.ckpt";
  Checkpoint ck;
  nlohmann::json jlog = nlohmann::json::array();
  for (const auto& m : e.log) jlog.push_back({{"epoch", m.epoch}, {"loss", m.loss}, {"accuracy", m.accuracy}});
  ck.header = {{"kind", "meta"},
               {"inputs", e.meta->inputs()},
               {"hidden", e.meta->hidden()},
               {"classes", s.classes},
               {"holdout_paths", e.holdout_paths},
               {"log", jlog}};
  ck.tensors = records_from(e.meta->params());
  if (spec.has_parent_path()) fs::create_directories(spec.parent_path());
  save_checkpoint(ck, (spec.parent_path() / s.meta_checkpoint).string());
  std::ofstream out(spec_path, std::ios::trunc);
  if (!out) throw IoError("cannot write ensemble spec " + spec_path);
  out << to_json(s).dump(2) << "\n";
  if (!out) throw IoError("failed writing ensemble spec " + spec_path);
}

Ensemble load_ensemble(const std::string& spec_path) {
  std::ifstream in(spec_path);
  if (!in) throw IoError("cannot open ensemble spec " + spec_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(spec_path + ": " + e.what());
  }
  Ensemble e;
  e.spec = ensemble_spec_from_json(j);
  e.bases = load_bases(e.spec.base_checkpoints);
  if (common_classes(e.bases) != e.spec.classes) throw ConfigError(spec_path + ": base class lists differ from the spec");
  if (!e.spec.base_checksums.empty() && checksums(e.bases) != e.spec.base_checksums) {
    throw ConfigError(spec_path + ": a base checkpoint changed since the ensemble was trained");
  }
  const std::string meta_path = (fs::path(spec_path).parent_path() / e.spec.meta_checkpoint).string();
  const Checkpoint ck = load_checkpoint(meta_path);
  std::size_t inputs = 0;
  std::vector<std::size_t> hidden;
  try {
    if (ck.header.at("kind") != "meta") throw FormatError(meta_path + ": not a meta checkpoint");
    inputs = ck.header.at("inputs").get<std::size_t>();
    hidden = ck.header.at("hidden").get<std::vector<std::size_t>>();
    e.holdout_paths = ck.header.at("holdout_paths").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(meta_path + ": " + ex.what());
  }
  const std::size_t k = e.spec.classes.size();
  if (inputs != e.bases.size() * k) {
    throw ConfigError(meta_path + ": meta input width " + std::to_string(inputs) + " != " +
                      std::to_string(e.bases.size()) + " bases x " + std::to_string(k) + " classes");
  }
  e.meta = std::make_unique<MetaMlp>(inputs, hidden, k, 0);
  load_records(e.meta->params(), ck.tensors);
  return e;
}

Tensor ensemble_proba(const Ensemble& e, const ImageSet& set) {
  NoGradGuard guard;
  return softmax(e.meta->forward(assemble_meta_inputs(e.bases, set)));
}

Prediction ensemble_predict(const Ensemble& e, const Image& image) {
  if (e.bases.empty()) throw ConfigError("ensemble: no base models");
  ImageSet one;
  const std::size_t s = e.bases[0].model->config().image_size;
  one.images.push_back(image.width == s && image.height == s ? image : resize_bilinear(image, s, s));
  one.labels.push_back(0);
  one.paths.push_back("");
  const Tensor p = ensemble_proba(e, one);
  Prediction out;
  out.probabilities.assign(p.data().begin(), p.data().end());
  out.label = argmax_rows(p)[0];
  return out;
}

}  // namespace ssmcyto
