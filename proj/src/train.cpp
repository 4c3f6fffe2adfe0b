#include "ssmcyto/train.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssmcyto/error.hpp"
#include "ssmcyto/ops.hpp"

namespace ssmcyto {

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(cfg.lr >= 0.0)) throw ConfigError("train: lr must be non-negative");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  validate(cfg.augment);
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"betas", {cfg.beta1, cfg.beta2}},
          {"eps", cfg.eps},
          {"weight_decay", cfg.weight_decay},
          {"seed", cfg.seed},
          {"use_class_weights", cfg.use_class_weights},
          {"use_augmentation", cfg.use_augmentation},
          {"augment", to_json(cfg.augment)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") cfg.epochs = value.get<std::size_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "betas") {
        const auto b = value.get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("train config: betas needs two values");
        cfg.beta1 = b[0];
        cfg.beta2 = b[1];
      } else if (key == "eps") cfg.eps = value.get<double>();
      else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "use_class_weights") cfg.use_class_weights = value.get<bool>();
      else if (key == "use_augmentation") cfg.use_augmentation = value.get<bool>();
      else if (key == "augment") cfg.augment = augment_params_from_json(value);
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

void adamw_step(ParamStore& store, AdamState& state, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
  auto& params = store.params();
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].value.numel(), 0.0);
      state.v[i].assign(params[i].value.numel(), 0.0);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    std::span<double> theta = p.value.mutable_data();
    const bool has = p.value.has_grad();
    std::span<const double> g = has ? p.value.grad() : std::span<const double>{};
    const double wd = p.decay ? weight_decay : 0.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
      v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
      const double mh = m[k] / c1, vh = v[k] / c2;
      theta[k] -= lr * (mh / (std::sqrt(vh) + eps) + wd * theta[k]);
    }
  }
}

void adamw_step(ParamStore& store, AdamState& state, const TrainConfig& cfg) {
  adamw_step(store, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
}

ImageSet load_image_set(const DatasetManifest& m, Split split, std::size_t image_size) {
  const std::vector<Sample> samples = m.select(split);
  ImageSet set;
  set.images.resize(samples.size());
  std::vector<std::string> failures(samples.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      set.images[i] = resize_bilinear(read_image(samples[i].path), image_size, image_size);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const std::string& f : failures)
    if (!f.empty()) throw FormatError(f);
  for (const Sample& s : samples) {
    set.labels.push_back(s.label);
    set.paths.push_back(s.path);
  }
  return set;
}

Tensor batch_tensor(const ImageSet& set, std::span<const std::size_t> indices, const NormStats& stats) {
  if (set.images.empty()) throw ContractError("batch_tensor: empty image set");
  const std::size_t s = set.images[0].width;
  std::vector<Image> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) picked.push_back(set.images.at(i));
  return preprocess_batch(picked, s, stats);
}

nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy}};
  if (e.val_accuracy) j["val_accuracy"] = *e.val_accuracy;
  return j;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  if (probs.rank() != 2) throw ShapeError("argmax_rows: expected [N, K], got " + shape_str(probs.shape()));
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.data().subspan(i * k, k);
    // max_element returns the first maximum.
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw ContractError("accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor predict_proba(const VisionModel& model, const ImageSet& set, const NormStats& stats, std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t n = set.size(), k = model.config().n_classes;
  std::vector<double> out;
  out.reserve(n * k);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.resize(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor p = softmax(model.forward(batch_tensor(set, idx, stats)));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from({n, k}, std::move(out));
}

TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& cfg, const ImageSet& train,
                        const NormStats& stats, const ImageSet* val, const EpochCallback& on_epoch) {
  validate(model_cfg);
  validate(cfg);
  if (train.size() == 0) throw ContractError("train_model: the train split is empty");
  for (int y : train.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= model_cfg.n_classes) {
      throw ContractError("train_model: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(model_cfg.n_classes) + ")");
    }
  for (const Image& img : train.images)
    if (img.width != model_cfg.image_size || img.height != model_cfg.image_size) {
      throw ShapeError("train_model: images must be " + std::to_string(model_cfg.image_size) + " square");
    }

  TrainResult result;
  result.model = std::make_unique<VisionModel>(model_cfg);
  ParamStore& store = result.model->params();

  std::vector<double> weights;
  if (cfg.use_class_weights) {
    std::vector<std::size_t> counts(model_cfg.n_classes, 0);
    for (int y : train.labels) ++counts[static_cast<std::size_t>(y)];
    // Classes absent from training get weight 0; they never appear as targets.
    const double n = static_cast<double>(train.size()), kk = static_cast<double>(model_cfg.n_classes);
    weights.resize(counts.size(), 0.0);
    for (std::size_t c = 0; c < counts.size(); ++c)
      if (counts[c] > 0) weights[c] = n / (kk * static_cast<double>(counts[c]));
  }

  // Without online augmentation the whole set is normalized once.
  Tensor cached;
  if (!cfg.use_augmentation) cached = preprocess_batch(train.images, model_cfg.image_size, stats);
  const std::size_t pix = 3 * model_cfg.image_size * model_cfg.image_size;

  Rng shuffle_rng = derive_rng(cfg.seed, 0x5348554646ULL);
  std::vector<std::size_t> order(train.size());
  AdamState adam;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    seeded_shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, b);
      Tensor images;
      if (cfg.use_augmentation) {
        std::vector<Image> aug(b);
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < b; ++i) {
          Rng rng = derive_rng(cfg.seed, epoch, idx[i]);
          aug[i] = augment_image(train.images[idx[i]], cfg.augment, rng);
        }
        images = preprocess_batch(aug, model_cfg.image_size, stats);
      } else {
        std::vector<double> buf(b * pix);
        for (std::size_t i = 0; i < b; ++i)
          std::copy_n(cached.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * pix), pix,
                      buf.begin() + static_cast<std::ptrdiff_t>(i * pix));
        images = Tensor::from({b, 3, model_cfg.image_size, model_cfg.image_size}, std::move(buf));
      }
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) labels[i] = train.labels[idx[i]];

      store.zero_grad();
      const Tensor logits = result.model->forward(images);
      const Tensor loss = cross_entropy(logits, labels, weights);
      backward(loss);
      adamw_step(store, adam, cfg);

      loss_sum += loss.item() * static_cast<double>(b);
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < b; ++i) correct += pred[i] == labels[i];
    }
    store.zero_grad();
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(train.size());
    entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    if (val != nullptr && val->size() > 0) {
      entry.val_accuracy = accuracy(argmax_rows(predict_proba(*result.model, *val, stats)), val->labels);
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

nlohmann::json to_json(const NormStats& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"image_size", s.image_size}};
}

NormStats norm_stats_from_json(const nlohmann::json& j) {
  NormStats s;
  try {
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("std").get<std::array<double, 3>>();
    s.image_size = j.at("image_size").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("normalization stats: ") + e.what());
  }
  return s;
}

}  // namespace ssmcyto
