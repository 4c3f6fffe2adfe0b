#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmcyto/dataset.hpp"
#include "ssmcyto/model.hpp"

namespace ssmcyto {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;  // shuffling and online augmentation; init comes from ModelConfig::seed
  bool use_class_weights = false;
  bool use_augmentation = false;
  AugmentParams augment;  // used when use_augmentation is set

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// One AdamW update from the gradients currently held by `store`. Parameters
// without a gradient are treated as g = 0. Decay only touches Param::decay.
void adamw_step(ParamStore& store, AdamState& state, double lr, double beta1, double beta2, double eps,
                double weight_decay);
void adamw_step(ParamStore& store, AdamState& state, const TrainConfig& cfg);

// Images decoded and resized to the model resolution, not yet normalized.
struct ImageSet {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> paths;

  std::size_t size() const { return images.size(); }
};

ImageSet load_image_set(const DatasetManifest& m, Split split, std::size_t image_size);
// [N, 3, S, S] normalized batch of the listed indices.
Tensor batch_tensor(const ImageSet& set, std::span<const std::size_t> indices, const NormStats& stats);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  std::unique_ptr<VisionModel> model;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Seeded reshuffle each epoch, then forward, loss, backward and AdamW per
// batch. Class weights come from the train labels. Bitwise reproducible for
// fixed seeds; the kernels do not depend on the thread count.
TrainResult train_model(const ModelConfig& model_cfg, const TrainConfig& cfg, const ImageSet& train,
                        const NormStats& stats, const ImageSet* val = nullptr, const EpochCallback& on_epoch = {});

// Softmax probabilities [N, K] in batches, graph-free.
Tensor predict_proba(const VisionModel& model, const ImageSet& set, const NormStats& stats,
                     std::size_t batch_size = 64);
// argmax with ties to the lowest index.
std::vector<int> argmax_rows(const Tensor& probs);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

nlohmann::json to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

// Binary checkpoint: "SSMCYTO1", u64 LE header length, JSON header, then per
// tensor: u32 name length, name, u32 rank, u64 dims, float32 LE payload.
struct Checkpoint {
  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  nlohmann::json header;
  std::vector<Record> tensors;
};

Checkpoint::Record* find_record(Checkpoint& ckpt, const std::string& name);

// Records every parameter of `store` in registration order.
std::vector<Checkpoint::Record> records_from(const ParamStore& store);
// All-or-nothing: every parameter must appear exactly once with its shape,
// otherwise FormatError naming the tensor and nothing is written.
void load_records(ParamStore& store, const std::vector<Checkpoint::Record>& records);

// Header: kind "base", model, train, classes, norm_stats, train_paths, epoch, log.
Checkpoint make_base_checkpoint(const VisionModel& model, const TrainConfig& cfg,
                                const std::vector<std::string>& classes, const NormStats& stats,
                                const std::vector<std::string>& train_paths, const std::vector<EpochLog>& log);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct BaseModel {
  std::unique_ptr<VisionModel> model;
  std::vector<std::string> classes;
  NormStats stats;
  std::vector<std::string> train_paths;
  nlohmann::json header;
};

// `expected`, when given, must equal the stored model config (ConfigError).
BaseModel restore_base_model(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace ssmcyto
