#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmcyto/train.hpp"

namespace ssmcyto {

struct MetaConfig {
  std::vector<std::size_t> hidden{64};  // empty: a single linear map
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  double weight_decay = 0.0;

  bool operator==(const MetaConfig&) const = default;
};

nlohmann::json to_json(const MetaConfig& cfg);
MetaConfig meta_config_from_json(const nlohmann::json& j);

// Multilayer perceptron over concatenated base probabilities, SiLU between
// layers and a linear output.
class MetaMlp {
 public:
  MetaMlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs, std::uint64_t seed);

  // [B, inputs] -> logits [B, outputs].
  Tensor forward(const Tensor& x) const;

  std::size_t inputs() const { return inputs_; }
  std::size_t outputs() const { return outputs_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  MetaMlp(const MetaMlp&) = delete;
  MetaMlp& operator=(const MetaMlp&) = delete;

 private:
  std::size_t inputs_, outputs_;
  std::vector<std::size_t> hidden_;
  ParamStore store_;
  std::vector<Linear> layers_;
};

// Linear meta with weights 1/n on each class's n segment entries: its argmax
// is the soft-vote of the bases.
std::unique_ptr<MetaMlp> averaging_meta(std::size_t n_models, std::size_t n_classes);

// Every base must list the same classes in the same order (ConfigError).
std::vector<std::string> common_classes(const std::vector<BaseModel>& bases);

// Row b: softmax outputs of each base on sample b, concatenated in base order.
// Each base normalizes with its own stats. Width n·K.
Tensor assemble_meta_inputs(const std::vector<BaseModel>& bases, const ImageSet& set);

// Throws ContractError naming the first meta path also used to train a base.
void check_no_leakage(const std::vector<BaseModel>& bases, const std::vector<std::string>& meta_paths);

struct MetaEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Exactly cfg.epochs epochs of AdamW on cross-entropy; inputs are fixed.
std::vector<MetaEpoch> fit_meta(MetaMlp& meta, const Tensor& inputs, const std::vector<int>& labels,
                                const MetaConfig& cfg, std::uint64_t seed);

struct EnsembleSpec {
  std::vector<std::string> base_checkpoints;
  std::vector<std::string> classes;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  MetaConfig meta;
  std::string meta_checkpoint;  // relative to the spec file's directory
  std::vector<std::uint64_t> base_checksums;
};

nlohmann::json to_json(const EnsembleSpec& s);
EnsembleSpec ensemble_spec_from_json(const nlohmann::json& j);

struct Ensemble {
  EnsembleSpec spec;
  std::vector<BaseModel> bases;
  std::unique_ptr<MetaMlp> meta;
  std::vector<std::string> holdout_paths;
  std::vector<MetaEpoch> log;
};

// Loads the base checkpoints, asserts that `holdout` shares no path with any
// base's training set, trains the meta on the holdout and verifies that every
// base's parameter checksum is unchanged.
Ensemble train_ensemble(const std::vector<std::string>& base_checkpoints, const ImageSet& holdout,
                        const MetaConfig& cfg, double holdout_fraction, std::uint64_t seed);

// Writes spec_path plus the meta checkpoint next to it.
void save_ensemble(const Ensemble& e, const std::string& spec_path);
Ensemble load_ensemble(const std::string& spec_path);

// softmax(meta(assemble_meta_inputs)) -> [N, K].
Tensor ensemble_proba(const Ensemble& e, const ImageSet& set);

struct Prediction {
  std::vector<double> probabilities;
  int label = 0;  // argmax, ties to the lowest index
};

Prediction ensemble_predict(const Ensemble& e, const Image& image);

}  // namespace ssmcyto
