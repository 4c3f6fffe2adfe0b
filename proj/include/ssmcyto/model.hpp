#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ssmcyto/blocks.hpp"

namespace ssmcyto {

struct ModelConfig {
  BlockVariant variant = BlockVariant::vanilla;
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::vector<std::size_t> stage_depths{1, 1, 2};
  std::vector<std::size_t> stage_dims{32, 64, 128};
  std::size_t n_classes = 8;
  std::size_t n_state = 8;
  std::size_t conv_kernel = 3;
  std::size_t groups = 2;
  std::size_t window = 2;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& cfg);
// Side length of the token grid entering `stage`.
std::size_t stage_grid(const ModelConfig& cfg, std::size_t stage);

nlohmann::json to_json(const ModelConfig& cfg);
// Strict: unknown keys are a ConfigError; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Patch merging: tokens (2r, 2c), (2r, 2c+1), (2r+1, 2c), (2r+1, 2c+1) are
// concatenated in that order and projected. fmap is [B, H·W, C].
Tensor downsample(const Tensor& fmap, Grid grid, const Linear& proj);

class VisionModel {
 public:
  // Parameters are drawn from a generator seeded with cfg.seed.
  explicit VisionModel(const ModelConfig& cfg);

  // images: [B, 3, S, S] -> logits [B, n_classes].
  Tensor forward(const Tensor& images, ScanImpl impl = ScanImpl::parallel) const;
  // images: [B, 3, S, S] -> tokens [B, (S/p)², stage_dims[0]]. Images are
  // treated as constants (no gradient flows back into pixels).
  Tensor patch_embed(const Tensor& images) const;
  // Final-stage tokens [B, T, C] -> logits: mean pool, LayerNorm, linear.
  Tensor head(const Tensor& tokens) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  VisionModel(const VisionModel&) = delete;
  VisionModel& operator=(const VisionModel&) = delete;

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Linear embed_;
  Tensor pos_;
  std::vector<std::vector<MambaBlock>> stages_;
  std::vector<Linear> merges_;
  LayerNorm head_norm_;
  Linear head_;
};

}  // namespace ssmcyto
