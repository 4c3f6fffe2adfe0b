#include "ssmcyto/model.hpp"

#include "ssmcyto/error.hpp"

namespace ssmcyto {

void validate(const ModelConfig& cfg) {
  if (cfg.stage_depths.empty() || cfg.stage_depths.size() != cfg.stage_dims.size()) {
    throw ConfigError("model: stage_depths and stage_dims must be non-empty and of equal length");
  }
  if (cfg.patch_size == 0 || cfg.image_size == 0 || cfg.n_classes == 0) {
    throw ConfigError("model: image_size, patch_size and n_classes must be positive");
  }
  const std::size_t reduction = cfg.patch_size << (cfg.stage_depths.size() - 1);
  if (cfg.image_size % reduction != 0) {
    throw ConfigError("model: image_size " + std::to_string(cfg.image_size) + " must be divisible by " +
                      std::to_string(reduction) + " (patch_size * 2^(stages-1))");
  }
  for (std::size_t s = 0; s < cfg.stage_dims.size(); ++s) {
    BlockConfig b = make_block_config(cfg.variant, cfg.stage_dims[s]);
    b.n_state = cfg.n_state;
    b.conv_kernel = cfg.conv_kernel;
    b.groups = cfg.groups;
    b.window = cfg.window;
    validate(b);
    if (cfg.variant == BlockVariant::localmamba && stage_grid(cfg, s) % cfg.window != 0) {
      throw ConfigError("model: localmamba window " + std::to_string(cfg.window) + " does not divide the " +
                        std::to_string(stage_grid(cfg, s)) + "-wide grid of stage " + std::to_string(s));
    }
  }
}

std::size_t stage_grid(const ModelConfig& cfg, std::size_t stage) {
  return (cfg.image_size / cfg.patch_size) >> stage;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"variant", to_string(cfg.variant)},
          {"image_size", cfg.image_size},
          {"patch_size", cfg.patch_size},
          {"stage_depths", cfg.stage_depths},
          {"stage_dims", cfg.stage_dims},
          {"n_classes", cfg.n_classes},
          {"n_state", cfg.n_state},
          {"conv_kernel", cfg.conv_kernel},
          {"groups", cfg.groups},
          {"window", cfg.window},
          {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variant") cfg.variant = parse_variant(value.get<std::string>());
      else if (key == "image_size") cfg.image_size = value.get<std::size_t>();
      else if (key == "patch_size") cfg.patch_size = value.get<std::size_t>();
      else if (key == "stage_depths") cfg.stage_depths = value.get<std::vector<std::size_t>>();
      else if (key == "stage_dims") cfg.stage_dims = value.get<std::vector<std::size_t>>();
      else if (key == "n_classes") cfg.n_classes = value.get<std::size_t>();
      else if (key == "n_state") cfg.n_state = value.get<std::size_t>();
      else if (key == "conv_kernel") cfg.conv_kernel = value.get<std::size_t>();
      else if (key == "groups") cfg.groups = value.get<std::size_t>();
      else if (key == "window") cfg.window = value.get<std::size_t>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else throw ConfigError("model config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

Tensor downsample(const Tensor& fmap, Grid grid, const Linear& proj) {
  if (fmap.rank() != 3 || fmap.dim(1) != grid.tokens()) {
    throw ShapeError("downsample: expected [B, " + std::to_string(grid.tokens()) + ", C], got " +
                     shape_str(fmap.shape()));
  }
  if (grid.height % 2 != 0 || grid.width % 2 != 0) {
    throw ShapeError("downsample: grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                     " has an odd side");
  }
  const std::size_t h2 = grid.height / 2, w2 = grid.width / 2;
  std::vector<Tensor> parts;
  for (std::size_t dr : {0u, 1u})
    for (std::size_t dc : {0u, 1u}) {
      std::vector<std::size_t> idx;
      idx.reserve(h2 * w2);
      for (std::size_t r = 0; r < h2; ++r)
        for (std::size_t c = 0; c < w2; ++c) idx.push_back((2 * r + dr) * grid.width + 2 * c + dc);
      parts.push_back(gather_tokens(fmap, idx));
    }
  return proj(concat_last(parts));
}

VisionModel::VisionModel(const ModelConfig& cfg) : cfg_(cfg) {
  validate(cfg_);
  Rng rng(cfg_.seed);
  const std::size_t p = cfg_.patch_size, grid = cfg_.image_size / p;
  embed_ = make_linear(store_, "embed", 3 * p * p, cfg_.stage_dims[0], true, rng);
  pos_ = store_.uniform("pos", {1, grid * grid, cfg_.stage_dims[0]}, 0.02, rng, false);
  for (std::size_t s = 0; s < cfg_.stage_depths.size(); ++s) {
    if (s > 0) {
      merges_.push_back(make_linear(store_, "merge" + std::to_string(s), 4 * cfg_.stage_dims[s - 1],
                                    cfg_.stage_dims[s], false, rng));
    }
    BlockConfig b = make_block_config(cfg_.variant, cfg_.stage_dims[s]);
    b.n_state = cfg_.n_state;
    b.conv_kernel = cfg_.conv_kernel;
    b.groups = cfg_.groups;
    b.window = cfg_.window;
    auto& stage = stages_.emplace_back();
    for (std::size_t d = 0; d < cfg_.stage_depths[s]; ++d) {
      stage.emplace_back(b, store_, "stage" + std::to_string(s) + ".block" + std::to_string(d), rng);
    }
  }
  head_norm_ = make_layer_norm(store_, "head.norm", cfg_.stage_dims.back());
  head_ = make_linear(store_, "head", cfg_.stage_dims.back(), cfg_.n_classes, true, rng);
}

Tensor VisionModel::patch_embed(const Tensor& images) const {
  const std::size_t s = cfg_.image_size, p = cfg_.patch_size, g = s / p;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("patch_embed: expected [B, 3, " + std::to_string(s) + ", " + std::to_string(s) + "], got " +
                     shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), width = 3 * p * p;
  std::vector<double> patches(batch * g * g * width);
  auto src = images.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gr = 0; gr < g; ++gr)
      for (std::size_t gc = 0; gc < g; ++gc) {
        double* dst = &patches[((b * g + gr) * g + gc) * width];
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
              *dst++ = src[((b * 3 + c) * s + gr * p + py) * s + gc * p + px];
      }
  return add(embed_(Tensor::from({batch, g * g, width}, std::move(patches))), pos_);
}

Tensor VisionModel::head(const Tensor& tokens) const { return head_(head_norm_(mean_tokens(tokens))); }

Tensor VisionModel::forward(const Tensor& images, ScanImpl impl) const {
  Tensor x = patch_embed(images);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::size_t side = stage_grid(cfg_, s);
    if (s > 0) x = downsample(x, {2 * side, 2 * side}, merges_[s - 1]);
    for (const MambaBlock& block : stages_[s]) x = block.forward(x, {side, side}, impl);
  }
  return head(x);
}

}  // namespace ssmcyto
