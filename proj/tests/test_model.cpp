#include <doctest.h>

#include <cmath>
#include <random>

#include "ssmcyto/error.hpp"
#include "ssmcyto/gradcheck.hpp"
#include "ssmcyto/model.hpp"
#include "test_util.hpp"

using namespace ssmcyto;
using testutil::random_tensor;

namespace {

ModelConfig small_config(BlockVariant v) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.stage_depths = {1, 1};
  cfg.stage_dims = {8, 16};
  cfg.n_classes = 3;
  cfg.seed = 7;
  return cfg;
}

Tensor* find_param(VisionModel& m, const std::string& name) {
  for (Param& p : m.params().params())
    if (p.name == name) return &p.value;
  return nullptr;
}

}  // namespace

TEST_CASE("patch embedding") {
  SUBCASE("token counts") {
    ModelConfig big;
    big.image_size = 224;
    big.stage_depths = {1};
    big.stage_dims = {4};
    VisionModel m(big);
    CHECK(m.patch_embed(Tensor::zeros({1, 3, 224, 224})).shape() == Shape{1, 3136, 4});
    VisionModel d(ModelConfig{});
    CHECK(d.patch_embed(Tensor::zeros({2, 3, 32, 32})).shape() == Shape{2, 64, 32});
    CHECK_THROWS_AS(d.patch_embed(Tensor::zeros({1, 3, 28, 28})), ShapeError);
  }
  SUBCASE("zero image and zero position encoding give the projection bias") {
    VisionModel m(small_config(BlockVariant::vanilla));
    for (double& v : find_param(m, "pos")->mutable_data()) v = 0.0;
    Tensor tokens = m.patch_embed(Tensor::zeros({1, 3, 16, 16}));
    auto bias = find_param(m, "embed.bias")->data();
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t c = 0; c < 8; ++c) CHECK(tokens.at(t * 8 + c) == bias[c]);
  }
  SUBCASE("patch vectors are flattened in (channel, row, column) order") {
    ModelConfig cfg = small_config(BlockVariant::vanilla);
    VisionModel m(cfg);
    for (double& v : find_param(m, "pos")->mutable_data()) v = 0.0;
    for (double& v : find_param(m, "embed.bias")->mutable_data()) v = 0.0;
    std::mt19937_64 rng(5);
    Tensor img = random_tensor({1, 3, 16, 16}, rng);
    Tensor tokens = m.patch_embed(img);
    auto w = find_param(m, "embed.weight")->data();
    // Patch at grid (1, 2).
    const std::size_t gr = 1, gc = 2;
    for (std::size_t o = 0; o < 8; ++o) {
      double expect = 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t py = 0; py < 4; ++py)
          for (std::size_t px = 0; px < 4; ++px)
            expect += img.at((c * 16 + gr * 4 + py) * 16 + gc * 4 + px) * w[((c * 4 + py) * 4 + px) * 8 + o];
      CHECK(tokens.at((gr * 4 + gc) * 8 + o) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("downsample") {
  std::mt19937_64 data_rng(51);
  Rng rng(51);
  ParamStore store;
  Linear proj = make_linear(store, "m", 12, 5, false, rng);
  SUBCASE("2x2 grid merges to one token") {
    CHECK(downsample(random_tensor({2, 4, 3}, data_rng), {2, 2}, proj).shape() == Shape{2, 1, 5});
  }
  SUBCASE("constant map stays constant") {
    Tensor y = downsample(Tensor::full({1, 16, 3}, 0.7), {4, 4}, proj);
    for (std::size_t t = 1; t < 4; ++t)
      for (std::size_t c = 0; c < 5; ++c) CHECK(y.at(t * 5 + c) == y.at(c));
  }
  SUBCASE("matches an index-explicit merge oracle") {
    Tensor x = random_tensor({2, 16, 3}, data_rng);
    Tensor y = downsample(x, {4, 4}, proj);
    auto w = proj.weight.data();
    const std::size_t offsets[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t o = 0; o < 5; ++o) {
            double expect = 0.0;
            for (std::size_t q = 0; q < 4; ++q) {
              const std::size_t tok = (2 * r + offsets[q][0]) * 4 + 2 * c + offsets[q][1];
              for (std::size_t ch = 0; ch < 3; ++ch) expect += x.at((b * 16 + tok) * 3 + ch) * w[(q * 3 + ch) * 5 + o];
            }
            CHECK(y.at((b * 4 + r * 2 + c) * 5 + o) == doctest::Approx(expect).epsilon(1e-12));
          }
  }
  SUBCASE("odd grid is rejected") {
    CHECK_THROWS_AS(downsample(Tensor::zeros({1, 9, 3}), {3, 3}, proj), ShapeError);
  }
}

TEST_CASE("model configuration") {
  ModelConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  CHECK(stage_grid(cfg, 0) == 8);
  CHECK(stage_grid(cfg, 2) == 2);
  for (std::size_t k = 0; k < 3; ++k) CHECK(stage_grid(cfg, k) * stage_grid(cfg, k) == 64 / (1u << (2 * k)));
  ModelConfig bad = cfg;
  bad.image_size = 36;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.stage_dims = {32, 64};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.variant = BlockVariant::localmamba;
  bad.window = 4;
  CHECK_THROWS_AS(validate(bad), ConfigError);

  ModelConfig round = model_config_from_json(to_json(small_config(BlockVariant::medmamba)));
  CHECK(round == small_config(BlockVariant::medmamba));
  nlohmann::json j = to_json(cfg);
  j["dropout"] = 0.1;
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"variant", "resnet"}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"image_size", "big"}}), ConfigError);
}

TEST_CASE("initialization is deterministic in the seed") {
  ModelConfig cfg = small_config(BlockVariant::vmamba_ss2d);
  VisionModel a(cfg), b(cfg);
  CHECK(a.params().checksum() == b.params().checksum());
  cfg.seed = 8;
  VisionModel c(cfg);
  CHECK(a.params().checksum() != c.params().checksum());
  for (const Param& p : a.params().params()) {
    if (p.name.size() < 6 || p.name.compare(p.name.size() - 6, 6, ".A_log") != 0) continue;
    for (double v : p.value.data()) CHECK(-std::exp(v) < 0.0);
  }
}

TEST_CASE("model forward") {
  std::mt19937_64 data_rng(52);
  for (BlockVariant v : kEnsembleVariants) {
    CAPTURE(to_string(v));
    ModelConfig cfg;
    cfg.variant = v;
    VisionModel m(cfg);
    Tensor img = random_tensor({2, 3, 32, 32}, data_rng, 0, 1);
    Tensor logits = m.forward(img);
    CHECK(logits.shape() == Shape{2, 8});
    Tensor again = m.forward(img);
    CHECK(testutil::max_abs_diff(logits.data(), again.data()) == 0.0);
  }
  SUBCASE("zeroed head weights leave only the bias") {
    VisionModel m(small_config(BlockVariant::vim));
    for (double& w : find_param(m, "head.weight")->mutable_data()) w = 0.0;
    Tensor logits = m.forward(random_tensor({1, 3, 16, 16}, data_rng));
    auto bias = find_param(m, "head.bias")->data();
    for (std::size_t k = 0; k < 3; ++k) CHECK(logits.at(k) == bias[k]);
  }
  SUBCASE("mean pooling ignores token order") {
    VisionModel m(small_config(BlockVariant::mambavision));
    Tensor tokens = random_tensor({1, 4, 16}, data_rng);
    Tensor swapped = gather_tokens(tokens, std::vector<std::size_t>{1, 0, 3, 2});
    CHECK(testutil::max_abs_diff(m.head(tokens).data(), m.head(swapped).data()) < 1e-14);
  }
}

TEST_CASE("cross-entropy gradient with respect to the head weights") {
  std::mt19937_64 data_rng(53);
  for (BlockVariant v : kEnsembleVariants) {
    CAPTURE(to_string(v));
    VisionModel m(small_config(v));
    Tensor img = random_tensor({2, 3, 16, 16}, data_rng, 0, 1);
    const std::vector<int> labels{2, 0};
    Tensor w = *find_param(m, "head.weight");
    auto report = grad_check([&] { return cross_entropy(m.forward(img), labels); }, {w}, {1e-3});
    CAPTURE(report.max_rel_error);
    CHECK(report.passed);
  }
}
