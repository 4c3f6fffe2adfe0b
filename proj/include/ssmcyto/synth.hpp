#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmcyto/image.hpp"
#include "ssmcyto/random.hpp"

namespace ssmcyto {

// Up to eight pattern classes: horizontal stripes, vertical stripes, diagonal
// stripes, checkerboard, disk, ring, cross, corner blob. Each image draws its
// own phase, scale and two-color palette, then adds Gaussian pixel noise.
inline constexpr std::size_t kSynthClassCount = 8;

struct SynthConfig {
  std::size_t image_size = 32;
  std::vector<std::size_t> per_class = std::vector<std::size_t>(kSynthClassCount, 125);
  double noise = 0.1;  // pixel noise standard deviation
  std::uint64_t seed = 0;
};

std::vector<std::string> synth_class_names(std::size_t n_classes);
Image synth_image(std::size_t cls, std::size_t size, double noise, Rng& rng);
// Writes root/<class>/img_NNNNN.png; image i of class c uses derive_rng(seed, c, i).
void generate_synthetic(const SynthConfig& cfg, const std::string& root);

double standard_normal(Rng& rng);

}  // namespace ssmcyto
