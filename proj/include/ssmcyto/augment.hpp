#pragma once

#include <json.hpp>

#include "ssmcyto/image.hpp"
#include "ssmcyto/random.hpp"

namespace ssmcyto {

struct Range {
  double lo = 0.0, hi = 0.0;
  bool operator==(const Range&) const = default;
};

// Every parameter is drawn uniformly from its interval; symmetric fields give
// the half-width (brightness 0.1 draws a factor in [0.9, 1.1]).
struct AugmentParams {
  Range rotation_deg{0.0, 360.0};
  double translate_frac = 0.10;
  Range scale{0.90, 1.10};
  double shear_deg = 5.0;
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double brightness = 0.10;
  double contrast = 0.10;
  double saturation = 0.05;
  double hue = 0.02;
  int blur_kernel = 3;
  Range blur_sigma{0.1, 1.0};

  bool operator==(const AugmentParams&) const = default;
};

// All ranges collapsed to the identity transform.
AugmentParams identity_augment();
void validate(const AugmentParams& p);

nlohmann::json to_json(const AugmentParams& p);
// Strict overrides on top of the defaults.
AugmentParams augment_params_from_json(const nlohmann::json& j);

// Random affine (rotate -> shear -> scale -> translate about the center,
// bilinear sampling, edge replication), flips, brightness/contrast/saturation/hue
// jitter, Gaussian blur; clamped to [0, 1].
Image augment_image(const Image& img, const AugmentParams& p, Rng& rng);

// The deterministic building blocks, exposed for testing.
struct AffineDraw {
  double rotation_deg = 0, shear_deg = 0, scale = 1, tx = 0, ty = 0;
};
Image apply_affine(const Image& img, const AffineDraw& a);
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
Image gaussian_blur(const Image& img, int kernel, double sigma);
// RGB <-> HSV with all channels in [0, 1].
void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

}  // namespace ssmcyto
