#include "ssmcyto/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ssmcyto/error.hpp"

namespace ssmcyto {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

double sample_bilinear(const Image& img, double x, double y, std::size_t c) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = img.at(x0, y0, c) + fx * (img.at(x1, y0, c) - img.at(x0, y0, c));
  const double bottom = img.at(x0, y1, c) + fx * (img.at(x1, y1, c) - img.at(x0, y1, c));
  return top + fy * (bottom - top);
}

void clamp01(Image& img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi)) throw ConfigError(std::string("augment: ") + name + " range has lo > hi");
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must be in [0, 1]");
}

void check_nonnegative(double v, const char* name) {
  if (!(v >= 0.0)) throw ConfigError(std::string("augment: ") + name + " must be non-negative");
}

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

Range parse_range(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("augment: '" + key + "' must be a [lo, hi] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

AugmentParams identity_augment() {
  AugmentParams p;
  p.rotation_deg = {0.0, 0.0};
  p.translate_frac = 0.0;
  p.scale = {1.0, 1.0};
  p.shear_deg = 0.0;
  p.hflip_p = 0.0;
  p.vflip_p = 0.0;
  p.brightness = 0.0;
  p.contrast = 0.0;
  p.saturation = 0.0;
  p.hue = 0.0;
  p.blur_sigma = {0.0, 0.0};
  return p;
}

void validate(const AugmentParams& p) {
  check_range(p.rotation_deg, "rotation_deg");
  check_range(p.scale, "scale");
  check_range(p.blur_sigma, "blur_sigma");
  if (!(p.scale.lo > 0.0)) throw ConfigError("augment: scale must be positive");
  if (!(p.blur_sigma.lo >= 0.0)) throw ConfigError("augment: blur_sigma must be non-negative");
  check_nonnegative(p.translate_frac, "translate_frac");
  check_nonnegative(p.shear_deg, "shear_deg");
  check_nonnegative(p.brightness, "brightness");
  check_nonnegative(p.contrast, "contrast");
  check_nonnegative(p.saturation, "saturation");
  check_probability(p.hflip_p, "hflip_p");
  check_probability(p.vflip_p, "vflip_p");
  if (!(p.hue >= 0.0 && p.hue <= 0.5)) throw ConfigError("augment: hue must be in [0, 0.5]");
  if (!(p.shear_deg < 90.0)) throw ConfigError("augment: shear_deg must be below 90");
  if (p.brightness >= 1.0 || p.contrast >= 1.0 || p.saturation >= 1.0) {
    throw ConfigError("augment: jitter half-widths must be below 1");
  }
  if (p.blur_kernel < 1 || p.blur_kernel % 2 == 0) throw ConfigError("augment: blur_kernel must be odd and positive");
}

nlohmann::json to_json(const AugmentParams& p) {
  return {{"rotation_deg", range_json(p.rotation_deg)},
          {"translate_frac", p.translate_frac},
          {"scale", range_json(p.scale)},
          {"shear_deg", p.shear_deg},
          {"hflip_p", p.hflip_p},
          {"vflip_p", p.vflip_p},
          {"brightness", p.brightness},
          {"contrast", p.contrast},
          {"saturation", p.saturation},
          {"hue", p.hue},
          {"blur_kernel", p.blur_kernel},
          {"blur_sigma", range_json(p.blur_sigma)}};
}

AugmentParams augment_params_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("augment params must be a JSON object");
  AugmentParams p;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "rotation_deg") p.rotation_deg = parse_range(value, key);
      else if (key == "translate_frac") p.translate_frac = value.get<double>();
      else if (key == "scale") p.scale = parse_range(value, key);
      else if (key == "shear_deg") p.shear_deg = value.get<double>();
      else if (key == "hflip_p") p.hflip_p = value.get<double>();
      else if (key == "vflip_p") p.vflip_p = value.get<double>();
      else if (key == "brightness") p.brightness = value.get<double>();
      else if (key == "contrast") p.contrast = value.get<double>();
      else if (key == "saturation") p.saturation = value.get<double>();
      else if (key == "hue") p.hue = value.get<double>();
      else if (key == "blur_kernel") p.blur_kernel = value.get<int>();
      else if (key == "blur_sigma") p.blur_sigma = parse_range(value, key);
      else throw ConfigError("augment params: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("augment params: ") + e.what());
  }
  validate(p);
  return p;
}

Image apply_affine(const Image& img, const AffineDraw& a) {
  const double th = a.rotation_deg * kDegToRad, k = std::tan(a.shear_deg * kDegToRad);
  const double cs = std::cos(th), sn = std::sin(th);
  // M = scale * [1 k; 0 1] * [cs -sn; sn cs]
  const double m00 = a.scale * (cs + k * sn), m01 = a.scale * (-sn + k * cs);
  const double m10 = a.scale * sn, m11 = a.scale * cs;
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0, cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  Image out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double qx = static_cast<double>(x) - cx - a.tx, qy = static_cast<double>(y) - cy - a.ty;
      const double sx = i00 * qx + i01 * qy + cx, sy = i10 * qx + i11 * qy + cy;
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = sample_bilinear(img, sx, sy, c);
    }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

Image flip_vertical(const Image& img) {
  Image out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, img.height - 1 - y, c);
  return out;
}

Image gaussian_blur(const Image& img, int kernel, double sigma) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("gaussian_blur: kernel must be odd and positive");
  if (sigma <= 0.0 || kernel == 1) return img;
  const int r = kernel / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += w[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : w) v /= total;
  const auto clamp_idx = [](long i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
  };
  Image tmp(img.width, img.height), out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += w[static_cast<std::size_t>(i + r)] * img.at(clamp_idx(static_cast<long>(x) + i, img.width), y, c);
        tmp.at(x, y, c) = acc;
      }
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += w[static_cast<std::size_t>(i + r)] * tmp.at(x, clamp_idx(static_cast<long>(y) + i, img.height), c);
        out.at(x, y, c) = acc;
      }
  return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0 + (b - r) / d;
  else h = 4.0 + (r - g) / d;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = (h - std::floor(h)) * 6.0;
  const int sector = std::min(static_cast<int>(h6), 5);
  const double f = h6 - sector;
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

Image augment_image(const Image& img, const AugmentParams& p, Rng& rng) {
  // Draws happen in a fixed order whatever the ranges are, so one stream
  // always maps to the same transform sequence.
  AffineDraw a;
  a.rotation_deg = uniform(rng, p.rotation_deg.lo, p.rotation_deg.hi);
  a.shear_deg = uniform(rng, -p.shear_deg, p.shear_deg);
  a.scale = uniform(rng, p.scale.lo, p.scale.hi);
  a.tx = uniform(rng, -p.translate_frac, p.translate_frac) * static_cast<double>(img.width);
  a.ty = uniform(rng, -p.translate_frac, p.translate_frac) * static_cast<double>(img.height);
  const bool hflip = uniform01(rng) < p.hflip_p;
  const bool vflip = uniform01(rng) < p.vflip_p;
  const double brightness = 1.0 + uniform(rng, -p.brightness, p.brightness);
  const double contrast = 1.0 + uniform(rng, -p.contrast, p.contrast);
  const double saturation = 1.0 + uniform(rng, -p.saturation, p.saturation);
  const double hue = uniform(rng, -p.hue, p.hue);
  const double sigma = uniform(rng, p.blur_sigma.lo, p.blur_sigma.hi);

  Image out = apply_affine(img, a);
  if (hflip) out = flip_horizontal(out);
  if (vflip) out = flip_vertical(out);

  for (double& v : out.data) v *= brightness;
  clamp01(out);

  const std::size_t n = out.width * out.height;
  double mean_gray = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_gray += luminance(out.data[3 * i], out.data[3 * i + 1], out.data[3 * i + 2]);
  mean_gray /= static_cast<double>(n);
  for (double& v : out.data) v = (v - mean_gray) * contrast + mean_gray;
  clamp01(out);

  for (std::size_t i = 0; i < n; ++i) {
    double* px = &out.data[3 * i];
    const double gray = luminance(px[0], px[1], px[2]);
    for (std::size_t c = 0; c < 3; ++c) px[c] = gray + (px[c] - gray) * saturation;
  }
  clamp01(out);

  if (hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double* px = &out.data[3 * i];
      double h, s, v;
      rgb_to_hsv(px[0], px[1], px[2], h, s, v);
      hsv_to_rgb(h + hue, s, v, px[0], px[1], px[2]);
    }
  }

  out = gaussian_blur(out, p.blur_kernel, sigma);
  clamp01(out);
  return out;
}

}  // namespace ssmcyto
