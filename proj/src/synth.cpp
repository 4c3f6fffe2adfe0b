#include "ssmcyto/synth.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "ssmcyto/error.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {

namespace {

constexpr const char* kPatternNames[kSynthClassCount] = {"hstripes", "vstripes", "diagonal", "checker",
                                                         "disk",     "ring",     "cross",    "cornerblob"};

}  // namespace

double standard_normal(Rng& rng) {
  // Box-Muller on the portable uniform source.
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::string> synth_class_names(std::size_t n_classes) {
  if (n_classes == 0 || n_classes > kSynthClassCount) {
    throw ConfigError("synth: class count must be in [1, " + std::to_string(kSynthClassCount) + "]");
  }
  std::vector<std::string> names;
  for (std::size_t c = 0; c < n_classes; ++c) names.push_back("c" + std::to_string(c) + "_" + kPatternNames[c]);
  return names;
}

Image synth_image(std::size_t cls, std::size_t size, double noise, Rng& rng) {
  if (cls >= kSynthClassCount) throw ConfigError("synth: class index out of range");
  const double n = static_cast<double>(size);
  const double period = uniform(rng, 5.0, 9.0) * n / 32.0;
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double cx = (n - 1.0) / 2.0 + uniform(rng, -0.1, 0.1) * n;
  const double cy = (n - 1.0) / 2.0 + uniform(rng, -0.1, 0.1) * n;
  const double radius = uniform(rng, 0.2, 0.35) * n;
  const double width = uniform(rng, 0.07, 0.11) * n;
  const std::size_t corner = uniform_index(rng, 4);
  double bg[3], fg[3];
  for (std::size_t c = 0; c < 3; ++c) {
    bg[c] = uniform(rng, 0.0, 0.4);
    fg[c] = std::min(1.0, bg[c] + uniform(rng, 0.35, 0.6));
  }
  const double k = 2.0 * std::numbers::pi / period;
  const double bx = corner % 2 == 0 ? 0.2 * n : 0.8 * n, by = corner / 2 == 0 ? 0.2 * n : 0.8 * n;

  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double dx = fx - cx, dy = fy - cy, r = std::hypot(dx, dy);
      bool on = false;
      switch (cls) {
        case 0: on = std::sin(k * fy + phase) > 0.0; break;
        case 1: on = std::sin(k * fx + phase) > 0.0; break;
        case 2: on = std::sin(k * (fx + fy) / std::numbers::sqrt2 + phase) > 0.0; break;
        case 3: on = (std::sin(k * fx + phase) > 0.0) == (std::sin(k * fy + phase) > 0.0); break;
        case 4: on = r < radius; break;
        case 5: on = std::abs(r - radius - 0.05 * n) < width / 1.5; break;
        case 6: on = std::abs(dx) < width || std::abs(dy) < width; break;
        default: on = std::hypot(fx - bx, fy - by) < radius * 0.9; break;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg[c]) + noise * standard_normal(rng);
        img.at(x, y, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

void generate_synthetic(const SynthConfig& cfg, const std::string& root) {
  const auto names = synth_class_names(cfg.per_class.size());
  if (cfg.image_size < 4) throw ConfigError("synth: image_size must be at least 4");
  if (!(cfg.noise >= 0.0)) throw ConfigError("synth: noise must be non-negative");
  struct Job {
    std::size_t cls, index;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < names.size(); ++c) {
    fs::create_directories(fs::path(root) / names[c]);
    for (std::size_t i = 0; i < cfg.per_class[c]; ++i) jobs.push_back({c, i});
  }
  std::vector<std::string> failures(jobs.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    Rng rng = derive_rng(cfg.seed, jobs[j].cls, jobs[j].index);
    char file[32];
    std::snprintf(file, sizeof file, "img_%05zu.png", jobs[j].index);
    try {
      write_png((fs::path(root) / names[jobs[j].cls] / file).string(),
                synth_image(jobs[j].cls, cfg.image_size, cfg.noise, rng));
    } catch (const std::exception& e) {
      failures[j] = e.what();
    }
  }
  for (const std::string& f : failures)
    if (!f.empty()) throw IoError("synth: " + f);
}

}  // namespace ssmcyto
