#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssmcyto/augment.hpp"
#include "ssmcyto/image.hpp"
#include "ssmcyto/tensor.hpp"

namespace ssmcyto {

enum class Split { train, holdout, val, test };
inline constexpr std::size_t kSplitCount = 4;

std::string to_string(Split s);
Split parse_split(const std::string& name);

struct Sample {
  std::string path;
  int label = 0;
  Split split = Split::train;
  std::string origin = "original";  // source path for augmented copies
};

// Per-channel statistics of the train split, measured at `image_size`.
struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  std::size_t image_size = 0;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  std::optional<NormStats> stats;

  // counts()[class][split]
  std::vector<std::array<std::size_t, kSplitCount>> counts() const;
  std::vector<std::size_t> class_counts(Split split) const;
  std::vector<Sample> select(Split split) const;
  // Labels in range and no path in two splits; throws ContractError.
  void validate() const;
};

struct LoadReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
};

// root/<class>/*.png|jpg|jpeg. Classes sorted by name, samples by path; every
// image is decoded once and unreadable files go to report.errors.
DatasetManifest load_manifest(const std::string& root, LoadReport* report = nullptr);

// CSV `path,label,split,origin` (label = class name) plus a `stats.json`
// sidecar in the same directory holding the class list and NormStats.
void save_manifest(const DatasetManifest& m, const std::string& csv_path);
DatasetManifest load_manifest_csv(const std::string& csv_path);
std::string stats_sidecar_path(const std::string& csv_path);

// Per-class sizes by floor allocation plus largest-remainder rounding; ties go
// to the earlier split.
std::vector<std::size_t> allocate_counts(std::size_t n, const std::vector<double>& ratios);

// Reassigns every sample: 1 ratio -> train; 2 -> train/test; 3 -> train/val/test.
DatasetManifest stratified_split(const DatasetManifest& m, const std::vector<double>& ratios, std::uint64_t seed,
                                 std::vector<std::string>* warnings = nullptr);

// Moves `fraction` of each class's train samples to the holdout split.
DatasetManifest partition_holdout(const DatasetManifest& m, double fraction, std::uint64_t seed,
                                  std::vector<std::string>* warnings = nullptr);

// Number of augmented copies per class: max(0, target - count). A positive
// need with no originals is a ConfigError naming the class.
std::vector<std::size_t> plan_balance(const std::vector<std::size_t>& counts, const std::vector<std::size_t>& targets,
                                      const std::vector<std::string>& class_names = {});

// "500" raises every class below 500 to 500; "name=500,other=300" sets
// explicit per-class targets (unlisted classes keep their count).
std::vector<std::size_t> parse_targets(const std::string& spec, const std::vector<std::string>& classes,
                                       const std::vector<std::size_t>& counts);

// Writes augmented train copies into out_dir/<class>/ until each class reaches
// its target. Copy i of class c uses derive_rng(seed, c, i): its source image
// and transforms do not depend on thread scheduling.
DatasetManifest balance_dataset(const DatasetManifest& m, const std::vector<std::size_t>& targets,
                                const AugmentParams& params, std::uint64_t seed, const std::string& out_dir);

// w_c = N / (K * n_c).
std::vector<double> compute_class_weights(const std::vector<std::size_t>& counts,
                                          const std::vector<std::string>& class_names = {});

// Bilinear with half-pixel centers.
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);
NormStats compute_norm_stats(const DatasetManifest& m, std::size_t image_size);
// -> [3, size, size]: resize, then (x - mean) / std per channel.
Tensor preprocess(const Image& img, std::size_t size, const NormStats& stats);
// Stacks preprocessed images into [N, 3, size, size].
Tensor preprocess_batch(const std::vector<Image>& images, std::size_t size, const NormStats& stats);

}  // namespace ssmcyto
