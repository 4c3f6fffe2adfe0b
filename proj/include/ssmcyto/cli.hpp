#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmcyto/ensemble.hpp"

namespace ssmcyto {

// Everything a pipeline run can configure. Unknown keys anywhere are a
// ConfigError; absent keys keep these defaults.
struct RunConfig {
  struct Dataset {
    std::string root;
    std::vector<double> ratios{4.0, 1.0};
    std::size_t image_size = 32;
    double holdout_fraction = 0.0;  // 0: no holdout at prepare time
  } dataset;
  struct Augmentation {
    AugmentParams params;
    std::string targets;  // balance targets, "500" or "name=500,..."
  } augmentation;
  ModelConfig model;
  TrainConfig train;
  struct EnsembleSection {
    double holdout_fraction = 0.2;
    MetaConfig meta;
  } ensemble;
  struct Output {
    std::string directory = ".";
  } output;
  std::uint64_t seed = 0;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
// Missing file is an IoError, malformed JSON a FormatError.
RunConfig load_run_config(const std::string& path);

// Parses `args` (args[0] is the program name) and runs one subcommand.
// Returns 0 on success, 1 on contract/config errors, 2 on I/O or format errors.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Applies SSMCYTO_THREADS (a positive integer) to the kernel thread pool.
void apply_thread_env();

}  // namespace ssmcyto
