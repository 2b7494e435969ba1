#pragma once

// Run configuration in a TOML subset:
//
//   # comment
//   seed = 7
//   [optimizer]
//   lr = 2e-3
//   [experiment]
//   perturbations = ["none", "x0.0"]
//
// Values are numbers, booleans, double-quoted strings or flat arrays of
// those. Unknown sections or keys, duplicates and type mismatches are
// rejected with "origin:line: message".

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dbp/losses.hpp"
#include "dbp/model.hpp"
#include "dbp/train.hpp"
#include "dbp/world.hpp"

namespace dbp {

struct DataConfig {
  std::uint64_t train_seed = 1;
  std::size_t n_train = 200;
  std::uint64_t val_seed = 100000;
  std::size_t n_val = 50;
  double turn_fraction = 0.25;  // remainder straight
  WorldConfig world;            // spec, horizon, dt and map sizes follow the model
};

struct ExperimentConfig {
  std::vector<PerturbMode> perturbations{std::begin(kPerturbModes), std::end(kPerturbModes)};
  std::vector<std::size_t> ablation_rungs{0, 1, 2, 3, 4};
  bool split_by_command = false;
};

struct IoConfig {
  std::string data_dir = "data";
  std::string out_dir = "out";
};

struct RunConfig {
  std::uint64_t seed = 1;  // model initialization and data order
  ModelConfig model;
  LossWeights losses;
  OptimConfig optim;
  DataConfig data;
  ExperimentConfig experiment;
  IoConfig io;

  RunConfig();
  // Copies the shared geometry from model into data.world, then validates
  // every part. Throws std::invalid_argument.
  void finalize();
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

RunConfig parse_config(std::string_view text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);
// Every key with its current value; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& cfg);

}  // namespace dbp
