#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rohydr/data.hpp"
#include "rohydr/model.hpp"
#include "rohydr/trainer.hpp"

namespace rohydr::cli {

// Bad configuration text; `line` is 1-based, 0 when not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Everything one invocation needs, read from flat `key = value` text.
struct RunConfig {
  data::DatasetSpec dataset;
  model::ModelConfig model;
  train::TrainConfig train;

  // Random protocol unless `availability` names a fixed modality set.
  double missing_rate = 0.0;
  std::string availability;
  std::optional<std::uint64_t> mask_seed;  // defaults to the run seed
  std::vector<std::uint64_t> seeds{1};     // repetitions for sweeps

  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;

  bool seed_set = false;  // `seed` appeared in the file
  bool rate_set = false;  // `missing_rate` appeared in the file

  std::uint64_t effective_mask_seed() const { return mask_seed.value_or(train.seed); }
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Sets one key as if it appeared in a file; throws ConfigError(0, ...).
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Comma separated lists, shared with flag parsing.
std::vector<double> parse_double_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace rohydr::cli
