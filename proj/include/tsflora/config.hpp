#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>

#include "tsflora/analysis.hpp"
#include "tsflora/dataset.hpp"
#include "tsflora/federation.hpp"
#include "tsflora/model.hpp"

namespace tsflora {

/// Everything a run needs, read from a flat `key = value` file. Lines
/// starting with '#' are comments; lists are comma separated. The single
/// `seed` drives every random stream (model init, data, partition, rounds).
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticTask data;
  std::string data_file;  // optional CSV; synthetic data is generated if empty
  std::string test_file;
  SearchSpace search;
  BoundConstants bounds;
};

/// Throws ConfigError naming the key on unknown keys or bad values.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Config keys in the order they are documented.
const std::vector<std::string>& config_keys();

/// Train/test sets from the configured files, or the synthetic task.
std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg);

}  // namespace tsflora
