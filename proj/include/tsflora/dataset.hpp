#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "tsflora/tensor.hpp"

namespace tsflora {

/// Labelled samples; each feature row is `patches * patch_dim` values.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  Dataset subset(std::span<const std::size_t> rows) const;
};

/// Gaussian class prototypes: every class owns a fixed patch pattern, and a
/// sample is its prototype plus isotropic noise.
struct SyntheticTask {
  int classes = 4;
  int patches = 9;
  int patch_dim = 8;
  int train_size = 800;
  int test_size = 400;
  double prototype_scale = 1.0;
  double noise = 1.0;
};

/// (train, test) drawn from the same prototypes. Labels cycle through the
/// classes in order before the rows are shuffled.
std::pair<Dataset, Dataset> make_synthetic(const SyntheticTask& task, Rng& rng);

/// CSV, one sample per line: `label,f0,f1,...`. Lines starting with '#' are
/// skipped. Values are written with 17 significant digits.
Dataset read_dataset_csv(const std::filesystem::path& path, int classes = 0);
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

using Shards = std::vector<std::vector<std::size_t>>;

/// Non-IID split: for each class, client proportions ~ Dirichlet(alpha * 1_V)
/// and the shuffled class indices are cut at the cumulative proportions.
/// A client left empty receives the last sample of the currently largest
/// shard (lowest id wins ties), repeated until every client holds one.
/// Each shard is returned sorted ascending.
Shards dirichlet_partition(std::span<const int> labels, int clients, double alpha, Rng& rng);

}  // namespace tsflora
