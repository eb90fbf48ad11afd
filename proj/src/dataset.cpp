#include "tsflora/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace tsflora {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.classes = classes;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = features.row(static_cast<Index>(rows[i]));
    out.labels.push_back(labels[rows[i]]);
  }
  return out;
}

std::pair<Dataset, Dataset> make_synthetic(const SyntheticTask& task, Rng& rng) {
  if (task.classes < 2 || task.patches < 1 || task.patch_dim < 1 || task.train_size < 1 || task.test_size < 0) {
    throw ConfigError("synthetic task dimensions must be positive", "classes");
  }
  const Index width = static_cast<Index>(task.patches) * task.patch_dim;
  const Matrix prototypes = gaussian(task.classes, width, task.prototype_scale, rng);

  auto draw = [&](int count) {
    Dataset d;
    d.classes = task.classes;
    d.features.resize(count, width);
    d.labels.resize(static_cast<std::size_t>(count));
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<int>(order));
    for (int i = 0; i < count; ++i) {
      const int label = order[static_cast<std::size_t>(i)] % task.classes;
      d.labels[static_cast<std::size_t>(i)] = label;
      for (Index j = 0; j < width; ++j) d.features(i, j) = prototypes(label, j) + rng.normal(0.0, task.noise);
    }
    return d;
  };
  Dataset train = draw(task.train_size);
  Dataset test = draw(task.test_size);
  return {std::move(train), std::move(test)};
}

Dataset read_dataset_csv(const std::filesystem::path& path, int classes) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string(), "data_file");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> values;
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    int label = 0;
    while (std::getline(ss, cell, ',')) {
      const char* begin = cell.data();
      const char* end = cell.data() + cell.size();
      while (begin < end && *begin == ' ') ++begin;
      if (first) {
        auto [ptr, ec] = std::from_chars(begin, end, label);
        if (ec != std::errc() || label < 0) {
          throw ConfigError("dataset line " + std::to_string(line_no) + ": bad label", "data_file");
        }
        first = false;
      } else {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(begin, end, v);
        if (ec != std::errc() || !std::isfinite(v)) {
          throw ConfigError("dataset line " + std::to_string(line_no) + ": bad feature", "data_file");
        }
        values.push_back(v);
      }
    }
    if (!rows.empty() && values.size() != rows.front().size()) {
      throw ConfigError("dataset line " + std::to_string(line_no) + ": ragged row", "data_file");
    }
    rows.push_back(std::move(values));
    labels.push_back(label);
  }
  Dataset d;
  d.labels = std::move(labels);
  const Index width = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  d.features.resize(static_cast<Index>(rows.size()), width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < width; ++j) d.features(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  const int seen = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  if (classes > 0 && seen > classes) throw ConfigError("dataset label exceeds class count", "classes");
  d.classes = classes > 0 ? classes : seen;
  return d;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset " + path.string(), "data_file");
  out << std::setprecision(17);
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (Index j = 0; j < data.features.cols(); ++j) out << ',' << data.features(static_cast<Index>(i), j);
    out << '\n';
  }
}

Shards dirichlet_partition(std::span<const int> labels, int clients, double alpha, Rng& rng) {
  if (clients < 1) throw ConfigError("dirichlet_partition: need at least one client", "clients");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be positive", "dirichlet_alpha");
  if (labels.size() < static_cast<std::size_t>(clients)) {
    throw ConfigError("dirichlet_partition: " + std::to_string(labels.size()) + " samples for " +
                          std::to_string(clients) + " clients",
                      "clients");
  }
  const auto v_count = static_cast<std::size_t>(clients);
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  Shards shards(v_count);
  std::vector<double> share(v_count);
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    rng.shuffle(std::span<std::size_t>(members));
    double total = 0.0;
    for (auto& s : share) {
      s = rng.gamma(alpha);
      total += s;
    }
    if (!(total > 0.0)) {
      std::fill(share.begin(), share.end(), 0.0);
      share[rng.below(v_count)] = 1.0;
      total = 1.0;
    }
    const double n = static_cast<double>(members.size());
    double cumulative = 0.0;
    std::size_t start = 0;
    for (std::size_t v = 0; v < v_count; ++v) {
      cumulative += share[v] / total;
      std::size_t stop = v + 1 == v_count ? members.size()
                                          : std::min(members.size(), static_cast<std::size_t>(std::floor(cumulative * n)));
      stop = std::max(stop, start);
      shards[v].insert(shards[v].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                       members.begin() + static_cast<std::ptrdiff_t>(stop));
      start = stop;
    }
  }
  for (std::size_t v = 0; v < v_count; ++v) {
    if (!shards[v].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t u = 1; u < v_count; ++u) {
      if (shards[u].size() > shards[largest].size()) largest = u;
    }
    shards[v].push_back(shards[largest].back());
    shards[largest].pop_back();
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

}  // namespace tsflora
