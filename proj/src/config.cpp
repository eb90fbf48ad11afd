#include "tsflora/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace tsflora {

namespace {

enum Stream : std::uint64_t { kDataStream = 5 };

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("invalid value '" + value + "' for " + key + " (expected " + expected + ")", key);
}

long long to_integer(const std::string& key, const std::string& value) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "an integer");
  return out;
}

int to_int(const std::string& key, const std::string& value) {
  const long long v = to_integer(key, value);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) bad_value(key, value, "an int");
  return static_cast<int>(v);
}

double to_double(const std::string& key, const std::string& value) {
  if (value == "inf" || value == "infinity") return std::numeric_limits<double>::infinity();
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || std::isnan(out)) bad_value(key, value, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "true or false");
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  for (const auto& item : split_list(value)) out.push_back(to_int(key, item));
  return out;
}

std::vector<double> to_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& item : split_list(value)) out.push_back(to_double(key, item));
  if (out.empty()) bad_value(key, value, "a comma-separated list");
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;

struct KeyTable {
  std::vector<std::string> order;
  std::map<std::string, Setter> setters;

  void add(std::string key, Setter s) {
    order.push_back(key);
    setters.emplace(std::move(key), std::move(s));
  }
};

#define TSF_INT(key, field) t.add(key, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = to_int(k, v); })
#define TSF_DBL(key, field) t.add(key, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = to_double(k, v); })

const KeyTable& key_table() {
  static const KeyTable table = [] {
    KeyTable t;
    // model
    TSF_INT("blocks", model.blocks);
    TSF_INT("dim", model.dim);
    TSF_INT("patches", model.patches);
    TSF_INT("patch_dim", model.patch_dim);
    TSF_INT("heads", model.heads);
    TSF_INT("rank", model.rank);
    TSF_INT("classes", model.classes);
    TSF_INT("cut", model.cut);
    t.add("lora_site", [](ExperimentConfig& c, const std::string&, const std::string& v) {
      c.model.lora_site = parse_lora_site(v);
    });
    TSF_DBL("lora_scale", model.lora_scale);
    TSF_DBL("init_std", model.init_std);
    TSF_DBL("lora_init_std", model.lora_init_std);
    TSF_DBL("ln_eps", model.ln_eps);
    // training
    TSF_INT("rounds", train.rounds);
    TSF_INT("local_steps", train.local_steps);
    TSF_DBL("eta", train.eta);
    TSF_INT("batch", train.batch);
    TSF_INT("clients", train.clients);
    TSF_INT("clients_per_round", train.clients_per_round);
    TSF_DBL("dirichlet_alpha", train.dirichlet_alpha);
    TSF_INT("keep_tokens", train.compression.tokens);
    TSF_INT("bits", train.compression.bits);
    t.add("client_tokens", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.train.client_tokens = to_int_list(k, v);
    });
    t.add("pipeline", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "compressed") {
        c.train.pipeline = Pipeline::kCompressed;
      } else if (v == "uncompressed") {
        c.train.pipeline = Pipeline::kUncompressed;
      } else {
        bad_value(k, v, "compressed or uncompressed");
      }
    });
    t.add("fp32_wire", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.train.fp32_wire = to_bool(k, v);
    });
    t.add("seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      const long long s = to_integer(k, v);
      if (s < 0) bad_value(k, v, "a non-negative integer");
      c.train.seed = static_cast<std::uint64_t>(s);
    });
    TSF_DBL("bandwidth_mbps", train.network.bandwidth_mbps);
    TSF_DBL("device_flops", train.network.device_flops);
    TSF_DBL("server_flops", train.network.server_flops);
    TSF_DBL("device_memory_bytes", train.network.device_memory_bytes);
    // data
    t.add("data_file", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.data_file = v; });
    t.add("test_file", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.test_file = v; });
    TSF_INT("train_size", data.train_size);
    TSF_INT("test_size", data.test_size);
    TSF_DBL("prototype_scale", data.prototype_scale);
    TSF_DBL("noise", data.noise);
    // search space
    t.add("search_cuts", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.search.cuts = to_int_list(k, v);
    });
    TSF_INT("search_k_min", search.k_min);
    TSF_INT("search_k_max", search.k_max);
    t.add("search_bits", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.search.bits = to_int_list(k, v);
    });
    TSF_DBL("c_max_bits", search.c_max_bits);
    TSF_DBL("memory_budget_bytes", search.memory_budget_bytes);
    // bound constants
    t.add("sigma2", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.bounds.sigma2 = to_double_list(k, v);
    });
    TSF_DBL("gamma", bounds.gamma);
    TSF_DBL("kappa", bounds.kappa);
    TSF_DBL("smoothness", bounds.smoothness);
    TSF_DBL("epsilon2", bounds.epsilon2);
    TSF_DBL("psi", bounds.psi);
    TSF_DBL("lambda", bounds.lambda);
    t.add("participation", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.bounds.participation = to_double_list(k, v);
    });
    t.add("bound_eta", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.bounds.eta = to_double_list(k, v);
    });
    t.add("weights", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.bounds.weights = to_double_list(k, v);
    });
    return t;
  }();
  return table;
}

#undef TSF_INT
#undef TSF_DBL

}  // namespace

const std::vector<std::string>& config_keys() { return key_table().order; }

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  cfg.search.k_max = 0;
  cfg.bounds.eta.clear();
  const KeyTable& table = key_table();
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value", "line" + std::to_string(line_no));
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = table.setters.find(key);
    if (it == table.setters.end()) throw ConfigError("unknown key '" + key + "'", key);
    it->second(cfg, key, value);
  }
  cfg.data.classes = cfg.model.classes;
  cfg.data.patches = cfg.model.patches;
  cfg.data.patch_dim = cfg.model.patch_dim;
  if (cfg.search.k_max == 0) cfg.search.k_max = cfg.model.patches;
  cfg.bounds.clients = cfg.train.clients;
  cfg.bounds.local_steps = cfg.train.local_steps;
  cfg.bounds.rounds = cfg.train.rounds;
  if (cfg.bounds.eta.empty()) cfg.bounds.eta = {cfg.train.eta};
  cfg.model.validate();
  cfg.train.validate(cfg.model);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string(), "config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg) {
  if (!cfg.data_file.empty()) {
    Dataset train = read_dataset_csv(cfg.data_file, cfg.model.classes);
    Dataset test = cfg.test_file.empty() ? Dataset{Matrix(0, train.features.cols()), {}, train.classes}
                                         : read_dataset_csv(cfg.test_file, cfg.model.classes);
    return {std::move(train), std::move(test)};
  }
  Rng rng = Rng::derive(cfg.train.seed, kDataStream);
  return make_synthetic(cfg.data, rng);
}

}  // namespace tsflora
