#include "tsflora/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsflora/analysis.hpp"
#include "tsflora/checkpoint.hpp"
#include "tsflora/config.hpp"
#include "tsflora/errors.hpp"
#include "tsflora/goldens.hpp"
#include "tsflora/wire.hpp"

namespace tsflora {

namespace {

using json = nlohmann::ordered_json;

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out + "\"";
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

class OutputFile {
 public:
  explicit OutputFile(const std::filesystem::path& path) : file_(path) {
    if (!file_) throw ConfigError("cannot write " + path.string(), "output");
  }
  std::ostream& stream() { return file_; }

 private:
  std::ofstream file_;
};

SplitModel model_for(const ExperimentConfig& cfg, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    SplitModel model = load_checkpoint(checkpoint);
    if (model.config.dim != cfg.model.dim || model.config.patches != cfg.model.patches ||
        model.config.patch_dim != cfg.model.patch_dim) {
      throw ConfigError("checkpoint shape does not match the config", "checkpoint");
    }
    return model;
  }
  Rng rng = Rng::derive(cfg.train.seed, 1);
  return init_model(cfg.model, rng);
}

Matrix first_rows(const Dataset& data, Index rows) {
  rows = std::min<Index>(rows, static_cast<Index>(data.size()));
  if (rows == 0) throw ConfigError("dataset is empty", "data_file");
  return data.features.topRows(rows);
}

int cmd_train(const std::string& config, const std::string& jsonl, const std::string& csv,
              const std::string& checkpoint, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config);
  auto [train_set, test_set] = load_datasets(cfg);
  FederationState state = init_federation(cfg.model, cfg.train, std::move(train_set), std::move(test_set));
  const std::vector<RoundMetrics> rounds = train(state, cfg.train);

  std::optional<OutputFile> jsonl_file;
  std::ostream* jsonl_out = &out;
  if (!jsonl.empty()) {
    jsonl_file.emplace(jsonl);
    jsonl_out = &jsonl_file->stream();
  }
  for (const auto& m : rounds) *jsonl_out << to_jsonl(m) << '\n';
  if (!csv.empty()) {
    OutputFile file(csv);
    file.stream() << csv_header() << '\n';
    for (const auto& m : rounds) file.stream() << to_csv_row(m) << '\n';
  }
  if (!checkpoint.empty()) save_checkpoint(checkpoint, state.model);
  return 0;
}

int cmd_partition(const std::string& config, const std::string& out_path, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config);
  auto [train_set, test_set] = load_datasets(cfg);
  const FederationState state = init_federation(cfg.model, cfg.train, std::move(train_set), std::move(test_set));
  json doc;
  doc["clients"] = json::array();
  for (const auto& c : state.clients) {
    std::vector<int> counts(static_cast<std::size_t>(cfg.model.classes), 0);
    for (std::size_t i : c.shard) ++counts[static_cast<std::size_t>(state.train.labels[i])];
    doc["clients"].push_back({{"id", c.id}, {"size", c.shard.size()}, {"class_counts", counts}, {"indices", c.shard}});
  }
  if (out_path.empty()) {
    out << doc.dump() << '\n';
  } else {
    OutputFile file(out_path);
    file.stream() << doc.dump(2) << '\n';
  }
  return 0;
}

struct AnalyzeArgs {
  std::string config;
  std::string checkpoint;
  std::optional<int> q;
  std::optional<double> d;
  std::optional<int> kept;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  if (a.q && a.d) {
    if (!is_allowed_bit_width(*a.q)) throw ConfigError("bit width must be one of 2,4,8,16,32", "q");
    if (!(*a.d >= 1.0)) throw ConfigError("d must be >= 1", "d");
    out << "delta=" << num(delta(*a.q, *a.d)) << '\n';
    if (a.config.empty()) return 0;
  } else if (a.q || a.d) {
    throw ConfigError("--q and --d must be given together", a.q ? "d" : "q");
  }
  if (a.config.empty()) throw ConfigError("--config is required unless --q and --d are given", "config");

  ExperimentConfig cfg = load_config(a.config);
  const int kept = a.kept.value_or(cfg.train.compression.tokens);
  const int bits = a.q.value_or(cfg.train.compression.bits);
  CompressionConfig{kept, bits}.validate(cfg.model.patches);

  if (!a.checkpoint.empty()) {
    const SplitModel model = model_for(cfg, a.checkpoint);
    auto [train_set, test_set] = load_datasets(cfg);
    std::vector<Matrix> batches;
    const Index b = cfg.train.batch;
    for (Index start = 0; start + b <= static_cast<Index>(train_set.size()); start += b) {
      batches.push_back(train_set.features.middleRows(start, b));
    }
    if (batches.empty()) batches.push_back(first_rows(train_set, b));
    const ActivationConstants ac = measure_constants(model, batches, kept);
    cfg.bounds.psi = ac.psi;
    cfg.bounds.lambda = ac.lambda;
    out << "psi=" << num(ac.psi) << '\n' << "lambda=" << num(ac.lambda) << '\n';
  }
  cfg.bounds.validate();
  const double d = static_cast<double>(cfg.train.batch) * (kept + 2) * cfg.model.dim;
  out << "d=" << num(d) << '\n';
  out << "delta=" << num(delta(bits, d)) << '\n';
  out << "r=" << num(r_term(bits, kept, cfg.bounds, cfg.model.patches, cfg.train.batch, d)) << '\n';
  return 0;
}

int cmd_search(const std::string& config, std::ostream& out) {
  const ExperimentConfig cfg = load_config(config);
  cfg.bounds.validate();
  const SearchResult r = grid_search_P(cfg.search, cfg.bounds, cfg.model, cfg.train.batch);
  json doc;
  doc["feasible"] = r.feasible;
  if (r.feasible) {
    doc["cut"] = r.cut;
    doc["kept"] = r.kept;
    doc["bits"] = r.bits;
    doc["r"] = r.r;
    doc["payload_bits"] = r.payload;
  } else {
    doc["binding"] = r.binding;
  }
  out << doc.dump() << '\n';
  return 0;
}

json inspect_json(const ActivationMessage& msg, std::size_t bytes) {
  const auto& qa = msg.quantized;
  json doc;
  doc["magic"] = "TSFA";
  doc["version"] = kWireVersion;
  doc["round"] = msg.meta.round;
  doc["client"] = msg.meta.client;
  doc["batch"] = qa.batch;
  doc["kept"] = msg.indices.cols();
  doc["dim"] = qa.dim;
  doc["patches"] = msg.meta.patches;
  doc["bits"] = qa.bits;
  doc["merged_present"] = msg.meta.merged_present;
  doc["a_min"] = qa.a_min;
  doc["a_max"] = qa.a_max;
  doc["bytes"] = bytes;
  doc["payload_bits"] = payload_bits(qa.batch, msg.indices.cols(), qa.dim, qa.bits);
  json idx = json::array();
  for (Index b = 0; b < msg.indices.rows(); ++b) {
    std::vector<Index> row(msg.indices.row(b).begin(), msg.indices.row(b).end());
    idx.push_back(row);
  }
  doc["indices"] = idx;
  return doc;
}

struct CodecArgs {
  std::string action;
  std::string file;
  std::string config;
  std::string checkpoint;
  std::string out_path;
};

int cmd_codec(const CodecArgs& a, std::ostream& out) {
  if (a.action == "inspect" || a.action == "decode") {
    const std::vector<std::uint8_t> bytes = read_file(a.file);
    const ActivationMessage msg = decode_activations(bytes);
    if (a.action == "inspect") {
      out << inspect_json(msg, bytes.size()).dump() << '\n';
      return 0;
    }
    const Tensor3d values = dequantize(msg.quantized);
    std::optional<OutputFile> file;
    std::ostream* os = &out;
    if (!a.out_path.empty()) {
      file.emplace(a.out_path);
      os = &file->stream();
    }
    *os << "b,t,d,value\n" << std::setprecision(17);
    for (Index b = 0; b < values.batch(); ++b) {
      for (Index t = 0; t < values.tokens(); ++t) {
        for (Index d = 0; d < values.dim(); ++d) *os << b << ',' << t << ',' << d << ',' << values(b, t, d) << '\n';
      }
    }
    return 0;
  }
  if (a.action == "encode") {
    if (a.config.empty()) throw ConfigError("codec encode needs --config", "config");
    if (a.out_path.empty()) throw ConfigError("codec encode needs --out", "out");
    const ExperimentConfig cfg = load_config(a.config);
    const SplitModel model = model_for(cfg, a.checkpoint);
    auto [train_set, test_set] = load_datasets(cfg);
    const Matrix batch = first_rows(train_set, cfg.train.batch);
    const DeviceForwardOutput fwd = device_forward(model, batch);
    const RefinedActivations ref =
        refine(fwd.activations, cls_scores(fwd.cls_patch_logits), cfg.train.compression.tokens);
    Rng rng = Rng::derive(cfg.train.seed, 6);
    const QuantizedActivations qa = quantize(ref.tokens, cfg.train.compression.bits, rng);
    const MessageMeta meta{0, 0, static_cast<std::uint16_t>(cfg.model.patches), ref.merged_present};
    const std::vector<std::uint8_t> bytes = encode_activations(qa, ref.indices, meta);
    write_file(a.out_path, bytes);
    out << "wrote " << a.out_path << " bytes=" << bytes.size() << '\n';
    return 0;
  }
  throw ConfigError("codec action must be encode, decode or inspect", "action");
}

int cmd_goldens(const std::string& dir, bool write, std::ostream& out) {
  if (!write) throw ConfigError("refusing to overwrite golden vectors without --write", "write");
  std::filesystem::create_directories(dir);
  for (const auto& g : golden_vectors()) {
    write_file(std::filesystem::path(dir) / g.name, g.bytes);
    out << "wrote " << g.name << " bytes=" << g.bytes.size() << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tsflora: split federated LoRA simulator", "tsflora"};
  app.require_subcommand(1);

  std::string config, jsonl, csv, checkpoint, out_path, dir;
  auto* train_cmd = app.add_subcommand("train", "run federated training from a config file");
  train_cmd->add_option("--config", config, "config file")->required();
  train_cmd->add_option("--jsonl", jsonl, "per-round metrics as JSON lines (default stdout)");
  train_cmd->add_option("--csv", csv, "per-round metrics as CSV");
  train_cmd->add_option("--checkpoint", checkpoint, "write the final model here");

  auto* part_cmd = app.add_subcommand("partition", "print the Dirichlet client shards");
  part_cmd->add_option("--config", config, "config file")->required();
  part_cmd->add_option("--out", out_path, "JSON output file (default stdout)");

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "quantizer factor, penalty R and activation constants");
  analyze_cmd->add_option("--config", analyze.config, "config file");
  analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "measure Psi/Lambda with this model");
  analyze_cmd->add_option("--q", analyze.q, "bit width");
  analyze_cmd->add_option("--d", analyze.d, "payload dimension");
  analyze_cmd->add_option("--kept", analyze.kept, "token budget K (default keep_tokens)");

  auto* search_cmd = app.add_subcommand("search", "minimise R over (cut, K, q)");
  search_cmd->add_option("--config", config, "config file")->required();

  CodecArgs codec;
  auto* codec_cmd = app.add_subcommand("codec", "encode, decode or inspect activation messages");
  codec_cmd->add_option("action", codec.action, "encode | decode | inspect")->required();
  codec_cmd->add_option("file", codec.file, "input .tsfa file (decode, inspect)");
  codec_cmd->add_option("--config", codec.config, "config file (encode)");
  codec_cmd->add_option("--checkpoint", codec.checkpoint, "model (encode)");
  codec_cmd->add_option("--out", codec.out_path, "output file");

  bool write = false;
  auto* goldens_cmd = app.add_subcommand("goldens", "regenerate the wire-format golden vectors");
  goldens_cmd->add_flag("--write", write, "required: allow overwriting files");
  goldens_cmd->add_option("--dir", dir, "output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error kind=usage msg=" << quoted(e.what()) << '\n';
    return 64;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config, jsonl, csv, checkpoint, out);
    if (part_cmd->parsed()) return cmd_partition(config, out_path, out);
    if (analyze_cmd->parsed()) return cmd_analyze(analyze, out);
    if (search_cmd->parsed()) return cmd_search(config, out);
    if (codec_cmd->parsed()) {
      if (codec.action != "encode" && codec.file.empty()) throw ConfigError("codec needs an input file", "file");
      return cmd_codec(codec, out);
    }
    if (goldens_cmd->parsed()) return cmd_goldens(dir, write, out);
  } catch (const ConfigError& e) {
    err << "error kind=config key=" << e.key() << " msg=" << quoted(e.what()) << '\n';
    return 2;
  } catch (const DecodeError& e) {
    err << "error kind=decode reason=" << to_string(e.kind()) << " msg=" << quoted(e.what()) << '\n';
    return 3;
  } catch (const DimensionError& e) {
    err << "error kind=dimension msg=" << quoted(e.what()) << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error kind=runtime msg=" << quoted(e.what()) << '\n';
    return 1;
  }
  return 64;
}

}  // namespace tsflora
