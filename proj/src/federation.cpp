#include "tsflora/federation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tsflora/wire.hpp"

namespace tsflora {

namespace {

enum Stream : std::uint64_t { kModelStream = 1, kPartitionStream = 2, kRoundStream = 3, kClientStream = 4 };

// Drops the trailing merged slot from every sample.
Tensor3d drop_last_token(const Tensor3d& t) {
  Tensor3d out(t.batch(), t.tokens() - 1, t.dim());
  for (Index b = 0; b < t.batch(); ++b) out.sample(b) = t.sample(b).topRows(t.tokens() - 1);
  return out;
}

// Appends a zero slot so the layout is again [CLS, selected, merged].
Tensor3d append_zero_token(const Tensor3d& t) {
  Tensor3d out(t.batch(), t.tokens() + 1, t.dim());
  for (Index b = 0; b < t.batch(); ++b) out.sample(b).topRows(t.tokens()) = t.sample(b);
  return out;
}

std::uint64_t dense_bytes(Index batch, Index tokens, Index dim) {
  return dense_payload_bits(static_cast<std::uint64_t>(batch), static_cast<std::uint64_t>(tokens),
                            static_cast<std::uint64_t>(dim), 32) / 8;
}

double transfer_seconds(std::uint64_t bytes, const NetworkModel& net) {
  return 8.0 * static_cast<double>(bytes) / (net.bandwidth_mbps * 1e6);
}

}  // namespace

void DeviceProfile::validate() const {
  if (!(compute_fraction > 0.0 && compute_fraction <= 1.0)) {
    throw ConfigError("compute_fraction must lie in (0, 1]", "compute_fraction");
  }
  if (!(memory_fraction > 0.0 && memory_fraction <= 1.0)) {
    throw ConfigError("memory_fraction must lie in (0, 1]", "memory_fraction");
  }
}

DeviceProfile tabled_profile(int client_id) noexcept {
  const int slot = ((client_id % 10) + 10) % 10;
  if (slot <= 2) return {0.05, 0.08};
  if (slot <= 6) return {0.10, 0.10};
  return {0.15, 0.12};
}

void TrainConfig::validate(const ModelConfig& model) const {
  auto require = [](bool ok, const char* key, const char* what) {
    if (!ok) throw ConfigError(std::string(key) + ": " + what, key);
  };
  require(rounds >= 1, "rounds", "must be positive");
  require(local_steps >= 1, "local_steps", "must be positive");
  require(eta > 0.0, "eta", "must be positive");
  require(batch >= 1 && batch <= 65535, "batch", "must lie in [1, 65535]");
  require(clients >= 1 && clients <= 65535, "clients", "must lie in [1, 65535]");
  require(clients_per_round >= 1 && clients_per_round <= clients, "clients_per_round", "must lie in [1, clients]");
  require(dirichlet_alpha > 0.0, "dirichlet_alpha", "must be positive");
  require(network.bandwidth_mbps > 0.0, "bandwidth_mbps", "must be positive");
  require(network.device_flops > 0.0, "device_flops", "must be positive");
  require(network.server_flops > 0.0, "server_flops", "must be positive");
  require(network.device_memory_bytes >= 0.0, "device_memory_bytes", "must be non-negative");
  compression.validate(model.patches);
  if (!client_tokens.empty()) {
    require(client_tokens.size() == static_cast<std::size_t>(clients), "client_tokens", "needs one entry per client");
    for (int k : client_tokens) CompressionConfig{k, compression.bits}.validate(model.patches);
  }
}

double MemoryModel::peak_bytes(int cut) const {
  const double params = static_cast<double>(embedder_param_count(config)) +
                        cut * static_cast<double>(block_param_count(config) + adapter_param_count(config));
  const double activations = 2.0 * batch * config.tokens() * static_cast<double>(config.dim) * cut;
  return 8.0 * (params + activations);
}

std::vector<int> feasible_cuts(const MemoryModel& memory, double budget_bytes) {
  if (!(budget_bytes > 0.0)) throw ConfigError("feasible_cuts: memory budget must be positive", "memory_budget_bytes");
  std::vector<int> cuts;
  for (int e = 1; e <= memory.config.blocks; ++e) {
    if (memory.peak_bytes(e) <= budget_bytes) cuts.push_back(e);
  }
  return cuts;
}

double device_flops(const StepCost& c) noexcept {
  return kFlopsPerMac * c.batch * (c.patches + 1.0) * c.dim * c.rank * c.cut;
}

double server_flops(const StepCost& c) noexcept {
  return kFlopsPerMac * c.batch * (c.kept + 2.0) * c.dim * c.rank * (c.blocks - c.cut);
}

double execution_time(const StepCost& cost, const NetworkModel& net, const DeviceProfile& profile) {
  if (!(net.bandwidth_mbps > 0.0)) throw ConfigError("execution_time: bandwidth must be positive", "bandwidth_mbps");
  profile.validate();
  return device_flops(cost) / (net.device_flops * profile.compute_fraction) + server_flops(cost) / net.server_flops +
         transfer_seconds(cost.uplink_bytes, net) + transfer_seconds(cost.downlink_bytes, net);
}

AdapterSet fedavg(std::span<const AdapterSet> adapters, std::span<const double> weights) {
  if (adapters.empty() || adapters.size() != weights.size()) {
    throw DimensionError("fedavg: " + std::to_string(adapters.size()) + " adapter sets, " +
                         std::to_string(weights.size()) + " weights");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("fedavg: weights must sum to 1", "weights");
  AdapterSet out = zero_like(adapters.front());
  for (std::size_t n = 0; n < adapters.size(); ++n) {
    if (adapters[n].size() != out.size()) throw DimensionError("fedavg: adapter sets differ in block count");
    for (std::size_t l = 0; l < out.size(); ++l) {
      const LoraAdapter& a = adapters[n][l];
      if (a.u.rows() != out[l].u.rows() || a.u.cols() != out[l].u.cols() || a.v.rows() != out[l].v.rows() ||
          a.v.cols() != out[l].v.cols()) {
        throw DimensionError("fedavg: block " + std::to_string(l) + " U" + shape_string(a.u) + " vs U" +
                             shape_string(out[l].u));
      }
      out[l].u += weights[n] * a.u;
      out[l].v += weights[n] * a.v;
    }
  }
  return out;
}

double evaluate(const SplitModel& model, const Dataset& data, int batch) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch)) {
    const auto rows = static_cast<Index>(std::min<std::size_t>(static_cast<std::size_t>(batch), data.size() - start));
    const Matrix logits = forward_logits(model, data.features.middleRows(static_cast<Index>(start), rows));
    for (Index i = 0; i < rows; ++i) {
      Index best = 0;
      logits.row(i).maxCoeff(&best);
      if (static_cast<int>(best) == data.labels[start + static_cast<std::size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

FederationState init_federation(const ModelConfig& model, const TrainConfig& cfg, Dataset train, Dataset test) {
  model.validate();
  cfg.validate(model);
  const Index width = static_cast<Index>(model.patches) * model.patch_dim;
  if (train.features.cols() != width || (test.size() > 0 && test.features.cols() != width)) {
    throw DimensionError("init_federation: dataset rows have " + std::to_string(train.features.cols()) +
                         " features, model expects " + std::to_string(width));
  }
  FederationState state;
  Rng model_rng = Rng::derive(cfg.seed, kModelStream);
  state.model = init_model(model, model_rng);
  Rng part_rng = Rng::derive(cfg.seed, kPartitionStream);
  const Shards shards = dirichlet_partition(train.labels, cfg.clients, cfg.dirichlet_alpha, part_rng);
  for (int n = 0; n < cfg.clients; ++n) {
    ClientState c;
    c.id = n;
    c.shard = shards[static_cast<std::size_t>(n)];
    c.device = state.model.device;
    c.tokens = cfg.client_tokens.empty() ? cfg.compression.tokens : cfg.client_tokens[static_cast<std::size_t>(n)];
    c.profile = tabled_profile(n);
    state.clients.push_back(std::move(c));
  }
  state.train = std::move(train);
  state.test = std::move(test);
  return state;
}

RoundResult run_round(FederationState& state, const TrainConfig& cfg, int round) {
  SplitModel& global = state.model;
  const ModelConfig& mc = global.config;
  const int patches = mc.patches;

  std::vector<int> eligible;
  for (const auto& c : state.clients) {
    if (cfg.network.device_memory_bytes > 0.0) {
      const MemoryModel memory{mc, std::min<int>(cfg.batch, static_cast<int>(c.shard.size()))};
      const auto cuts = feasible_cuts(memory, c.profile.memory_fraction * cfg.network.device_memory_bytes);
      if (std::find(cuts.begin(), cuts.end(), mc.cut) == cuts.end()) {
        std::cerr << "warning: client " << c.id << " excluded, cut " << mc.cut << " exceeds its memory budget\n";
        continue;
      }
    }
    eligible.push_back(c.id);
  }
  if (eligible.empty()) throw ConfigError("run_round: no client can host the configured cut", "device_memory_bytes");

  Rng round_rng = Rng::derive(cfg.seed, kRoundStream, static_cast<std::uint64_t>(round));
  round_rng.shuffle(std::span<int>(eligible));
  eligible.resize(std::min<std::size_t>(eligible.size(), static_cast<std::size_t>(cfg.clients_per_round)));

  RoundResult result;
  RoundMetrics& m = result.metrics;
  m.round = round;
  m.participants = static_cast<int>(eligible.size());
  double loss_sum = 0.0;
  int loss_count = 0;

  const std::uint64_t adapter_bytes = adapter_message_bytes(static_cast<std::uint64_t>(mc.cut),
                                                            static_cast<std::uint64_t>(mc.dim),
                                                            static_cast<std::uint64_t>(mc.rank));
  for (int id : eligible) {
    ClientState& client = state.clients[static_cast<std::size_t>(id)];
    Rng rng = Rng::derive(cfg.seed, kClientStream, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(round));

    // Broadcast of the aggregated device adapters.
    client.device = global.device;
    m.downlink_bytes += adapter_bytes;
    ++m.adapter_messages;
    m.sim_time_s += transfer_seconds(adapter_bytes, cfg.network);

    std::vector<std::size_t> order = client.shard;
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size());
    std::size_t cursor = 0;

    ServerVisit visit{id, server_fingerprint(global), 0};
    for (int step = 0; step < cfg.local_steps; ++step) {
      std::vector<std::size_t> rows(batch);
      for (auto& r : rows) {
        r = order[cursor];
        cursor = (cursor + 1) % order.size();
      }
      const Dataset mb = state.train.subset(rows);
      const SplitModel work{mc, global.backbone, client.device, global.server, global.head};
      const DeviceForwardOutput dev = device_forward(work, mb.features);

      const MessageMeta meta{static_cast<std::uint32_t>(round), static_cast<std::uint16_t>(id),
                             static_cast<std::uint16_t>(patches), client.tokens < patches};
      std::optional<RefinedActivations> ref;
      Tensor3d server_input;
      std::uint64_t up = 0;
      if (cfg.pipeline == Pipeline::kCompressed) {
        ref = refine(dev.activations, cls_scores(dev.cls_patch_logits), client.tokens);
        const QuantizedActivations qa = quantize(ref->tokens, cfg.compression.bits, rng);
        const std::vector<std::uint8_t> bytes = encode_activations(qa, ref->indices, meta);
        up = bytes.size();
        const ActivationMessage received = decode_activations(bytes);
        Tensor3d tokens = dequantize(received.quantized);
        server_input = received.meta.merged_present ? std::move(tokens) : drop_last_token(tokens);
      } else {
        up = dense_bytes(dev.activations.batch(), dev.activations.tokens(), dev.activations.dim());
        server_input = dev.activations;
      }
      m.uplink_bytes += up;
      ++m.activation_messages;

      const ServerForwardOutput srv = server_forward(work, server_input);
      const LossAndGrad<double> ce = cross_entropy(srv.logits, mb.labels);
      const ServerGrads sg = server_backward(work, srv.cache, ce.dlogits);
      global.server = sgd_step(global.server, sg.adapters, cfg.eta);
      global.head = sgd_step(global.head, sg.head, cfg.eta);

      Tensor3d dfull;
      std::uint64_t down = 0;
      if (cfg.pipeline == Pipeline::kCompressed) {
        Tensor3d dtokens = meta.merged_present ? sg.dacts : append_zero_token(sg.dacts);
        const std::vector<std::uint8_t> bytes = encode_gradient(dtokens, meta);
        down = bytes.size();
        if (cfg.fp32_wire) dtokens = decode_gradient(bytes).gradient;
        dfull = grad_scatter(dtokens, *ref, patches);
      } else {
        down = dense_bytes(sg.dacts.batch(), sg.dacts.tokens(), sg.dacts.dim());
        dfull = sg.dacts;
      }
      m.downlink_bytes += down;
      ++m.gradient_messages;

      const AdapterSet dgrad = device_backward(work, dev.cache, dfull);
      client.device = sgd_step(client.device, dgrad, cfg.eta);

      loss_sum += ce.loss;
      ++loss_count;
      const StepCost cost{static_cast<int>(batch), patches, client.tokens, mc.dim, mc.rank, mc.blocks, mc.cut, up, down};
      m.sim_time_s += execution_time(cost, cfg.network, client.profile);
      m.peak_device_memory_bytes =
          std::max(m.peak_device_memory_bytes, MemoryModel{mc, static_cast<int>(batch)}.peak_bytes(mc.cut));
    }
    visit.end = server_fingerprint(global);
    result.visits.push_back(visit);

    const std::vector<std::uint8_t> upload = encode_adapters(client.device, static_cast<std::uint32_t>(round),
                                                             static_cast<std::uint16_t>(id));
    if (cfg.fp32_wire) client.device = decode_adapters(upload).adapters;
    m.uplink_bytes += upload.size();
    ++m.adapter_messages;
    m.sim_time_s += transfer_seconds(upload.size(), cfg.network);
  }

  std::vector<AdapterSet> uploads;
  std::vector<double> weights;
  double total = 0.0;
  for (int id : eligible) total += static_cast<double>(state.clients[static_cast<std::size_t>(id)].shard.size());
  for (int id : eligible) {
    const ClientState& c = state.clients[static_cast<std::size_t>(id)];
    uploads.push_back(c.device);
    weights.push_back(static_cast<double>(c.shard.size()) / total);
  }
  global.device = fedavg(uploads, weights);

  m.train_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
  m.test_accuracy = evaluate(global, state.test);
  return result;
}

std::vector<RoundMetrics> train(FederationState& state, const TrainConfig& cfg) {
  std::vector<RoundMetrics> history;
  history.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 0; t < cfg.rounds; ++t) history.push_back(run_round(state, cfg, t).metrics);
  return history;
}

std::string to_jsonl(const RoundMetrics& m) {
  nlohmann::ordered_json j;
  j["schema"] = "tsflora.round.v1";
  j["round"] = m.round;
  j["train_loss"] = m.train_loss;
  j["test_accuracy"] = m.test_accuracy;
  j["uplink_bytes"] = m.uplink_bytes;
  j["downlink_bytes"] = m.downlink_bytes;
  j["activation_messages"] = m.activation_messages;
  j["gradient_messages"] = m.gradient_messages;
  j["adapter_messages"] = m.adapter_messages;
  j["participants"] = m.participants;
  j["sim_time_s"] = m.sim_time_s;
  j["peak_device_memory_bytes"] = m.peak_device_memory_bytes;
  return j.dump();
}

std::string csv_header() {
  return "round,train_loss,test_accuracy,uplink_bytes,downlink_bytes,activation_messages,gradient_messages,"
         "adapter_messages,participants,sim_time_s,peak_device_memory_bytes";
}

std::string to_csv_row(const RoundMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.round << ',' << m.train_loss << ',' << m.test_accuracy << ',' << m.uplink_bytes
     << ',' << m.downlink_bytes << ',' << m.activation_messages << ',' << m.gradient_messages << ','
     << m.adapter_messages << ',' << m.participants << ',' << m.sim_time_s << ',' << m.peak_device_memory_bytes;
  return os.str();
}

}  // namespace tsflora
