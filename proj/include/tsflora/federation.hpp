#pragma once

// Sequential split-federated training (SFLv2 ordering): within a round the
// sampled clients visit the server one after another, each continuing the
// server-side adapter chain left by the previous client; device adapters
// are averaged with data weights at the end of the round.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsflora/compression.hpp"
#include "tsflora/dataset.hpp"
#include "tsflora/model.hpp"

namespace tsflora {

struct DeviceProfile {
  double compute_fraction = 1.0;
  double memory_fraction = 1.0;

  void validate() const;
};

/// Virtual device table: ids 0-2 -> (0.05, 0.08), 3-6 -> (0.10, 0.10),
/// 7-9 -> (0.15, 0.12); larger ids wrap modulo 10.
DeviceProfile tabled_profile(int client_id) noexcept;

enum class Pipeline { kCompressed, kUncompressed };

struct NetworkModel {
  double bandwidth_mbps = 10.0;
  double device_flops = 1e9;   // base device rate, scaled by compute_fraction
  double server_flops = 1e11;
  double device_memory_bytes = 0.0;  // total per device; 0 disables the memory filter
};

struct TrainConfig {
  int rounds = 20;           // T
  int local_steps = 2;       // I
  double eta = 0.1;
  int batch = 16;            // B
  int clients = 8;           // V
  int clients_per_round = 8;
  double dirichlet_alpha = 0.5;
  CompressionConfig compression;
  std::vector<int> client_tokens;  // optional per-client K_n, size V
  Pipeline pipeline = Pipeline::kCompressed;
  bool fp32_wire = false;    // decode gradients/adapters through their f32 messages
  std::uint64_t seed = 1;
  NetworkModel network;

  void validate(const ModelConfig& model) const;
};

struct ClientState {
  int id = 0;
  std::vector<std::size_t> shard;
  AdapterSet device;
  int tokens = 0;  // K_n
  DeviceProfile profile;
};

struct RoundMetrics {
  int round = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  int activation_messages = 0;
  int gradient_messages = 0;
  int adapter_messages = 0;
  int participants = 0;
  double sim_time_s = 0.0;
  double peak_device_memory_bytes = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

/// Server state fingerprints at the start and end of one client's visit.
struct ServerVisit {
  int client = 0;
  std::uint64_t start = 0;
  std::uint64_t end = 0;
};

struct RoundResult {
  RoundMetrics metrics;
  std::vector<ServerVisit> visits;
};

struct FederationState {
  SplitModel model;  // device = aggregated adapters; server/head = server chain
  Dataset train;
  Dataset test;
  std::vector<ClientState> clients;
};

/// Peak device memory estimate for cut e:
///   8 * (embedder + e * (block + adapter) parameters)
///   + 2 * B * (M+1) * D * e * 8 bytes of activations (forward plus the copy
///   cached for backward). An estimate, not a measurement.
struct MemoryModel {
  ModelConfig config;
  int batch = 1;

  double peak_bytes(int cut) const;
};

/// {e in 1..E : M(e) <= budget}; may be empty.
std::vector<int> feasible_cuts(const MemoryModel& memory, double budget_bytes);

struct StepCost {
  int batch = 1;
  int patches = 1;
  int kept = 1;
  int dim = 1;
  int rank = 1;
  int blocks = 1;
  int cut = 1;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
};

/// Multiply-adds are counted as two flops.
inline constexpr double kFlopsPerMac = 2.0;

double device_flops(const StepCost& cost) noexcept;  // 2 B (M+1) D r e
double server_flops(const StepCost& cost) noexcept;  // 2 B (K+2) D r (E-e)

/// device_flops / (device rate * compute_fraction) + server_flops / server rate
/// + 8 * (uplink + downlink) / (bandwidth_mbps * 1e6)
double execution_time(const StepCost& cost, const NetworkModel& network, const DeviceProfile& profile);

/// Elementwise sum_n weights[n] * adapters[n], U and V separately.
AdapterSet fedavg(std::span<const AdapterSet> adapters, std::span<const double> weights);

/// Top-1 accuracy of the uncompressed forward pass.
double evaluate(const SplitModel& model, const Dataset& data, int batch = 256);

FederationState init_federation(const ModelConfig& model, const TrainConfig& cfg, Dataset train, Dataset test);

RoundResult run_round(FederationState& state, const TrainConfig& cfg, int round);

/// Runs cfg.rounds rounds and returns their metrics.
std::vector<RoundMetrics> train(FederationState& state, const TrainConfig& cfg);

/// One JSON object per line, schema "tsflora.round.v1".
std::string to_jsonl(const RoundMetrics& m);
std::string csv_header();
std::string to_csv_row(const RoundMetrics& m);

}  // namespace tsflora
