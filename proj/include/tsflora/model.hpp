#pragma once

// Tiny ViT-style classifier split at a cut layer into a device part
// (embedding + blocks 1..e) and a server part (blocks e+1..E, final norm,
// head). Every block carries one LoRA pair on a configurable projection.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tsflora/numeric.hpp"
#include "tsflora/tensor.hpp"

namespace tsflora {

enum class LoraSite : std::uint8_t { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

const char* to_string(LoraSite site) noexcept;
LoraSite parse_lora_site(const std::string& name);

struct ModelConfig {
  int blocks = 4;      // E
  int dim = 16;        // D
  int patches = 9;     // M
  int patch_dim = 8;   // features per patch
  int heads = 1;
  int rank = 2;        // r
  int classes = 4;     // C
  int cut = 2;         // e, device holds blocks 1..e
  LoraSite lora_site = LoraSite::kQuery;
  double lora_scale = 1.0;
  double init_std = 0.02;
  double lora_init_std = 0.02;  // U at init; V starts at zero
  double ln_eps = 1e-6;

  int tokens() const noexcept { return patches + 1; }
  int hidden() const noexcept { return 4 * dim; }
  int server_blocks() const noexcept { return blocks - cut; }

  /// Throws ConfigError naming the first bad field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct Embedder {
  Matrix patch_proj;  // patch_dim x D
  RowVector cls;      // D
  Matrix position;    // (M+1) x D
};

struct BlockParams {
  Matrix wq, wk, wv, wo;  // D x D
  Matrix w1;              // D x 4D
  Matrix w2;              // 4D x D
  RowVector ln1_gamma, ln1_beta;
  RowVector ln2_gamma, ln2_beta;
};

/// Frozen parameters, shared by every client and the server.
struct Backbone {
  Embedder embed;
  std::vector<BlockParams> blocks;
  RowVector norm_gamma, norm_beta;  // applied to CLS before the head
};

struct LoraAdapter {
  Matrix u;  // D x r
  Matrix v;  // r x D

  Matrix delta(double scale) const { return scale * (u * v); }
};

using AdapterSet = std::vector<LoraAdapter>;

struct SplitModel {
  ModelConfig config;
  std::shared_ptr<const Backbone> backbone;
  AdapterSet device;  // blocks 1..e
  AdapterSet server;  // blocks e+1..E
  Matrix head;        // D x C, trained with the server adapters
};

/// Reference point inside a block forward pass, kept for its backward pass.
struct BlockCache {
  Index batch = 0;
  Index tokens = 0;
  Matrix input;
  LayerNormCache<double> ln1;
  Matrix normed1;
  Matrix wq, wk, wv, wo;  // effective weights (adapter delta applied)
  Matrix query, key, value;
  std::vector<Matrix> probs;  // per sample, tokens x tokens
  Matrix mixed;               // probs * value
  Matrix residual;            // input + attention output
  LayerNormCache<double> ln2;
  Matrix normed2;
  Matrix pre_gelu;
  Matrix post_gelu;
};

struct DeviceCache {
  Index batch = 0;
  std::uint64_t adapter_fingerprint = 0;
  std::vector<BlockCache> blocks;
};

struct DeviceForwardOutput {
  Tensor3d activations;     // B x (M+1) x D, token 0 is CLS
  Matrix cls_patch_logits;  // B x M, q_0 . k_i in the last device block
  DeviceCache cache;
};

struct ServerCache {
  Index batch = 0;
  Index tokens = 0;
  std::uint64_t state_fingerprint = 0;
  std::vector<BlockCache> blocks;
  LayerNormCache<double> final_ln;
  Matrix cls_normed;
};

struct ServerForwardOutput {
  Matrix logits;  // B x C
  ServerCache cache;
};

struct ServerGrads {
  AdapterSet adapters;
  Matrix head;
  Tensor3d dacts;  // gradient w.r.t. the received token sequence
};

SplitModel init_model(const ModelConfig& cfg, Rng& rng);

/// Copy of `model` whose adapters are all dropped to exactly zero delta.
SplitModel without_adapters(const SplitModel& model);

/// `batch` is B x (M * patch_dim); each row is M concatenated patch vectors.
DeviceForwardOutput device_forward(const SplitModel& model, const Matrix& batch);

/// Accepts any token count L >= 1; token 0 must be CLS.
ServerForwardOutput server_forward(const SplitModel& model, const Tensor3d& acts);

ServerGrads server_backward(const SplitModel& model, const ServerCache& cache, const Matrix& dlogits);

/// Gradients for the device adapters only; `dacts_full` is B x (M+1) x D.
AdapterSet device_backward(const SplitModel& model, const DeviceCache& cache, const Tensor3d& dacts_full);

/// Convenience: device then server forward without compression.
Matrix forward_logits(const SplitModel& model, const Matrix& batch);

AdapterSet sgd_step(const AdapterSet& adapters, const AdapterSet& grads, double eta);
Matrix sgd_step(const Matrix& param, const Matrix& grad, double eta);

AdapterSet zero_like(const AdapterSet& adapters);
std::uint64_t fingerprint(const AdapterSet& adapters, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t server_fingerprint(const SplitModel& model);

/// Number of scalar parameters per block (frozen), per adapter, and in the embedder.
std::size_t block_param_count(const ModelConfig& cfg) noexcept;
std::size_t adapter_param_count(const ModelConfig& cfg) noexcept;
std::size_t embedder_param_count(const ModelConfig& cfg) noexcept;

}  // namespace tsflora
