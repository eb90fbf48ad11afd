#pragma once

// Numeric layer over the convergence analysis: the quantizer variance
// factor delta(q, d), the compression penalty R(q, K), the activation
// constants Psi and Lambda, and exhaustive search over (e, K, q) under
// payload and device-memory limits.

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsflora/compression.hpp"
#include "tsflora/federation.hpp"
#include "tsflora/model.hpp"

namespace tsflora {

/// (1 + sqrt(2d - 1)) / (2 (2^q - 1)).
double delta(int q, double d);

struct BoundConstants {
  std::vector<double> sigma2{1.0};         // per client, or one shared value
  double gamma = 1.0;
  double kappa = 1.0;
  double smoothness = 1.0;                 // S
  double epsilon2 = 0.0;                   // heterogeneity bound; not part of R
  double psi = 1.0;
  double lambda = 1.0;
  std::vector<double> participation{1.0};  // upsilon_n, per client or shared
  std::vector<double> weights{1.0};        // rho_n, per client or shared
  int clients = 1;                         // V
  int local_steps = 1;                     // I
  int rounds = 1;                          // T
  std::vector<double> eta{0.1};            // per round, or one constant step

  /// Positivity and the step-size condition eta <= 1 / (4 S).
  void validate() const;
};

/// R(q, K) = (8 V S I / T) * sum_t eta_t^2 * sum_n (rho_n^2 + 1) / upsilon_n
///           * [2 sigma_n^2 + 2 gamma^2 (1 + kappa) Lambda delta(q, d)
///              + 8 gamma^2 (1 + 1/kappa) Psi B (M - K)]
double r_term(int q, int kept, const BoundConstants& consts, int patches, int batch, double d);

struct ActivationConstants {
  double psi = 0.0;     // max_{b,i} ||A[b,i,:]||^2 over all batches
  double lambda = 0.0;  // mean over batches of ||A_ref||_F^2
};

ActivationConstants measure_constants(std::span<const Tensor3d> activations, std::span<const Tensor3d> refined);

/// Runs the device side of `model` on each batch and refines with budget K
/// (no quantization) before measuring.
ActivationConstants measure_constants(const SplitModel& model, std::span<const Matrix> batches, int kept);

struct SearchSpace {
  std::vector<int> cuts{1};
  int k_min = 1;
  int k_max = 1;
  std::vector<int> bits{2, 4, 8, 16, 32};
  double c_max_bits = std::numeric_limits<double>::infinity();
  double memory_budget_bytes = std::numeric_limits<double>::infinity();

  void validate(int patches, int blocks) const;
};

struct SearchResult {
  bool feasible = false;
  int cut = 0;
  int kept = 0;
  int bits = 0;
  double r = 0.0;
  std::uint64_t payload = 0;
  std::vector<std::string> binding;  // "memory" and/or "payload" when infeasible

  bool operator==(const SearchResult&) const = default;
};

/// Exhaustive minimisation of R over feasible (e, K, q), with d = B(K+2)D.
/// Ties go to the smaller payload, then the smaller e.
SearchResult grid_search_P(const SearchSpace& space, const BoundConstants& consts, const ModelConfig& model, int batch);

}  // namespace tsflora
