#pragma once

// Two-stage activation compression at the cut layer:
//   1. CLS-attention scoring, top-K patch selection, and merging of the
//      discarded patches into one attention-weighted token (K+2 tokens out);
//   2. stochastic q-bit quantization of the refined tensor with a global
//      magnitude range and a separate sign bitmap.
// Plus the backward-path scatter that maps gradients on the K+2 tokens back
// onto the M+1 device tokens.

#include <cstdint>
#include <vector>

#include "tsflora/tensor.hpp"

namespace tsflora {

inline constexpr int kAllowedBitWidths[] = {2, 4, 8, 16, 32};

bool is_allowed_bit_width(int q) noexcept;

struct CompressionConfig {
  int tokens = 9;  // K, number of patch tokens kept
  int bits = 32;   // q

  /// Throws ConfigError if K is outside [1, patches] or q is not allowed.
  void validate(int patches) const;

  bool operator==(const CompressionConfig&) const = default;
};

struct RefinedActivations {
  Tensor3d tokens;        // B x (K+2) x D: [CLS, selected ascending, merged]
  IndexMatrix indices;    // B x K, 1-based patch positions, strictly increasing
  Matrix merge_weights;   // B x M, alpha_i / sum_discarded alpha, 0 when selected
  bool merged_present = false;

  Index kept() const noexcept { return indices.cols(); }
};

struct QuantizedActivations {
  std::vector<std::uint8_t> codes;  // q-bit level indices, LSB-first, row-major
  std::vector<std::uint8_t> signs;  // 1 bit per entry, set = negative
  float a_min = 0.0F;
  float a_max = 0.0F;
  int bits = 32;
  Index batch = 0;
  Index tokens = 0;  // K + 2
  Index dim = 0;

  Index entries() const noexcept { return batch * tokens * dim; }

  /// Grid step (a_max - a_min) / (2^q - 1), evaluated in double.
  double step() const noexcept;

  /// Throws DecodeError on inconsistent buffers, ranges, or nonzero padding.
  void validate() const;

  bool operator==(const QuantizedActivations&) const = default;
};

/// Per-sample softmax over the patch logits (CLS excluded).
Matrix cls_scores(const Matrix& cls_patch_logits);

/// Indices (1-based) of the K largest scores per sample. Ties go to the
/// smaller index; each row is returned in ascending order.
IndexMatrix top_k_select(const Matrix& alpha, int k);

RefinedActivations refine(const Tensor3d& acts, const Matrix& alpha, int k);

/// Re-expands to M+1 tokens, copying the merged token into every discarded slot.
Tensor3d reconstruct(const RefinedActivations& ref, int patches);

/// The linear part of refine with the selection and merge weights held
/// fixed; refine(acts, ...).tokens == refine_linear(acts, ref-structure).
Tensor3d refine_linear(const Tensor3d& acts, const RefinedActivations& structure);

/// Adjoint of refine_linear: selected gradients return to their positions
/// and the merged gradient is spread by merge_weights.
Tensor3d grad_scatter(const Tensor3d& dtokens, const RefinedActivations& ref, int patches);

QuantizedActivations quantize(const Tensor3d& tokens, int bits, Rng& rng);
Tensor3d dequantize(const QuantizedActivations& qa);

/// Level index stored for entry i.
std::uint32_t code_at(const QuantizedActivations& qa, Index i);
bool negative_at(const QuantizedActivations& qa, Index i);

/// Selection distortion ||A - reconstruct(ref)||_F^2.
double selection_distortion(const Tensor3d& acts, const RefinedActivations& ref);

/// Largest squared token norm, max_{b,i} ||A[b,i,:]||^2.
double max_token_energy(const Tensor3d& acts);

}  // namespace tsflora
