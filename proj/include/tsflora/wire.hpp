#pragma once

// Binary message formats exchanged between devices and the server. All
// multi-byte fields are little-endian.
//
// Common header (30 bytes), used by ActivationMsg ("TSFA") and
// GradientMsg ("TSFG"):
//
//   offset size field
//        0    4 magic
//        4    2 version (u16)
//        6    4 round (u32)
//       10    2 client (u16)
//       12    2 B  batch (u16)
//       14    2 K  kept patch tokens (u16)
//       16    2 D  embedding dim (u16)
//       18    2 M  patch tokens before selection (u16)
//       20    1 q  bit width (u8; 32 for gradients)
//       21    1 merged_present (u8, 0 or 1)
//       22    4 a_min (f32; 0 for gradients)
//       26    4 a_max (f32; 0 for gradients)
//
// ActivationMsg body:
//   indices  B*K u16, row-major, 1-based, strictly increasing per sample
//   signs    ceil(B(K+2)D / 8) bytes, bit i = entry i negative, LSB-first
//   codes    ceil(B(K+2)D q / 8) bytes, entry i in bits [iq, (i+1)q), LSB-first
//
// GradientMsg body: B(K+2)D f32 values, row-major.
//
// AdapterMsg ("TSFU", 18-byte header):
//   magic, u16 version, u32 round, u16 client, u16 blocks, u16 D, u16 r,
//   then per block U (D x r) and V (r x D) as row-major f32.

#include <cstdint>
#include <span>
#include <vector>

#include "tsflora/compression.hpp"
#include "tsflora/model.hpp"

namespace tsflora {

inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::size_t kMessageHeaderBytes = 30;
inline constexpr std::size_t kAdapterHeaderBytes = 18;

struct MessageMeta {
  std::uint32_t round = 0;
  std::uint16_t client = 0;
  std::uint16_t patches = 0;  // M
  bool merged_present = false;

  bool operator==(const MessageMeta&) const = default;
};

struct ActivationMessage {
  QuantizedActivations quantized;
  IndexMatrix indices;  // B x K
  MessageMeta meta;
};

struct GradientMessage {
  Tensor3d gradient;  // B x (K+2) x D, values rounded through f32
  MessageMeta meta;
};

struct AdapterMessage {
  AdapterSet adapters;  // values rounded through f32
  std::uint32_t round = 0;
  std::uint16_t client = 0;
};

std::vector<std::uint8_t> encode_activations(const QuantizedActivations& qa, const IndexMatrix& indices,
                                             const MessageMeta& meta);
ActivationMessage decode_activations(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_gradient(const Tensor3d& dtokens, const MessageMeta& meta);
GradientMessage decode_gradient(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_adapters(const AdapterSet& adapters, std::uint32_t round, std::uint16_t client);
AdapterMessage decode_adapters(std::span<const std::uint8_t> bytes);

/// B(K+2)Dq, the quantized token payload.
std::uint64_t payload_bits(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim, std::uint64_t bits);

/// Header, indices, and signs of an ActivationMsg, in bits.
std::uint64_t metadata_bits(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim);

/// Exact encoded ActivationMsg length: metadata plus byte-rounded payload.
std::uint64_t activation_message_bytes(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim, std::uint64_t bits);
std::uint64_t gradient_message_bytes(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim);
std::uint64_t adapter_message_bytes(std::uint64_t blocks, std::uint64_t dim, std::uint64_t rank);

/// Size of a full-length token sequence: batch * tokens * dim * bits.
std::uint64_t dense_payload_bits(std::uint64_t batch, std::uint64_t tokens, std::uint64_t dim, std::uint64_t bits);

/// q(K+2) / (32(M+1)), relative to 32-bit transmission of all M+1 tokens.
double compression_ratio(int kept, int bits, int patches);

}  // namespace tsflora
