#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tsflora/model.hpp"

namespace tsflora {

/// Model checkpoint, little-endian:
///
///   "TSFL"  u16 version (=1)
///   u32 blocks, dim, patches, patch_dim, heads, rank, classes, cut
///   u8 lora_site, f64 lora_scale, f64 init_std, f64 lora_init_std, f64 ln_eps
///   f64 tensors, row-major, in declaration order:
///     patch_proj, cls, position,
///     per block: wq wk wv wo w1 w2 ln1_gamma ln1_beta ln2_gamma ln2_beta,
///     norm_gamma, norm_beta,
///     device adapters (u, v)..., server adapters (u, v)..., head
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const SplitModel& model);
SplitModel decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const SplitModel& model);
SplitModel load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace tsflora
