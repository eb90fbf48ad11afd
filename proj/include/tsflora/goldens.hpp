#pragma once

#include <string>
#include <vector>

#include <cstdint>

namespace tsflora {

struct GoldenVector {
  std::string name;  // file name, e.g. "act_q4.tsfa"
  std::vector<std::uint8_t> bytes;
};

/// Fixed conformance vectors for the wire formats. Inputs are built from
/// integer arithmetic and the only randomness is mt19937_64 uniforms, so the
/// bytes are reproducible across platforms.
std::vector<GoldenVector> golden_vectors();

}  // namespace tsflora
