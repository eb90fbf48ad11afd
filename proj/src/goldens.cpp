#include "tsflora/goldens.hpp"

#include "tsflora/compression.hpp"
#include "tsflora/wire.hpp"

namespace tsflora {

namespace {

constexpr Index kBatch = 2;
constexpr Index kPatches = 5;
constexpr Index kDim = 3;

// Values on a 1/8 grid in [-2, 2].
double pattern(Index i, int salt) {
  const long v = (static_cast<long>(i) * 37 + salt * 11) % 33;
  return static_cast<double>(v - 16) / 8.0;
}

Tensor3d activations() {
  Tensor3d acts(kBatch, kPatches + 1, kDim);
  auto flat = acts.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = pattern(static_cast<Index>(i), 1);
  return acts;
}

Matrix scores() {
  Matrix alpha(kBatch, kPatches);
  alpha << 0.10, 0.30, 0.05, 0.40, 0.15,
           0.25, 0.25, 0.20, 0.05, 0.25;
  return alpha;
}

GoldenVector activation_vector(const std::string& name, int kept, int bits, std::uint64_t seed) {
  const RefinedActivations ref = refine(activations(), scores(), kept);
  Rng rng(seed);
  const QuantizedActivations qa = quantize(ref.tokens, bits, rng);
  MessageMeta meta{7, 3, static_cast<std::uint16_t>(kPatches), ref.merged_present};
  return {name, encode_activations(qa, ref.indices, meta)};
}

}  // namespace

std::vector<GoldenVector> golden_vectors() {
  std::vector<GoldenVector> out;
  out.push_back(activation_vector("act_q2.tsfa", 3, 2, 11));
  out.push_back(activation_vector("act_q4.tsfa", 3, 4, 12));
  out.push_back(activation_vector("act_q8.tsfa", 3, 8, 13));
  out.push_back(activation_vector("act_q4_full.tsfa", 5, 4, 14));

  Tensor3d grad(kBatch, 3 + 2, kDim);
  auto flat = grad.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = pattern(static_cast<Index>(i), 2) / 4.0;
  out.push_back({"grad.tsfg", encode_gradient(grad, MessageMeta{7, 3, static_cast<std::uint16_t>(kPatches), true})});

  AdapterSet adapters(2);
  Index counter = 0;
  for (auto& a : adapters) {
    a.u = Matrix(kDim, 2);
    a.v = Matrix(2, kDim);
    for (Index i = 0; i < a.u.size(); ++i) a.u.data()[i] = pattern(counter++, 3);
    for (Index i = 0; i < a.v.size(); ++i) a.v.data()[i] = pattern(counter++, 3);
  }
  out.push_back({"adapters.tsfu", encode_adapters(adapters, 7, 3)});
  return out;
}

}  // namespace tsflora
