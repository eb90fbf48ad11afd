#include "tsflora/compression.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsflora/bytes.hpp"
#include "tsflora/numeric.hpp"

namespace tsflora {

namespace {

double level_count(int bits) { return std::ldexp(1.0, bits) - 1.0; }

// Round the magnitude range outward to float so every |x| stays inside the
// transmitted [a_min, a_max].
float round_down(double v) {
  auto f = static_cast<float>(v);
  if (static_cast<double>(f) > v) f = std::nextafter(f, 0.0F);
  return f;
}

float round_up(double v) {
  auto f = static_cast<float>(v);
  if (static_cast<double>(f) < v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

bool padding_clear(const std::vector<std::uint8_t>& bytes, std::size_t used_bits) {
  if (used_bits % 8 == 0 || bytes.empty()) return true;
  const auto mask = static_cast<std::uint8_t>(0xFFU << (used_bits % 8));
  return (bytes.back() & mask) == 0;
}

}  // namespace

bool is_allowed_bit_width(int q) noexcept {
  return std::find(std::begin(kAllowedBitWidths), std::end(kAllowedBitWidths), q) != std::end(kAllowedBitWidths);
}

void CompressionConfig::validate(int patches) const {
  if (tokens < 1 || tokens > patches) {
    throw ConfigError("keep_tokens: K=" + std::to_string(tokens) + " outside [1, " + std::to_string(patches) + "]",
                      "keep_tokens");
  }
  if (!is_allowed_bit_width(bits)) {
    throw ConfigError("bits: q=" + std::to_string(bits) + " not in {2,4,8,16,32}", "bits");
  }
}

Matrix cls_scores(const Matrix& cls_patch_logits) { return softmax_rows(cls_patch_logits); }

IndexMatrix top_k_select(const Matrix& alpha, int k) {
  const Index m = alpha.cols();
  if (k < 1 || k > m) {
    throw ConfigError("top_k_select: K=" + std::to_string(k) + " outside [1, " + std::to_string(m) + "]",
                      "keep_tokens");
  }
  IndexMatrix out(alpha.rows(), k);
  std::vector<int> order(static_cast<std::size_t>(m));
  for (Index b = 0; b < alpha.rows(); ++b) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return alpha(b, i) > alpha(b, j); });
    std::sort(order.begin(), order.begin() + k);
    for (int j = 0; j < k; ++j) out(b, j) = order[static_cast<std::size_t>(j)] + 1;
  }
  return out;
}

Tensor3d refine_linear(const Tensor3d& acts, const RefinedActivations& structure) {
  const Index batch = acts.batch();
  const Index k = structure.kept();
  const Index m = acts.tokens() - 1;
  if (structure.indices.rows() != batch || structure.merge_weights.rows() != batch ||
      structure.merge_weights.cols() != m) {
    throw DimensionError("refine_linear: activations " + acts.shape() + " with indices " +
                         shape_string(structure.indices) + " and merge weights " +
                         shape_string(structure.merge_weights));
  }
  Tensor3d out(batch, k + 2, acts.dim());
  for (Index b = 0; b < batch; ++b) {
    out.token(b, 0) = acts.token(b, 0);
    for (Index j = 0; j < k; ++j) out.token(b, 1 + j) = acts.token(b, structure.indices(b, j));
    if (structure.merged_present) {
      for (Index i = 0; i < m; ++i) {
        const double w = structure.merge_weights(b, i);
        if (w != 0.0) out.token(b, k + 1) += w * acts.token(b, i + 1);
      }
    }
  }
  return out;
}

RefinedActivations refine(const Tensor3d& acts, const Matrix& alpha, int k) {
  const Index batch = acts.batch();
  const Index m = acts.tokens() - 1;
  if (alpha.rows() != batch || alpha.cols() != m) {
    throw DimensionError("refine: activations " + acts.shape() + " with scores " + shape_string(alpha));
  }
  RefinedActivations ref;
  ref.indices = top_k_select(alpha, k);
  ref.merged_present = k < m;
  ref.merge_weights = Matrix::Zero(batch, m);
  if (ref.merged_present) {
    for (Index b = 0; b < batch; ++b) {
      std::vector<bool> kept(static_cast<std::size_t>(m), false);
      for (Index j = 0; j < k; ++j) kept[static_cast<std::size_t>(ref.indices(b, j) - 1)] = true;
      double total = 0.0;
      Index discarded = 0;
      for (Index i = 0; i < m; ++i) {
        if (!kept[static_cast<std::size_t>(i)]) {
          total += alpha(b, i);
          ++discarded;
        }
      }
      for (Index i = 0; i < m; ++i) {
        if (kept[static_cast<std::size_t>(i)]) continue;
        // Scores that all underflowed fall back to a plain average.
        ref.merge_weights(b, i) = total > 0.0 ? alpha(b, i) / total : 1.0 / static_cast<double>(discarded);
      }
    }
  }
  ref.tokens = refine_linear(acts, ref);
  return ref;
}

Tensor3d reconstruct(const RefinedActivations& ref, int patches) {
  const Index batch = ref.tokens.batch();
  const Index k = ref.kept();
  if (ref.tokens.tokens() != k + 2 || ref.indices.rows() != batch) {
    throw DimensionError("reconstruct: tokens " + ref.tokens.shape() + " with indices " + shape_string(ref.indices));
  }
  Tensor3d out(batch, patches + 1, ref.tokens.dim());
  for (Index b = 0; b < batch; ++b) {
    std::vector<bool> kept(static_cast<std::size_t>(patches), false);
    out.token(b, 0) = ref.tokens.token(b, 0);
    for (Index j = 0; j < k; ++j) {
      const int idx = ref.indices(b, j);
      if (idx < 1 || idx > patches) {
        throw ConfigError("reconstruct: index " + std::to_string(idx) + " outside [1, " +
                              std::to_string(patches) + "]",
                          "indices");
      }
      kept[static_cast<std::size_t>(idx - 1)] = true;
      out.token(b, idx) = ref.tokens.token(b, 1 + j);
    }
    for (Index i = 0; i < patches; ++i) {
      if (!kept[static_cast<std::size_t>(i)]) out.token(b, i + 1) = ref.tokens.token(b, k + 1);
    }
  }
  return out;
}

Tensor3d grad_scatter(const Tensor3d& dtokens, const RefinedActivations& ref, int patches) {
  const Index batch = ref.indices.rows();
  const Index k = ref.kept();
  if (dtokens.batch() != batch || dtokens.tokens() != k + 2 || ref.merge_weights.cols() != patches) {
    throw DimensionError("grad_scatter: gradient " + dtokens.shape() + " for " + std::to_string(batch) + " samples, K=" +
                         std::to_string(k) + ", M=" + std::to_string(patches));
  }
  Tensor3d out(batch, patches + 1, dtokens.dim());
  for (Index b = 0; b < batch; ++b) {
    out.token(b, 0) = dtokens.token(b, 0);
    for (Index j = 0; j < k; ++j) out.token(b, ref.indices(b, j)) += dtokens.token(b, 1 + j);
    if (ref.merged_present) {
      for (Index i = 0; i < patches; ++i) {
        const double w = ref.merge_weights(b, i);
        if (w != 0.0) out.token(b, i + 1) += w * dtokens.token(b, k + 1);
      }
    }
  }
  return out;
}

double QuantizedActivations::step() const noexcept {
  return (static_cast<double>(a_max) - static_cast<double>(a_min)) / level_count(bits);
}

void QuantizedActivations::validate() const {
  if (!is_allowed_bit_width(bits)) {
    throw DecodeError(DecodeErrorKind::kBadField, "bit width " + std::to_string(bits));
  }
  if (!std::isfinite(a_min) || !std::isfinite(a_max) || a_min < 0.0F || a_min > a_max) {
    throw DecodeError(DecodeErrorKind::kBadField, "range [" + std::to_string(a_min) + ", " + std::to_string(a_max) + "]");
  }
  const auto n = static_cast<std::size_t>(entries());
  const auto q = static_cast<unsigned>(bits);
  if (codes.size() != packed_bytes(n, q) || signs.size() != packed_bytes(n, 1)) {
    throw DecodeError(DecodeErrorKind::kTruncated, "code/sign buffers do not match " + std::to_string(n) + " entries");
  }
  if (!padding_clear(codes, n * q)) {
    throw DecodeError(DecodeErrorKind::kCodeOverflow, "code bits beyond the last entry are set");
  }
  if (!padding_clear(signs, n)) {
    throw DecodeError(DecodeErrorKind::kBadField, "sign bits beyond the last entry are set");
  }
}

std::uint32_t code_at(const QuantizedActivations& qa, Index i) {
  return static_cast<std::uint32_t>(read_packed(qa.codes, static_cast<std::size_t>(i), static_cast<unsigned>(qa.bits)));
}

bool negative_at(const QuantizedActivations& qa, Index i) { return read_packed(qa.signs, static_cast<std::size_t>(i), 1) != 0; }

QuantizedActivations quantize(const Tensor3d& tokens, int bits, Rng& rng) {
  if (!is_allowed_bit_width(bits)) {
    throw ConfigError("quantize: q=" + std::to_string(bits) + " not in {2,4,8,16,32}", "bits");
  }
  const auto flat = tokens.flat();
  QuantizedActivations qa;
  qa.bits = bits;
  qa.batch = tokens.batch();
  qa.tokens = tokens.tokens();
  qa.dim = tokens.dim();

  double lo = 0.0;
  double hi = 0.0;
  if (!flat.empty()) {
    lo = std::numeric_limits<double>::infinity();
    for (double x : flat) {
      if (!std::isfinite(x)) throw ConfigError("quantize: non-finite activation", "activations");
      lo = std::min(lo, std::abs(x));
      hi = std::max(hi, std::abs(x));
    }
  }
  qa.a_min = round_down(lo);
  qa.a_max = round_up(hi);
  const double low = qa.a_min;
  const double step = qa.step();
  const double top = level_count(bits);  // index of the last level

  BitPacker code_out(qa.codes, static_cast<unsigned>(bits));
  BitPacker sign_out(qa.signs, 1);
  for (double x : flat) {
    sign_out.push(x < 0.0 ? 1U : 0U);
    if (step == 0.0) {
      code_out.push(0);
      continue;
    }
    const double mag = std::abs(x);
    double phi = std::clamp(std::floor((mag - low) / step), 0.0, top - 1.0);
    while (phi > 0.0 && low + phi * step > mag) phi -= 1.0;
    while (phi < top - 1.0 && low + (phi + 1.0) * step < mag) phi += 1.0;
    const double lower = low + phi * step;
    const double upper = low + (phi + 1.0) * step;
    const double stay = std::clamp((upper - mag) / (upper - lower), 0.0, 1.0);
    const double level = rng.uniform() < stay ? phi : phi + 1.0;
    code_out.push(static_cast<std::uint64_t>(level));
  }
  return qa;
}

Tensor3d dequantize(const QuantizedActivations& qa) {
  qa.validate();
  Tensor3d out(qa.batch, qa.tokens, qa.dim);
  auto flat = out.flat();
  const double low = qa.a_min;
  const double step = qa.step();
  for (Index i = 0; i < qa.entries(); ++i) {
    const double mag = low + static_cast<double>(code_at(qa, i)) * step;
    flat[static_cast<std::size_t>(i)] = negative_at(qa, i) ? -mag : mag;
  }
  return out;
}

double selection_distortion(const Tensor3d& acts, const RefinedActivations& ref) {
  const Tensor3d back = reconstruct(ref, static_cast<int>(acts.tokens() - 1));
  return (acts.rows() - back.rows()).squaredNorm();
}

double max_token_energy(const Tensor3d& acts) {
  double best = 0.0;
  for (Index r = 0; r < acts.rows().rows(); ++r) best = std::max(best, acts.rows().row(r).squaredNorm());
  return best;
}

}  // namespace tsflora
