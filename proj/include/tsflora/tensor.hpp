#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "tsflora/errors.hpp"

namespace tsflora {

using Index = Eigen::Index;

/// Row-major dense matrix. Row-major matches the flat entry order used by
/// the wire and checkpoint formats.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = Mat<double>;
using RowVector = RowVec<double>;
using IndexMatrix = Mat<int>;

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << '[' << m.rows() << 'x' << m.cols() << ']';
  return os.str();
}

/// Batch of token sequences, shape [batch x tokens x dim], stored as a
/// (batch*tokens) x dim row-major matrix so that sample `b` is a contiguous
/// block of rows.
template <typename Scalar>
class Tensor3 {
 public:
  using MatrixType = Mat<Scalar>;

  Tensor3() = default;
  Tensor3(Index batch, Index tokens, Index dim)
      : batch_(batch), tokens_(tokens), rows_(MatrixType::Zero(batch * tokens, dim)) {}
  Tensor3(Index batch, Index tokens, MatrixType rows)
      : batch_(batch), tokens_(tokens), rows_(std::move(rows)) {
    if (rows_.rows() != batch * tokens) {
      throw DimensionError("Tensor3: " + shape_string(rows_) + " cannot hold " +
                           std::to_string(batch) + "x" + std::to_string(tokens) + " tokens");
    }
  }

  Index batch() const noexcept { return batch_; }
  Index tokens() const noexcept { return tokens_; }
  Index dim() const noexcept { return rows_.cols(); }
  Index size() const noexcept { return rows_.size(); }

  std::string shape() const {
    return '[' + std::to_string(batch_) + 'x' + std::to_string(tokens_) + 'x' +
           std::to_string(dim()) + ']';
  }

  auto sample(Index b) { return rows_.middleRows(b * tokens_, tokens_); }
  auto sample(Index b) const { return rows_.middleRows(b * tokens_, tokens_); }
  auto token(Index b, Index t) { return rows_.row(b * tokens_ + t); }
  auto token(Index b, Index t) const { return rows_.row(b * tokens_ + t); }

  Scalar& operator()(Index b, Index t, Index d) { return rows_(b * tokens_ + t, d); }
  Scalar operator()(Index b, Index t, Index d) const { return rows_(b * tokens_ + t, d); }

  MatrixType& rows() noexcept { return rows_; }
  const MatrixType& rows() const noexcept { return rows_; }

  std::span<Scalar> flat() noexcept { return {rows_.data(), static_cast<std::size_t>(rows_.size())}; }
  std::span<const Scalar> flat() const noexcept {
    return {rows_.data(), static_cast<std::size_t>(rows_.size())};
  }

  bool same_shape(const Tensor3& other) const noexcept {
    return batch_ == other.batch_ && tokens_ == other.tokens_ && dim() == other.dim();
  }

  template <typename Other>
  Tensor3<Other> cast() const {
    return Tensor3<Other>(batch_, tokens_, rows_.template cast<Other>().eval());
  }

 private:
  Index batch_ = 0;
  Index tokens_ = 0;
  MatrixType rows_;
};

using Tensor3d = Tensor3<double>;

/// Deterministic random source.
///
/// The bit stream is std::mt19937_64 seeded with a single 64-bit value, whose
/// output sequence is fixed by the C++ standard. Floating-point variates are
/// derived here rather than through <random> distributions (whose algorithms
/// are implementation-defined):
///   uniform() = (next_u64() >> 11) * 2^-53, in [0, 1)
///   normal()  = Box-Muller on two uniforms, cosine branch
///   gamma(k)  = Marsaglia-Tsang squeeze, with the U^(1/k) boost for k < 1
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  double gamma(double shape);

  /// Uniform integer in [0, n), by rejection.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[below(i)]);
    }
  }

  /// Independent stream keyed by (seed, k0, k1, k2) through splitmix64
  /// mixing, so per-client/per-round streams do not depend on call order.
  static Rng derive(std::uint64_t seed, std::uint64_t k0, std::uint64_t k1 = 0,
                    std::uint64_t k2 = 0);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Matrix with i.i.d. N(0, stddev^2) entries, filled in row-major order.
Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng);

/// FNV-1a over the raw bytes of every entry, for cache/sequence fingerprints.
std::uint64_t fingerprint(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace tsflora
