#pragma once

// Little-endian byte and bit cursors shared by the wire and checkpoint codecs.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "tsflora/errors.hpp"

namespace tsflora {

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }

  void put_bytes(std::span<const std::uint8_t> bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }
  void put_tag(const char (&tag)[5]) { out_.insert(out_.end(), tag, tag + 4); }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename T>
  T get(const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, take(sizeof(T), what).data(), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw DecodeError(DecodeErrorKind::kTruncated, std::string(what) + " needs " + std::to_string(n) +
                                                         " bytes, " + std::to_string(remaining()) + " left");
    }
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_tag(const char (&tag)[5]) {
    auto got = take(4, "magic");
    if (std::memcmp(got.data(), tag, 4) != 0) {
      throw DecodeError(DecodeErrorKind::kBadMagic, std::string("expected ") + tag);
    }
  }

  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

/// Packs fixed-width unsigned fields LSB-first: entry i occupies bits
/// [i*width, (i+1)*width) of the stream, bit j of the stream being bit
/// (j % 8) of byte j / 8.
class BitPacker {
 public:
  BitPacker(std::vector<std::uint8_t>& out, unsigned width) : out_(out), width_(width) {}

  void push(std::uint64_t value) {
    for (unsigned b = 0; b < width_; ++b, ++bit_) {
      if (bit_ % 8 == 0) out_.push_back(0);
      if ((value >> b) & 1U) out_.back() |= static_cast<std::uint8_t>(1U << (bit_ % 8));
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
  unsigned width_;
  std::size_t bit_ = 0;
};

inline std::uint64_t read_packed(std::span<const std::uint8_t> bytes, std::size_t index, unsigned width) {
  std::uint64_t value = 0;
  std::size_t bit = index * width;
  for (unsigned b = 0; b < width; ++b, ++bit) {
    value |= static_cast<std::uint64_t>((bytes[bit / 8] >> (bit % 8)) & 1U) << b;
  }
  return value;
}

constexpr std::size_t packed_bytes(std::size_t count, unsigned width) noexcept {
  return (count * width + 7) / 8;
}

}  // namespace tsflora
