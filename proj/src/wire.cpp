#include "tsflora/wire.hpp"

#include <cmath>
#include <limits>

#include "tsflora/bytes.hpp"

namespace tsflora {

namespace {

struct Header {
  std::uint32_t round = 0;
  std::uint16_t client = 0;
  std::uint16_t batch = 0;
  std::uint16_t kept = 0;
  std::uint16_t dim = 0;
  std::uint16_t patches = 0;
  std::uint8_t bits = 0;
  std::uint8_t merged = 0;
  float a_min = 0.0F;
  float a_max = 0.0F;
};

std::uint16_t narrow16(Index v, const char* what) {
  if (v < 0 || v > std::numeric_limits<std::uint16_t>::max()) {
    throw DimensionError(std::string(what) + " " + std::to_string(v) + " does not fit in u16");
  }
  return static_cast<std::uint16_t>(v);
}

void put_header(ByteWriter& w, const char (&tag)[5], const Header& h) {
  w.put_tag(tag);
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint32_t>(h.round);
  w.put<std::uint16_t>(h.client);
  w.put<std::uint16_t>(h.batch);
  w.put<std::uint16_t>(h.kept);
  w.put<std::uint16_t>(h.dim);
  w.put<std::uint16_t>(h.patches);
  w.put<std::uint8_t>(h.bits);
  w.put<std::uint8_t>(h.merged);
  w.put<float>(h.a_min);
  w.put<float>(h.a_max);
}

Header get_header(ByteReader& r, const char (&tag)[5]) {
  r.expect_tag(tag);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWireVersion) throw DecodeError(DecodeErrorKind::kBadVersion, "version " + std::to_string(version));
  Header h;
  h.round = r.get<std::uint32_t>("round");
  h.client = r.get<std::uint16_t>("client");
  h.batch = r.get<std::uint16_t>("B");
  h.kept = r.get<std::uint16_t>("K");
  h.dim = r.get<std::uint16_t>("D");
  h.patches = r.get<std::uint16_t>("M");
  h.bits = r.get<std::uint8_t>("q");
  h.merged = r.get<std::uint8_t>("merged_present");
  h.a_min = r.get<float>("a_min");
  h.a_max = r.get<float>("a_max");
  if (h.merged > 1) throw DecodeError(DecodeErrorKind::kBadField, "merged_present " + std::to_string(h.merged));
  if (h.kept > h.patches) {
    throw DecodeError(DecodeErrorKind::kBadField, "K=" + std::to_string(h.kept) + " exceeds M=" + std::to_string(h.patches));
  }
  if ((h.merged == 1) != (h.kept < h.patches)) {
    throw DecodeError(DecodeErrorKind::kBadField, "merged_present inconsistent with K and M");
  }
  return h;
}

void check_indices(const IndexMatrix& indices, int patches) {
  for (Index b = 0; b < indices.rows(); ++b) {
    int prev = 0;
    for (Index j = 0; j < indices.cols(); ++j) {
      const int idx = indices(b, j);
      if (idx <= prev || idx > patches) {
        throw DecodeError(DecodeErrorKind::kBadField, "index " + std::to_string(idx) + " at sample " +
                                                          std::to_string(b) + " is not increasing within [1, M]");
      }
      prev = idx;
    }
  }
}

// Checked before any allocation sized from header fields.
void expect_body(const ByteReader& r, std::uint64_t needed) {
  if (r.remaining() < needed) {
    throw DecodeError(DecodeErrorKind::kTruncated, "body needs " + std::to_string(needed) + " bytes, " +
                                                       std::to_string(r.remaining()) + " available");
  }
}

void expect_end(const ByteReader& r) {
  if (r.remaining() != 0) {
    throw DecodeError(DecodeErrorKind::kTrailingBytes, std::to_string(r.remaining()) + " bytes after message body");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_activations(const QuantizedActivations& qa, const IndexMatrix& indices,
                                             const MessageMeta& meta) {
  qa.validate();
  const Index kept = indices.cols();
  if (indices.rows() != qa.batch || qa.tokens != kept + 2) {
    throw DimensionError("encode_activations: indices " + shape_string(indices) + " for " + std::to_string(qa.batch) +
                         " samples of " + std::to_string(qa.tokens) + " tokens");
  }
  if (meta.merged_present != (kept < meta.patches)) {
    throw ConfigError("encode_activations: merged_present must equal K < M", "merged_present");
  }
  check_indices(indices, meta.patches);
  Header h;
  h.round = meta.round;
  h.client = meta.client;
  h.batch = narrow16(qa.batch, "B");
  h.kept = narrow16(kept, "K");
  h.dim = narrow16(qa.dim, "D");
  h.patches = meta.patches;
  h.bits = static_cast<std::uint8_t>(qa.bits);
  h.merged = meta.merged_present ? 1 : 0;
  h.a_min = qa.a_min;
  h.a_max = qa.a_max;

  std::vector<std::uint8_t> out;
  out.reserve(activation_message_bytes(h.batch, h.kept, h.dim, h.bits));
  ByteWriter w(out);
  put_header(w, "TSFA", h);
  for (Index b = 0; b < indices.rows(); ++b) {
    for (Index j = 0; j < kept; ++j) w.put<std::uint16_t>(static_cast<std::uint16_t>(indices(b, j)));
  }
  w.put_bytes(qa.signs);
  w.put_bytes(qa.codes);
  return out;
}

ActivationMessage decode_activations(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const Header h = get_header(r, "TSFA");
  if (!is_allowed_bit_width(h.bits)) throw DecodeError(DecodeErrorKind::kBadField, "q=" + std::to_string(h.bits));

  ActivationMessage msg;
  msg.meta = {h.round, h.client, h.patches, h.merged == 1};
  const std::uint64_t n = static_cast<std::uint64_t>(h.batch) * (h.kept + 2U) * h.dim;
  expect_body(r, 2ULL * h.batch * h.kept + packed_bytes(n, 1) + packed_bytes(n, h.bits));
  msg.indices.resize(h.batch, h.kept);
  for (Index b = 0; b < h.batch; ++b) {
    for (Index j = 0; j < h.kept; ++j) msg.indices(b, j) = r.get<std::uint16_t>("indices");
  }
  check_indices(msg.indices, h.patches);

  QuantizedActivations& qa = msg.quantized;
  qa.bits = h.bits;
  qa.batch = h.batch;
  qa.tokens = static_cast<Index>(h.kept) + 2;
  qa.dim = h.dim;
  qa.a_min = h.a_min;
  qa.a_max = h.a_max;
  const auto signs = r.take(packed_bytes(n, 1), "signs");
  const auto codes = r.take(packed_bytes(n, h.bits), "codes");
  qa.signs.assign(signs.begin(), signs.end());
  qa.codes.assign(codes.begin(), codes.end());
  expect_end(r);
  qa.validate();
  return msg;
}

std::vector<std::uint8_t> encode_gradient(const Tensor3d& dtokens, const MessageMeta& meta) {
  if (dtokens.tokens() < 2) throw DimensionError("encode_gradient: need K+2 >= 2 tokens, got " + dtokens.shape());
  Header h;
  h.round = meta.round;
  h.client = meta.client;
  h.batch = narrow16(dtokens.batch(), "B");
  h.kept = narrow16(dtokens.tokens() - 2, "K");
  h.dim = narrow16(dtokens.dim(), "D");
  h.patches = meta.patches;
  h.bits = 32;
  h.merged = meta.merged_present ? 1 : 0;
  std::vector<std::uint8_t> out;
  out.reserve(gradient_message_bytes(h.batch, h.kept, h.dim));
  ByteWriter w(out);
  put_header(w, "TSFG", h);
  for (double v : dtokens.flat()) w.put<float>(static_cast<float>(v));
  return out;
}

GradientMessage decode_gradient(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const Header h = get_header(r, "TSFG");
  if (h.bits != 32) throw DecodeError(DecodeErrorKind::kBadField, "gradient q=" + std::to_string(h.bits));
  GradientMessage msg;
  msg.meta = {h.round, h.client, h.patches, h.merged == 1};
  expect_body(r, 4ULL * h.batch * (h.kept + 2U) * h.dim);
  msg.gradient = Tensor3d(h.batch, static_cast<Index>(h.kept) + 2, h.dim);
  for (double& v : msg.gradient.flat()) {
    const float f = r.get<float>("gradient");
    if (!std::isfinite(f)) throw DecodeError(DecodeErrorKind::kBadField, "non-finite gradient value");
    v = f;
  }
  expect_end(r);
  return msg;
}

std::vector<std::uint8_t> encode_adapters(const AdapterSet& adapters, std::uint32_t round, std::uint16_t client) {
  const Index dim = adapters.empty() ? 0 : adapters.front().u.rows();
  const Index rank = adapters.empty() ? 0 : adapters.front().u.cols();
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.put_tag("TSFU");
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint32_t>(round);
  w.put<std::uint16_t>(client);
  w.put<std::uint16_t>(narrow16(static_cast<Index>(adapters.size()), "blocks"));
  w.put<std::uint16_t>(narrow16(dim, "D"));
  w.put<std::uint16_t>(narrow16(rank, "r"));
  for (const auto& a : adapters) {
    if (a.u.rows() != dim || a.u.cols() != rank || a.v.rows() != rank || a.v.cols() != dim) {
      throw DimensionError("encode_adapters: U" + shape_string(a.u) + " V" + shape_string(a.v));
    }
    for (const Matrix* m : {&a.u, &a.v}) {
      for (Index i = 0; i < m->rows(); ++i) {
        for (Index j = 0; j < m->cols(); ++j) w.put<float>(static_cast<float>((*m)(i, j)));
      }
    }
  }
  return out;
}

AdapterMessage decode_adapters(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("TSFU");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWireVersion) throw DecodeError(DecodeErrorKind::kBadVersion, "version " + std::to_string(version));
  AdapterMessage msg;
  msg.round = r.get<std::uint32_t>("round");
  msg.client = r.get<std::uint16_t>("client");
  const auto blocks = r.get<std::uint16_t>("blocks");
  const auto dim = r.get<std::uint16_t>("D");
  const auto rank = r.get<std::uint16_t>("r");
  expect_body(r, 8ULL * blocks * dim * rank);
  auto read = [&r](Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) {
        const float f = r.get<float>("adapter");
        if (!std::isfinite(f)) throw DecodeError(DecodeErrorKind::kBadField, "non-finite adapter value");
        m(i, j) = f;
      }
    }
    return m;
  };
  for (int l = 0; l < blocks; ++l) {
    LoraAdapter a;
    a.u = read(dim, rank);
    a.v = read(rank, dim);
    msg.adapters.push_back(std::move(a));
  }
  expect_end(r);
  return msg;
}

std::uint64_t payload_bits(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim, std::uint64_t bits) {
  return batch * (kept + 2) * dim * bits;
}

std::uint64_t metadata_bits(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim) {
  const std::uint64_t bytes = kMessageHeaderBytes + 2 * batch * kept + packed_bytes(batch * (kept + 2) * dim, 1);
  return 8 * bytes;
}

std::uint64_t activation_message_bytes(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim, std::uint64_t bits) {
  return metadata_bits(batch, kept, dim) / 8 + (payload_bits(batch, kept, dim, bits) + 7) / 8;
}

std::uint64_t gradient_message_bytes(std::uint64_t batch, std::uint64_t kept, std::uint64_t dim) {
  return kMessageHeaderBytes + 4 * batch * (kept + 2) * dim;
}

std::uint64_t adapter_message_bytes(std::uint64_t blocks, std::uint64_t dim, std::uint64_t rank) {
  return kAdapterHeaderBytes + blocks * 4 * (dim * rank + rank * dim);
}

std::uint64_t dense_payload_bits(std::uint64_t batch, std::uint64_t tokens, std::uint64_t dim, std::uint64_t bits) {
  return batch * tokens * dim * bits;
}

double compression_ratio(int kept, int bits, int patches) {
  if (kept < 1 || bits < 1 || patches < 1) throw ConfigError("compression_ratio: arguments must be positive", "keep_tokens");
  return static_cast<double>(bits) * (kept + 2) / (32.0 * (patches + 1));
}

}  // namespace tsflora
