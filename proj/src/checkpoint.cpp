#include "tsflora/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "tsflora/bytes.hpp"

namespace tsflora {

namespace {

void put_matrix(ByteWriter& w, const Matrix& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) w.put<double>(m(i, j));
  }
}

Matrix get_matrix(ByteReader& r, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = r.get<double>("tensor");
  }
  return m;
}

RowVector get_row(ByteReader& r, Index cols) { return get_matrix(r, 1, cols); }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const SplitModel& model) {
  const ModelConfig& cfg = model.config;
  const Backbone& bb = *model.backbone;
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.put_tag("TSFL");
  w.put<std::uint16_t>(kCheckpointVersion);
  for (int v : {cfg.blocks, cfg.dim, cfg.patches, cfg.patch_dim, cfg.heads, cfg.rank, cfg.classes, cfg.cut}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.lora_site));
  w.put<double>(cfg.lora_scale);
  w.put<double>(cfg.init_std);
  w.put<double>(cfg.lora_init_std);
  w.put<double>(cfg.ln_eps);

  put_matrix(w, bb.embed.patch_proj);
  put_matrix(w, bb.embed.cls);
  put_matrix(w, bb.embed.position);
  for (const auto& b : bb.blocks) {
    for (const Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) put_matrix(w, *m);
    for (const RowVector* v : {&b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta}) put_matrix(w, *v);
  }
  put_matrix(w, bb.norm_gamma);
  put_matrix(w, bb.norm_beta);
  for (const AdapterSet* set : {&model.device, &model.server}) {
    for (const auto& a : *set) {
      if (a.u.rows() != cfg.dim || a.u.cols() != cfg.rank || a.v.rows() != cfg.rank || a.v.cols() != cfg.dim) {
        throw DimensionError("encode_checkpoint: adapter U" + shape_string(a.u) + " V" + shape_string(a.v));
      }
      put_matrix(w, a.u);
      put_matrix(w, a.v);
    }
  }
  put_matrix(w, model.head);
  return out;
}

SplitModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("TSFL");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw DecodeError(DecodeErrorKind::kBadVersion, "checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  for (int* field : {&cfg.blocks, &cfg.dim, &cfg.patches, &cfg.patch_dim, &cfg.heads, &cfg.rank, &cfg.classes,
                     &cfg.cut}) {
    const auto v = r.get<std::uint32_t>("config");
    if (v > 1'000'000U) throw DecodeError(DecodeErrorKind::kBadField, "config field out of range");
    *field = static_cast<int>(v);
  }
  const auto site = r.get<std::uint8_t>("lora_site");
  if (site > 3) throw DecodeError(DecodeErrorKind::kBadField, "lora_site " + std::to_string(site));
  cfg.lora_site = static_cast<LoraSite>(site);
  cfg.lora_scale = r.get<double>("lora_scale");
  cfg.init_std = r.get<double>("init_std");
  cfg.lora_init_std = r.get<double>("lora_init_std");
  cfg.ln_eps = r.get<double>("ln_eps");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DecodeError(DecodeErrorKind::kBadField, e.what());
  }

  const Index d = cfg.dim;
  auto bb = std::make_shared<Backbone>();
  bb->embed.patch_proj = get_matrix(r, cfg.patch_dim, d);
  bb->embed.cls = get_row(r, d);
  bb->embed.position = get_matrix(r, cfg.tokens(), d);
  for (int l = 0; l < cfg.blocks; ++l) {
    BlockParams b;
    b.wq = get_matrix(r, d, d);
    b.wk = get_matrix(r, d, d);
    b.wv = get_matrix(r, d, d);
    b.wo = get_matrix(r, d, d);
    b.w1 = get_matrix(r, d, cfg.hidden());
    b.w2 = get_matrix(r, cfg.hidden(), d);
    b.ln1_gamma = get_row(r, d);
    b.ln1_beta = get_row(r, d);
    b.ln2_gamma = get_row(r, d);
    b.ln2_beta = get_row(r, d);
    bb->blocks.push_back(std::move(b));
  }
  bb->norm_gamma = get_row(r, d);
  bb->norm_beta = get_row(r, d);

  SplitModel model;
  model.config = cfg;
  for (int l = 0; l < cfg.blocks; ++l) {
    LoraAdapter a{get_matrix(r, d, cfg.rank), get_matrix(r, cfg.rank, d)};
    (l < cfg.cut ? model.device : model.server).push_back(std::move(a));
  }
  model.head = get_matrix(r, d, cfg.classes);
  if (r.remaining() != 0) {
    throw DecodeError(DecodeErrorKind::kTrailingBytes, std::to_string(r.remaining()) + " bytes after head");
  }
  model.backbone = std::move(bb);
  return model;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string(), "path");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string(), "path");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, const SplitModel& model) {
  write_file(path, encode_checkpoint(model));
}

SplitModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace tsflora
