#include "tsflora/model.hpp"

#include <cmath>

namespace tsflora {

namespace {

BlockParams init_block(const ModelConfig& cfg, Rng& rng) {
  const Index d = cfg.dim;
  const double s = cfg.init_std;
  BlockParams p;
  p.wq = gaussian(d, d, s, rng);
  p.wk = gaussian(d, d, s, rng);
  p.wv = gaussian(d, d, s, rng);
  p.wo = gaussian(d, d, s, rng);
  p.w1 = gaussian(d, cfg.hidden(), s, rng);
  p.w2 = gaussian(cfg.hidden(), d, s, rng);
  p.ln1_gamma = RowVector::Ones(d);
  p.ln1_beta = RowVector::Zero(d);
  p.ln2_gamma = RowVector::Ones(d);
  p.ln2_beta = RowVector::Zero(d);
  return p;
}

LoraAdapter init_adapter(const ModelConfig& cfg, Rng& rng) {
  return {gaussian(cfg.dim, cfg.rank, cfg.lora_init_std, rng), Matrix::Zero(cfg.rank, cfg.dim)};
}

bool has_delta(const LoraAdapter& a) { return a.u.size() != 0; }

Matrix effective(const Matrix& w, const LoraAdapter& a, LoraSite site, LoraSite target, double scale) {
  if (site != target || !has_delta(a)) return w;
  return w + a.delta(scale);
}

Matrix block_forward(const BlockParams& p, const LoraAdapter& adapter, const ModelConfig& cfg,
                     const Matrix& x, Index batch, Index tokens, BlockCache& c) {
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  c.batch = batch;
  c.tokens = tokens;
  c.input = x;
  c.normed1 = layer_norm(x, p.ln1_gamma, p.ln1_beta, cfg.ln_eps, &c.ln1);
  c.wq = effective(p.wq, adapter, cfg.lora_site, LoraSite::kQuery, cfg.lora_scale);
  c.wk = effective(p.wk, adapter, cfg.lora_site, LoraSite::kKey, cfg.lora_scale);
  c.wv = effective(p.wv, adapter, cfg.lora_site, LoraSite::kValue, cfg.lora_scale);
  c.wo = effective(p.wo, adapter, cfg.lora_site, LoraSite::kOutput, cfg.lora_scale);
  c.query = c.normed1 * c.wq;
  c.key = c.normed1 * c.wk;
  c.value = c.normed1 * c.wv;
  c.probs.resize(static_cast<std::size_t>(batch));
  c.mixed.resize(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b) {
    const auto q = c.query.middleRows(b * tokens, tokens);
    const auto k = c.key.middleRows(b * tokens, tokens);
    const auto v = c.value.middleRows(b * tokens, tokens);
    Matrix& probs = c.probs[static_cast<std::size_t>(b)];
    probs = softmax_rows((q * k.transpose()) * attn_scale);
    c.mixed.middleRows(b * tokens, tokens) = probs * v;
  }
  c.residual = x + c.mixed * c.wo;
  c.normed2 = layer_norm(c.residual, p.ln2_gamma, p.ln2_beta, cfg.ln_eps, &c.ln2);
  c.pre_gelu = c.normed2 * p.w1;
  c.post_gelu = gelu(c.pre_gelu);
  return c.residual + c.post_gelu * p.w2;
}

struct BlockBackward {
  Matrix dx;
  LoraAdapter grad;
};

BlockBackward block_backward(const BlockParams& p, const LoraAdapter& adapter, const ModelConfig& cfg,
                             const BlockCache& c, const Matrix& dy, bool need_dx) {
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  const Index batch = c.batch;
  const Index tokens = c.tokens;

  // MLP branch.
  const Matrix dpost = dy * p.w2.transpose();
  const Matrix dpre = gelu_backward(c.pre_gelu, dpost);
  const Matrix dnormed2 = dpre * p.w1.transpose();
  const Matrix dresidual = dy + layer_norm_backward(dnormed2, p.ln2_gamma, c.ln2).dx;

  // Attention branch.
  const Matrix dmixed = dresidual * c.wo.transpose();
  Matrix dquery(c.query.rows(), c.query.cols());
  Matrix dkey(c.key.rows(), c.key.cols());
  Matrix dvalue(c.value.rows(), c.value.cols());
  for (Index b = 0; b < batch; ++b) {
    const Matrix& probs = c.probs[static_cast<std::size_t>(b)];
    const auto q = c.query.middleRows(b * tokens, tokens);
    const auto k = c.key.middleRows(b * tokens, tokens);
    const auto v = c.value.middleRows(b * tokens, tokens);
    const auto dm = dmixed.middleRows(b * tokens, tokens);
    const Matrix dprobs = dm * v.transpose();
    dvalue.middleRows(b * tokens, tokens) = probs.transpose() * dm;
    const Matrix dscores = softmax_rows_backward(probs, dprobs) * attn_scale;
    dquery.middleRows(b * tokens, tokens) = dscores * k;
    dkey.middleRows(b * tokens, tokens) = dscores.transpose() * q;
  }

  BlockBackward out;
  if (has_delta(adapter)) {
    Matrix dw;
    switch (cfg.lora_site) {
      case LoraSite::kQuery: dw = c.normed1.transpose() * dquery; break;
      case LoraSite::kKey: dw = c.normed1.transpose() * dkey; break;
      case LoraSite::kValue: dw = c.normed1.transpose() * dvalue; break;
      case LoraSite::kOutput: dw = c.mixed.transpose() * dresidual; break;
    }
    // W_eff = W + s U V  =>  dU = s dW V^T,  dV = s U^T dW
    out.grad.u = cfg.lora_scale * (dw * adapter.v.transpose());
    out.grad.v = cfg.lora_scale * (adapter.u.transpose() * dw);
  }
  if (need_dx) {
    const Matrix dnormed1 = dquery * c.wq.transpose() + dkey * c.wk.transpose() + dvalue * c.wv.transpose();
    out.dx = dresidual + layer_norm_backward(dnormed1, p.ln1_gamma, c.ln1).dx;
  }
  return out;
}

void check_adapters(const AdapterSet& set, std::size_t expected, const ModelConfig& cfg, const char* side) {
  if (set.size() != expected) {
    throw DimensionError(std::string(side) + " adapter count " + std::to_string(set.size()) +
                         " != " + std::to_string(expected));
  }
  for (const auto& a : set) {
    if (!has_delta(a)) continue;
    if (a.u.rows() != cfg.dim || a.u.cols() != cfg.rank || a.v.rows() != cfg.rank || a.v.cols() != cfg.dim) {
      throw DimensionError(std::string(side) + " adapter shapes U" + shape_string(a.u) + " V" +
                           shape_string(a.v));
    }
  }
}

std::uint64_t matrix_fingerprint(const Matrix& m, std::uint64_t seed) {
  return fingerprint(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), seed);
}

}  // namespace

const char* to_string(LoraSite site) noexcept {
  switch (site) {
    case LoraSite::kQuery: return "query";
    case LoraSite::kKey: return "key";
    case LoraSite::kValue: return "value";
    case LoraSite::kOutput: return "output";
  }
  return "query";
}

LoraSite parse_lora_site(const std::string& name) {
  if (name == "query" || name == "q") return LoraSite::kQuery;
  if (name == "key" || name == "k") return LoraSite::kKey;
  if (name == "value" || name == "v") return LoraSite::kValue;
  if (name == "output" || name == "o") return LoraSite::kOutput;
  throw ConfigError("unknown lora_site '" + name + "'", "lora_site");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(std::string(key) + ": " + what, key);
  };
  require(blocks >= 1, "blocks", "need at least one block");
  require(dim >= 1, "dim", "must be positive");
  require(patches >= 1, "patches", "must be positive");
  require(patches <= 65535, "patches", "must fit in u16");
  require(patch_dim >= 1, "patch_dim", "must be positive");
  require(heads >= 1 && dim % heads == 0, "heads", "dim must be divisible by heads");
  require(heads == 1, "heads", "only single-head attention is supported");
  require(rank >= 1, "rank", "must be at least 1");
  require(rank < dim, "rank", "must be below dim");
  require(classes >= 2, "classes", "need at least two classes");
  require(cut >= 1 && cut <= blocks, "cut", "must lie in [1, blocks]");
  require(std::isfinite(lora_scale), "lora_scale", "must be finite");
  require(init_std > 0.0 && std::isfinite(init_std), "init_std", "must be positive");
  require(lora_init_std > 0.0 && std::isfinite(lora_init_std), "lora_init_std", "must be positive");
  require(ln_eps > 0.0, "ln_eps", "must be positive");
}

SplitModel init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  auto backbone = std::make_shared<Backbone>();
  backbone->embed.patch_proj = gaussian(cfg.patch_dim, cfg.dim, cfg.init_std, rng);
  backbone->embed.cls = gaussian(1, cfg.dim, cfg.init_std, rng);
  backbone->embed.position = gaussian(cfg.tokens(), cfg.dim, cfg.init_std, rng);
  for (int l = 0; l < cfg.blocks; ++l) backbone->blocks.push_back(init_block(cfg, rng));
  backbone->norm_gamma = RowVector::Ones(cfg.dim);
  backbone->norm_beta = RowVector::Zero(cfg.dim);

  SplitModel model;
  model.config = cfg;
  for (int l = 0; l < cfg.blocks; ++l) {
    (l < cfg.cut ? model.device : model.server).push_back(init_adapter(cfg, rng));
  }
  model.head = gaussian(cfg.dim, cfg.classes, cfg.init_std, rng);
  model.backbone = std::move(backbone);
  return model;
}

SplitModel without_adapters(const SplitModel& model) {
  SplitModel bare = model;
  for (auto& a : bare.device) a = LoraAdapter{};
  for (auto& a : bare.server) a = LoraAdapter{};
  return bare;
}

DeviceForwardOutput device_forward(const SplitModel& model, const Matrix& batch) {
  const ModelConfig& cfg = model.config;
  const Backbone& bb = *model.backbone;
  const Index in_width = static_cast<Index>(cfg.patches) * cfg.patch_dim;
  if (batch.cols() != in_width) {
    throw DimensionError("device_forward: batch " + shape_string(batch) + " expects " +
                         std::to_string(in_width) + " features per sample");
  }
  check_adapters(model.device, static_cast<std::size_t>(cfg.cut), cfg, "device");
  const Index b_count = batch.rows();
  const Index tokens = cfg.tokens();

  Matrix x(b_count * tokens, cfg.dim);
  for (Index b = 0; b < b_count; ++b) {
    x.row(b * tokens) = bb.embed.cls + bb.embed.position.row(0);
    for (Index i = 0; i < cfg.patches; ++i) {
      const auto patch = batch.row(b).segment(i * cfg.patch_dim, cfg.patch_dim);
      x.row(b * tokens + 1 + i) = patch * bb.embed.patch_proj + bb.embed.position.row(1 + i);
    }
  }

  DeviceForwardOutput out;
  out.cache.batch = b_count;
  out.cache.adapter_fingerprint = fingerprint(model.device);
  out.cache.blocks.resize(static_cast<std::size_t>(cfg.cut));
  for (int l = 0; l < cfg.cut; ++l) {
    x = block_forward(bb.blocks[static_cast<std::size_t>(l)], model.device[static_cast<std::size_t>(l)], cfg,
                      x, b_count, tokens, out.cache.blocks[static_cast<std::size_t>(l)]);
  }

  const BlockCache& last = out.cache.blocks.back();
  out.cls_patch_logits.resize(b_count, cfg.patches);
  for (Index b = 0; b < b_count; ++b) {
    const auto q0 = last.query.row(b * tokens);
    for (Index i = 0; i < cfg.patches; ++i) {
      out.cls_patch_logits(b, i) = q0.dot(last.key.row(b * tokens + 1 + i));
    }
  }
  out.activations = Tensor3d(b_count, tokens, std::move(x));
  return out;
}

ServerForwardOutput server_forward(const SplitModel& model, const Tensor3d& acts) {
  const ModelConfig& cfg = model.config;
  const Backbone& bb = *model.backbone;
  if (acts.dim() != cfg.dim) {
    throw DimensionError("server_forward: activations " + acts.shape() + " but model dim is " +
                         std::to_string(cfg.dim));
  }
  if (acts.tokens() < 1) throw DimensionError("server_forward: need at least one token, got " + acts.shape());
  check_adapters(model.server, static_cast<std::size_t>(cfg.server_blocks()), cfg, "server");
  if (model.head.rows() != cfg.dim || model.head.cols() != cfg.classes) {
    throw DimensionError("server_forward: head " + shape_string(model.head));
  }

  ServerForwardOutput out;
  ServerCache& c = out.cache;
  c.batch = acts.batch();
  c.tokens = acts.tokens();
  c.state_fingerprint = server_fingerprint(model);
  c.blocks.resize(static_cast<std::size_t>(cfg.server_blocks()));
  Matrix x = acts.rows();
  for (int l = 0; l < cfg.server_blocks(); ++l) {
    x = block_forward(bb.blocks[static_cast<std::size_t>(cfg.cut + l)], model.server[static_cast<std::size_t>(l)],
                      cfg, x, c.batch, c.tokens, c.blocks[static_cast<std::size_t>(l)]);
  }
  Matrix cls(c.batch, cfg.dim);
  for (Index b = 0; b < c.batch; ++b) cls.row(b) = x.row(b * c.tokens);
  c.cls_normed = layer_norm(cls, bb.norm_gamma, bb.norm_beta, cfg.ln_eps, &c.final_ln);
  out.logits = c.cls_normed * model.head;
  return out;
}

ServerGrads server_backward(const SplitModel& model, const ServerCache& cache, const Matrix& dlogits) {
  const ModelConfig& cfg = model.config;
  const Backbone& bb = *model.backbone;
  if (cache.state_fingerprint != server_fingerprint(model)) {
    throw StaleCacheError("server_backward: server adapters or head changed since the forward pass");
  }
  if (dlogits.rows() != cache.batch || dlogits.cols() != cfg.classes) {
    throw DimensionError("server_backward: dlogits " + shape_string(dlogits) + " for batch " +
                         std::to_string(cache.batch) + " and " + std::to_string(cfg.classes) + " classes");
  }
  ServerGrads g;
  g.head = cache.cls_normed.transpose() * dlogits;
  const Matrix dnormed = dlogits * model.head.transpose();
  const Matrix dcls = layer_norm_backward(dnormed, bb.norm_gamma, cache.final_ln).dx;

  Matrix dx = Matrix::Zero(cache.batch * cache.tokens, cfg.dim);
  for (Index b = 0; b < cache.batch; ++b) dx.row(b * cache.tokens) = dcls.row(b);

  g.adapters.resize(static_cast<std::size_t>(cfg.server_blocks()));
  for (int l = cfg.server_blocks() - 1; l >= 0; --l) {
    const auto idx = static_cast<std::size_t>(l);
    BlockBackward step = block_backward(bb.blocks[static_cast<std::size_t>(cfg.cut + l)], model.server[idx], cfg,
                                        cache.blocks[idx], dx, true);
    dx = std::move(step.dx);
    g.adapters[idx] = std::move(step.grad);
  }
  g.dacts = Tensor3d(cache.batch, cache.tokens, std::move(dx));
  return g;
}

AdapterSet device_backward(const SplitModel& model, const DeviceCache& cache, const Tensor3d& dacts_full) {
  const ModelConfig& cfg = model.config;
  const Backbone& bb = *model.backbone;
  if (cache.adapter_fingerprint != fingerprint(model.device) ||
      cache.blocks.size() != static_cast<std::size_t>(cfg.cut)) {
    throw StaleCacheError("device_backward: device adapters changed since the forward pass");
  }
  if (dacts_full.batch() != cache.batch || dacts_full.tokens() != cfg.tokens() || dacts_full.dim() != cfg.dim) {
    throw DimensionError("device_backward: gradient " + dacts_full.shape() + " expects [" +
                         std::to_string(cache.batch) + "x" + std::to_string(cfg.tokens()) + "x" +
                         std::to_string(cfg.dim) + "]");
  }
  AdapterSet grads(static_cast<std::size_t>(cfg.cut));
  Matrix dx = dacts_full.rows();
  for (int l = cfg.cut - 1; l >= 0; --l) {
    const auto idx = static_cast<std::size_t>(l);
    BlockBackward step = block_backward(bb.blocks[idx], model.device[idx], cfg, cache.blocks[idx], dx, l > 0);
    dx = std::move(step.dx);
    grads[idx] = std::move(step.grad);
  }
  return grads;
}

Matrix forward_logits(const SplitModel& model, const Matrix& batch) {
  return server_forward(model, device_forward(model, batch).activations).logits;
}

AdapterSet sgd_step(const AdapterSet& adapters, const AdapterSet& grads, double eta) {
  if (adapters.size() != grads.size()) {
    throw DimensionError("sgd_step: " + std::to_string(adapters.size()) + " adapters, " +
                         std::to_string(grads.size()) + " gradients");
  }
  AdapterSet next;
  next.reserve(adapters.size());
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    next.push_back({sgd_step(adapters[i].u, grads[i].u, eta), sgd_step(adapters[i].v, grads[i].v, eta)});
  }
  return next;
}

Matrix sgd_step(const Matrix& param, const Matrix& grad, double eta) {
  if (!(eta >= 0.0)) throw ConfigError("sgd_step: learning rate must be non-negative", "eta");
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw DimensionError("sgd_step: parameter " + shape_string(param) + " vs gradient " + shape_string(grad));
  }
  return param - eta * grad;
}

AdapterSet zero_like(const AdapterSet& adapters) {
  AdapterSet z;
  z.reserve(adapters.size());
  for (const auto& a : adapters) {
    z.push_back({Matrix::Zero(a.u.rows(), a.u.cols()), Matrix::Zero(a.v.rows(), a.v.cols())});
  }
  return z;
}

std::uint64_t fingerprint(const AdapterSet& adapters, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (const auto& a : adapters) {
    h = matrix_fingerprint(a.u, h);
    h = matrix_fingerprint(a.v, h);
  }
  return h;
}

std::uint64_t server_fingerprint(const SplitModel& model) {
  return matrix_fingerprint(model.head, fingerprint(model.server));
}

std::size_t block_param_count(const ModelConfig& cfg) noexcept {
  const auto d = static_cast<std::size_t>(cfg.dim);
  return 4 * d * d + 2 * d * 4 * d + 4 * d;
}

std::size_t adapter_param_count(const ModelConfig& cfg) noexcept {
  return 2 * static_cast<std::size_t>(cfg.dim) * static_cast<std::size_t>(cfg.rank);
}

std::size_t embedder_param_count(const ModelConfig& cfg) noexcept {
  const auto d = static_cast<std::size_t>(cfg.dim);
  return static_cast<std::size_t>(cfg.patch_dim) * d + d + static_cast<std::size_t>(cfg.tokens()) * d;
}

}  // namespace tsflora
