#include "tsflora/analysis.hpp"

#include <cmath>
#include <utility>

#include "tsflora/wire.hpp"

namespace tsflora {

namespace {

double per_client(const std::vector<double>& values, std::size_t n, const char* key) {
  if (values.size() == 1) return values.front();
  if (n >= values.size()) throw ConfigError(std::string(key) + ": needs one value per client or a single value", key);
  return values[n];
}

}  // namespace

double delta(int q, double d) {
  if (q < 1 || q > 62) throw ConfigError("delta: q must lie in [1, 62]", "bits");
  if (!(d >= 1.0)) throw ConfigError("delta: d must be at least 1", "d");
  return (1.0 + std::sqrt(2.0 * d - 1.0)) / (2.0 * (std::ldexp(1.0, q) - 1.0));
}

void BoundConstants::validate() const {
  auto require = [](bool ok, const char* key, const char* what) {
    if (!ok) throw ConfigError(std::string(key) + ": " + what, key);
  };
  require(kappa > 0.0, "kappa", "must be positive");
  require(gamma > 0.0, "gamma", "must be positive");
  require(smoothness > 0.0, "smoothness", "must be positive");
  require(epsilon2 >= 0.0, "epsilon2", "must be non-negative");
  require(psi >= 0.0, "psi", "must be non-negative");
  require(lambda >= 0.0, "lambda", "must be non-negative");
  require(clients >= 1 && local_steps >= 1 && rounds >= 1, "clients", "V, I and T must be positive");
  require(!eta.empty(), "eta", "needs at least one value");
  require(eta.size() == 1 || eta.size() == static_cast<std::size_t>(rounds), "eta", "needs one value per round");
  for (double e : eta) require(e > 0.0 && e <= 1.0 / (4.0 * smoothness), "eta", "must lie in (0, 1/(4S)]");
  const std::pair<const std::vector<double>*, const char*> per_client_fields[] = {
      {&sigma2, "sigma2"}, {&participation, "participation"}, {&weights, "weights"}};
  for (const auto& [vec, key] : per_client_fields) {
    require(vec->size() == 1 || vec->size() == static_cast<std::size_t>(clients), key,
            "needs one value per client or a single value");
  }
  for (double s : sigma2) require(s >= 0.0, "sigma2", "must be non-negative");
  for (double u : participation) require(u > 0.0, "participation", "must be positive");
  for (double w : weights) require(w >= 0.0, "weights", "must be non-negative");
}

double r_term(int q, int kept, const BoundConstants& c, int patches, int batch, double d) {
  if (!(c.kappa > 0.0)) throw ConfigError("r_term: kappa must be positive", "kappa");
  if (c.rounds < 1 || c.eta.empty()) throw ConfigError("r_term: need T >= 1 and a step size", "rounds");
  double eta_sq = 0.0;
  for (int t = 0; t < c.rounds; ++t) {
    const double e = c.eta.size() == 1 ? c.eta.front() : c.eta.at(static_cast<std::size_t>(t));
    eta_sq += e * e;
  }
  const double g2 = c.gamma * c.gamma;
  const double quantization = 2.0 * g2 * (1.0 + c.kappa) * c.lambda * delta(q, d);
  const double selection = 8.0 * g2 * (1.0 + 1.0 / c.kappa) * c.psi * batch * static_cast<double>(patches - kept);
  double clients = 0.0;
  for (int n = 0; n < c.clients; ++n) {
    const auto i = static_cast<std::size_t>(n);
    const double rho = per_client(c.weights, i, "weights");
    const double upsilon = per_client(c.participation, i, "participation");
    const double sigma2 = per_client(c.sigma2, i, "sigma2");
    clients += (rho * rho + 1.0) / upsilon * (2.0 * sigma2 + quantization + selection);
  }
  const double prefactor = 8.0 * c.clients * c.smoothness * c.local_steps / static_cast<double>(c.rounds);
  return prefactor * eta_sq * clients;
}

ActivationConstants measure_constants(std::span<const Tensor3d> activations, std::span<const Tensor3d> refined) {
  if (activations.empty() || refined.empty()) throw ConfigError("measure_constants: need at least one batch", "batches");
  ActivationConstants out;
  for (const auto& a : activations) out.psi = std::max(out.psi, max_token_energy(a));
  for (const auto& r : refined) out.lambda += r.rows().squaredNorm();
  out.lambda /= static_cast<double>(refined.size());
  return out;
}

ActivationConstants measure_constants(const SplitModel& model, std::span<const Matrix> batches, int kept) {
  if (batches.empty()) throw ConfigError("measure_constants: need at least one batch", "batches");
  std::vector<Tensor3d> acts;
  std::vector<Tensor3d> refined;
  for (const Matrix& batch : batches) {
    DeviceForwardOutput dev = device_forward(model, batch);
    refined.push_back(refine(dev.activations, cls_scores(dev.cls_patch_logits), kept).tokens);
    acts.push_back(std::move(dev.activations));
  }
  return measure_constants(acts, refined);
}

void SearchSpace::validate(int patches, int blocks) const {
  if (cuts.empty()) throw ConfigError("search: cut candidates are empty", "search_cuts");
  for (int e : cuts) {
    if (e < 1 || e > blocks) throw ConfigError("search: cut " + std::to_string(e) + " outside [1, E]", "search_cuts");
  }
  if (k_min < 1 || k_max > patches || k_min > k_max) {
    throw ConfigError("search: K range must satisfy 1 <= k_min <= k_max <= M", "search_k_min");
  }
  if (bits.empty()) throw ConfigError("search: bit set is empty", "search_bits");
  for (int q : bits) {
    if (!is_allowed_bit_width(q)) throw ConfigError("search: q=" + std::to_string(q) + " not allowed", "search_bits");
  }
  if (!(c_max_bits > 0.0)) throw ConfigError("search: c_max_bits must be positive", "c_max_bits");
  if (!(memory_budget_bytes > 0.0)) throw ConfigError("search: memory budget must be positive", "memory_budget_bytes");
}

SearchResult grid_search_P(const SearchSpace& space, const BoundConstants& consts, const ModelConfig& model, int batch) {
  space.validate(model.patches, model.blocks);
  const MemoryModel memory{model, batch};
  const auto b = static_cast<std::uint64_t>(batch);
  const auto dim = static_cast<std::uint64_t>(model.dim);

  SearchResult best;
  bool any_cut = false;
  bool any_payload = false;
  for (int e : space.cuts) {
    const bool cut_ok = memory.peak_bytes(e) <= space.memory_budget_bytes;
    any_cut = any_cut || cut_ok;
    for (int k = space.k_min; k <= space.k_max; ++k) {
      for (int q : space.bits) {
        const std::uint64_t payload = payload_bits(b, static_cast<std::uint64_t>(k), dim, static_cast<std::uint64_t>(q));
        const bool payload_ok = static_cast<double>(payload) <= space.c_max_bits;
        any_payload = any_payload || payload_ok;
        if (!cut_ok || !payload_ok) continue;
        const double d = static_cast<double>(b * (static_cast<std::uint64_t>(k) + 2) * dim);
        const double r = r_term(q, k, consts, model.patches, batch, d);
        const bool better = !best.feasible || r < best.r || (r == best.r && payload < best.payload) ||
                            (r == best.r && payload == best.payload && e < best.cut);
        if (better) best = {true, e, k, q, r, payload, {}};
      }
    }
  }
  if (!best.feasible) {
    if (!any_cut) best.binding.emplace_back("memory");
    if (!any_payload) best.binding.emplace_back("payload");
  }
  return best;
}

}  // namespace tsflora
