#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tsflora/compression.hpp"
#include "tsflora/model.hpp"
#include "tsflora/numeric.hpp"

namespace tsflora::testing {

inline Tensor3d random_tensor(Index b, Index t, Index d, Rng& rng, double std = 1.0) {
  return Tensor3d(b, t, gaussian(b * t, d, std, rng));
}

inline std::vector<int> random_labels(Index n, int classes, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& y : out) y = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return out;
}

/// Relative error with an absolute floor so near-zero pairs compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Worst relative error between `analytic` and central differences of `loss`
/// over every entry of `param` (perturbed in place, then restored).
inline double fd_check(Matrix& param, const Matrix& analytic, const std::function<double()>& loss,
                       double h = 1e-5) {
  double worst = 0.0;
  for (Index i = 0; i < param.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double up = loss();
    param.data()[i] = saved - h;
    const double down = loss();
    param.data()[i] = saved;
    worst = std::max(worst, rel_err(analytic.data()[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

struct PipelineGrads {
  double loss = 0.0;
  AdapterSet device;
  AdapterSet server;
  Matrix head;
};

/// Device forward, selection/merge with budget K, server pass, and the
/// matching backward (no quantization).
inline PipelineGrads pipeline_grads(const SplitModel& model, const Matrix& x, const std::vector<int>& labels,
                                    int kept) {
  const int m = model.config.patches;
  const DeviceForwardOutput fwd = device_forward(model, x);
  const RefinedActivations ref = refine(fwd.activations, cls_scores(fwd.cls_patch_logits), kept);
  Tensor3d server_in = ref.tokens;
  if (!ref.merged_present) {
    const Index b = ref.tokens.batch();
    const Index t = ref.tokens.tokens() - 1;
    server_in = Tensor3d(b, t, ref.tokens.dim());
    for (Index s = 0; s < b; ++s) server_in.sample(s) = ref.tokens.sample(s).topRows(t);
  }
  const ServerForwardOutput sfwd = server_forward(model, server_in);
  const auto ce = cross_entropy(sfwd.logits, labels);
  const ServerGrads sg = server_backward(model, sfwd.cache, ce.dlogits);
  Tensor3d dtokens(ref.tokens.batch(), ref.tokens.tokens(), ref.tokens.dim());
  for (Index s = 0; s < dtokens.batch(); ++s) {
    dtokens.sample(s).topRows(server_in.tokens()) = sg.dacts.sample(s);
  }
  const Tensor3d dfull = grad_scatter(dtokens, ref, m);
  PipelineGrads out;
  out.loss = ce.loss;
  out.device = device_backward(model, fwd.cache, dfull);
  out.server = sg.adapters;
  out.head = sg.head;
  return out;
}

inline double pipeline_loss(const SplitModel& model, const Matrix& x, const std::vector<int>& labels, int kept) {
  return pipeline_grads(model, x, labels, kept).loss;
}

/// Toy model with every adapter randomised so V != 0 and gradients reach U.
inline SplitModel randomised_model(const ModelConfig& cfg, Rng& rng, double adapter_std = 0.3) {
  SplitModel model = init_model(cfg, rng);
  for (auto* side : {&model.device, &model.server}) {
    for (auto& a : *side) {
      a.u = gaussian(cfg.dim, cfg.rank, adapter_std, rng);
      a.v = gaussian(cfg.rank, cfg.dim, adapter_std, rng);
    }
  }
  model.head = gaussian(cfg.dim, cfg.classes, 0.5, rng);
  return model;
}

}  // namespace tsflora::testing

#include "tsflora/dataset.hpp"
#include "tsflora/federation.hpp"

namespace tsflora::testing {

/// The synthetic 4-class learning task: D=16, M=9, E=4, e=2, V=8 clients,
/// Dirichlet 0.5, T=20 rounds, I=2 local steps.
struct LearningTask {
  ModelConfig model;
  TrainConfig train;
  SyntheticTask data;
};

inline LearningTask learning_task(int kept, int bits, std::uint64_t seed = 1) {
  LearningTask t;
  t.model.blocks = 4;
  t.model.cut = 2;
  t.model.dim = 16;
  t.model.patches = 9;
  t.model.patch_dim = 8;
  t.model.classes = 4;
  t.model.init_std = 0.25;
  t.train.rounds = 20;
  t.train.local_steps = 2;
  t.train.clients = 8;
  t.train.clients_per_round = 8;
  t.train.dirichlet_alpha = 0.5;
  t.train.batch = 16;
  t.train.eta = 0.5;
  t.train.compression = {kept, bits};
  t.train.seed = seed;
  t.data.noise = 0.5;
  return t;
}

inline FederationState start(const LearningTask& t) {
  Rng data_rng = Rng::derive(t.train.seed, 5);
  auto [train_set, test_set] = make_synthetic(t.data, data_rng);
  return init_federation(t.model, t.train, std::move(train_set), std::move(test_set));
}

inline double max_adapter_diff(const AdapterSet& a, const AdapterSet& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    worst = std::max(worst, (a[l].u - b[l].u).cwiseAbs().maxCoeff());
    worst = std::max(worst, (a[l].v - b[l].v).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace tsflora::testing

#include "tsflora/analysis.hpp"

namespace tsflora::testing {

/// Brute-force reference for grid_search_P, written from the formulas
/// alone: plain loops, its own memory, payload and R arithmetic.
inline SearchResult reference_search(const SearchSpace& s, const BoundConstants& c, const ModelConfig& m, int batch) {
  const double D = m.dim;
  const double tokens = m.patches + 1.0;
  const double embed = m.patch_dim * D + D + tokens * D;
  const double block = 12.0 * D * D + 4.0 * D;
  const double adapter = 2.0 * D * m.rank;
  double eta2 = 0.0;
  for (int t = 0; t < c.rounds; ++t) {
    const double e = c.eta.size() == 1 ? c.eta[0] : c.eta[static_cast<std::size_t>(t)];
    eta2 += e * e;
  }
  auto pick = [](const std::vector<double>& v, int n) { return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(n)]; };

  SearchResult best;
  bool mem_ok_any = false;
  bool pay_ok_any = false;
  for (int e : s.cuts) {
    const double mem = 8.0 * (embed + e * (block + adapter)) + 2.0 * batch * tokens * D * e * 8.0;
    if (mem <= s.memory_budget_bytes) mem_ok_any = true;
  }
  for (int k = s.k_min; k <= s.k_max; ++k) {
    for (int q : s.bits) {
      if (static_cast<double>(batch) * (k + 2) * D * q <= s.c_max_bits) pay_ok_any = true;
    }
  }
  for (int e : s.cuts) {
    const double mem = 8.0 * (embed + e * (block + adapter)) + 2.0 * batch * tokens * D * e * 8.0;
    if (mem > s.memory_budget_bytes) continue;
    for (int k = s.k_min; k <= s.k_max; ++k) {
      for (int q : s.bits) {
        const auto payload = static_cast<std::uint64_t>(batch) * static_cast<std::uint64_t>(k + 2) *
                             static_cast<std::uint64_t>(m.dim) * static_cast<std::uint64_t>(q);
        if (static_cast<double>(payload) > s.c_max_bits) continue;
        const double d = static_cast<double>(batch) * (k + 2) * D;
        const double dl = (1.0 + std::sqrt(2.0 * d - 1.0)) / (2.0 * (std::pow(2.0, q) - 1.0));
        double sum = 0.0;
        for (int n = 0; n < c.clients; ++n) {
          const double rho = pick(c.weights, n);
          sum += (rho * rho + 1.0) / pick(c.participation, n) *
                 (2.0 * pick(c.sigma2, n) + 2.0 * c.gamma * c.gamma * (1.0 + c.kappa) * c.lambda * dl +
                  8.0 * c.gamma * c.gamma * (1.0 + 1.0 / c.kappa) * c.psi * batch * (m.patches - k));
        }
        const double r = 8.0 * c.clients * c.smoothness * c.local_steps / c.rounds * eta2 * sum;
        bool take = !best.feasible;
        if (!take) {
          if (r != best.r) {
            take = r < best.r;
          } else if (payload != best.payload) {
            take = payload < best.payload;
          } else {
            take = e < best.cut;
          }
        }
        if (take) best = {true, e, k, q, r, payload, {}};
      }
    }
  }
  if (!best.feasible) {
    if (!mem_ok_any) best.binding.push_back("memory");
    if (!pay_ok_any) best.binding.push_back("payload");
  }
  return best;
}

/// Randomised toy instance for search comparisons. Constants are drawn as
/// dyadic-ish values so that exact ties show up now and then.
struct SearchInstance {
  SearchSpace space;
  BoundConstants consts;
  ModelConfig model;
  int batch = 1;
};

inline SearchInstance random_search_instance(Rng& rng) {
  SearchInstance in;
  in.model.blocks = 2 + static_cast<int>(rng.below(4));
  in.model.dim = 4 * (1 + static_cast<int>(rng.below(4)));
  in.model.patches = 2 + static_cast<int>(rng.below(10));
  in.model.patch_dim = 1 + static_cast<int>(rng.below(8));
  in.model.rank = 1 + static_cast<int>(rng.below(3));
  in.model.cut = 1;
  in.batch = 1 + static_cast<int>(rng.below(8));
  in.space.cuts.clear();
  for (int e = 1; e <= in.model.blocks; ++e) {
    if (rng.uniform() < 0.7) in.space.cuts.push_back(e);
  }
  if (in.space.cuts.empty()) in.space.cuts.push_back(1);
  in.space.k_min = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(in.model.patches)));
  in.space.k_max = in.space.k_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(in.model.patches - in.space.k_min + 1)));
  in.space.bits.clear();
  for (int q : {2, 4, 8, 16, 32}) {
    if (rng.uniform() < 0.6) in.space.bits.push_back(q);
  }
  if (in.space.bits.empty()) in.space.bits.push_back(8);
  const double max_payload = static_cast<double>(in.batch) * (in.space.k_max + 2) * in.model.dim * 32;
  const double mode = rng.uniform();
  in.space.c_max_bits = mode < 0.2 ? std::numeric_limits<double>::infinity() : max_payload * (0.02 + rng.uniform());
  MemoryModel mem{in.model, in.batch};
  const double mem_mode = rng.uniform();
  in.space.memory_budget_bytes = mem_mode < 0.3 ? std::numeric_limits<double>::infinity()
                                                : mem.peak_bytes(in.model.blocks) * (0.2 + rng.uniform());
  in.consts.clients = 1 + static_cast<int>(rng.below(4));
  in.consts.local_steps = 1 + static_cast<int>(rng.below(3));
  in.consts.rounds = 1 + static_cast<int>(rng.below(5));
  in.consts.smoothness = 0.5 + rng.uniform();
  in.consts.eta = {0.1 / in.consts.smoothness};
  in.consts.gamma = 0.25 * (1 + static_cast<int>(rng.below(8)));
  in.consts.kappa = 0.5 * (1 + static_cast<int>(rng.below(4)));
  in.consts.psi = rng.uniform() < 0.2 ? 0.0 : rng.uniform() * 2.0;
  in.consts.lambda = rng.uniform() * 50.0;
  in.consts.sigma2.assign(static_cast<std::size_t>(in.consts.clients), 0.0);
  in.consts.participation.assign(static_cast<std::size_t>(in.consts.clients), 0.0);
  in.consts.weights.assign(static_cast<std::size_t>(in.consts.clients), 0.0);
  for (int n = 0; n < in.consts.clients; ++n) {
    in.consts.sigma2[static_cast<std::size_t>(n)] = rng.uniform();
    in.consts.participation[static_cast<std::size_t>(n)] = 0.2 + 0.8 * rng.uniform();
    in.consts.weights[static_cast<std::size_t>(n)] = 1.0 / in.consts.clients;
  }
  return in;
}

}  // namespace tsflora::testing
