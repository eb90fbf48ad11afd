// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails. Every tolerance and runtime limit is a constant below.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "support.hpp"
#include "tsflora/analysis.hpp"
#include "tsflora/errors.hpp"
#include "tsflora/wire.hpp"

using namespace tsflora;
using namespace tsflora::testing;

namespace {

// 1
constexpr int kUnbiasedDraws = 100000;
constexpr double kUnbiasedSigmas = 3.0;
constexpr double kUnbiasedSeconds = 10.0;
// 2
constexpr int kVarianceTensors = 50;
constexpr int kVarianceDraws = 2000;
constexpr Index kVarianceMaxEntries = 64;
constexpr double kVarianceSeconds = 10.0;
// 3
constexpr int kSelectionInstances = 100;
constexpr Index kSelectionMaxPatches = 16;
constexpr Index kSelectionMaxBatch = 4;
// 4
constexpr double kGradRelErr = 1e-5;
constexpr double kGradStep = 1e-5;
constexpr double kGradSeconds = 30.0;
// 5
constexpr int kAdjointCases = 100;
constexpr double kAdjointTol = 1e-10;
// 6
constexpr int kIdentityRounds = 5;
constexpr double kIdentityTol = 1e-9;
// 7
constexpr int kAccountingShapes = 1000;
constexpr std::uint64_t kVitBasePayloadBytes = 153600;
// 8
constexpr double kRatioTol = 1e-12;
// 9
constexpr double kLearningMinAccuracy = 0.90;
constexpr double kLearningMaxGap = 0.05;
constexpr double kLearningSeconds = 300.0;
// 10
constexpr int kSearchInstances = 20;
constexpr double kSearchSeconds = 5.0;
// 11
constexpr int kFuzzBuffers = 1000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

Outcome quantizer_unbiased() {
  const auto start = Clock::now();
  Tensor3d probe(1, 2, 3);
  probe.rows() << 0.37, -1.25, 0.0, 2.5, -0.004, 1.0;
  bool ok = true;
  double worst = 0.0;  // |mean - x| / (sigma / sqrt N)
  for (int q : {2, 4, 8}) {
    Rng rng = Rng::derive(101, static_cast<std::uint64_t>(q));
    Matrix sum = Matrix::Zero(2, 3);
    Matrix sum_sq = Matrix::Zero(2, 3);
    for (int i = 0; i < kUnbiasedDraws; ++i) {
      const Matrix y = dequantize(quantize(probe, q, rng)).rows();
      sum += y;
      sum_sq += y.cwiseProduct(y);
    }
    for (Index i = 0; i < sum.size(); ++i) {
      const double mean = sum.data()[i] / kUnbiasedDraws;
      const double var = std::max(0.0, sum_sq.data()[i] / kUnbiasedDraws - mean * mean);
      const double se = std::sqrt(var / kUnbiasedDraws);
      const double err = std::abs(mean - probe.rows().data()[i]);
      if (se == 0.0) {
        ok = ok && err < 1e-12;
      } else {
        worst = std::max(worst, err / se);
        ok = ok && err <= kUnbiasedSigmas * se;
      }
    }
  }
  const double t = seconds_since(start);
  return {ok && t < kUnbiasedSeconds, "worst |mean-x| = " + fmt(worst) + " sigma/sqrt(N), " + fmt(t) + " s"};
}

Outcome quantizer_variance() {
  const auto start = Clock::now();
  Rng rng(202);
  int violations = 0;
  double worst = 0.0;  // empirical / bound
  for (int n = 0; n < kVarianceTensors; ++n) {
    const Index b = 1 + static_cast<Index>(rng.below(2));
    const Index t = 1 + static_cast<Index>(rng.below(4));
    const Index d = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(kVarianceMaxEntries / (b * t))));
    const Tensor3d a = random_tensor(b, t, d, rng, 0.1 + 4.0 * rng.uniform());
    const double energy = a.rows().squaredNorm();
    const double dim = static_cast<double>(b * t * d);
    for (int q : {2, 4, 8}) {
      double err = 0.0;
      for (int i = 0; i < kVarianceDraws; ++i) err += (dequantize(quantize(a, q, rng)).rows() - a.rows()).squaredNorm();
      err /= kVarianceDraws;
      const double bound = delta(q, dim) * energy;
      worst = std::max(worst, err / bound);
      if (err > bound) ++violations;
    }
  }
  const double t = seconds_since(start);
  return {violations == 0 && t < kVarianceSeconds,
          std::to_string(violations) + " violations, max E||Q(A)-A||^2 / bound = " + fmt(worst) + ", " + fmt(t) + " s"};
}

Outcome selection_distortion_bound() {
  Rng rng(303);
  int violations = 0;
  double worst = 0.0;
  for (int n = 0; n < kSelectionInstances; ++n) {
    const Index b = 1 + static_cast<Index>(rng.below(kSelectionMaxBatch));
    const Index m = 1 + static_cast<Index>(rng.below(kSelectionMaxPatches));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
    const Tensor3d a = random_tensor(b, m + 1, 1 + static_cast<Index>(rng.below(8)), rng, 0.1 + 3.0 * rng.uniform());
    const RefinedActivations ref = refine(a, cls_scores(gaussian(b, m, 3.0, rng)), k);
    const double dist = selection_distortion(a, ref);
    const double bound = 4.0 * max_token_energy(a) * static_cast<double>(m - k) * static_cast<double>(b);
    if (dist > bound) ++violations;
    if (bound > 0.0) worst = std::max(worst, dist / bound);
  }
  return {violations == 0, std::to_string(violations) + " violations, max distortion / bound = " + fmt(worst)};
}

Outcome gradient_correctness() {
  const auto start = Clock::now();
  ModelConfig cfg;
  cfg.blocks = 2;
  cfg.cut = 1;
  cfg.dim = 8;
  cfg.patches = 4;
  cfg.patch_dim = 3;
  cfg.rank = 2;
  cfg.classes = 3;
  cfg.init_std = 0.3;
  double worst = 0.0;
  for (LoraSite site : {LoraSite::kQuery, LoraSite::kKey, LoraSite::kValue, LoraSite::kOutput}) {
    cfg.lora_site = site;
    Rng rng(404);
    SplitModel model = randomised_model(cfg, rng);
    const Matrix x = gaussian(2, cfg.patches * cfg.patch_dim, 1.0, rng);
    const std::vector<int> labels{0, 2};
    const PipelineGrads g = pipeline_grads(model, x, labels, cfg.patches);
    auto loss = [&] { return pipeline_loss(model, x, labels, cfg.patches); };
    for (std::size_t l = 0; l < model.device.size(); ++l) {
      worst = std::max(worst, fd_check(model.device[l].u, g.device[l].u, loss, kGradStep));
      worst = std::max(worst, fd_check(model.device[l].v, g.device[l].v, loss, kGradStep));
    }
    for (std::size_t l = 0; l < model.server.size(); ++l) {
      worst = std::max(worst, fd_check(model.server[l].u, g.server[l].u, loss, kGradStep));
      worst = std::max(worst, fd_check(model.server[l].v, g.server[l].v, loss, kGradStep));
    }
    worst = std::max(worst, fd_check(model.head, g.head, loss, kGradStep));
  }
  const double t = seconds_since(start);
  return {worst < kGradRelErr && t < kGradSeconds, "max rel-err " + fmt(worst) + " over 4 LoRA sites, " + fmt(t) + " s"};
}

Outcome adjoint_property() {
  Rng rng(505);
  double worst = 0.0;
  for (int n = 0; n < kAdjointCases; ++n) {
    const Index b = 1 + static_cast<Index>(rng.below(4));
    const Index m = 1 + static_cast<Index>(rng.below(12));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
    const Index d = 1 + static_cast<Index>(rng.below(6));
    const Tensor3d a = random_tensor(b, m + 1, d, rng);
    const RefinedActivations ref = refine(a, cls_scores(gaussian(b, m, 2.0, rng)), k);
    const Tensor3d g = random_tensor(b, k + 2, d, rng);
    const double lhs = refine_linear(a, ref).rows().cwiseProduct(g.rows()).sum();
    const double rhs = a.rows().cwiseProduct(grad_scatter(g, ref, static_cast<int>(m)).rows()).sum();
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return {worst <= kAdjointTol, "max |<refine(A),G> - <A,scatter(G)>| = " + fmt(worst)};
}

Outcome identity_equivalence() {
  const LearningTask t = learning_task(9, 32, 606);
  LearningTask u = t;
  u.train.pipeline = Pipeline::kUncompressed;
  FederationState compressed = start(t);
  FederationState plain = start(u);
  double worst = 0.0;
  for (int r = 0; r < kIdentityRounds; ++r) {
    (void)run_round(compressed, t.train, r);
    (void)run_round(plain, u.train, r);
    worst = std::max(worst, max_adapter_diff(compressed.model.device, plain.model.device));
    worst = std::max(worst, max_adapter_diff(compressed.model.server, plain.model.server));
    worst = std::max(worst, (compressed.model.head - plain.model.head).cwiseAbs().maxCoeff());
  }
  return {worst <= kIdentityTol, "max adapter diff after " + std::to_string(kIdentityRounds) + " rounds = " + fmt(worst)};
}

Outcome payload_accounting() {
  Rng rng(707);
  int mismatches = 0;
  for (int n = 0; n < kAccountingShapes; ++n) {
    const Index b = 1 + static_cast<Index>(rng.below(6));
    const Index m = 1 + static_cast<Index>(rng.below(20));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
    const Index d = 1 + static_cast<Index>(rng.below(12));
    const int q = kAllowedBitWidths[rng.below(std::size(kAllowedBitWidths))];
    const Tensor3d a = random_tensor(b, m + 1, d, rng);
    const RefinedActivations ref = refine(a, cls_scores(gaussian(b, m, 1.0, rng)), k);
    const auto bytes = encode_activations(quantize(ref.tokens, q, rng), ref.indices,
                                          MessageMeta{0, 0, static_cast<std::uint16_t>(m), ref.merged_present});
    const auto ub = static_cast<std::uint64_t>(b);
    const auto uk = static_cast<std::uint64_t>(k);
    const auto ud = static_cast<std::uint64_t>(d);
    const std::uint64_t expected = metadata_bits(ub, uk, ud) / 8 + (ub * (uk + 2) * ud * static_cast<std::uint64_t>(q) + 7) / 8;
    if (bytes.size() != expected) ++mismatches;
  }
  // B=1, 50 tokens (K=48), D=768, q=32.
  Rng rng2(708);
  const Tensor3d big = random_tensor(1, 50, 768, rng2);
  IndexMatrix idx(1, 48);
  for (int j = 0; j < 48; ++j) idx(0, j) = j + 1;
  const auto msg = encode_activations(quantize(big, 32, rng2), idx, MessageMeta{0, 0, 49, true});
  const std::uint64_t vit_base = msg.size() - metadata_bits(1, 48, 768) / 8;
  const bool ok = mismatches == 0 && vit_base == kVitBasePayloadBytes && payload_bits(1, 48, 768, 32) / 8 == vit_base;
  return {ok, std::to_string(mismatches) + " mismatches over " + std::to_string(kAccountingShapes) +
                  " shapes; B=1,50 tokens,D=768,q=32 payload = " + std::to_string(vit_base) + " bytes"};
}

Outcome compression_ratios() {
  const double r4 = compression_ratio(30, 4, 49);
  const double r8 = compression_ratio(30, 8, 49);
  const bool ok = std::abs(r4 - 0.08) <= kRatioTol && (1.0 - r4) > 0.80 && std::abs(r8 - 0.16) <= kRatioTol &&
                  std::abs(1.0 / r8 - 6.25) <= 1e-9;
  return {ok, "M=49,K=30: q=4 ratio " + fmt(r4) + " (" + fmt(100 * (1 - r4)) + "% reduction), q=8 ratio " + fmt(r8) +
                  " (" + fmt(1.0 / r8) + "x)"};
}

Outcome end_to_end_learning() {
  const auto start_time = Clock::now();
  auto run = [](int k, int q) {
    const LearningTask t = learning_task(k, q, 1);
    FederationState state = start(t);
    return train(state, t.train);
  };
  const auto full_a = run(9, 32);
  const auto full_b = run(9, 32);
  const auto comp_a = run(6, 8);
  const auto comp_b = run(6, 8);
  const double full = full_a.back().test_accuracy;
  const double comp = comp_a.back().test_accuracy;
  const bool deterministic = full_a == full_b && comp_a == comp_b;
  const double t = seconds_since(start_time);
  const bool ok = full >= kLearningMinAccuracy && std::abs(full - comp) <= kLearningMaxGap && deterministic &&
                  t < kLearningSeconds;
  return {ok, "acc(K=9,q=32) = " + fmt(full) + ", acc(K=6,q=8) = " + fmt(comp) +
                  (deterministic ? ", repeat runs identical" : ", repeat runs DIFFER") + ", " + fmt(t) + " s for 4 runs"};
}

Outcome grid_search() {
  const auto start_time = Clock::now();
  Rng rng(1010);
  int mismatches = 0;
  int infeasible = 0;
  for (int n = 0; n < kSearchInstances; ++n) {
    const SearchInstance in = random_search_instance(rng);
    const SearchResult got = grid_search_P(in.space, in.consts, in.model, in.batch);
    if (!(got == reference_search(in.space, in.consts, in.model, in.batch))) ++mismatches;
    if (!got.feasible) ++infeasible;
  }
  const double t = seconds_since(start_time);
  return {mismatches == 0 && infeasible > 0 && infeasible < kSearchInstances && t < kSearchSeconds,
          std::to_string(mismatches) + " mismatches, " + std::to_string(infeasible) + " of " +
              std::to_string(kSearchInstances) + " infeasible, " + fmt(t) + " s"};
}

Outcome fuzz_robustness() {
  Rng rng(1111);
  int typed = 0;
  int roundtrips = 0;
  int failures = 0;
  for (int n = 0; n < kFuzzBuffers; ++n) {
    const Index b = 1 + static_cast<Index>(rng.below(3));
    const Index m = 1 + static_cast<Index>(rng.below(8));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
    const Index d = 1 + static_cast<Index>(rng.below(5));
    const int q = kAllowedBitWidths[rng.below(std::size(kAllowedBitWidths))];
    const Tensor3d a = random_tensor(b, m + 1, d, rng);
    const RefinedActivations ref = refine(a, cls_scores(gaussian(b, m, 1.0, rng)), k);
    std::vector<std::uint8_t> buf = encode_activations(quantize(ref.tokens, q, rng), ref.indices,
                                                       MessageMeta{1, 2, static_cast<std::uint16_t>(m), ref.merged_present});
    const int mutations = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < mutations; ++i) {
      switch (rng.below(5)) {
        case 0: buf[rng.below(buf.size())] ^= static_cast<std::uint8_t>(1U << rng.below(8)); break;
        case 1: buf[rng.below(buf.size())] = static_cast<std::uint8_t>(rng.below(256)); break;
        case 2: buf.resize(rng.below(buf.size() + 1)); break;
        case 3: buf.push_back(static_cast<std::uint8_t>(rng.below(256))); break;
        default: {
          // Header fields are the interesting targets.
          const std::size_t pos = rng.below(std::min<std::size_t>(buf.size(), kMessageHeaderBytes) + 1);
          if (pos < buf.size()) buf[pos] = static_cast<std::uint8_t>(rng.below(256));
        }
      }
      if (buf.empty()) break;
    }
    try {
      const ActivationMessage msg = decode_activations(buf);
      const auto again = encode_activations(msg.quantized, msg.indices, msg.meta);
      if (again == buf) {
        ++roundtrips;
      } else {
        ++failures;
      }
    } catch (const DecodeError&) {
      ++typed;
    } catch (...) {
      ++failures;
    }
  }
  return {failures == 0, std::to_string(typed) + " typed decode errors, " + std::to_string(roundtrips) +
                             " faithful round-trips, " + std::to_string(failures) + " other outcomes"};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"quantizer unbiasedness", quantizer_unbiased},
      {"quantizer variance bound", quantizer_variance},
      {"selection distortion bound", selection_distortion_bound},
      {"split-pipeline gradient correctness", gradient_correctness},
      {"grad_scatter adjoint", adjoint_property},
      {"identity-pipeline equivalence", identity_equivalence},
      {"payload accounting", payload_accounting},
      {"compression-ratio claims", compression_ratios},
      {"end-to-end learning", end_to_end_learning},
      {"grid search vs enumerator", grid_search},
      {"decode fuzz robustness", fuzz_robustness},
  };
  int failed = 0;
  int id = 0;
  for (const auto& [name, check] : criteria) {
    ++id;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", id - failed, id);
  return failed == 0 ? 0 : 1;
}
