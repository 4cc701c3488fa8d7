#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "modarb/metrics.hpp"
#include "modarb/model.hpp"
#include "modarb/testbed.hpp"

using namespace modarb;
using metrics::DecisionSubspace;
using metrics::DictAgg;
using metrics::SignalConfig;

namespace {

// full-vocabulary distribution with the given mass on two tokens and the
// remainder spread over a third slot
std::vector<double> dist_with(std::size_t vocab, TokenId a, double ma, TokenId b, double mb) {
  std::vector<double> d(vocab, 0.0);
  d[a] = ma;
  d[b] = mb;
  d[vocab - 1] = 1.0 - ma - mb;
  return d;
}

struct PlantedRun {
  model::ModelConfig cfg;
  testbed::Vocabulary vocab = testbed::Vocabulary::standard(512);
  model::Weights weights;
  std::vector<ConflictSample> samples;

  explicit PlantedRun(std::size_t n, std::uint64_t seed) {
    const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
    weights = testbed::build_planted_model(cfg, spec, vocab, 2);
    samples = testbed::gen_conflict_samples(n, seed, vocab, cfg);
  }

  model::ForwardTrace trace(const ConflictSample& s) const {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    return model::forward(weights, tokens, segmap, {});
  }
};

}  // namespace

TEST_CASE("binary renormalization") {
  const DecisionSubspace ds{3, 7};
  const auto d = dist_with(16, 3, 0.3, 7, 0.1);
  const auto tp = metrics::binary_renormalize(d, ds);
  CHECK(tp.p == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(tp.c == doctest::Approx(0.25).epsilon(1e-12));

  const auto flipped = metrics::binary_renormalize(d, DecisionSubspace{7, 3});
  CHECK(flipped.p == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(tp.p + tp.c == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(metrics::binary_renormalize(dist_with(16, 3, 0.0, 7, 0.0), ds), Error);
  CHECK_THROWS_AS(metrics::binary_renormalize(d, DecisionSubspace{3, 3}), Error);
}

TEST_CASE("signed subspace divergence reference values") {
  const DecisionSubspace ds{0, 1};
  const auto p90 = dist_with(8, 0, 0.45, 1, 0.05);   // renormalizes to (0.9, 0.1)
  const auto p50 = dist_with(8, 0, 0.2, 1, 0.2);     // renormalizes to (0.5, 0.5)

  CHECK(metrics::nssd(p90, p90, ds) == 0.0);
  CHECK(metrics::nssd(p50, p50, ds) == 0.0);

  // compliance dropped: positive, magnitude KL((.9,.1)||(.5,.5))
  CHECK(std::abs(metrics::nssd(p90, p50, ds) - 0.36806420716849707) < 1e-5);
  // compliance rose: negative, magnitude KL((.5,.5)||(.9,.1))
  CHECK(std::abs(metrics::nssd(p50, p90, ds) + 0.51082562376599068) < 1e-5);
}

TEST_CASE("signed subspace divergence sign law and magnitude") {
  numkit::Rng rng(31);
  const DecisionSubspace ds{2, 5};
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = 0.01 + 0.98 * rng.next_double();
    const double b = 0.01 + 0.98 * rng.next_double();
    const auto clean = dist_with(8, 2, 0.5 * a, 5, 0.5 * (1 - a));
    const auto edited = dist_with(8, 2, 0.5 * b, 5, 0.5 * (1 - b));
    const double v = metrics::nssd(clean, edited, ds);
    if (a > b)
      CHECK(v > 0.0);
    else if (a < b)
      CHECK(v < 0.0);
    else
      CHECK(v == 0.0);
    const double kl = numkit::kl_divergence({a, 1 - a}, {b, 1 - b});
    CHECK(std::abs(std::abs(v) - kl) < 1e-12);
  }
}

TEST_CASE("dictionary signal reductions") {
  const PlantedRun run(3, 41);
  const auto& s = run.samples[0];
  const auto tr = run.trace(s);
  const auto ins = tr.segmap.ins();

  SignalConfig cfg;  // top_k = 1
  SUBCASE("top one equals the best position score") {
    for (std::size_t layer : {std::size_t(0), std::size_t(4), std::size_t(8)}) {
      double best = -1e300;
      for (std::size_t pos : ins) {
        const auto logits = model::logits_at(tr, layer, pos, cfg.final_norm);
        double sum = 0.0;
        for (TokenId t : s.entities_vision) sum += logits.at(t);
        best = std::max(best, sum / double(s.entities_vision.size()));
      }
      CHECK(metrics::signal_phi(tr, layer, s.entities_vision, cfg) ==
            doctest::Approx(best).epsilon(1e-12));
    }
  }

  SUBCASE("singleton dictionary makes max and avg coincide") {
    const std::vector<TokenId> one{s.answer_vision};
    SignalConfig mx = cfg;
    mx.agg = DictAgg::Max;
    CHECK(metrics::signal_phi(tr, 5, one, cfg) == metrics::signal_phi(tr, 5, one, mx));
  }

  SUBCASE("max aggregation is monotone under dictionary growth") {
    SignalConfig mx = cfg;
    mx.agg = DictAgg::Max;
    std::vector<TokenId> small(s.entities_vision.begin(), s.entities_vision.begin() + 2);
    std::vector<TokenId> grown = small;
    grown.insert(grown.end(), s.entities_text.begin(), s.entities_text.end());
    for (std::size_t layer = 0; layer <= run.cfg.layers; ++layer)
      CHECK(metrics::signal_phi(tr, layer, grown, mx) >=
            metrics::signal_phi(tr, layer, small, mx));
  }

  SUBCASE("top_k beyond the instruction length raises") {
    SignalConfig wide = cfg;
    wide.top_k = ins.size() + 1;
    CHECK_THROWS_AS(metrics::signal_phi(tr, 3, s.entities_vision, wide), Error);
    wide.top_k = 0;
    CHECK_THROWS_AS(metrics::signal_phi(tr, 3, s.entities_vision, wide), Error);
  }
}

TEST_CASE("behavioral choice and instruction following on the planted model") {
  const PlantedRun run(20, 43);
  SignalConfig cfg;
  for (const auto& s : run.samples) {
    const auto tr = run.trace(s);
    const TokenId y = metrics::behavioral_choice(tr, s);
    const auto pool = metrics::dict_union(s);
    CHECK(std::find(pool.begin(), pool.end(), y) != pool.end());
    CHECK(metrics::follows_instruction(tr, s));

    // at the top layer lens and behavior agree, and both sides of the stream
    // have settled on the same dictionary
    const auto profile = metrics::alignment_profile(tr, s, cfg);
    REQUIRE(profile.size() == run.cfg.layers + 1);
    CHECK(profile.back());
    CHECK(metrics::decision_synced(tr, s, run.cfg.layers, cfg));
  }
}

TEST_CASE("overlapping dictionaries are rejected") {
  const PlantedRun run(1, 44);
  auto s = run.samples[0];
  s.entities_text.push_back(s.entities_vision[0]);
  CHECK_THROWS_AS(metrics::dict_union(s), Error);
}

TEST_CASE("equal-score ties count as not synchronized") {
  const PlantedRun run(1, 45);
  auto s = run.samples[0];
  const auto tr = run.trace(s);
  // identical dictionaries on both sides force an exact anchor tie
  s.entities_text = s.entities_vision;
  std::reverse(s.entities_text.begin(), s.entities_text.end());
  SignalConfig cfg;
  for (std::size_t layer = 0; layer <= run.cfg.layers; ++layer)
    CHECK_FALSE(metrics::decision_synced(tr, s, layer, cfg));
}
