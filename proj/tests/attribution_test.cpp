#include <cmath>
#include <string>

#include "doctest.h"
#include "modarb/attribution.hpp"
#include "modarb/metrics.hpp"
#include "modarb/model.hpp"
#include "modarb/testbed.hpp"

using namespace modarb;
using metrics::SignalConfig;

namespace {

struct Fixture {
  model::ModelConfig cfg;
  testbed::Vocabulary vocab = testbed::Vocabulary::standard(512);
  model::Weights planted;
  model::Weights random;
  std::vector<ConflictSample> samples;

  Fixture() {
    const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
    planted = testbed::build_planted_model(cfg, spec, vocab, 2);
    random = model::build_model(cfg, 12);
    samples = testbed::gen_conflict_samples(4, 51, vocab, cfg);
  }

  model::ForwardTrace trace(const model::Weights& w, const ConflictSample& s,
                            const iv::InterventionPlan& plan = {}) const {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    return model::forward(w, tokens, segmap, plan, model::TraceDetail::Full);
  }
};

attr::MetricFn margin_for(const model::ForwardTrace& tr, const ConflictSample& s,
                          const SignalConfig& sig) {
  const auto& followed =
      s.kind == InstructionKind::Vision ? s.entities_vision : s.entities_text;
  const auto& other =
      s.kind == InstructionKind::Vision ? s.entities_text : s.entities_vision;
  return attr::make_margin_metric(tr.readout, tr.segmap, followed, other, sig);
}

}  // namespace

TEST_CASE("sublayer deltas telescope to the end-to-end metric change") {
  const Fixture f;
  SignalConfig sig;
  for (const model::Weights* w : {&f.planted, &f.random}) {
    for (const auto& s : f.samples) {
      const auto tr = f.trace(*w, s);
      for (const auto& metric :
           {margin_for(tr, s, sig),
            attr::make_phi_metric(tr.readout, tr.segmap, s.entities_vision, sig)}) {
        const auto d = attr::sublayer_deltas(tr, metric);
        double sum = 0.0;
        for (std::size_t l = 0; l < f.cfg.layers; ++l) sum += d.attn[l] + d.mlp[l];
        const double end_to_end = metric(tr.states.back()) - metric(tr.states.front());
        CHECK(std::abs(sum - end_to_end) <= 1e-8);
      }
    }
  }
}

TEST_CASE("planted model routes everything through attention") {
  const Fixture f;
  SignalConfig sig;
  sig.final_norm = false;  // keep the metric linear so a zero MLP gives a zero delta
  const auto tr = f.trace(f.planted, f.samples[0]);
  const auto d = attr::sublayer_deltas(tr, margin_for(tr, f.samples[0], sig));
  for (std::size_t l = 0; l < f.cfg.layers; ++l) CHECK(d.mlp[l] == 0.0);
}

TEST_CASE("head deltas of a linear metric sum to the sublayer delta") {
  const Fixture f;
  const auto tr = f.trace(f.random, f.samples[1]);
  std::vector<double> weights(f.cfg.model_dim);
  numkit::Rng rng(77);
  for (double& x : weights) x = rng.gaussian();
  const auto metric = attr::make_linear_metric(weights, tr.segmap.gen_pos());
  const auto per_head = attr::head_deltas(tr, metric);
  const auto d = attr::sublayer_deltas(tr, metric);
  for (std::size_t l = 0; l < f.cfg.layers; ++l) {
    double sum = 0.0;
    for (std::size_t h = 0; h < f.cfg.heads; ++h) sum += per_head[l][h];
    CHECK(std::abs(sum - d.attn[l]) <= 1e-8);
  }
}

TEST_CASE("a head with no contribution gets a zero delta") {
  const Fixture f;
  const auto& s = f.samples[2];
  iv::InterventionPlan plan;
  auto [tokens, segmap] = model::assemble_input(s, f.cfg);
  std::vector<std::size_t> all_pos;
  for (std::size_t i = 0; i < segmap.total; ++i) all_pos.push_back(i);
  plan.blocks.push_back(iv::make_head_block({{4, 6}}, all_pos));
  const auto tr = f.trace(f.random, s, plan);
  SignalConfig sig;
  const auto per_head = attr::head_deltas(tr, margin_for(tr, s, sig));
  CHECK(per_head[4][6] == 0.0);
}

TEST_CASE("accumulated ranking is a deterministic mean with stable tie breaks") {
  attr::HeadAccumulator acc(2, 2);
  acc.add({{1.0, 3.0}, {3.0, -2.0}});
  acc.add({{3.0, 3.0}, {3.0, 0.0}});
  const auto r = acc.ranking();
  REQUIRE(r.size() == 4);
  // means: (0,0)=2, (0,1)=3, (1,0)=3, (1,1)=-1; the tie at 3 breaks on layer
  CHECK(r[0].layer == 0);
  CHECK(r[0].head == 1);
  CHECK(r[1].layer == 1);
  CHECK(r[1].head == 0);
  CHECK(r[2].mean_delta == doctest::Approx(2.0));
  CHECK(r[3].mean_delta == doctest::Approx(-1.0));
  for (const auto& hs : r) CHECK(hs.n == 2);

  const auto abs_r = acc.ranking(true);
  CHECK(abs_r[2].mean_delta == doctest::Approx(2.0));

  const auto csv = attr::ranking_to_csv(r);
  CHECK(csv.rfind("layer,head,mean_delta,n\n", 0) == 0);
  CHECK(csv.find("0,1,3") != std::string::npos);
}

TEST_CASE("top intersection respects the first ranking's order") {
  attr::HeadAccumulator a(1, 3), b(1, 3);
  a.add({{3.0, 2.0, 1.0}});
  b.add({{1.0, 3.0, 2.0}});
  const auto ra = a.ranking(), rb = b.ranking();
  const auto both = attr::top_intersection(ra, rb, 2);
  REQUIRE(both.size() == 1);
  CHECK(both[0] == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(attr::top_intersection(ra, ra, 2).size() == 2);
}

TEST_CASE("planted arbitration heads dominate the margin change at their layer") {
  const Fixture f;
  const auto spec = testbed::PlantedCircuitSpec::default_for(f.cfg);
  SignalConfig sig;
  attr::HeadAccumulator acc(f.cfg.layers, f.cfg.heads);
  const auto samples = testbed::gen_conflict_samples(20, 52, f.vocab, f.cfg);
  for (const auto& s : samples) {
    const auto tr = f.trace(f.planted, s);
    acc.add(attr::head_deltas(tr, margin_for(tr, s, sig)));
  }
  const auto r = acc.ranking(true);
  // the three designated heads outrank everything else at their layer, and
  // heads the builder never wired contribute exactly nothing
  std::size_t seen = 0;
  const auto wired = spec.circuit_heads();
  for (const auto& hs : r) {
    if (hs.layer != spec.arbitration_layer) continue;
    const bool designated =
        std::find(spec.arbitration_heads.begin(), spec.arbitration_heads.end(),
                  std::make_pair(hs.layer, hs.head)) != spec.arbitration_heads.end();
    if (seen < 3) CHECK(designated);
    ++seen;
    const bool in_circuit = std::find(wired.begin(), wired.end(),
                                      std::make_pair(hs.layer, hs.head)) != wired.end();
    if (!in_circuit) CHECK(hs.mean_delta == 0.0);
  }
  CHECK(seen == f.cfg.heads);
}
