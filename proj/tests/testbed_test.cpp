#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "doctest.h"
#include "modarb/interventions.hpp"
#include "modarb/metrics.hpp"
#include "modarb/model.hpp"
#include "modarb/testbed.hpp"

using namespace modarb;

TEST_CASE("vocabulary pools are disjoint and group lookup works") {
  const auto vocab = testbed::Vocabulary::standard(512);
  vocab.validate();
  CHECK(vocab.answer_groups.size() == 7);
  for (const auto& g : vocab.answer_groups) CHECK(g.size() == 10);
  for (std::size_t g = 0; g < vocab.answer_groups.size(); ++g)
    for (TokenId t : vocab.answer_groups[g]) CHECK(vocab.group_of(t) == g);
  CHECK_THROWS_AS(vocab.group_of(vocab.ctx_fillers[0]), Error);
  CHECK_THROWS_AS(testbed::Vocabulary::standard(100), Error);
}

TEST_CASE("sample generation is deterministic and seed sensitive") {
  const auto vocab = testbed::Vocabulary::standard(512);
  model::ModelConfig cfg;
  const auto a = testbed::gen_conflict_samples(10, 4, vocab, cfg);
  const auto b = testbed::gen_conflict_samples(10, 4, vocab, cfg);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(a[i].vis_tokens == b[i].vis_tokens);
    CHECK(a[i].ctx_tokens == b[i].ctx_tokens);
    CHECK(a[i].ins_tokens == b[i].ins_tokens);
    CHECK(a[i].entities_vision == b[i].entities_vision);
    CHECK(a[i].kind == b[i].kind);
  }
  const auto c = testbed::gen_conflict_samples(10, 5, vocab, cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < 10; ++i)
    if (a[i].vis_tokens != c[i].vis_tokens || a[i].ins_tokens != c[i].ins_tokens)
      any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("sample invariants") {
  const auto vocab = testbed::Vocabulary::standard(512);
  model::ModelConfig cfg;
  for (std::size_t n : {std::size_t(40), std::size_t(41)}) {
    const auto samples = testbed::gen_conflict_samples(n, 9, vocab, cfg);
    std::size_t n_vision = 0;
    for (const auto& s : samples) {
      CHECK(s.answer_vision != s.answer_text);
      CHECK(vocab.group_of(s.answer_vision) != vocab.group_of(s.answer_text));
      CHECK(s.entities_vision.size() <= 10);
      CHECK(s.entities_text.size() <= 10);
      CHECK(!s.entities_vision.empty());
      // dictionaries are disjoint and each contains its canonical answer's group
      std::set<TokenId> ev(s.entities_vision.begin(), s.entities_vision.end());
      for (TokenId t : s.entities_text) CHECK(ev.count(t) == 0);
      for (TokenId t : s.entities_vision)
        CHECK(vocab.group_of(t) == vocab.group_of(s.answer_vision));
      for (TokenId t : s.entities_text)
        CHECK(vocab.group_of(t) == vocab.group_of(s.answer_text));
      // the instruction opens with the matching marker
      REQUIRE(!s.ins_tokens.empty());
      CHECK(s.ins_tokens[0] == (s.kind == InstructionKind::Vision ? vocab.marker_vision
                                                                  : vocab.marker_text));
      if (s.kind == InstructionKind::Vision) ++n_vision;
    }
    const std::size_t n_text = samples.size() - n_vision;
    CHECK((n_vision > n_text ? n_vision - n_text : n_text - n_vision) <= 1);
  }
}

TEST_CASE("segment size that exhausts a filler pool raises") {
  const auto vocab = testbed::Vocabulary::standard(512);
  model::ModelConfig cfg;
  cfg.segments = {200, 16, 12, 1};  // only 64 distinct vision fillers exist
  CHECK_THROWS_AS(testbed::gen_conflict_samples(1, 1, vocab, cfg), Error);
}

TEST_CASE("planted model follows the instruction on every sample") {
  model::ModelConfig cfg;
  const auto vocab = testbed::Vocabulary::standard(512);
  const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
  const auto w = testbed::build_planted_model(cfg, spec, vocab, 2);
  const auto samples = testbed::gen_conflict_samples(50, 3, vocab, cfg);
  for (const auto& s : samples) {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    const auto tr = model::forward(w, tokens, segmap, {});
    CHECK(metrics::follows_instruction(tr, s));
  }
}

TEST_CASE("relay heads carry the instructed modality's attention mass") {
  model::ModelConfig cfg;
  const auto vocab = testbed::Vocabulary::standard(512);
  const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
  const auto w = testbed::build_planted_model(cfg, spec, vocab, 2);
  const auto samples = testbed::gen_conflict_samples(10, 4, vocab, cfg);
  for (const auto& s : samples) {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    const auto tr = model::forward(w, tokens, segmap, {}, model::TraceDetail::Full);
    auto mass_into = [&](std::size_t head, const std::vector<std::size_t>& src) {
      double total = 0.0;
      for (auto i : segmap.ins())
        for (auto j : src) total += tr.attn[spec.relay_layer][head](i, j);
      return total / double(segmap.ins().size());
    };
    CHECK(mass_into(spec.relay_head_vision, segmap.vis()) > 0.8);
    CHECK(mass_into(spec.relay_head_text, segmap.ctx()) > 0.8);
    CHECK(mass_into(spec.relay_head_vision, segmap.ctx()) < 0.1);
    CHECK(mass_into(spec.relay_head_text, segmap.vis()) < 0.1);
  }
}

TEST_CASE("blocking both relay heads breaks instruction following") {
  model::ModelConfig cfg;
  const auto vocab = testbed::Vocabulary::standard(512);
  const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
  const auto w = testbed::build_planted_model(cfg, spec, vocab, 2);
  const auto samples = testbed::gen_conflict_samples(40, 5, vocab, cfg);
  iv::InterventionPlan plan;
  std::size_t followed = 0;
  for (const auto& s : samples) {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    iv::InterventionPlan p;
    p.blocks.push_back(iv::make_head_block({{spec.relay_layer, spec.relay_head_vision},
                                            {spec.relay_layer, spec.relay_head_text}},
                                           segmap.ins()));
    const auto tr = model::forward(w, tokens, segmap, p);
    if (metrics::follows_instruction(tr, s)) ++followed;
  }
  CHECK(double(followed) / double(samples.size()) <= 0.5);
}

TEST_CASE("inertia calibration finds a strength that breaks some samples") {
  model::ModelConfig cfg;
  const auto vocab = testbed::Vocabulary::standard(512);
  auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
  const auto samples = testbed::gen_conflict_samples(40, 6, vocab, cfg);
  const std::vector<double> grid{0.5, 1.0, 2.0, 4.0, 8.0};
  const double strength =
      testbed::calibrate_inertia(cfg, spec, vocab, 2, samples, grid, 0.2);
  CHECK(std::find(grid.begin(), grid.end(), strength) != grid.end());

  spec.inertia_strength = strength;
  const auto w = testbed::build_planted_model(cfg, spec, vocab, 2);
  std::size_t failed = 0;
  for (const auto& s : samples) {
    auto [tokens, segmap] = model::assemble_input(s, cfg);
    if (!metrics::follows_instruction(model::forward(w, tokens, segmap, {}), s)) ++failed;
  }
  CHECK(double(failed) / double(samples.size()) >= 0.2);
}

TEST_CASE("samples survive a jsonl round trip") {
  const auto vocab = testbed::Vocabulary::standard(512);
  model::ModelConfig cfg;
  const auto samples = testbed::gen_conflict_samples(8, 7, vocab, cfg);
  const std::string path = "testbed_roundtrip.jsonl";
  testbed::write_samples_jsonl(path, samples);
  const auto back = testbed::read_samples_jsonl(path, vocab, cfg);
  std::remove(path.c_str());
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].id == samples[i].id);
    CHECK(back[i].query == samples[i].query);
    CHECK(back[i].vis_tokens == samples[i].vis_tokens);
    CHECK(back[i].ctx_tokens == samples[i].ctx_tokens);
    CHECK(back[i].ins_tokens == samples[i].ins_tokens);
    CHECK(back[i].kind == samples[i].kind);
    CHECK(back[i].answer_vision == samples[i].answer_vision);
    CHECK(back[i].answer_text == samples[i].answer_text);
    CHECK(back[i].entities_vision == samples[i].entities_vision);
    CHECK(back[i].entities_text == samples[i].entities_text);
  }
  CHECK_THROWS_AS(testbed::read_samples_jsonl("no_such_file.jsonl", vocab, cfg), Error);
}
