#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "modarb/model.hpp"
#include "modarb/testbed.hpp"
#include "modarb/trace_io.hpp"

using namespace modarb;

namespace {

model::ForwardTrace sample_trace(std::uint64_t seed) {
  model::ModelConfig cfg;
  const auto vocab = testbed::Vocabulary::standard(512);
  const auto spec = testbed::PlantedCircuitSpec::default_for(cfg);
  const auto w = testbed::build_planted_model(cfg, spec, vocab, 2);
  const auto samples = testbed::gen_conflict_samples(1, seed, vocab, cfg);
  auto [tokens, segmap] = model::assemble_input(samples[0], cfg);
  return model::forward(w, tokens, segmap, {}, model::TraceDetail::Full);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace

TEST_CASE("trace container round trip is bit exact") {
  const auto tr = sample_trace(61);
  const std::string path = "trace_roundtrip.altr";
  trace_io::export_trace(path, tr);
  const auto back = trace_io::import_trace(path);

  CHECK(back.layers == tr.layers);
  CHECK(back.seq_len == tr.seq_len);
  CHECK(back.model_dim == tr.model_dim);
  CHECK(back.vocab_size == tr.vocab_size);
  CHECK(back.plan_id == tr.plan_id);
  CHECK(back.segmap.vis_begin == tr.segmap.vis_begin);
  CHECK(back.segmap.ins_begin == tr.segmap.ins_begin);
  CHECK(back.segmap.ins_end == tr.segmap.ins_end);
  CHECK(back.segmap.gen_begin == tr.segmap.gen_begin);
  CHECK(back.segmap.total == tr.segmap.total);

  REQUIRE(back.states.size() == tr.states.size());
  for (std::size_t l = 0; l < tr.states.size(); ++l)
    CHECK(back.states[l].data() == tr.states[l].data());
  REQUIRE(back.post_attn.size() == tr.post_attn.size());
  for (std::size_t l = 0; l < tr.post_attn.size(); ++l)
    CHECK(back.post_attn[l].data() == tr.post_attn[l].data());
  CHECK(back.final_logits == tr.final_logits);
  CHECK(back.final_dist == tr.final_dist);

  // the imported readout drives an identical lens
  for (std::size_t l = 0; l <= tr.layers; ++l)
    for (std::size_t p : {std::size_t(0), tr.seq_len / 2, tr.seq_len - 1})
      CHECK(model::logits_at(back, l, p, true) == model::logits_at(tr, l, p, true));

  // re-export of the import reproduces the file byte for byte
  const std::string path2 = "trace_roundtrip2.altr";
  trace_io::export_trace(path2, back);
  CHECK(slurp(path2) == slurp(path));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("malformed trace containers are rejected") {
  const auto tr = sample_trace(62);
  const std::string path = "trace_bad.altr";
  trace_io::export_trace(path, tr);
  const std::string good = slurp(path);

  SUBCASE("bad magic") {
    std::string bytes = good;
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(trace_io::import_trace(path), Error);
  }
  SUBCASE("unknown version") {
    std::string bytes = good;
    bytes[4] = char(99);
    spit(path, bytes);
    CHECK_THROWS_AS(trace_io::import_trace(path), Error);
  }
  SUBCASE("truncated header") {
    spit(path, good.substr(0, 6));
    CHECK_THROWS_AS(trace_io::import_trace(path), Error);
  }
  SUBCASE("truncated payload") {
    spit(path, good.substr(0, good.size() - 17));
    CHECK_THROWS_AS(trace_io::import_trace(path), Error);
  }
  SUBCASE("trailing bytes") {
    spit(path, good + std::string(8, '\0'));
    CHECK_THROWS_AS(trace_io::import_trace(path), Error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(trace_io::import_trace("definitely_absent.altr"), Error);
  }
  std::remove(path.c_str());
}
