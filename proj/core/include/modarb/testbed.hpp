#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modarb/model.hpp"
#include "modarb/sample.hpp"

namespace modarb::testbed {

// Token-id layout for the synthetic vocabulary: disjoint pools for answer
// surface-form groups, a simulated visual range, per-segment fillers, and
// one instruction-marker token per modality.
struct Vocabulary {
  std::size_t vocab_size = 512;
  TokenId gen_token = 0;
  TokenId marker_vision = 1;
  TokenId marker_text = 2;
  std::vector<std::vector<TokenId>> answer_groups;  // text-space surface forms
  std::vector<TokenId> vis_answers;                 // one visual token per group
  std::vector<TokenId> vis_fillers;
  std::vector<TokenId> ctx_fillers;
  std::vector<TokenId> ins_fillers;
  std::vector<TokenId> query_pool;

  static Vocabulary standard(std::size_t vocab_size = 512);
  void validate() const;

  std::size_t group_of(TokenId answer) const;  // throws for non-answer tokens
  std::vector<TokenId> instruction_tokens(InstructionKind kind, std::size_t n_ins) const;
};

// Placement of the hand-built circuit. Relay heads copy each context
// modality's answer signal to the instruction positions; arbitration heads
// select between the buffered signals based on the instruction marker; an
// inheritance head at arbitration_layer+1 copies the decision to the
// generation slot.
struct PlantedCircuitSpec {
  std::size_t relay_layer = 1;
  std::size_t relay_head_vision = 0;
  std::size_t relay_head_text = 1;
  std::size_t arbitration_layer = 5;
  // (layer, head) pairs of the designated arbitration set. Filled by
  // default_for() as {(arb,0),(arb,1),(arb,2)}: vision gate, text gate,
  // shared hub.
  std::vector<std::pair<std::size_t, std::size_t>> arbitration_heads;
  double inertia_strength = 0.0;
  double noise_scale = 0.0;

  static PlantedCircuitSpec default_for(const model::ModelConfig& config);
  void validate(const model::ModelConfig& config) const;

  std::size_t prep_layer() const { return (relay_layer + arbitration_layer) / 2; }
  std::size_t inherit_layer() const { return arbitration_layer + 1; }
  std::pair<std::size_t, std::size_t> shared_head() const { return {arbitration_layer, 2}; }
  std::pair<std::size_t, std::size_t> inherit_head() const { return {inherit_layer(), 0}; }
  // every head the builder wires up (ingest, relays, broadcast, prep gates,
  // arbitration set plus the prior head, inheritance); useful as an exclusion
  // set when drawing control heads
  std::vector<std::pair<std::size_t, std::size_t>> circuit_heads() const;
};

std::vector<ConflictSample> gen_conflict_samples(std::size_t n, std::uint64_t seed,
                                                 const Vocabulary& vocab,
                                                 const model::ModelConfig& config);

model::Weights build_planted_model(const model::ModelConfig& config,
                                   const PlantedCircuitSpec& spec, const Vocabulary& vocab,
                                   std::uint64_t seed);

// Smallest inertia strength from `grid` for which at least `min_fail_frac`
// of the samples stop following the instruction.
double calibrate_inertia(const model::ModelConfig& config, PlantedCircuitSpec spec,
                         const Vocabulary& vocab, std::uint64_t seed,
                         const std::vector<ConflictSample>& samples,
                         const std::vector<double>& grid, double min_fail_frac = 0.2);

void write_samples_jsonl(const std::string& path, const std::vector<ConflictSample>& samples);
std::vector<ConflictSample> read_samples_jsonl(const std::string& path, const Vocabulary& vocab,
                                               const model::ModelConfig& config);

}  // namespace modarb::testbed
