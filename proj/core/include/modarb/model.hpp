#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modarb/interventions.hpp"
#include "modarb/numkit.hpp"
#include "modarb/sample.hpp"

namespace modarb::model {

using numkit::Matrix;

struct SegmentLengths {
  std::size_t n_vis = 16;
  std::size_t n_ctx = 16;
  std::size_t n_ins = 12;
  std::size_t n_gen = 1;
  std::size_t total() const { return n_vis + n_ctx + n_ins + n_gen; }
};

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t heads = 8;
  std::size_t model_dim = 64;
  std::size_t head_dim = 8;
  std::size_t mlp_hidden = 256;
  std::size_t vocab_size = 512;
  SegmentLengths segments;
  bool final_norm_for_lens = true;
  TokenId gen_token = 0;
  std::string nonlinearity = "gelu";  // recorded in result provenance

  void validate() const;
};

// Contiguous, ordered, disjoint index ranges covering [0, N):
// visual tokens, text context, instruction, generation slot.
struct SegmentMap {
  std::size_t vis_begin = 0, vis_end = 0;
  std::size_t ctx_begin = 0, ctx_end = 0;
  std::size_t ins_begin = 0, ins_end = 0;
  std::size_t gen_begin = 0, gen_end = 0;
  std::size_t total = 0;

  std::vector<std::size_t> vis() const { return range(vis_begin, vis_end); }
  std::vector<std::size_t> ctx() const { return range(ctx_begin, ctx_end); }
  std::vector<std::size_t> ins() const { return range(ins_begin, ins_end); }
  std::vector<std::size_t> gen() const { return range(gen_begin, gen_end); }
  std::size_t gen_pos() const { return gen_begin; }

 private:
  static std::vector<std::size_t> range(std::size_t a, std::size_t b) {
    std::vector<std::size_t> r;
    for (std::size_t i = a; i < b; ++i) r.push_back(i);
    return r;
  }
};

struct LayerWeights {
  std::vector<Matrix> wq, wk, wv;  // per head, d x d_k
  std::vector<Matrix> wo;          // per head, d_k x d
  Matrix mlp_in;                   // d x d_ff
  std::vector<double> mlp_b1;      // d_ff
  Matrix mlp_out;                  // d_ff x d
  std::vector<double> mlp_b2;      // d
  std::vector<double> attn_norm_gain, attn_norm_bias;
  std::vector<double> mlp_norm_gain, mlp_norm_bias;
};

struct Weights {
  ModelConfig config;
  Matrix embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Matrix unembed;  // vocab x d
  std::vector<double> final_norm_gain, final_norm_bias;
};

// Shared readout block so traces stay self-contained (and importable traces
// carry their own unembedding) without duplicating the matrix per sample.
struct Readout {
  Matrix unembed;
  std::vector<double> final_norm_gain, final_norm_bias;
  bool final_norm_for_lens = true;
};

enum class TraceDetail {
  Full,        // attention matrices + per-head contributions retained
  StatesOnly,  // residual states / sublayer outputs only (population sweeps)
};

struct ForwardTrace {
  std::size_t layers = 0, heads = 0, seq_len = 0, model_dim = 0, vocab_size = 0;
  SegmentMap segmap;
  std::string plan_id;
  TraceDetail detail = TraceDetail::Full;

  std::vector<Matrix> states;       // H^0 .. H^L, (L+1) x (N x d)
  std::vector<Matrix> attn_out;     // A^l, L x (N x d)
  std::vector<Matrix> post_attn;    // H^{l-1} + A^l
  std::vector<Matrix> mlp_out;      // F^l
  std::vector<std::vector<Matrix>> head_contrib;  // [l][h] projected, N x d
  std::vector<std::vector<Matrix>> attn;          // [l][h], N x N
  std::vector<double> final_logits;
  std::vector<double> final_dist;

  std::shared_ptr<const Readout> readout;

  const Matrix& residual_in(std::size_t l) const { return states[l]; }
  const Matrix& residual_out(std::size_t l) const { return states[l + 1]; }
};

Weights build_model(const ModelConfig& config, std::uint64_t seed);

std::pair<std::vector<TokenId>, SegmentMap> assemble_input(const ConflictSample& sample,
                                                           const ModelConfig& config);

ForwardTrace forward(const Weights& weights, const std::vector<TokenId>& tokens,
                     const SegmentMap& segmap, const iv::InterventionPlan& plan = {},
                     TraceDetail detail = TraceDetail::Full);

// Logit-lens readout E_u (optionally final-norm of) h_position^layer.
// `layer` indexes residual states: 0 is the embedding, L the final state.
std::vector<double> logits_at(const ForwardTrace& trace, std::size_t layer,
                              std::size_t position, bool normalize);

std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace modarb::model
