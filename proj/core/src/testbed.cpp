#include "modarb/testbed.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

namespace modarb::testbed {

using model::Matrix;
using model::ModelConfig;
using model::Weights;
using numkit::Rng;

namespace {

// Channel layout inside the model dimension. Payload vectors live in 8-dim
// channels; answer-group payloads are the zero-sum rows of the 8x8 Hadamard
// matrix, so layer-norm mean shifts cancel against any payload readout.
constexpr std::size_t kPayloadDim = 8;
constexpr std::size_t kChPayV = 0;
constexpr std::size_t kChPayT = 8;
constexpr std::size_t kTagVisAns = 16;
constexpr std::size_t kTagTxtAns = 17;
constexpr std::size_t kTagIns = 18;
constexpr std::size_t kTagGen = 19;
constexpr std::size_t kTagKind = 20;
constexpr std::size_t kTagMarker = 21;
constexpr std::size_t kTagKindLocal = 22;
constexpr std::size_t kTagBias = 23;
constexpr std::size_t kChBufV = 24;
constexpr std::size_t kChBufT = 32;
constexpr std::size_t kChMarg = 40;
constexpr std::size_t kChOut = 48;
constexpr std::size_t kTagKindGen = 56;
constexpr std::size_t kMinModelDim = 57;

constexpr double kGateGain = 16.0;   // attention score sharpness
constexpr double kIngestWeight = 0.3;
constexpr double kSharedWeight = 0.15;
constexpr double kPriorWeight = 0.10;  // competitor-favoring prior head
constexpr double kReadoutGain = 4.0;   // unembedding scale for answer tokens
constexpr double kInertiaGain = 2.0;   // clamp output scale

std::vector<double> group_payload(std::size_t g) {
  // Rows 1..7 of the order-8 Hadamard matrix, normalized; row 0 (all ones)
  // is skipped to keep payloads zero-sum.
  std::vector<double> p(kPayloadDim);
  const std::size_t row = g + 1;
  for (std::size_t j = 0; j < kPayloadDim; ++j) {
    const int bits = static_cast<int>(row & j);
    const int parity = __builtin_popcount(static_cast<unsigned>(bits)) & 1;
    p[j] = (parity ? -1.0 : 1.0) / std::sqrt(8.0);
  }
  return p;
}

// Rank-1 bilinear attention pattern: score(i,j) = gain * (qsel.h_i)(ksel.h_j).
void set_pattern(model::LayerWeights& lw, std::size_t head, const std::vector<double>& qsel,
                 const std::vector<double>& ksel, double gain, std::size_t head_dim) {
  const double s = std::sqrt(gain * std::sqrt(double(head_dim)));
  for (std::size_t r = 0; r < qsel.size(); ++r) {
    lw.wq[head](r, 0) = s * qsel[r];
    lw.wk[head](r, 0) = s * ksel[r];
  }
}

std::vector<double> sel(std::size_t d, std::initializer_list<std::pair<std::size_t, double>> terms) {
  std::vector<double> v(d, 0.0);
  for (auto [i, c] : terms) v[i] = c;
  return v;
}

// Value path copies `src` channel coordinates; W_O writes them into `dst`
// with the given weight.
void set_copy(model::LayerWeights& lw, std::size_t head, std::size_t src_ch, std::size_t dst_ch,
              double weight) {
  for (std::size_t j = 0; j < kPayloadDim; ++j) {
    lw.wv[head](src_ch + j, j) = 1.0;
    lw.wo[head](j, dst_ch + j) += weight;
  }
}

void add_value_read(model::LayerWeights& lw, std::size_t head, std::size_t src_ch, double c) {
  for (std::size_t j = 0; j < kPayloadDim; ++j) lw.wv[head](src_ch + j, j) += c;
}

void set_out(model::LayerWeights& lw, std::size_t head, std::size_t dst_ch, double weight) {
  for (std::size_t j = 0; j < kPayloadDim; ++j) lw.wo[head](j, dst_ch + j) = weight;
}

std::vector<TokenId> draw_distinct(Rng& rng, const std::vector<TokenId>& pool, std::size_t n,
                                   const char* what) {
  if (n > pool.size())
    throw Error(std::string("gen_conflict_samples: pool exhausted drawing ") +
                std::to_string(n) + " " + what + " tokens from " + std::to_string(pool.size()));
  std::vector<TokenId> shuffled = pool;
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.next_index(i)]);
  shuffled.resize(n);
  return shuffled;
}

bool follows(const model::ForwardTrace& tr, const ConflictSample& s) {
  std::vector<TokenId> pool(s.entities_vision.begin(), s.entities_vision.end());
  pool.insert(pool.end(), s.entities_text.begin(), s.entities_text.end());
  std::sort(pool.begin(), pool.end());
  TokenId best = pool.front();
  for (TokenId y : pool)
    if (tr.final_dist[y] > tr.final_dist[best]) best = y;
  const auto& instructed =
      s.kind == InstructionKind::Vision ? s.entities_vision : s.entities_text;
  return std::find(instructed.begin(), instructed.end(), best) != instructed.end();
}

}  // namespace

Vocabulary Vocabulary::standard(std::size_t vocab_size) {
  if (vocab_size < 320) throw Error("Vocabulary::standard: vocab_size must be >= 320");
  Vocabulary v;
  v.vocab_size = vocab_size;
  const std::size_t groups = 7, forms = 10;
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<TokenId> grp;
    for (std::size_t s = 0; s < forms; ++s) grp.push_back(TokenId(8 + g * forms + s));
    v.answer_groups.push_back(std::move(grp));
  }
  for (std::size_t g = 0; g < groups; ++g) v.vis_answers.push_back(TokenId(80 + g));
  for (TokenId t = 96; t < 160; ++t) v.vis_fillers.push_back(t);
  for (TokenId t = 160; t < 224; ++t) v.ctx_fillers.push_back(t);
  for (TokenId t = 224; t < 288; ++t) v.ins_fillers.push_back(t);
  for (TokenId t = 288; t < 320; ++t) v.query_pool.push_back(t);
  v.validate();
  return v;
}

void Vocabulary::validate() const {
  std::set<TokenId> seen{gen_token, marker_vision, marker_text};
  std::size_t count = 3;
  auto add = [&](const std::vector<TokenId>& pool) {
    for (TokenId t : pool) {
      if (t >= vocab_size) throw Error("Vocabulary: token id out of range");
      seen.insert(t);
      ++count;
    }
  };
  for (const auto& g : answer_groups) {
    if (g.empty() || g.size() > 10)
      throw Error("Vocabulary: surface-form groups must have 1..10 entries");
    add(g);
  }
  add(vis_answers);
  add(vis_fillers);
  add(ctx_fillers);
  add(ins_fillers);
  add(query_pool);
  if (seen.size() != count) throw Error("Vocabulary: token pools are not disjoint");
  if (vis_answers.size() != answer_groups.size())
    throw Error("Vocabulary: need one visual answer token per group");
}

std::size_t Vocabulary::group_of(TokenId answer) const {
  for (std::size_t g = 0; g < answer_groups.size(); ++g)
    for (TokenId t : answer_groups[g])
      if (t == answer) return g;
  throw Error("Vocabulary: token " + std::to_string(answer) + " is not an answer token");
}

std::vector<TokenId> Vocabulary::instruction_tokens(InstructionKind kind,
                                                    std::size_t n_ins) const {
  if (n_ins < 1) throw Error("Vocabulary: instruction segment must be nonempty");
  if (n_ins - 1 > ins_fillers.size())
    throw Error("Vocabulary: instruction filler pool exhausted");
  std::vector<TokenId> out;
  out.push_back(kind == InstructionKind::Vision ? marker_vision : marker_text);
  for (std::size_t i = 0; i + 1 < n_ins; ++i) out.push_back(ins_fillers[i]);
  return out;
}

PlantedCircuitSpec PlantedCircuitSpec::default_for(const ModelConfig& config) {
  PlantedCircuitSpec s;
  s.relay_layer = 1;
  s.arbitration_layer = config.layers >= 8 ? 5 : config.layers - 2;
  s.arbitration_heads = {{s.arbitration_layer, 0}, {s.arbitration_layer, 1},
                         {s.arbitration_layer, 2}};
  s.validate(config);
  return s;
}

std::vector<std::pair<std::size_t, std::size_t>> PlantedCircuitSpec::circuit_heads() const {
  std::size_t bh = 0;
  while (bh == relay_head_vision || bh == relay_head_text) ++bh;
  std::size_t gh = 0;
  while (gh == relay_head_vision || gh == relay_head_text || gh == bh) ++gh;
  std::vector<std::pair<std::size_t, std::size_t>> v{
      {0, 0},
      {relay_layer, relay_head_vision},
      {relay_layer, relay_head_text},
      {relay_layer, bh},
      {relay_layer, gh},
      {prep_layer(), 0},
      {prep_layer(), 1},
      {arbitration_layer, 3},
      {arbitration_layer, 4},
      {arbitration_layer, 5},
      inherit_head()};
  v.insert(v.end(), arbitration_heads.begin(), arbitration_heads.end());
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

void PlantedCircuitSpec::validate(const ModelConfig& config) const {
  if (relay_layer < 1) throw Error("planted spec: relay_layer must be >= 1");
  if (!(relay_layer < arbitration_layer) || !(arbitration_layer + 1 < config.layers))
    throw Error("planted spec: need relay_layer < arbitration_layer < L-1");
  if (prep_layer() <= relay_layer || prep_layer() >= arbitration_layer)
    throw Error("planted spec: no room for a prep layer between relay and arbitration");
  if (arbitration_heads.empty()) throw Error("planted spec: arbitration head set is empty");
  const std::size_t total = config.layers * config.heads;
  if (arbitration_heads.size() * 20 > total)
    throw Error("planted spec: arbitration heads exceed 5% of all heads");
  for (auto [l, h] : arbitration_heads)
    if (l >= config.layers || h >= config.heads)
      throw Error("planted spec: arbitration head out of range");
  if (relay_head_vision == relay_head_text)
    throw Error("planted spec: relay heads must be distinct");
  if (inertia_strength < 0 || noise_scale < 0)
    throw Error("planted spec: strengths must be >= 0");
  if (config.head_dim < kPayloadDim || config.model_dim < kMinModelDim)
    throw Error("planted spec: model_dim >= 57 and head_dim >= 8 required");
  if (config.heads < 4) throw Error("planted spec: need at least 4 heads");
  if (config.mlp_hidden < 2 * kPayloadDim)
    throw Error("planted spec: mlp_hidden >= 16 required for the inertia clamp");
}

std::vector<ConflictSample> gen_conflict_samples(std::size_t n, std::uint64_t seed,
                                                 const Vocabulary& vocab,
                                                 const ModelConfig& config) {
  if (n < 1) throw Error("gen_conflict_samples: n must be >= 1");
  vocab.validate();
  const auto& seg = config.segments;
  const std::size_t n_query = std::min<std::size_t>(4, seg.n_ctx - 1);
  std::vector<ConflictSample> out;
  out.reserve(n);
  Rng master(seed);
  for (std::size_t idx = 0; idx < n; ++idx) {
    Rng rng = master.derive(idx);
    ConflictSample s;
    s.id = idx;
    s.kind = (idx % 2 == 0) ? InstructionKind::Vision : InstructionKind::Text;

    const std::size_t gv = rng.next_index(vocab.answer_groups.size());
    std::size_t gt = rng.next_index(vocab.answer_groups.size() - 1);
    if (gt >= gv) ++gt;

    // both dictionaries get the same size; with max aggregation in the lens a
    // larger dictionary would have a higher expected peak on both the anchor
    // and the generation side, biasing alignment away from chance
    const std::size_t dict_size =
        3 + rng.next_index(std::min({std::size_t(10), vocab.answer_groups[gv].size(),
                                     vocab.answer_groups[gt].size()}) -
                           2);
    auto pick_dict = [&](std::size_t g) {
      return draw_distinct(rng, vocab.answer_groups[g], dict_size, "answer");
    };
    s.entities_vision = pick_dict(gv);
    s.entities_text = pick_dict(gt);
    s.answer_vision = s.entities_vision[rng.next_index(s.entities_vision.size())];
    s.answer_text = s.entities_text[rng.next_index(s.entities_text.size())];

    s.vis_tokens = draw_distinct(rng, vocab.vis_fillers, seg.n_vis - 1, "visual filler");
    s.vis_tokens.insert(s.vis_tokens.begin() + rng.next_index(seg.n_vis), 0);
    // the visual context carries the image-space token of the visual answer
    for (auto& t : s.vis_tokens)
      if (t == 0) t = vocab.vis_answers[gv];

    const std::size_t n_ctx_body = seg.n_ctx - n_query;
    s.ctx_tokens = draw_distinct(rng, vocab.ctx_fillers, n_ctx_body - 1, "context filler");
    s.ctx_tokens.insert(s.ctx_tokens.begin() + rng.next_index(n_ctx_body), s.answer_text);
    s.query = draw_distinct(rng, vocab.query_pool, n_query, "query");
    // fresh filler draw per sample; a fixed instruction surface would give
    // every sample the same anchor rows, turning lens alignment on an
    // untrained model into a fixed token ranking instead of a coin flip
    s.ins_tokens = draw_distinct(rng, vocab.ins_fillers, seg.n_ins - 1, "instruction filler");
    s.ins_tokens.insert(s.ins_tokens.begin(),
                        s.kind == InstructionKind::Vision ? vocab.marker_vision
                                                          : vocab.marker_text);
    out.push_back(std::move(s));
  }
  return out;
}

model::Weights build_planted_model(const ModelConfig& config, const PlantedCircuitSpec& spec,
                                   const Vocabulary& vocab, std::uint64_t seed) {
  config.validate();
  spec.validate(config);
  vocab.validate();
  const std::size_t d = config.model_dim, dk = config.head_dim;

  Weights w;
  w.config = config;
  w.embedding = Matrix(config.vocab_size, d);
  auto set_tag = [&](TokenId t, std::size_t dim, double v) { w.embedding(t, dim) = v; };
  for (TokenId t = 0; t < config.vocab_size; ++t) set_tag(t, kTagBias, 1.0);
  set_tag(config.gen_token, kTagGen, 1.0);
  for (TokenId m : {vocab.marker_vision, vocab.marker_text}) {
    set_tag(m, kTagIns, 1.0);
    set_tag(m, kTagMarker, 1.0);
  }
  set_tag(vocab.marker_vision, kTagKind, 1.0);
  set_tag(vocab.marker_text, kTagKind, -1.0);
  for (TokenId t : vocab.ins_fillers) set_tag(t, kTagIns, 1.0);
  for (std::size_t g = 0; g < vocab.answer_groups.size(); ++g) {
    const auto p = group_payload(g);
    for (TokenId t : vocab.answer_groups[g]) {
      set_tag(t, kTagTxtAns, 1.0);
      for (std::size_t j = 0; j < kPayloadDim; ++j) w.embedding(t, kChPayT + j) = p[j];
    }
    const TokenId vt = vocab.vis_answers[g];
    set_tag(vt, kTagVisAns, 1.0);
    for (std::size_t j = 0; j < kPayloadDim; ++j) w.embedding(vt, kChPayV + j) = p[j];
  }

  for (std::size_t l = 0; l < config.layers; ++l) {
    model::LayerWeights lw;
    for (std::size_t h = 0; h < config.heads; ++h) {
      lw.wq.emplace_back(d, dk);
      lw.wk.emplace_back(d, dk);
      lw.wv.emplace_back(d, dk);
      lw.wo.emplace_back(dk, d);
      // parked default: every row attends the instruction marker, value zero
      set_pattern(lw, h, sel(d, {{kTagBias, 1.0}}), sel(d, {{kTagMarker, 1.0}}), kGateGain, dk);
    }
    lw.mlp_in = Matrix(d, config.mlp_hidden);
    lw.mlp_b1.assign(config.mlp_hidden, 0.0);
    lw.mlp_out = Matrix(config.mlp_hidden, d);
    lw.mlp_b2.assign(d, 0.0);
    lw.attn_norm_gain.assign(d, 1.0);
    lw.attn_norm_bias.assign(d, 0.0);
    lw.mlp_norm_gain.assign(d, 1.0);
    lw.mlp_norm_bias.assign(d, 0.0);
    w.layers.push_back(std::move(lw));
  }

  // Per-layer channel visibility via the attention norm gain: each layer's
  // heads can only see the channels they are wired to use. Dirty channels
  // (buffers, margin, readout) are written at one layer and read at strictly
  // later ones, so redirected attention from closed gates cannot compound
  // junk through the norm rescaling.
  auto show = [&](std::size_t layer,
                  std::initializer_list<std::pair<std::size_t, std::size_t>> ranges) {
    auto& gain = w.layers[layer].attn_norm_gain;
    std::fill(gain.begin(), gain.end(), 0.0);
    gain[kTagBias] = 1.0;
    gain[kTagMarker] = 1.0;
    for (auto [begin, count] : ranges)
      for (std::size_t i = 0; i < count; ++i) gain[begin + i] = 1.0;
  };
  for (std::size_t l = 0; l < config.layers; ++l) show(l, {});
  show(0, {{kChPayV, kPayloadDim}, {kChPayT, kPayloadDim}, {kTagVisAns, 1}, {kTagTxtAns, 1},
           {kTagIns, 1}});
  show(spec.relay_layer,
       {{kChPayV, kPayloadDim}, {kChPayT, kPayloadDim}, {kTagVisAns, 1}, {kTagTxtAns, 1},
        {kTagIns, 1}, {kTagGen, 1}, {kTagKind, 1}});
  show(spec.prep_layer(), {{kChBufV, kPayloadDim}, {kChBufT, kPayloadDim},
                           {kTagKindLocal, 1}, {kTagIns, 1}, {kTagGen, 1}});
  show(spec.arbitration_layer,
       {{kChBufV, kPayloadDim}, {kChBufT, kPayloadDim}, {kChMarg, kPayloadDim},
        {kChPayV, kPayloadDim}, {kChPayT, kPayloadDim}, {kTagVisAns, 1}, {kTagTxtAns, 1},
        {kTagKindLocal, 1}, {kTagKindGen, 1}, {kTagIns, 1}, {kTagGen, 1}});
  show(spec.inherit_layer(), {{kChOut, kPayloadDim}, {kTagGen, 1}, {kTagIns, 1}});

  const auto ins_q = sel(d, {{kTagIns, 1.0}});
  const auto ins_k = sel(d, {{kTagIns, 1.0}});
  // Kind gates read the broadcast channel only. At anchors it is large by
  // construction (|value| >> 1 after the norm); everywhere else it is small
  // mean-subtraction drift, so closed gates stay weak instead of hunting
  // whichever row happens to have the most extreme norm statistics.
  // The generation-slot penalty keeps both gates firmly shut at the gen row;
  // otherwise tiny drift there opens one gate against the strong instruction
  // keys and the decision leaks past the anchors. The gen row's own kind
  // signal lives in a separate channel that the gates never read.
  const auto gate_v = sel(d, {{kTagKindLocal, 1.0}, {kTagGen, -1.0}});
  const auto gate_t = sel(d, {{kTagKindLocal, -1.0}, {kTagGen, -1.0}});

  // layer 0: indiscriminate ingest of both answer payloads into the readout
  // channel of the instruction anchors (no selection yet).
  {
    auto& lw = w.layers[0];
    set_pattern(lw, 0, ins_q, sel(d, {{kTagVisAns, 1.0}, {kTagTxtAns, 1.0}}), kGateGain, dk);
    add_value_read(lw, 0, kChPayV, 1.0);
    add_value_read(lw, 0, kChPayT, 1.0);
    set_out(lw, 0, kChOut, kIngestWeight);
  }
  // relay layer: copy each context payload into its buffer at the anchors,
  // and broadcast the marker's instruction kind to every anchor position.
  {
    auto& lw = w.layers[spec.relay_layer];
    set_pattern(lw, spec.relay_head_vision, ins_q, sel(d, {{kTagVisAns, 1.0}}), kGateGain, dk);
    set_copy(lw, spec.relay_head_vision, kChPayV, kChBufV, 1.0);
    set_pattern(lw, spec.relay_head_text, ins_q, sel(d, {{kTagTxtAns, 1.0}}), kGateGain, dk);
    set_copy(lw, spec.relay_head_text, kChPayT, kChBufT, 1.0);
    std::size_t bh = 0;
    while (bh == spec.relay_head_vision || bh == spec.relay_head_text) ++bh;
    set_pattern(lw, bh, ins_q, sel(d, {{kTagMarker, 1.0}}), kGateGain, dk);
    lw.wv[bh](kTagKind, 0) = 1.0;
    lw.wo[bh](0, kTagKindLocal) = 1.0;
    // a second broadcast tells the generation slot the kind through its own
    // channel, so the anchor gates cannot be opened from the gen row
    if (config.heads >= 6) {
      std::size_t gh = 0;
      while (gh == spec.relay_head_vision || gh == spec.relay_head_text || gh == bh) ++gh;
      set_pattern(lw, gh, sel(d, {{kTagGen, 1.0}}), sel(d, {{kTagMarker, 1.0}}), kGateGain, dk);
      lw.wv[gh](kTagKind, 0) = 1.0;
      lw.wo[gh](0, kTagKindGen) = 1.0;
    }
  }
  // prep layer: kind-gated heads write the signed buffer difference into the
  // margin channel.
  {
    auto& lw = w.layers[spec.prep_layer()];
    set_pattern(lw, 0, gate_v, ins_k, kGateGain, dk);
    add_value_read(lw, 0, kChBufV, 1.0);
    add_value_read(lw, 0, kChBufT, -1.0);
    set_out(lw, 0, kChMarg, 1.0);
    set_pattern(lw, 1, gate_t, ins_k, kGateGain, dk);
    add_value_read(lw, 1, kChBufT, 1.0);
    add_value_read(lw, 1, kChBufV, -1.0);
    set_out(lw, 1, kChMarg, 1.0);
  }
  // arbitration layer: gated modality heads move the instructed buffer into
  // the readout channel; the shared hub follows the margin channel; one
  // ungated head applies a small competitor-favoring prior.
  {
    auto& lw = w.layers[spec.arbitration_layer];
    set_pattern(lw, 0, gate_v, ins_k, kGateGain, dk);
    set_copy(lw, 0, kChBufV, kChOut, 1.0);
    set_pattern(lw, 1, gate_t, ins_k, kGateGain, dk);
    set_copy(lw, 1, kChBufT, kChOut, 1.0);
    set_pattern(lw, 2, ins_q, ins_k, kGateGain, dk);
    set_copy(lw, 2, kChMarg, kChOut, kSharedWeight);
    set_pattern(lw, 3, ins_q, ins_k, kGateGain, dk);
    set_copy(lw, 3, kChMarg, kChOut, -kPriorWeight);
    // weak competitor prior read straight off the context answer rows. With
    // the inheritance path intact it barely moves the saturated decision, but
    // once that path is cut it is the only signal left at the generation
    // slot, so severed runs settle on the competitor instead of a coin flip.
    if (config.heads >= 6) {
      set_pattern(lw, 4, sel(d, {{kTagKindGen, -1.0}}), sel(d, {{kTagVisAns, 1.0}}),
                  kGateGain, dk);
      set_copy(lw, 4, kChPayV, kChOut, kPriorWeight);
      set_pattern(lw, 5, sel(d, {{kTagKindGen, 1.0}}), sel(d, {{kTagTxtAns, 1.0}}),
                  kGateGain, dk);
      set_copy(lw, 5, kChPayT, kChOut, kPriorWeight);
    }
    // deep-MLP inertia: a saturating per-coordinate clamp that opposes small
    // readout-channel signals (strength 0 leaves the MLP inert).
    if (spec.inertia_strength > 0.0) {
      const double rho = spec.inertia_strength;
      for (std::size_t j = 0; j < kPayloadDim; ++j) {
        lw.mlp_in(kChOut + j, 2 * j) = 1.0;
        lw.mlp_b1[2 * j] = rho;
        lw.mlp_in(kChOut + j, 2 * j + 1) = 1.0;
        lw.mlp_b1[2 * j + 1] = -rho;
        lw.mlp_out(2 * j, kChOut + j) = -kInertiaGain;
        lw.mlp_out(2 * j + 1, kChOut + j) = kInertiaGain;
        lw.mlp_b2[kChOut + j] = kInertiaGain * rho;
      }
    }
  }
  // inheritance: the generation slot copies the anchors' decision. The weak
  // self-key makes the slot fall back to its own readout (the competitor
  // prior) when the anchor edges are severed, instead of redistributing onto
  // rows with leaked buffer contents.
  {
    auto& lw = w.layers[spec.inherit_layer()];
    // key ordering: anchors (ins) on top, the gen row itself second, and
    // everything else far below. The bias term crushes sparse rows, whose
    // norm blows the bias coordinate up; at the gen row bias and gen scale
    // identically, so their difference stays small and sigma-independent.
    set_pattern(lw, 0, sel(d, {{kTagGen, 1.0}}),
                sel(d, {{kTagIns, 1.0}, {kTagGen, 0.2}, {kTagBias, -0.3}}), kGateGain, dk);
    set_copy(lw, 0, kChOut, kChOut, 1.0);
  }

  w.unembed = Matrix(config.vocab_size, d);
  for (std::size_t g = 0; g < vocab.answer_groups.size(); ++g) {
    const auto p = group_payload(g);
    for (TokenId t : vocab.answer_groups[g])
      for (std::size_t j = 0; j < kPayloadDim; ++j)
        w.unembed(t, kChOut + j) = kReadoutGain * p[j];
  }
  w.final_norm_gain.assign(d, 1.0);
  w.final_norm_bias.assign(d, 0.0);

  if (spec.noise_scale > 0.0) {
    Rng rng(seed);
    auto jiggle = [&](Matrix& m, double scale) {
      for (double& x : m.data()) x += rng.gaussian() * scale;
    };
    jiggle(w.embedding, spec.noise_scale);
    for (auto& lw : w.layers) {
      for (std::size_t h = 0; h < config.heads; ++h) {
        jiggle(lw.wq[h], spec.noise_scale);
        jiggle(lw.wk[h], spec.noise_scale);
        jiggle(lw.wv[h], spec.noise_scale);
        jiggle(lw.wo[h], spec.noise_scale);
      }
      jiggle(lw.mlp_in, spec.noise_scale);
      jiggle(lw.mlp_out, spec.noise_scale);
    }
    jiggle(w.unembed, spec.noise_scale);
  }
  return w;
}

double calibrate_inertia(const ModelConfig& config, PlantedCircuitSpec spec,
                         const Vocabulary& vocab, std::uint64_t seed,
                         const std::vector<ConflictSample>& samples,
                         const std::vector<double>& grid, double min_fail_frac) {
  if (samples.empty()) throw Error("calibrate_inertia: empty sample set");
  for (double rho : grid) {
    spec.inertia_strength = rho;
    const Weights w = build_planted_model(config, spec, vocab, seed);
    std::size_t failed = 0;
    for (const auto& s : samples) {
      auto [tokens, segmap] = model::assemble_input(s, config);
      const auto tr = model::forward(w, tokens, segmap, {}, model::TraceDetail::StatesOnly);
      if (!follows(tr, s)) ++failed;
    }
    if (double(failed) >= min_fail_frac * double(samples.size())) return rho;
  }
  throw Error("calibrate_inertia: no grid value reaches the target failure fraction");
}

void write_samples_jsonl(const std::string& path, const std::vector<ConflictSample>& samples) {
  std::ofstream out(path);
  if (!out) throw Error("write_samples_jsonl: cannot open " + path);
  for (const auto& s : samples) {
    nlohmann::json j{{"id", s.id},
                     {"query", s.query},
                     {"vis_tokens", s.vis_tokens},
                     {"ctx_tokens", s.ctx_tokens},
                     {"ins_tokens", s.ins_tokens},
                     {"instruction_kind", to_string(s.kind)},
                     {"answer_vision", s.answer_vision},
                     {"answer_text", s.answer_text},
                     {"entities_vision", s.entities_vision},
                     {"entities_text", s.entities_text}};
    out << j.dump() << "\n";
  }
}

std::vector<ConflictSample> read_samples_jsonl(const std::string& path, const Vocabulary& vocab,
                                               const ModelConfig& config) {
  std::ifstream in(path);
  if (!in) throw Error("read_samples_jsonl: cannot open " + path);
  std::vector<ConflictSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw Error("read_samples_jsonl: line " + std::to_string(lineno) + ": " + e.what());
    }
    ConflictSample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.query = j.at("query").get<std::vector<TokenId>>();
    s.vis_tokens = j.at("vis_tokens").get<std::vector<TokenId>>();
    s.ctx_tokens = j.at("ctx_tokens").get<std::vector<TokenId>>();
    const std::string kind = j.at("instruction_kind").get<std::string>();
    if (kind == "vision")
      s.kind = InstructionKind::Vision;
    else if (kind == "text")
      s.kind = InstructionKind::Text;
    else
      throw Error("read_samples_jsonl: line " + std::to_string(lineno) +
                  ": unknown instruction_kind '" + kind + "'");
    s.answer_vision = j.at("answer_vision").get<TokenId>();
    s.answer_text = j.at("answer_text").get<TokenId>();
    s.entities_vision = j.at("entities_vision").get<std::vector<TokenId>>();
    s.entities_text = j.at("entities_text").get<std::vector<TokenId>>();
    if (s.answer_vision == s.answer_text)
      throw Error("read_samples_jsonl: line " + std::to_string(lineno) +
                  ": answers must differ");
    if (j.contains("ins_tokens"))
      s.ins_tokens = j.at("ins_tokens").get<std::vector<TokenId>>();
    else
      s.ins_tokens = vocab.instruction_tokens(s.kind, config.segments.n_ins);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace modarb::testbed
