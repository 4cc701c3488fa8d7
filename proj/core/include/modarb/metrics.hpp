#pragma once

#include <vector>

#include "modarb/model.hpp"
#include "modarb/numkit.hpp"
#include "modarb/sample.hpp"

namespace modarb::metrics {

// The two-token decision subspace: the answer the instruction mandates and
// the competing modality's answer.
struct DecisionSubspace {
  TokenId compliant = 0;
  TokenId competitor = 0;
};

DecisionSubspace subspace_of(const ConflictSample& sample);

// Restrict a full-vocabulary distribution to the subspace and renormalize.
numkit::TwoPoint binary_renormalize(const std::vector<double>& dist, DecisionSubspace ds);

// Signed divergence between the clean and the edited run over the decision
// subspace: sign of the compliant-mass change times D(clean || edited).
// Positive means the edit hurt compliance. A zero mass change gives 0.
double nssd(const std::vector<double>& clean_dist, const std::vector<double>& edited_dist,
            DecisionSubspace ds);

enum class DictAgg { Max, Avg };

struct SignalConfig {
  std::size_t top_k = 1;
  // mean over surface forms; a max across the dictionary couples any two
  // lens readouts through the same high-norm unembedding rows, which skews
  // chance-level comparisons on untrained models
  DictAgg agg = DictAgg::Avg;
  bool final_norm = true;  // apply the final layer norm before the lens readout
};

// Dictionary signal at one residual layer: each instruction position scores
// the dictionary by its lens logits (max or mean over surface forms); the
// top_k best positions are averaged. `layer` indexes residual states 0..L.
double signal_phi(const model::ForwardTrace& trace, std::size_t layer,
                  const std::vector<TokenId>& dict, const SignalConfig& cfg);

// Margin between the followed and the competing dictionary at one layer.
double answer_margin(const model::ForwardTrace& trace, std::size_t layer,
                     const std::vector<TokenId>& followed, const std::vector<TokenId>& other,
                     const SignalConfig& cfg);

// Strict margin; ties count as not aligned.
bool lens_aligned(const model::ForwardTrace& trace, std::size_t layer,
                  const std::vector<TokenId>& followed, const std::vector<TokenId>& other,
                  const SignalConfig& cfg);

// Both dictionaries merged, ascending token id.
std::vector<TokenId> dict_union(const ConflictSample& sample);

// Argmax of the final distribution over the merged dictionaries (lowest id
// wins exact ties).
TokenId behavioral_choice(const model::ForwardTrace& trace, const ConflictSample& sample);

// Whether the behavioral choice lands in the instructed modality's dictionary.
bool follows_instruction(const model::ForwardTrace& trace, const ConflictSample& sample);

// Per-layer alignment of the lens decision with the model's final behavior,
// for residual layers 0..L. The followed dictionary is the one containing the
// behavioral choice.
std::vector<bool> alignment_profile(const model::ForwardTrace& trace,
                                    const ConflictSample& sample, const SignalConfig& cfg);

// Whether the anchor-side lens decision and the generation-position lens
// decision pick the same dictionary at this layer. The generation side uses
// the same scoring restricted to that single position. Ties on either side
// count as not synchronized.
bool decision_synced(const model::ForwardTrace& trace, const ConflictSample& sample,
                     std::size_t layer, const SignalConfig& cfg);

}  // namespace modarb::metrics
