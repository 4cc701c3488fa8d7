#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modarb/error.hpp"

namespace modarb::iv {

// Severs the attention edges {(i, j) : i in dst, j in src} by writing -inf
// into the mask of every affected layer. dst indexes the attending row,
// src the attended column. `heads` empty means all heads (the replication
// semantics); a nonempty set is the per-head extension and is excluded from
// replication sweeps.
struct KnockoutSpec {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> heads;
};

struct HeadBlock {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (layer, head)
  std::vector<std::size_t> positions;
};

struct HeadAmplify {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double factor = 1.0;
  std::vector<std::size_t> positions;
};

struct InterventionPlan {
  std::vector<KnockoutSpec> knockouts;
  std::vector<HeadBlock> blocks;
  std::vector<HeadAmplify> amplifies;

  bool empty() const { return knockouts.empty() && blocks.empty() && amplifies.empty(); }

  // Content hash of the canonical JSON serialization.
  std::string id() const;
  std::string to_json() const;
  static InterventionPlan from_json(const std::string& text);

  // Range checks against a model shape plus the block/amplify overlap rule.
  // Throws before any forward compute happens.
  void validate(std::size_t layers, std::size_t heads, std::size_t seq_len) const;
};

// Window semantics of the pathway knockout: affected layers are
// [max(0, center-k), min(L-1, center+k)], clipped at the model boundary.
KnockoutSpec make_knockout(std::vector<std::size_t> src, std::vector<std::size_t> dst,
                           std::size_t center_layer, std::size_t k, std::size_t num_layers);

// Explicit contiguous [first, last] layer range, no window semantics.
KnockoutSpec make_layer_range_knockout(std::vector<std::size_t> src,
                                       std::vector<std::size_t> dst, std::size_t first_layer,
                                       std::size_t last_layer, std::size_t num_layers);

HeadBlock make_head_block(std::vector<std::pair<std::size_t, std::size_t>> pairs,
                          std::vector<std::size_t> positions);
HeadAmplify make_head_amplify(std::vector<std::pair<std::size_t, std::size_t>> pairs,
                              double factor, std::vector<std::size_t> positions);

}  // namespace modarb::iv
