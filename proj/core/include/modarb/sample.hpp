#pragma once

#include <cstdint>
#include <vector>

namespace modarb {

using TokenId = std::uint32_t;

enum class InstructionKind { Vision, Text };

inline const char* to_string(InstructionKind k) {
  return k == InstructionKind::Vision ? "vision" : "text";
}

// One modality-conflict sample: a query, a visual context and a textual
// context supporting different answers, an instruction mandating one of them,
// and per-answer entity dictionaries (token-id surface forms, <= 10 each).
struct ConflictSample {
  std::uint64_t id = 0;
  std::vector<TokenId> query;
  std::vector<TokenId> vis_tokens;
  std::vector<TokenId> ctx_tokens;
  std::vector<TokenId> ins_tokens;
  InstructionKind kind = InstructionKind::Vision;
  TokenId answer_vision = 0;
  TokenId answer_text = 0;
  std::vector<TokenId> entities_vision;
  std::vector<TokenId> entities_text;
};

}  // namespace modarb
