#pragma once

#include <string>

#include "modarb/model.hpp"

namespace modarb::trace_io {

// Binary trace container. Layout: magic "ALTR", u32 version, u32 metadata
// byte length, UTF-8 JSON metadata, then the float64 arrays announced by the
// metadata, row-major, little-endian, in order: residual states H^0..H^L,
// post-attention states per layer, final logits, final distribution, the
// unembedding matrix, and the final norm gain and bias. Carrying the readout
// makes an imported trace self-sufficient for lens metrics and sublayer
// attribution; per-head data is not exported.
inline constexpr std::uint32_t kTraceVersion = 1;

void export_trace(const std::string& path, const model::ForwardTrace& trace);
model::ForwardTrace import_trace(const std::string& path);

}  // namespace modarb::trace_io
