#include "modarb/trace_io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace modarb::trace_io {

using model::ForwardTrace;
using numkit::Matrix;

namespace {

constexpr char kMagic[4] = {'A', 'L', 'T', 'R'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xFF;
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw Error(std::string("trace import: truncated while reading ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  static_assert(sizeof(double) == 8);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, 8);
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = (bits >> (8 * k)) & 0xFF;
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

void read_doubles(std::istream& is, double* p, std::size_t n, const char* what) {
  std::vector<unsigned char> buf(n * 8);
  if (!is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
    throw Error(std::string("trace import: truncated while reading ") + what);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t(buf[i * 8 + k]) << (8 * k);
    std::memcpy(p + i, &bits, 8);
  }
}

nlohmann::json segmap_json(const model::SegmentMap& s) {
  return {{"vis", {s.vis_begin, s.vis_end}},
          {"ctx", {s.ctx_begin, s.ctx_end}},
          {"ins", {s.ins_begin, s.ins_end}},
          {"gen", {s.gen_begin, s.gen_end}},
          {"total", s.total}};
}

model::SegmentMap segmap_from_json(const nlohmann::json& j) {
  model::SegmentMap s;
  auto pair = [&](const char* key, std::size_t& a, std::size_t& b) {
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw Error("trace import: malformed segment range");
    a = v[0].get<std::size_t>();
    b = v[1].get<std::size_t>();
  };
  pair("vis", s.vis_begin, s.vis_end);
  pair("ctx", s.ctx_begin, s.ctx_end);
  pair("ins", s.ins_begin, s.ins_end);
  pair("gen", s.gen_begin, s.gen_end);
  s.total = j.at("total").get<std::size_t>();
  if (s.vis_begin != 0 || s.vis_end != s.ctx_begin || s.ctx_end != s.ins_begin ||
      s.ins_end != s.gen_begin || s.gen_end != s.total)
    throw Error("trace import: segment ranges are not contiguous");
  return s;
}

}  // namespace

void export_trace(const std::string& path, const ForwardTrace& trace) {
  if (!trace.readout) throw Error("trace export: trace has no readout block");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("trace export: cannot open " + path);

  nlohmann::json meta{{"layers", trace.layers},
                      {"heads", trace.heads},
                      {"seq_len", trace.seq_len},
                      {"model_dim", trace.model_dim},
                      {"vocab_size", trace.vocab_size},
                      {"plan_id", trace.plan_id},
                      {"segments", segmap_json(trace.segmap)},
                      {"final_norm_for_lens", trace.readout->final_norm_for_lens}};
  const std::string mtext = meta.dump();

  os.write(kMagic, 4);
  write_u32(os, kTraceVersion);
  write_u32(os, std::uint32_t(mtext.size()));
  os.write(mtext.data(), std::streamsize(mtext.size()));

  for (const auto& m : trace.states) write_doubles(os, m.data().data(), m.data().size());
  for (const auto& m : trace.post_attn) write_doubles(os, m.data().data(), m.data().size());
  write_doubles(os, trace.final_logits.data(), trace.final_logits.size());
  write_doubles(os, trace.final_dist.data(), trace.final_dist.size());
  const auto& ro = *trace.readout;
  write_doubles(os, ro.unembed.data().data(), ro.unembed.data().size());
  write_doubles(os, ro.final_norm_gain.data(), ro.final_norm_gain.size());
  write_doubles(os, ro.final_norm_bias.data(), ro.final_norm_bias.size());
  if (!os) throw Error("trace export: write failed for " + path);
}

ForwardTrace import_trace(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("trace import: cannot open " + path);

  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("trace import: bad magic in " + path);
  const std::uint32_t version = read_u32(is, "version");
  if (version != kTraceVersion)
    throw Error("trace import: unsupported container version " + std::to_string(version));
  const std::uint32_t mlen = read_u32(is, "metadata length");
  std::string mtext(mlen, '\0');
  if (!is.read(mtext.data(), mlen)) throw Error("trace import: truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mtext);
  } catch (const std::exception& e) {
    throw Error(std::string("trace import: metadata parse error: ") + e.what());
  }

  ForwardTrace tr;
  tr.layers = meta.at("layers").get<std::size_t>();
  tr.heads = meta.at("heads").get<std::size_t>();
  tr.seq_len = meta.at("seq_len").get<std::size_t>();
  tr.model_dim = meta.at("model_dim").get<std::size_t>();
  tr.vocab_size = meta.at("vocab_size").get<std::size_t>();
  tr.plan_id = meta.at("plan_id").get<std::string>();
  tr.segmap = segmap_from_json(meta.at("segments"));
  tr.detail = model::TraceDetail::StatesOnly;
  if (tr.layers == 0 || tr.seq_len == 0 || tr.model_dim == 0 || tr.vocab_size == 0)
    throw Error("trace import: degenerate dimensions");
  if (tr.segmap.total != tr.seq_len)
    throw Error("trace import: segment map does not cover the sequence");

  for (std::size_t l = 0; l <= tr.layers; ++l) {
    Matrix m(tr.seq_len, tr.model_dim);
    read_doubles(is, m.data().data(), m.data().size(), "residual states");
    tr.states.push_back(std::move(m));
  }
  for (std::size_t l = 0; l < tr.layers; ++l) {
    Matrix m(tr.seq_len, tr.model_dim);
    read_doubles(is, m.data().data(), m.data().size(), "post-attention states");
    tr.post_attn.push_back(std::move(m));
  }
  // the differenced sublayer outputs are implied by the snapshots
  for (std::size_t l = 0; l < tr.layers; ++l) {
    tr.attn_out.push_back(tr.post_attn[l] - tr.states[l]);
    tr.mlp_out.push_back(tr.states[l + 1] - tr.post_attn[l]);
  }
  tr.final_logits.resize(tr.vocab_size);
  read_doubles(is, tr.final_logits.data(), tr.vocab_size, "final logits");
  tr.final_dist.resize(tr.vocab_size);
  read_doubles(is, tr.final_dist.data(), tr.vocab_size, "final distribution");

  auto ro = std::make_shared<model::Readout>();
  ro->unembed = Matrix(tr.vocab_size, tr.model_dim);
  read_doubles(is, ro->unembed.data().data(), ro->unembed.data().size(), "unembedding");
  ro->final_norm_gain.resize(tr.model_dim);
  read_doubles(is, ro->final_norm_gain.data(), tr.model_dim, "final norm gain");
  ro->final_norm_bias.resize(tr.model_dim);
  read_doubles(is, ro->final_norm_bias.data(), tr.model_dim, "final norm bias");
  ro->final_norm_for_lens = meta.at("final_norm_for_lens").get<bool>();
  tr.readout = std::move(ro);

  char extra;
  if (is.read(&extra, 1)) throw Error("trace import: trailing bytes after arrays");
  return tr;
}

}  // namespace modarb::trace_io
