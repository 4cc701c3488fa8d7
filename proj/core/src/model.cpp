#include "modarb/model.hpp"

#include <cmath>
#include <map>

namespace modarb::model {

using numkit::MaskMatrix;
using numkit::Rng;

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = rng.gaussian() * scale;
  return m;
}

std::vector<double> apply_norm(std::span<const double> v, const std::vector<double>& gain,
                               const std::vector<double>& bias) {
  return numkit::layer_norm(v, gain, bias);
}

Matrix norm_rows(const Matrix& h, const std::vector<double>& gain,
                 const std::vector<double>& bias) {
  Matrix out(h.rows(), h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto n = apply_norm(h.row(i), gain, bias);
    std::copy(n.begin(), n.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || model_dim < 1 || head_dim < 1 || mlp_hidden < 1)
    throw Error("model config: all counts must be >= 1");
  if (heads * head_dim != model_dim)
    throw Error("model config: heads*head_dim (" + std::to_string(heads * head_dim) +
                ") != model_dim (" + std::to_string(model_dim) + ")");
  if (vocab_size < 8) throw Error("model config: vocab_size must be >= 8");
  if (segments.n_vis < 1 || segments.n_ctx < 1 || segments.n_ins < 1 || segments.n_gen < 1)
    throw Error("model config: all segment lengths must be >= 1");
  if (gen_token >= vocab_size) throw Error("model config: gen_token out of vocab range");
}

Weights build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Weights w;
  w.config = config;
  const std::size_t d = config.model_dim, dk = config.head_dim, dff = config.mlp_hidden;
  // output projections carry a small depth-aware scale so an untrained
  // stack perturbs the embedding stream instead of drowning it; post-norm
  // rows have unit-variance entries, so anything near 1.0 here lets the
  // random sublayers swamp the token identities within a couple of layers
  const double res_scale = 0.02 / std::sqrt(2.0 * double(config.layers));
  w.embedding = gaussian_matrix(rng, config.vocab_size, d, 1.0 / std::sqrt(double(d)));
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    for (std::size_t h = 0; h < config.heads; ++h) {
      lw.wq.push_back(gaussian_matrix(rng, d, dk, 1.0 / std::sqrt(double(d))));
      lw.wk.push_back(gaussian_matrix(rng, d, dk, 1.0 / std::sqrt(double(d))));
      lw.wv.push_back(gaussian_matrix(rng, d, dk, 1.0 / std::sqrt(double(d))));
      lw.wo.push_back(gaussian_matrix(rng, dk, d, res_scale / std::sqrt(double(dk))));
    }
    lw.mlp_in = gaussian_matrix(rng, d, dff, 1.0 / std::sqrt(double(d)));
    lw.mlp_b1.assign(dff, 0.0);
    lw.mlp_out = gaussian_matrix(rng, dff, d, res_scale / std::sqrt(double(dff)));
    lw.mlp_b2.assign(d, 0.0);
    lw.attn_norm_gain.assign(d, 1.0);
    lw.attn_norm_bias.assign(d, 0.0);
    lw.mlp_norm_gain.assign(d, 1.0);
    lw.mlp_norm_bias.assign(d, 0.0);
    w.layers.push_back(std::move(lw));
  }
  w.unembed = gaussian_matrix(rng, config.vocab_size, d, 1.0 / std::sqrt(double(d)));
  w.final_norm_gain.assign(d, 1.0);
  w.final_norm_bias.assign(d, 0.0);
  return w;
}

std::pair<std::vector<TokenId>, SegmentMap> assemble_input(const ConflictSample& sample,
                                                           const ModelConfig& config) {
  const auto& seg = config.segments;
  if (sample.vis_tokens.size() != seg.n_vis)
    throw Error("assemble_input: visual segment has " + std::to_string(sample.vis_tokens.size()) +
                " tokens, expected " + std::to_string(seg.n_vis));
  if (sample.ctx_tokens.size() + sample.query.size() != seg.n_ctx)
    throw Error("assemble_input: context+query has " +
                std::to_string(sample.ctx_tokens.size() + sample.query.size()) +
                " tokens, expected " + std::to_string(seg.n_ctx));
  if (sample.ins_tokens.empty()) throw Error("assemble_input: empty instruction segment");
  if (sample.ins_tokens.size() != seg.n_ins)
    throw Error("assemble_input: instruction segment has " +
                std::to_string(sample.ins_tokens.size()) + " tokens, expected " +
                std::to_string(seg.n_ins));

  std::vector<TokenId> tokens;
  tokens.reserve(seg.total());
  tokens.insert(tokens.end(), sample.vis_tokens.begin(), sample.vis_tokens.end());
  tokens.insert(tokens.end(), sample.ctx_tokens.begin(), sample.ctx_tokens.end());
  tokens.insert(tokens.end(), sample.query.begin(), sample.query.end());
  tokens.insert(tokens.end(), sample.ins_tokens.begin(), sample.ins_tokens.end());
  for (std::size_t g = 0; g < seg.n_gen; ++g) tokens.push_back(config.gen_token);

  SegmentMap m;
  m.vis_begin = 0;
  m.vis_end = seg.n_vis;
  m.ctx_begin = m.vis_end;
  m.ctx_end = m.ctx_begin + seg.n_ctx;
  m.ins_begin = m.ctx_end;
  m.ins_end = m.ins_begin + seg.n_ins;
  m.gen_begin = m.ins_end;
  m.gen_end = m.gen_begin + seg.n_gen;
  m.total = seg.total();
  return {tokens, m};
}

std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

ForwardTrace forward(const Weights& weights, const std::vector<TokenId>& tokens,
                     const SegmentMap& segmap, const iv::InterventionPlan& plan,
                     TraceDetail detail) {
  const ModelConfig& cfg = weights.config;
  const std::size_t N = tokens.size(), d = cfg.model_dim, dk = cfg.head_dim;
  if (N != segmap.total)
    throw Error("forward: token count " + std::to_string(N) + " != segment map total " +
                std::to_string(segmap.total));
  for (TokenId t : tokens)
    if (t >= cfg.vocab_size)
      throw Error("forward: token id " + std::to_string(t) + " out of vocab range");
  plan.validate(cfg.layers, cfg.heads, N);

  // Per-layer shared mask (all-head knockouts) plus optional per-head masks.
  std::vector<MaskMatrix> layer_mask(cfg.layers, MaskMatrix(N));
  std::map<std::pair<std::size_t, std::size_t>, MaskMatrix> head_mask;
  for (const auto& ko : plan.knockouts) {
    for (auto l : ko.layers) {
      if (ko.heads.empty()) {
        for (auto i : ko.dst)
          for (auto j : ko.src) layer_mask[l].block(i, j);
      } else {
        for (auto h : ko.heads) {
          auto key = std::make_pair(l, h);
          if (!head_mask.count(key)) head_mask.emplace(key, layer_mask[l]);
        }
      }
    }
  }
  // Per-head masks start from the shared layer mask, then add their edges.
  for (const auto& ko : plan.knockouts) {
    if (ko.heads.empty()) continue;
    for (auto l : ko.layers)
      for (auto h : ko.heads) {
        auto& m = head_mask.at({l, h});
        for (auto i : ko.dst)
          for (auto j : ko.src) m.block(i, j);
      }
  }
  // (layer, head) -> position -> scale factor (0 = block).
  std::map<std::pair<std::size_t, std::size_t>, std::map<std::size_t, double>> head_scale;
  for (const auto& b : plan.blocks)
    for (const auto& pr : b.pairs)
      for (auto i : b.positions) head_scale[pr][i] = 0.0;
  for (const auto& a : plan.amplifies)
    for (const auto& pr : a.pairs)
      for (auto i : a.positions) {
        auto& slot = head_scale[pr];
        auto it = slot.find(i);
        slot[i] = (it == slot.end() ? 1.0 : it->second) * a.factor;
      }

  ForwardTrace tr;
  tr.layers = cfg.layers;
  tr.heads = cfg.heads;
  tr.seq_len = N;
  tr.model_dim = d;
  tr.vocab_size = cfg.vocab_size;
  tr.segmap = segmap;
  tr.plan_id = plan.id();
  tr.detail = detail;

  Matrix h(N, d);
  for (std::size_t i = 0; i < N; ++i) {
    auto e = weights.embedding.row(tokens[i]);
    std::copy(e.begin(), e.end(), h.row(i).begin());
  }
  tr.states.push_back(h);

  const double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& lw = weights.layers[l];
    const Matrix x = norm_rows(h, lw.attn_norm_gain, lw.attn_norm_bias);
    Matrix attn_sum(N, d);
    std::vector<Matrix> contribs;
    std::vector<Matrix> patterns;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      Matrix q = numkit::matmul(x, lw.wq[hd]);
      Matrix k = numkit::matmul(x, lw.wk[hd]);
      Matrix v = numkit::matmul(x, lw.wv[hd]);
      Matrix scores(N, N);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += q(i, c) * k(j, c);
          scores(i, j) = s * inv_sqrt_dk;
        }
      auto mit = head_mask.find({l, hd});
      const MaskMatrix& mask = mit == head_mask.end() ? layer_mask[l] : mit->second;
      Matrix attn = numkit::masked_softmax(scores, mask);
      Matrix head_out = numkit::matmul(attn, v);  // N x dk
      auto sit = head_scale.find({l, hd});
      if (sit != head_scale.end())
        for (const auto& [pos, factor] : sit->second)
          for (std::size_t c = 0; c < dk; ++c) head_out(pos, c) *= factor;
      Matrix contrib = numkit::matmul(head_out, lw.wo[hd]);  // N x d
      attn_sum += contrib;
      if (detail == TraceDetail::Full) {
        contribs.push_back(std::move(contrib));
        patterns.push_back(std::move(attn));
      }
    }
    Matrix post = h + attn_sum;
    const Matrix y = norm_rows(post, lw.mlp_norm_gain, lw.mlp_norm_bias);
    Matrix hidden = numkit::matmul(y, lw.mlp_in);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < cfg.mlp_hidden; ++j)
        hidden(i, j) = gelu(hidden(i, j) + lw.mlp_b1[j]);
    Matrix f = numkit::matmul(hidden, lw.mlp_out);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < d; ++j) f(i, j) += lw.mlp_b2[j];

    h = post + f;
    tr.attn_out.push_back(std::move(attn_sum));
    tr.post_attn.push_back(std::move(post));
    tr.mlp_out.push_back(std::move(f));
    tr.states.push_back(h);
    if (detail == TraceDetail::Full) {
      tr.head_contrib.push_back(std::move(contribs));
      tr.attn.push_back(std::move(patterns));
    }
  }

  auto ro = std::make_shared<Readout>();
  ro->unembed = weights.unembed;
  ro->final_norm_gain = weights.final_norm_gain;
  ro->final_norm_bias = weights.final_norm_bias;
  ro->final_norm_for_lens = cfg.final_norm_for_lens;
  tr.readout = std::move(ro);

  tr.final_logits = logits_at(tr, cfg.layers, N - 1, true);
  tr.final_dist = softmax(tr.final_logits);
  return tr;
}

std::vector<double> logits_at(const ForwardTrace& trace, std::size_t layer,
                              std::size_t position, bool normalize) {
  if (layer >= trace.states.size())
    throw Error("logits_at: layer " + std::to_string(layer) + " out of range (L=" +
                std::to_string(trace.states.size() - 1) + ")");
  if (position >= trace.seq_len)
    throw Error("logits_at: position " + std::to_string(position) + " out of range (N=" +
                std::to_string(trace.seq_len) + ")");
  const Readout& ro = *trace.readout;
  auto hrow = trace.states[layer].row(position);
  std::vector<double> hvec(hrow.begin(), hrow.end());
  if (normalize) hvec = numkit::layer_norm(hvec, ro.final_norm_gain, ro.final_norm_bias);
  std::vector<double> logits(trace.vocab_size, 0.0);
  for (std::size_t y = 0; y < trace.vocab_size; ++y) {
    auto erow = ro.unembed.row(y);
    double s = 0.0;
    for (std::size_t j = 0; j < hvec.size(); ++j) s += erow[j] * hvec[j];
    logits[y] = s;
  }
  return logits;
}

}  // namespace modarb::model
