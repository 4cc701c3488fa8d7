#include "modarb/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace modarb::attr {

using metrics::DictAgg;
using metrics::SignalConfig;
using model::Readout;
using numkit::Matrix;

namespace {

double dict_score_at(const Readout& ro, std::span<const double> h,
                     const std::vector<TokenId>& dict, DictAgg agg, bool norm) {
  std::vector<double> state;
  std::span<const double> v = h;
  if (norm) {
    state = numkit::layer_norm(h, ro.final_norm_gain, ro.final_norm_bias);
    v = state;
  }
  auto logit = [&](TokenId t) {
    if (t >= ro.unembed.rows()) throw Error("attribution: dictionary token out of vocabulary");
    const auto row = ro.unembed.row(t);
    double s = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) s += row[j] * v[j];
    return s;
  };
  if (dict.empty()) throw Error("attribution: empty answer dictionary");
  if (agg == DictAgg::Max) {
    double best = logit(dict[0]);
    for (std::size_t i = 1; i < dict.size(); ++i) best = std::max(best, logit(dict[i]));
    return best;
  }
  double sum = 0.0;
  for (TokenId t : dict) sum += logit(t);
  return sum / double(dict.size());
}

double phi_over(const Readout& ro, const model::SegmentMap& segmap, const Matrix& hidden,
                const std::vector<TokenId>& dict, const SignalConfig& cfg) {
  const auto ins = segmap.ins();
  if (cfg.top_k < 1 || cfg.top_k > ins.size())
    throw Error("attribution: top_k must be in [1, |instruction positions|]");
  std::vector<double> scores;
  scores.reserve(ins.size());
  for (std::size_t pos : ins) {
    if (pos >= hidden.rows()) throw Error("attribution: segment map exceeds hidden rows");
    scores.push_back(dict_score_at(ro, hidden.row(pos), dict, cfg.agg, cfg.final_norm));
  }
  std::partial_sort(scores.begin(), scores.begin() + cfg.top_k, scores.end(),
                    std::greater<double>());
  double sum = 0.0;
  for (std::size_t i = 0; i < cfg.top_k; ++i) sum += scores[i];
  return sum / double(cfg.top_k);
}

}  // namespace

MetricFn make_phi_metric(std::shared_ptr<const Readout> readout,
                         const model::SegmentMap& segmap, std::vector<TokenId> dict,
                         SignalConfig cfg) {
  if (!readout) throw Error("make_phi_metric: missing readout");
  return [readout, segmap, dict = std::move(dict), cfg](const Matrix& hidden) {
    return phi_over(*readout, segmap, hidden, dict, cfg);
  };
}

MetricFn make_margin_metric(std::shared_ptr<const Readout> readout,
                            const model::SegmentMap& segmap, std::vector<TokenId> followed,
                            std::vector<TokenId> other, SignalConfig cfg) {
  if (!readout) throw Error("make_margin_metric: missing readout");
  return [readout, segmap, followed = std::move(followed), other = std::move(other),
          cfg](const Matrix& hidden) {
    return phi_over(*readout, segmap, hidden, followed, cfg) -
           phi_over(*readout, segmap, hidden, other, cfg);
  };
}

MetricFn make_linear_metric(std::vector<double> weights, std::size_t position) {
  return [weights = std::move(weights), position](const Matrix& hidden) {
    if (position >= hidden.rows()) throw Error("linear metric: position out of range");
    if (weights.size() != hidden.cols()) throw Error("linear metric: weight length mismatch");
    const auto row = hidden.row(position);
    double s = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) s += weights[j] * row[j];
    return s;
  };
}

SublayerDeltas sublayer_deltas(const model::ForwardTrace& trace, const MetricFn& metric) {
  SublayerDeltas out;
  out.attn.reserve(trace.layers);
  out.mlp.reserve(trace.layers);
  for (std::size_t l = 0; l < trace.layers; ++l) {
    const double before = metric(trace.residual_in(l));
    const double mid = metric(trace.post_attn[l]);
    const double after = metric(trace.residual_out(l));
    out.attn.push_back(mid - before);
    out.mlp.push_back(after - mid);
  }
  return out;
}

std::vector<std::vector<double>> head_deltas(const model::ForwardTrace& trace,
                                             const MetricFn& metric) {
  if (trace.detail != model::TraceDetail::Full)
    throw Error("head_deltas: trace lacks per-head contributions (StatesOnly detail)");
  std::vector<std::vector<double>> out(trace.layers);
  for (std::size_t l = 0; l < trace.layers; ++l) {
    const double before = metric(trace.residual_in(l));
    out[l].reserve(trace.heads);
    for (std::size_t h = 0; h < trace.heads; ++h)
      out[l].push_back(metric(trace.residual_in(l) + trace.head_contrib[l][h]) - before);
  }
  return out;
}

HeadAccumulator::HeadAccumulator(std::size_t layers, std::size_t heads)
    : layers_(layers), heads_(heads), sums_(layers * heads, 0.0) {}

void HeadAccumulator::add(const std::vector<std::vector<double>>& deltas) {
  if (deltas.size() != layers_) throw Error("HeadAccumulator: layer count mismatch");
  for (std::size_t l = 0; l < layers_; ++l) {
    if (deltas[l].size() != heads_) throw Error("HeadAccumulator: head count mismatch");
    for (std::size_t h = 0; h < heads_; ++h) sums_[l * heads_ + h] += deltas[l][h];
  }
  ++n_;
}

std::vector<HeadScore> HeadAccumulator::ranking(bool absolute) const {
  if (n_ == 0) throw Error("HeadAccumulator: no samples accumulated");
  std::vector<HeadScore> out;
  out.reserve(layers_ * heads_);
  for (std::size_t l = 0; l < layers_; ++l)
    for (std::size_t h = 0; h < heads_; ++h)
      out.push_back({l, h, sums_[l * heads_ + h] / double(n_), n_});
  std::stable_sort(out.begin(), out.end(), [absolute](const HeadScore& a, const HeadScore& b) {
    const double ka = absolute ? std::fabs(a.mean_delta) : a.mean_delta;
    const double kb = absolute ? std::fabs(b.mean_delta) : b.mean_delta;
    if (ka != kb) return ka > kb;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.head < b.head;
  });
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> top_intersection(
    const std::vector<HeadScore>& a, const std::vector<HeadScore>& b, std::size_t g) {
  g = std::min({g, a.size(), b.size()});
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t j = 0; j < g; ++j)
      if (a[i].layer == b[j].layer && a[i].head == b[j].head) {
        out.emplace_back(a[i].layer, a[i].head);
        break;
      }
  }
  return out;
}

std::string ranking_to_csv(const std::vector<HeadScore>& scores) {
  std::ostringstream os;
  os << "layer,head,mean_delta,n\n";
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s.mean_delta);
    os << s.layer << ',' << s.head << ',' << buf << ',' << s.n << '\n';
  }
  return os.str();
}

std::string ranking_to_json(const std::vector<HeadScore>& scores) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : scores)
    arr.push_back({{"layer", s.layer}, {"head", s.head}, {"mean_delta", s.mean_delta},
                   {"n", s.n}});
  return arr.dump(2);
}

}  // namespace modarb::attr
