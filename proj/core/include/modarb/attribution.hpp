#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "modarb/metrics.hpp"
#include "modarb/model.hpp"

namespace modarb::attr {

// A scalar metric over a full hidden-state matrix (N x d). Sublayer and head
// deltas difference such a metric across residual-stream snapshots.
using MetricFn = std::function<double(const numkit::Matrix&)>;

// Dictionary lens signal as a hidden-state metric (same aggregation rules as
// metrics::signal_phi).
MetricFn make_phi_metric(std::shared_ptr<const model::Readout> readout,
                         const model::SegmentMap& segmap, std::vector<TokenId> dict,
                         metrics::SignalConfig cfg);

// Followed-minus-competing dictionary margin.
MetricFn make_margin_metric(std::shared_ptr<const model::Readout> readout,
                            const model::SegmentMap& segmap, std::vector<TokenId> followed,
                            std::vector<TokenId> other, metrics::SignalConfig cfg);

// Inner product of one hidden row with fixed weights. Linear in the state, so
// head deltas at a layer sum exactly to the attention sublayer delta.
MetricFn make_linear_metric(std::vector<double> weights, std::size_t position);

struct SublayerDeltas {
  std::vector<double> attn;  // per layer: M(H^{l-1} + A^l) - M(H^{l-1})
  std::vector<double> mlp;   // per layer: M(H^l) - M(H^{l-1} + A^l)
};

SublayerDeltas sublayer_deltas(const model::ForwardTrace& trace, const MetricFn& metric);

// Per-head attention deltas, [layer][head], from adding the head's projected
// contribution to the incoming residual. Requires a Full-detail trace.
std::vector<std::vector<double>> head_deltas(const model::ForwardTrace& trace,
                                             const MetricFn& metric);

struct HeadScore {
  std::size_t layer = 0;
  std::size_t head = 0;
  double mean_delta = 0.0;
  std::size_t n = 0;
};

// Streaming mean of per-head deltas across a sample population.
class HeadAccumulator {
 public:
  HeadAccumulator(std::size_t layers, std::size_t heads);
  void add(const std::vector<std::vector<double>>& deltas);

  // Scores sorted by descending mean delta (optionally by descending absolute
  // mean); ties break on lower layer, then lower head.
  std::vector<HeadScore> ranking(bool absolute = false) const;

 private:
  std::size_t layers_, heads_;
  std::vector<double> sums_;
  std::size_t n_ = 0;
};

// (layer, head) pairs present in the top `g` of both rankings, in the first
// ranking's order.
std::vector<std::pair<std::size_t, std::size_t>> top_intersection(
    const std::vector<HeadScore>& a, const std::vector<HeadScore>& b, std::size_t g);

// "layer,head,mean_delta,n" rows, header included.
std::string ranking_to_csv(const std::vector<HeadScore>& scores);
std::string ranking_to_json(const std::vector<HeadScore>& scores);

}  // namespace modarb::attr
