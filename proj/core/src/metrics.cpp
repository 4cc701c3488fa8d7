#include "modarb/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace modarb::metrics {

namespace {
constexpr double kMassFloor = 1e-12;

double dict_score(const std::vector<double>& logits, const std::vector<TokenId>& dict,
                  DictAgg agg) {
  if (dict.empty()) throw Error("metrics: empty answer dictionary");
  if (agg == DictAgg::Max) {
    double best = logits.at(dict[0]);
    for (TokenId t : dict) best = std::max(best, logits.at(t));
    return best;
  }
  double sum = 0.0;
  for (TokenId t : dict) sum += logits.at(t);
  return sum / double(dict.size());
}
}  // namespace

DecisionSubspace subspace_of(const ConflictSample& sample) {
  if (sample.kind == InstructionKind::Vision)
    return {sample.answer_vision, sample.answer_text};
  return {sample.answer_text, sample.answer_vision};
}

numkit::TwoPoint binary_renormalize(const std::vector<double>& dist, DecisionSubspace ds) {
  if (ds.compliant == ds.competitor)
    throw Error("binary_renormalize: subspace tokens must differ");
  const double mp = dist.at(ds.compliant), mc = dist.at(ds.competitor);
  if (mp < 0 || mc < 0) throw Error("binary_renormalize: negative probability mass");
  const double z = mp + mc;
  if (z < kMassFloor)
    throw Error("binary_renormalize: subspace mass below floor, distribution degenerate");
  return {mp / z, mc / z};
}

double nssd(const std::vector<double>& clean_dist, const std::vector<double>& edited_dist,
            DecisionSubspace ds) {
  const auto p = binary_renormalize(clean_dist, ds);
  const auto q = binary_renormalize(edited_dist, ds);
  const double diff = p.p - q.p;
  if (diff == 0.0) return 0.0;
  const double kl = numkit::kl_divergence(p, q);
  return diff > 0 ? kl : -kl;
}

double signal_phi(const model::ForwardTrace& trace, std::size_t layer,
                  const std::vector<TokenId>& dict, const SignalConfig& cfg) {
  const auto ins = trace.segmap.ins();
  if (cfg.top_k < 1 || cfg.top_k > ins.size())
    throw Error("signal_phi: top_k must be in [1, |instruction positions|]");
  std::vector<double> scores;
  scores.reserve(ins.size());
  for (std::size_t pos : ins) {
    const auto logits = model::logits_at(trace, layer, pos, cfg.final_norm);
    scores.push_back(dict_score(logits, dict, cfg.agg));
  }
  std::partial_sort(scores.begin(), scores.begin() + cfg.top_k, scores.end(),
                    std::greater<double>());
  double sum = 0.0;
  for (std::size_t i = 0; i < cfg.top_k; ++i) sum += scores[i];
  return sum / double(cfg.top_k);
}

double answer_margin(const model::ForwardTrace& trace, std::size_t layer,
                     const std::vector<TokenId>& followed, const std::vector<TokenId>& other,
                     const SignalConfig& cfg) {
  return signal_phi(trace, layer, followed, cfg) - signal_phi(trace, layer, other, cfg);
}

bool lens_aligned(const model::ForwardTrace& trace, std::size_t layer,
                  const std::vector<TokenId>& followed, const std::vector<TokenId>& other,
                  const SignalConfig& cfg) {
  return answer_margin(trace, layer, followed, other, cfg) > 0.0;
}

std::vector<TokenId> dict_union(const ConflictSample& sample) {
  std::vector<TokenId> u(sample.entities_vision.begin(), sample.entities_vision.end());
  u.insert(u.end(), sample.entities_text.begin(), sample.entities_text.end());
  std::sort(u.begin(), u.end());
  if (std::adjacent_find(u.begin(), u.end()) != u.end())
    throw Error("dict_union: dictionaries overlap");
  return u;
}

TokenId behavioral_choice(const model::ForwardTrace& trace, const ConflictSample& sample) {
  const auto pool = dict_union(sample);
  TokenId best = pool.front();
  for (TokenId y : pool)
    if (trace.final_dist.at(y) > trace.final_dist.at(best)) best = y;
  return best;
}

bool follows_instruction(const model::ForwardTrace& trace, const ConflictSample& sample) {
  const TokenId y = behavioral_choice(trace, sample);
  const auto& instructed =
      sample.kind == InstructionKind::Vision ? sample.entities_vision : sample.entities_text;
  return std::find(instructed.begin(), instructed.end(), y) != instructed.end();
}

std::vector<bool> alignment_profile(const model::ForwardTrace& trace,
                                    const ConflictSample& sample, const SignalConfig& cfg) {
  const TokenId y = behavioral_choice(trace, sample);
  const bool vision_followed = std::find(sample.entities_vision.begin(),
                                         sample.entities_vision.end(),
                                         y) != sample.entities_vision.end();
  const auto& followed = vision_followed ? sample.entities_vision : sample.entities_text;
  const auto& other = vision_followed ? sample.entities_text : sample.entities_vision;
  std::vector<bool> out;
  out.reserve(trace.states.size());
  for (std::size_t l = 0; l < trace.states.size(); ++l)
    out.push_back(lens_aligned(trace, l, followed, other, cfg));
  return out;
}

bool decision_synced(const model::ForwardTrace& trace, const ConflictSample& sample,
                     std::size_t layer, const SignalConfig& cfg) {
  const double av = signal_phi(trace, layer, sample.entities_vision, cfg);
  const double at = signal_phi(trace, layer, sample.entities_text, cfg);
  if (av == at) return false;
  const auto gen = trace.segmap.gen();
  if (gen.empty()) throw Error("decision_synced: no generation position");
  const auto logits = model::logits_at(trace, layer, gen.front(), cfg.final_norm);
  const double gv = dict_score(logits, sample.entities_vision, cfg.agg);
  const double gt = dict_score(logits, sample.entities_text, cfg.agg);
  if (gv == gt) return false;
  return (av > at) == (gv > gt);
}

}  // namespace modarb::metrics
