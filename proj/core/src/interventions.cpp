#include "modarb/interventions.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"

namespace modarb::iv {

namespace {

using nlohmann::json;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

json pairs_to_json(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  json a = json::array();
  for (const auto& [l, h] : pairs) a.push_back({l, h});
  return a;
}

std::vector<std::pair<std::size_t, std::size_t>> pairs_from_json(const json& a) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& e : a) out.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
  return out;
}

json plan_to_json(const InterventionPlan& p) {
  json j;
  j["knockouts"] = json::array();
  for (const auto& k : p.knockouts)
    j["knockouts"].push_back(
        {{"src", k.src}, {"dst", k.dst}, {"layers", k.layers}, {"heads", k.heads}});
  j["blocks"] = json::array();
  for (const auto& b : p.blocks)
    j["blocks"].push_back({{"pairs", pairs_to_json(b.pairs)}, {"positions", b.positions}});
  j["amplifies"] = json::array();
  for (const auto& a : p.amplifies)
    j["amplifies"].push_back({{"pairs", pairs_to_json(a.pairs)},
                              {"factor", a.factor},
                              {"positions", a.positions}});
  return j;
}

}  // namespace

std::string InterventionPlan::to_json() const { return plan_to_json(*this).dump(); }

std::string InterventionPlan::id() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(to_json())));
  return buf;
}

InterventionPlan InterventionPlan::from_json(const std::string& text) {
  json j = json::parse(text);
  InterventionPlan p;
  for (const auto& k : j.at("knockouts")) {
    KnockoutSpec s;
    s.src = k.at("src").get<std::vector<std::size_t>>();
    s.dst = k.at("dst").get<std::vector<std::size_t>>();
    s.layers = k.at("layers").get<std::vector<std::size_t>>();
    s.heads = k.at("heads").get<std::vector<std::size_t>>();
    p.knockouts.push_back(std::move(s));
  }
  for (const auto& b : j.at("blocks")) {
    HeadBlock hb;
    hb.pairs = pairs_from_json(b.at("pairs"));
    hb.positions = b.at("positions").get<std::vector<std::size_t>>();
    p.blocks.push_back(std::move(hb));
  }
  for (const auto& a : j.at("amplifies")) {
    HeadAmplify ha;
    ha.pairs = pairs_from_json(a.at("pairs"));
    ha.factor = a.at("factor").get<double>();
    ha.positions = a.at("positions").get<std::vector<std::size_t>>();
    p.amplifies.push_back(std::move(ha));
  }
  return p;
}

void InterventionPlan::validate(std::size_t layers, std::size_t heads,
                                std::size_t seq_len) const {
  auto check_pos = [&](std::size_t i, const char* what) {
    if (i >= seq_len)
      throw Error(std::string("plan: ") + what + " position " + std::to_string(i) +
                  " out of range (N=" + std::to_string(seq_len) + ")");
  };
  for (const auto& k : knockouts) {
    if (k.src.empty() || k.dst.empty()) throw Error("plan: knockout with empty edge set");
    if (k.layers.empty()) throw Error("plan: knockout with empty layer set");
    for (auto l : k.layers)
      if (l >= layers)
        throw Error("plan: knockout layer " + std::to_string(l) + " out of range (L=" +
                    std::to_string(layers) + ")");
    for (auto h : k.heads)
      if (h >= heads) throw Error("plan: knockout head " + std::to_string(h) + " out of range");
    for (auto j : k.src) check_pos(j, "knockout src");
    for (auto i : k.dst) check_pos(i, "knockout dst");
  }
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> blocked;
  for (const auto& b : blocks) {
    if (b.positions.empty()) throw Error("plan: head block with empty position set");
    for (const auto& [l, h] : b.pairs) {
      if (l >= layers || h >= heads)
        throw Error("plan: head block (" + std::to_string(l) + "," + std::to_string(h) +
                    ") out of range");
      for (auto i : b.positions) {
        check_pos(i, "head block");
        blocked.insert({l, h, i});
      }
    }
  }
  for (const auto& a : amplifies) {
    if (!(a.factor > 0.0)) throw Error("plan: amplify factor must be > 0");
    if (a.positions.empty()) throw Error("plan: head amplify with empty position set");
    for (const auto& [l, h] : a.pairs) {
      if (l >= layers || h >= heads)
        throw Error("plan: head amplify (" + std::to_string(l) + "," + std::to_string(h) +
                    ") out of range");
      for (auto i : a.positions) {
        check_pos(i, "head amplify");
        if (blocked.count({l, h, i}))
          throw Error("plan: head (" + std::to_string(l) + "," + std::to_string(h) +
                      ") at position " + std::to_string(i) +
                      " is both blocked and amplified");
      }
    }
  }
}

KnockoutSpec make_knockout(std::vector<std::size_t> src, std::vector<std::size_t> dst,
                           std::size_t center_layer, std::size_t k, std::size_t num_layers) {
  if (src.empty() || dst.empty()) throw Error("make_knockout: empty source or destination set");
  if (center_layer >= num_layers)
    throw Error("make_knockout: center layer " + std::to_string(center_layer) +
                " out of range (L=" + std::to_string(num_layers) + ")");
  KnockoutSpec s;
  s.src = std::move(src);
  s.dst = std::move(dst);
  const std::size_t lo = center_layer > k ? center_layer - k : 0;
  const std::size_t hi = std::min(num_layers - 1, center_layer + k);
  for (std::size_t l = lo; l <= hi; ++l) s.layers.push_back(l);
  if (s.layers.empty()) throw Error("make_knockout: empty effective window");
  return s;
}

KnockoutSpec make_layer_range_knockout(std::vector<std::size_t> src,
                                       std::vector<std::size_t> dst, std::size_t first_layer,
                                       std::size_t last_layer, std::size_t num_layers) {
  if (src.empty() || dst.empty())
    throw Error("make_layer_range_knockout: empty source or destination set");
  if (first_layer > last_layer)
    throw Error("make_layer_range_knockout: reversed range [" + std::to_string(first_layer) +
                "," + std::to_string(last_layer) + "]");
  if (last_layer >= num_layers)
    throw Error("make_layer_range_knockout: layer " + std::to_string(last_layer) +
                " out of range (L=" + std::to_string(num_layers) + ")");
  KnockoutSpec s;
  s.src = std::move(src);
  s.dst = std::move(dst);
  for (std::size_t l = first_layer; l <= last_layer; ++l) s.layers.push_back(l);
  return s;
}

HeadBlock make_head_block(std::vector<std::pair<std::size_t, std::size_t>> pairs,
                          std::vector<std::size_t> positions) {
  HeadBlock b;
  b.pairs = std::move(pairs);
  b.positions = std::move(positions);
  return b;
}

HeadAmplify make_head_amplify(std::vector<std::pair<std::size_t, std::size_t>> pairs,
                              double factor, std::vector<std::size_t> positions) {
  if (!(factor > 0.0)) throw Error("make_head_amplify: factor must be > 0");
  HeadAmplify a;
  a.pairs = std::move(pairs);
  a.factor = factor;
  a.positions = std::move(positions);
  return a;
}

}  // namespace modarb::iv
