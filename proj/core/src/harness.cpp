#include "modarb/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "modarb/trace_io.hpp"

namespace modarb::harness {

using metrics::SignalConfig;
using model::ForwardTrace;
using model::TraceDetail;
using nlohmann::json;

namespace {

constexpr const char* kCodeVersion = "modarb 0.1.0";

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw Error(std::string("config: ") + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw Error(std::string("config: unknown key '") + key + "' in " + where);
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Ordered accumulation so output bytes do not depend on worker count.
struct Agg {
  std::size_t n = 0;
  std::size_t skipped = 0;
  double sum = 0.0, sumsq = 0.0;

  void add(const std::optional<double>& v) {
    if (!v) {
      ++skipped;
      return;
    }
    ++n;
    sum += *v;
    sumsq += *v * *v;
  }
  double mean() const { return n ? sum / double(n) : 0.0; }
  double stddev() const {
    if (n == 0) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sumsq / double(n) - m * m));
  }
};

ResultRow make_row(std::vector<std::pair<std::string, std::string>> axes, std::string metric,
                   const Agg& a) {
  return {std::move(axes), std::move(metric), a.mean(), a.stddev(), a.n, a.skipped};
}

// Runs fn(i) for i in [0, n) on `jobs` threads. Results land at index i, so
// downstream reduction order is fixed regardless of scheduling.
template <typename T, typename Fn>
std::vector<T> map_indexed(std::size_t n, std::size_t jobs, Fn fn) {
  std::vector<T> out(n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

struct Pathway {
  std::string name;
  std::vector<std::size_t> src, dst;
};

std::vector<Pathway> standard_pathways(const model::SegmentMap& s) {
  return {{"cv_to_ins", s.vis(), s.ins()},
          {"ct_to_ins", s.ctx(), s.ins()},
          {"cv_to_gen", s.vis(), s.gen()},
          {"ct_to_gen", s.ctx(), s.gen()},
          {"ins_to_gen", s.ins(), s.gen()}};
}

const std::vector<TokenId>& instructed_dict(const ConflictSample& s) {
  return s.kind == InstructionKind::Vision ? s.entities_vision : s.entities_text;
}
const std::vector<TokenId>& competing_dict(const ConflictSample& s) {
  return s.kind == InstructionKind::Vision ? s.entities_text : s.entities_vision;
}

std::string signal_desc(const SignalConfig& s) {
  std::ostringstream os;
  os << "top_k=" << s.top_k << ",agg=" << (s.agg == metrics::DictAgg::Max ? "max" : "avg")
     << ",final_norm=" << (s.final_norm ? 1 : 0);
  return os.str();
}

SweepResult start_result(const char* experiment, const RunConfig& cfg) {
  SweepResult r;
  r.experiment = experiment;
  r.config_hash = cfg.hash();
  r.seed = cfg.seed;
  r.signal_desc = signal_desc(cfg.signal);
  return r;
}

void note_plan(SweepResult& r, const iv::InterventionPlan& plan) {
  const std::string id = plan.id();
  if (std::find(r.plan_ids.begin(), r.plan_ids.end(), id) == r.plan_ids.end())
    r.plan_ids.push_back(id);
}

SignalConfig parse_signal(const json& j) {
  check_keys(j, {"top_k", "agg", "final_norm"}, "signal");
  SignalConfig s;
  if (j.contains("top_k")) s.top_k = j["top_k"].get<std::size_t>();
  if (j.contains("agg")) {
    const std::string a = j["agg"].get<std::string>();
    if (a == "max")
      s.agg = metrics::DictAgg::Max;
    else if (a == "avg")
      s.agg = metrics::DictAgg::Avg;
    else
      throw Error("config: signal.agg must be 'max' or 'avg'");
  }
  if (j.contains("final_norm")) s.final_norm = j["final_norm"].get<bool>();
  return s;
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw Error(std::string("config: parse error: ") + e.what());
  }
  check_keys(j,
             {"model", "planted", "model_source", "samples", "seed", "signal", "k_values",
              "g_values", "alpha_values", "deep_range", "samples_path", "jobs", "max_skip",
              "out_dir"},
             "top level");
  RunConfig cfg;
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m,
               {"layers", "heads", "model_dim", "head_dim", "mlp_hidden", "vocab_size",
                "segments", "final_norm_for_lens", "gen_token"},
               "model");
    if (m.contains("layers")) cfg.model.layers = m["layers"].get<std::size_t>();
    if (m.contains("heads")) cfg.model.heads = m["heads"].get<std::size_t>();
    if (m.contains("model_dim")) cfg.model.model_dim = m["model_dim"].get<std::size_t>();
    if (m.contains("head_dim")) cfg.model.head_dim = m["head_dim"].get<std::size_t>();
    if (m.contains("mlp_hidden")) cfg.model.mlp_hidden = m["mlp_hidden"].get<std::size_t>();
    if (m.contains("vocab_size")) cfg.model.vocab_size = m["vocab_size"].get<std::size_t>();
    if (m.contains("segments")) {
      const json& s = m["segments"];
      check_keys(s, {"vis", "ctx", "ins", "gen"}, "model.segments");
      if (s.contains("vis")) cfg.model.segments.n_vis = s["vis"].get<std::size_t>();
      if (s.contains("ctx")) cfg.model.segments.n_ctx = s["ctx"].get<std::size_t>();
      if (s.contains("ins")) cfg.model.segments.n_ins = s["ins"].get<std::size_t>();
      if (s.contains("gen")) cfg.model.segments.n_gen = s["gen"].get<std::size_t>();
    }
    if (m.contains("final_norm_for_lens"))
      cfg.model.final_norm_for_lens = m["final_norm_for_lens"].get<bool>();
    if (m.contains("gen_token")) cfg.model.gen_token = m["gen_token"].get<TokenId>();
  }
  cfg.planted = testbed::PlantedCircuitSpec::default_for(cfg.model);
  if (j.contains("planted")) {
    const json& p = j["planted"];
    check_keys(p,
               {"relay_layer", "relay_head_vision", "relay_head_text", "arbitration_layer",
                "arbitration_heads", "inertia_strength", "noise_scale"},
               "planted");
    if (p.contains("relay_layer")) cfg.planted.relay_layer = p["relay_layer"].get<std::size_t>();
    if (p.contains("relay_head_vision"))
      cfg.planted.relay_head_vision = p["relay_head_vision"].get<std::size_t>();
    if (p.contains("relay_head_text"))
      cfg.planted.relay_head_text = p["relay_head_text"].get<std::size_t>();
    if (p.contains("arbitration_layer")) {
      cfg.planted.arbitration_layer = p["arbitration_layer"].get<std::size_t>();
      cfg.planted.arbitration_heads = {{cfg.planted.arbitration_layer, 0},
                                       {cfg.planted.arbitration_layer, 1},
                                       {cfg.planted.arbitration_layer, 2}};
    }
    if (p.contains("arbitration_heads")) {
      cfg.planted.arbitration_heads.clear();
      for (const auto& e : p["arbitration_heads"])
        cfg.planted.arbitration_heads.emplace_back(e.at(0).get<std::size_t>(),
                                                   e.at(1).get<std::size_t>());
    }
    if (p.contains("inertia_strength"))
      cfg.planted.inertia_strength = p["inertia_strength"].get<double>();
    if (p.contains("noise_scale")) cfg.planted.noise_scale = p["noise_scale"].get<double>();
  }
  if (j.contains("model_source")) {
    cfg.model_source = j["model_source"].get<std::string>();
    if (cfg.model_source != "planted" && cfg.model_source != "random")
      throw Error("config: model_source must be 'planted' or 'random'");
  }
  if (j.contains("samples")) cfg.samples = j["samples"].get<std::size_t>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("signal")) cfg.signal = parse_signal(j["signal"]);
  if (j.contains("k_values")) cfg.k_values = j["k_values"].get<std::vector<std::size_t>>();
  if (j.contains("g_values")) cfg.g_values = j["g_values"].get<std::vector<std::size_t>>();
  if (j.contains("alpha_values"))
    cfg.alpha_values = j["alpha_values"].get<std::vector<double>>();
  if (j.contains("deep_range")) {
    const auto& d = j["deep_range"];
    if (!d.is_array() || d.size() != 2)
      throw Error("config: deep_range must be [first, last]");
    cfg.deep_range = {d[0].get<std::size_t>(), d[1].get<std::size_t>()};
  }
  if (j.contains("samples_path")) cfg.samples_path = j["samples_path"].get<std::string>();
  if (j.contains("jobs")) cfg.jobs = j["jobs"].get<std::size_t>();
  if (j.contains("max_skip")) cfg.max_skip = j["max_skip"].get<double>();
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();

  cfg.model.validate();
  if (cfg.model_source == "planted") cfg.planted.validate(cfg.model);
  if (cfg.samples == 0) throw Error("config: samples must be >= 1");
  if (cfg.k_values.empty()) throw Error("config: k_values must be nonempty");
  if (cfg.max_skip < 0 || cfg.max_skip > 1) throw Error("config: max_skip must be in [0,1]");
  return cfg;
}

std::string RunConfig::to_json() const {
  json planted_heads = json::array();
  for (auto [l, h] : planted.arbitration_heads) planted_heads.push_back({l, h});
  json j{{"model",
          {{"layers", model.layers},
           {"heads", model.heads},
           {"model_dim", model.model_dim},
           {"head_dim", model.head_dim},
           {"mlp_hidden", model.mlp_hidden},
           {"vocab_size", model.vocab_size},
           {"segments",
            {{"vis", model.segments.n_vis},
             {"ctx", model.segments.n_ctx},
             {"ins", model.segments.n_ins},
             {"gen", model.segments.n_gen}}},
           {"final_norm_for_lens", model.final_norm_for_lens},
           {"gen_token", model.gen_token}}},
         {"planted",
          {{"relay_layer", planted.relay_layer},
           {"relay_head_vision", planted.relay_head_vision},
           {"relay_head_text", planted.relay_head_text},
           {"arbitration_layer", planted.arbitration_layer},
           {"arbitration_heads", planted_heads},
           {"inertia_strength", planted.inertia_strength},
           {"noise_scale", planted.noise_scale}}},
         {"model_source", model_source},
         {"samples", samples},
         {"seed", seed},
         {"signal",
          {{"top_k", signal.top_k},
           {"agg", signal.agg == metrics::DictAgg::Max ? "max" : "avg"},
           {"final_norm", signal.final_norm}}},
         {"k_values", k_values},
         {"g_values", g_values},
         {"alpha_values", alpha_values},
         {"samples_path", samples_path}};
  if (deep_range) j["deep_range"] = {deep_range->first, deep_range->second};
  return j.dump();
}

std::string RunConfig::hash() const { return hex16(fnv1a(to_json())); }

std::pair<std::size_t, std::size_t> RunConfig::deep_layers() const {
  if (deep_range) {
    if (deep_range->first > deep_range->second || deep_range->second >= model.layers)
      throw Error("config: deep_range out of model layers");
    return *deep_range;
  }
  if (model_source == "planted")
    return {planted.arbitration_layer, planted.inherit_layer()};
  return {model.layers >= 3 ? model.layers - 3 : 0, model.layers - 1};
}

Workbench prepare(const RunConfig& cfg) {
  Workbench wb;
  wb.vocab = testbed::Vocabulary::standard(cfg.model.vocab_size);
  if (cfg.model_source == "planted")
    wb.weights = testbed::build_planted_model(cfg.model, cfg.planted, wb.vocab, cfg.seed);
  else
    wb.weights = model::build_model(cfg.model, cfg.seed);
  if (!cfg.samples_path.empty())
    wb.samples = testbed::read_samples_jsonl(cfg.samples_path, wb.vocab, cfg.model);
  else
    wb.samples = testbed::gen_conflict_samples(cfg.samples, cfg.seed, wb.vocab, cfg.model);
  wb.tokens.reserve(wb.samples.size());
  for (const auto& s : wb.samples) {
    auto [toks, segmap] = model::assemble_input(s, cfg.model);
    wb.tokens.push_back(std::move(toks));
    wb.segmap = segmap;
  }
  return wb;
}

SweepResult run_knockout_sweep(const RunConfig& cfg) {
  const Workbench wb = prepare(cfg);
  SweepResult res = start_result("knockout", cfg);
  const auto pathways = standard_pathways(wb.segmap);
  const std::size_t L = cfg.model.layers;

  struct Cell {
    std::size_t k, pathway, center;
  };
  std::vector<Cell> cells;
  std::vector<iv::InterventionPlan> plans;
  for (std::size_t ki = 0; ki < cfg.k_values.size(); ++ki)
    for (std::size_t pi = 0; pi < pathways.size(); ++pi)
      for (std::size_t c = 0; c < L; ++c) {
        iv::InterventionPlan plan;
        plan.knockouts.push_back(
            iv::make_knockout(pathways[pi].src, pathways[pi].dst, c, cfg.k_values[ki], L));
        note_plan(res, plan);
        cells.push_back({ki, pi, c});
        plans.push_back(std::move(plan));
      }

  using PerSample = std::vector<std::optional<double>>;
  auto per_sample = map_indexed<PerSample>(
      wb.samples.size(), cfg.jobs, [&](std::size_t i) {
        PerSample vals(cells.size());
        std::vector<double> clean;
        try {
          const auto clean_tr = model::forward(wb.weights, wb.tokens[i], wb.segmap, {},
                                               TraceDetail::StatesOnly);
          clean = clean_tr.final_dist;
        } catch (const std::exception&) {
          return vals;  // whole sample skipped
        }
        const auto ds = metrics::subspace_of(wb.samples[i]);
        for (std::size_t c = 0; c < cells.size(); ++c) {
          try {
            const auto tr = model::forward(wb.weights, wb.tokens[i], wb.segmap, plans[c],
                                           TraceDetail::StatesOnly);
            vals[c] = metrics::nssd(clean, tr.final_dist, ds);
          } catch (const std::exception&) {
          }
        }
        return vals;
      });

  for (std::size_t c = 0; c < cells.size(); ++c) {
    Agg by_task[2];  // vision-following task, text-following task
    for (std::size_t i = 0; i < wb.samples.size(); ++i)
      by_task[wb.samples[i].kind == InstructionKind::Vision ? 0 : 1].add(per_sample[i][c]);
    for (int t = 0; t < 2; ++t)
      res.rows.push_back(make_row({{"pathway", pathways[cells[c].pathway].name},
                                   {"center", std::to_string(cells[c].center)},
                                   {"k", std::to_string(cfg.k_values[cells[c].k])},
                                   {"task", t == 0 ? "vision" : "text"}},
                                  "nssd", by_task[t]));
  }
  return res;
}

SweepResult run_ldar_sweep(const RunConfig& cfg) {
  const Workbench wb = prepare(cfg);
  SweepResult res = start_result("ldar", cfg);
  const std::size_t n_states = cfg.model.layers + 1;

  struct PerSample {
    bool ok = false;
    bool followed = false;
    std::vector<bool> aligned;
    std::vector<bool> synced;
  };
  auto per_sample = map_indexed<PerSample>(wb.samples.size(), cfg.jobs, [&](std::size_t i) {
    PerSample r;
    try {
      const auto tr = model::forward(wb.weights, wb.tokens[i], wb.segmap, {},
                                     TraceDetail::StatesOnly);
      r.aligned = metrics::alignment_profile(tr, wb.samples[i], cfg.signal);
      for (std::size_t l = 0; l < n_states; ++l)
        r.synced.push_back(metrics::decision_synced(tr, wb.samples[i], l, cfg.signal));
      r.followed = metrics::follows_instruction(tr, wb.samples[i]);
      r.ok = true;
    } catch (const std::exception&) {
    }
    return r;
  });

  for (int filtered = 0; filtered < 2; ++filtered) {
    const std::string population = filtered ? "followed" : "all";
    for (std::size_t l = 0; l < n_states; ++l) {
      Agg ldar, sync;
      for (const auto& r : per_sample) {
        if (r.ok && filtered && !r.followed) continue;  // excluded, not skipped
        if (!r.ok) {
          ldar.add(std::nullopt);
          sync.add(std::nullopt);
          continue;
        }
        ldar.add(r.aligned[l] ? 1.0 : 0.0);
        sync.add(r.synced[l] ? 1.0 : 0.0);
      }
      std::vector<std::pair<std::string, std::string>> axes{{"section", "alignment"},
                                                            {"layer", std::to_string(l)},
                                                            {"population", population},
                                                            {"pathway", ""}};
      res.rows.push_back(make_row(axes, "ldar", ldar));
      res.rows.push_back(make_row(axes, "sync", sync));
    }
  }

  // deep-range pathway severing comparison
  const auto [first, last] = cfg.deep_layers();
  const auto pathways = standard_pathways(wb.segmap);
  for (const auto& pw : pathways) {
    if (pw.name != "ins_to_gen" && pw.name != "cv_to_gen" && pw.name != "ct_to_gen") continue;
    iv::InterventionPlan plan;
    plan.knockouts.push_back(
        iv::make_layer_range_knockout(pw.src, pw.dst, first, last, cfg.model.layers));
    note_plan(res, plan);
    auto follows = map_indexed<std::optional<double>>(
        wb.samples.size(), cfg.jobs, [&](std::size_t i) -> std::optional<double> {
          try {
            const auto tr = model::forward(wb.weights, wb.tokens[i], wb.segmap, plan,
                                           TraceDetail::StatesOnly);
            return metrics::follows_instruction(tr, wb.samples[i]) ? 1.0 : 0.0;
          } catch (const std::exception&) {
            return std::nullopt;
          }
        });
    for (int filtered = 0; filtered < 2; ++filtered) {
      Agg mfr;
      for (std::size_t i = 0; i < follows.size(); ++i) {
        if (per_sample[i].ok && filtered && !per_sample[i].followed) continue;
        if (filtered && !per_sample[i].ok) {
          mfr.add(std::nullopt);
          continue;
        }
        mfr.add(follows[i]);
      }
      res.rows.push_back(make_row({{"section", "severing"},
                                   {"layer", std::to_string(first) + "-" + std::to_string(last)},
                                   {"population", filtered ? "followed" : "all"},
                                   {"pathway", pw.name}},
                                  "mfr", mfr));
    }
  }
  return res;
}

SweepResult run_attribution_sweep(const RunConfig& cfg) {
  const Workbench wb = prepare(cfg);
  SweepResult res = start_result("attribution", cfg);
  const std::size_t L = cfg.model.layers;

  struct PerSample {
    bool ok = false;
    bool followed = false;
    std::vector<double> s_f, s_c;                  // residual layers 0..L
    attr::SublayerDeltas d_sf, d_mam;              // per layer
  };
  auto per_sample = map_indexed<PerSample>(wb.samples.size(), cfg.jobs, [&](std::size_t i) {
    PerSample r;
    try {
      const auto tr =
          model::forward(wb.weights, wb.tokens[i], wb.segmap, {}, TraceDetail::StatesOnly);
      const auto& s = wb.samples[i];
      r.followed = metrics::follows_instruction(tr, s);
      for (std::size_t l = 0; l <= L; ++l) {
        r.s_f.push_back(metrics::signal_phi(tr, l, instructed_dict(s), cfg.signal));
        r.s_c.push_back(metrics::signal_phi(tr, l, competing_dict(s), cfg.signal));
      }
      const auto m_sf =
          attr::make_phi_metric(tr.readout, tr.segmap, instructed_dict(s), cfg.signal);
      const auto m_mam = attr::make_margin_metric(tr.readout, tr.segmap, instructed_dict(s),
                                                  competing_dict(s), cfg.signal);
      r.d_sf = attr::sublayer_deltas(tr, m_sf);
      r.d_mam = attr::sublayer_deltas(tr, m_mam);
      // telescoping identity: sublayer deltas must reassemble the end-to-end
      // metric change
      double total = 0.0;
      for (std::size_t l = 0; l < L; ++l) total += r.d_sf.attn[l] + r.d_sf.mlp[l];
      const double direct = m_sf(tr.residual_out(L - 1)) - m_sf(tr.residual_in(0));
      if (std::fabs(total - direct) > 1e-8)
        throw Error("attribution sweep: telescoping identity violated");
      r.ok = true;
    } catch (const Error&) {
      r.ok = false;
    }
    return r;
  });

  for (int filtered = 0; filtered < 2; ++filtered) {
    const std::string population = filtered ? "followed" : "all";
    // excluded-by-population samples are dropped outright; only forward or
    // identity failures count as skipped
    auto excluded = [&](const PerSample& r) { return r.ok && filtered && !r.followed; };
    auto include = [&](const PerSample& r) { return r.ok && (!filtered || r.followed); };
    for (std::size_t l = 0; l <= L; ++l) {
      Agg sf, sc;
      for (const auto& r : per_sample) {
        if (excluded(r)) continue;
        sf.add(include(r) ? std::optional<double>(r.s_f[l]) : std::nullopt);
        sc.add(include(r) ? std::optional<double>(r.s_c[l]) : std::nullopt);
      }
      std::vector<std::pair<std::string, std::string>> axes{{"layer", std::to_string(l)},
                                                            {"population", population}};
      res.rows.push_back(make_row(axes, "s_f", sf));
      res.rows.push_back(make_row(axes, "s_c", sc));
    }
    for (std::size_t l = 0; l < L; ++l) {
      Agg da_sf, df_sf, da_mam, df_mam;
      for (const auto& r : per_sample) {
        if (excluded(r)) continue;
        const bool in = include(r);
        da_sf.add(in ? std::optional<double>(r.d_sf.attn[l]) : std::nullopt);
        df_sf.add(in ? std::optional<double>(r.d_sf.mlp[l]) : std::nullopt);
        da_mam.add(in ? std::optional<double>(r.d_mam.attn[l]) : std::nullopt);
        df_mam.add(in ? std::optional<double>(r.d_mam.mlp[l]) : std::nullopt);
      }
      std::vector<std::pair<std::string, std::string>> axes{{"layer", std::to_string(l)},
                                                            {"population", population}};
      res.rows.push_back(make_row(axes, "delta_attn_s_f", da_sf));
      res.rows.push_back(make_row(axes, "delta_mlp_s_f", df_sf));
      res.rows.push_back(make_row(axes, "delta_attn_mam", da_mam));
      res.rows.push_back(make_row(axes, "delta_mlp_mam", df_mam));
    }
  }
  return res;
}

namespace {

// Population-mean per-head margin deltas, split by instructed modality.
struct RankingPair {
  std::vector<attr::HeadScore> vision, text, combined;
};

RankingPair compute_rankings(const RunConfig& cfg, const Workbench& wb,
                             const SignalConfig& sig,
                             const std::vector<std::size_t>& sample_idx) {
  using Deltas = std::vector<std::vector<double>>;
  struct PerSample {
    bool ok = false;
    Deltas deltas;
  };
  auto per_sample = map_indexed<PerSample>(sample_idx.size(), cfg.jobs, [&](std::size_t j) {
    PerSample r;
    const std::size_t i = sample_idx[j];
    try {
      const auto tr =
          model::forward(wb.weights, wb.tokens[i], wb.segmap, {}, TraceDetail::Full);
      const auto& s = wb.samples[i];
      const auto metric = attr::make_margin_metric(tr.readout, tr.segmap, instructed_dict(s),
                                                   competing_dict(s), sig);
      r.deltas = attr::head_deltas(tr, metric);
      r.ok = true;
    } catch (const Error&) {
    }
    return r;
  });
  attr::HeadAccumulator acc_v(cfg.model.layers, cfg.model.heads);
  attr::HeadAccumulator acc_t(cfg.model.layers, cfg.model.heads);
  attr::HeadAccumulator acc_all(cfg.model.layers, cfg.model.heads);
  bool any_v = false, any_t = false, any = false;
  for (std::size_t j = 0; j < sample_idx.size(); ++j) {
    if (!per_sample[j].ok) continue;
    const auto& s = wb.samples[sample_idx[j]];
    acc_all.add(per_sample[j].deltas);
    any = true;
    if (s.kind == InstructionKind::Vision) {
      acc_v.add(per_sample[j].deltas);
      any_v = true;
    } else {
      acc_t.add(per_sample[j].deltas);
      any_t = true;
    }
  }
  if (!any) throw Error("head ranking: every sample failed");
  RankingPair out;
  out.combined = acc_all.ranking();
  out.vision = any_v ? acc_v.ranking() : out.combined;
  out.text = any_t ? acc_t.ranking() : out.combined;
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

double population_mfr(const RunConfig& cfg, const Workbench& wb,
                      const std::vector<std::size_t>& sample_idx,
                      const iv::InterventionPlan& plan) {
  if (sample_idx.empty()) throw Error("intervention: empty population");
  auto follows = map_indexed<int>(sample_idx.size(), cfg.jobs, [&](std::size_t j) {
    const std::size_t i = sample_idx[j];
    const auto tr =
        model::forward(wb.weights, wb.tokens[i], wb.segmap, plan, TraceDetail::StatesOnly);
    return metrics::follows_instruction(tr, wb.samples[i]) ? 1 : 0;
  });
  double sum = 0.0;
  for (int f : follows) sum += f;
  return sum / double(follows.size());
}

std::vector<std::pair<std::size_t, std::size_t>> random_heads(
    const RunConfig& cfg, std::size_t g,
    const std::set<std::pair<std::size_t, std::size_t>>& exclude) {
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t l = 0; l < cfg.model.layers; ++l)
    for (std::size_t h = 0; h < cfg.model.heads; ++h)
      if (!exclude.count({l, h})) pool.emplace_back(l, h);
  if (g > pool.size()) throw Error("intervention: not enough heads outside the excluded set");
  numkit::Rng rng(cfg.seed, 0x52414E44);  // dedicated stream for head draws
  for (std::size_t i = pool.size(); i > 1; --i)
    std::swap(pool[i - 1], pool[rng.next_index(i)]);
  pool.resize(g);
  return pool;
}

std::vector<std::size_t> split_population(const RunConfig& cfg, const Workbench& wb,
                                          bool want_followers) {
  auto follows = map_indexed<int>(wb.samples.size(), cfg.jobs, [&](std::size_t i) {
    const auto tr =
        model::forward(wb.weights, wb.tokens[i], wb.segmap, {}, TraceDetail::StatesOnly);
    return metrics::follows_instruction(tr, wb.samples[i]) ? 1 : 0;
  });
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < follows.size(); ++i)
    if ((follows[i] != 0) == want_followers) idx.push_back(i);
  return idx;
}

SweepResult head_intervention_impl(const RunConfig& cfg, bool amplify,
                                   const SignalConfig& sig, const char* experiment,
                                   const std::string& variant) {
  RunConfig eff = cfg;
  if (amplify && eff.model_source == "planted" && eff.planted.inertia_strength == 0.0) {
    // amplification needs samples the model fails on; pick the weakest clamp
    // strength that produces a usable failing population
    const auto vocab = testbed::Vocabulary::standard(eff.model.vocab_size);
    auto calib_samples = eff.samples_path.empty()
                             ? testbed::gen_conflict_samples(eff.samples, eff.seed, vocab, eff.model)
                             : testbed::read_samples_jsonl(eff.samples_path, vocab, eff.model);
    if (calib_samples.size() > 64) calib_samples.resize(64);
    eff.planted.inertia_strength = testbed::calibrate_inertia(
        eff.model, eff.planted, vocab, eff.seed, calib_samples,
        {0.6, 0.8, 1.0, 1.2, 1.5, 2.0, 2.5, 3.0}, 0.25);
  }
  const Workbench wb = prepare(eff);
  SweepResult res = start_result(experiment, cfg);
  // blocking targets samples the model already follows; amplification targets
  // its failures
  const auto population = split_population(cfg, wb, /*want_followers=*/!amplify);
  if (population.empty())
    throw Error(std::string("intervention: ") + (amplify ? "failing" : "following") +
                " population is empty; adjust inertia_strength");

  const auto rankings = compute_rankings(cfg, wb, sig, population);
  const auto ins_positions = wb.segmap.ins();
  const std::size_t g_max =
      *std::max_element(cfg.g_values.begin(), cfg.g_values.end());
  std::set<std::pair<std::size_t, std::size_t>> excluded;
  for (std::size_t i = 0; i < std::min(g_max, rankings.combined.size()); ++i)
    excluded.insert({rankings.combined[i].layer, rankings.combined[i].head});
  if (eff.model_source == "planted")
    for (auto hp : eff.planted.circuit_heads()) excluded.insert(hp);

  auto selection = [&](const std::string& name, std::size_t g) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (name == "targeted") {
      for (std::size_t i = 0; i < std::min(g, rankings.combined.size()); ++i)
        pairs.emplace_back(rankings.combined[i].layer, rankings.combined[i].head);
    } else if (name == "random") {
      pairs = random_heads(cfg, g, excluded);
    } else {  // shared across both tasks
      pairs = attr::top_intersection(rankings.vision, rankings.text, std::max(g, g_max));
      if (pairs.size() > g) pairs.resize(g);
    }
    return pairs;
  };

  const std::vector<std::string> selections{"targeted", "random", "shared"};
  if (!amplify) {
    for (const auto& name : selections)
      for (std::size_t g : cfg.g_values) {
        const auto pairs = selection(name, g);
        iv::InterventionPlan plan;
        if (!pairs.empty()) plan.blocks.push_back(iv::make_head_block(pairs, ins_positions));
        note_plan(res, plan);
        Agg a;
        a.add(population_mfr(cfg, wb, population, plan));
        ResultRow row = make_row({{"selection", name},
                                  {"g", std::to_string(pairs.size())},
                                  {"alpha", ""},
                                  {"variant", variant}},
                                 "mfr", a);
        row.n = population.size();
        res.rows.push_back(row);
      }
  } else {
    // amplify the putative arbitration set itself; dragging lower-ranked
    // relay heads in just distorts the anchors' norm statistics
    const std::size_t g = eff.model_source == "planted"
                              ? eff.planted.arbitration_heads.size()
                              : std::min<std::size_t>(g_max ? g_max : 3, cfg.model.heads);
    for (const auto& name : selections)
      for (double alpha : cfg.alpha_values) {
        const auto pairs = selection(name, g);
        iv::InterventionPlan plan;
        if (!pairs.empty() && alpha != 1.0)
          plan.amplifies.push_back(iv::make_head_amplify(pairs, alpha, ins_positions));
        note_plan(res, plan);
        Agg a;
        a.add(population_mfr(cfg, wb, population, plan));
        ResultRow row = make_row({{"selection", name},
                                  {"g", std::to_string(pairs.size())},
                                  {"alpha", fmt_double(alpha)},
                                  {"variant", variant}},
                                 "mfr", a);
        row.n = population.size();
        res.rows.push_back(row);
      }
  }
  return res;
}

}  // namespace

SweepResult run_head_rank(const RunConfig& cfg) {
  const Workbench wb = prepare(cfg);
  SweepResult res = start_result("head_rank", cfg);
  const auto rankings = compute_rankings(cfg, wb, cfg.signal, all_indices(wb.samples.size()));

  std::filesystem::create_directories(cfg.out_dir);
  auto dump = [&](const char* task, const std::vector<attr::HeadScore>& r) {
    const std::string base =
        cfg.out_dir + "/head_rank_" + task + "_" + res.config_hash;
    std::ofstream(base + ".csv") << attr::ranking_to_csv(r);
    std::ofstream(base + ".json") << attr::ranking_to_json(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
      Agg a;
      a.add(r[i].mean_delta);
      ResultRow row = make_row({{"task", task},
                                {"rank", std::to_string(i)},
                                {"layer", std::to_string(r[i].layer)},
                                {"head", std::to_string(r[i].head)}},
                               "mean_delta", a);
      row.n = r[i].n;
      res.rows.push_back(row);
    }
  };
  dump("vision", rankings.vision);
  dump("text", rankings.text);
  dump("combined", rankings.combined);

  const std::size_t g =
      cfg.g_values.empty() ? 4 : *std::max_element(cfg.g_values.begin(), cfg.g_values.end());
  const auto shared = attr::top_intersection(rankings.vision, rankings.text, g);
  for (std::size_t i = 0; i < shared.size(); ++i) {
    Agg a;
    a.add(1.0);
    res.rows.push_back(make_row({{"task", "shared"},
                                 {"rank", std::to_string(i)},
                                 {"layer", std::to_string(shared[i].first)},
                                 {"head", std::to_string(shared[i].second)}},
                                "in_both_top_g", a));
  }
  return res;
}

SweepResult run_head_intervention(const RunConfig& cfg, bool amplify) {
  return head_intervention_impl(cfg, amplify, cfg.signal,
                                amplify ? "intervene_amplify" : "intervene_block", "default");
}

SweepResult run_phi_ablation(const RunConfig& cfg) {
  SweepResult res = start_result("phi_ablation", cfg);
  struct Variant {
    std::string name;
    SignalConfig sig;
  };
  SignalConfig k2 = cfg.signal, mx = cfg.signal;
  k2.top_k = 2;
  mx.agg = metrics::DictAgg::Max;
  const std::vector<Variant> variants{
      {"default", cfg.signal}, {"top_k_2", k2}, {"max_answer", mx}};

  std::vector<std::set<std::pair<std::size_t, std::size_t>>> top_sets;
  const std::size_t g_max =
      *std::max_element(cfg.g_values.begin(), cfg.g_values.end());
  for (const auto& v : variants) {
    SweepResult sub = head_intervention_impl(cfg, /*amplify=*/false, v.sig, "phi_ablation",
                                             v.name);
    for (const auto& id : sub.plan_ids)
      if (std::find(res.plan_ids.begin(), res.plan_ids.end(), id) == res.plan_ids.end())
        res.plan_ids.push_back(id);
    for (auto& row : sub.rows) res.rows.push_back(std::move(row));

    const Workbench wb = prepare(cfg);
    const auto ranked =
        compute_rankings(cfg, wb, v.sig, split_population(cfg, wb, true)).combined;
    std::set<std::pair<std::size_t, std::size_t>> top;
    for (std::size_t i = 0; i < std::min(g_max, ranked.size()); ++i)
      top.insert({ranked[i].layer, ranked[i].head});
    top_sets.push_back(std::move(top));
  }
  for (std::size_t v = 1; v < variants.size(); ++v) {
    std::size_t common = 0;
    for (const auto& p : top_sets[v])
      if (top_sets[0].count(p)) ++common;
    Agg a;
    a.add(top_sets[v].empty() ? 0.0 : double(common) / double(top_sets[v].size()));
    res.rows.push_back(make_row({{"selection", "targeted"},
                                 {"g", std::to_string(g_max)},
                                 {"alpha", ""},
                                 {"variant", variants[v].name}},
                                "top_overlap_vs_default", a));
  }
  return res;
}

std::vector<ForwardTrace> import_traces(const std::vector<std::string>& paths) {
  std::vector<ForwardTrace> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(trace_io::import_trace(p));
  return out;
}

std::pair<std::string, std::string> export_results(const SweepResult& result,
                                                   const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string base = dir + "/" + result.experiment + "_" + result.config_hash;

  std::ostringstream csv;
  if (!result.rows.empty()) {
    for (const auto& [key, _] : result.rows.front().axes) csv << key << ',';
    csv << "metric,mean,std,n,skipped\n";
    for (const auto& row : result.rows) {
      if (row.axes.size() != result.rows.front().axes.size())
        throw Error("export_results: inconsistent axis columns");
      for (const auto& [_, value] : row.axes) csv << value << ',';
      csv << row.metric << ',' << fmt_double(row.mean) << ',' << fmt_double(row.stddev) << ','
          << row.n << ',' << row.skipped << '\n';
    }
  }
  const std::string csv_path = base + ".csv";
  std::ofstream(csv_path, std::ios::binary) << csv.str();

  json rows = json::array();
  for (const auto& row : result.rows) {
    json axes = json::object();
    for (const auto& [k, v] : row.axes) axes[k] = v;
    rows.push_back({{"axes", axes},
                    {"metric", row.metric},
                    {"mean", row.mean},
                    {"std", row.stddev},
                    {"n", row.n},
                    {"skipped", row.skipped}});
  }
  json doc{{"experiment", result.experiment},
           {"config_hash", result.config_hash},
           {"seed", result.seed},
           {"plan_ids", result.plan_ids},
           {"signal", result.signal_desc},
           {"code_version", kCodeVersion},
           {"rows", rows}};
  const std::string json_path = base + ".json";
  std::ofstream(json_path, std::ios::binary) << doc.dump(2) << "\n";
  return {csv_path, json_path};
}

std::string merge_results_csv(const std::vector<std::string>& json_paths,
                              const std::string& out_path) {
  std::ostringstream csv;
  csv << "experiment,config_hash,seed,axes,metric,mean,std,n,skipped\n";
  for (const auto& path : json_paths) {
    std::ifstream in(path);
    if (!in) throw Error("report: cannot open " + path);
    json doc;
    try {
      in >> doc;
    } catch (const std::exception& e) {
      throw Error("report: " + path + ": " + e.what());
    }
    for (const auto& row : doc.at("rows")) {
      std::string axes;
      for (const auto& [k, v] : row.at("axes").items()) {
        if (!axes.empty()) axes += ';';
        axes += k + "=" + v.get<std::string>();
      }
      csv << doc.at("experiment").get<std::string>() << ','
          << doc.at("config_hash").get<std::string>() << ',' << doc.at("seed").get<std::uint64_t>()
          << ',' << axes << ',' << row.at("metric").get<std::string>() << ','
          << fmt_double(row.at("mean").get<double>()) << ','
          << fmt_double(row.at("std").get<double>()) << ',' << row.at("n").get<std::size_t>()
          << ',' << row.at("skipped").get<std::size_t>() << '\n';
    }
  }
  std::ofstream(out_path, std::ios::binary) << csv.str();
  return out_path;
}

bool over_skip_budget(const SweepResult& result, double max_skip, std::size_t population) {
  (void)population;
  for (const auto& row : result.rows) {
    const std::size_t total = row.n + row.skipped;
    if (total == 0) continue;
    if (double(row.skipped) / double(total) > max_skip && row.skipped > 0) return true;
  }
  return false;
}

}  // namespace modarb::harness
